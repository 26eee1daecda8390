#pragma once

#include <span>

#include "tensor.hpp"

namespace semdefect::losses {

struct LossConfig {
  double tau = 0.1;            // contrastive temperature
  double clamp_eps = 1e-6;     // probability clamp for log stability
  int pixel_sample_budget = 64;  // pixels per image entering the dense loss
  double lambda_bce = 1.0;
  double lambda_clr = 0.0;
  double lambda_cons = 0.0;
  bool include_positive_in_denominator = true;

  void validate() const {
    if (!(tau > 0.0)) throw ConfigError("LossConfig: tau > 0 required");
    if (!(clamp_eps > 0.0 && clamp_eps < 0.5))
      throw ConfigError("LossConfig: 0 < clamp_eps < 0.5 required");
    if (pixel_sample_budget < 1) throw ConfigError("LossConfig: pixel_sample_budget >= 1");
    if (lambda_bce < 0.0 || lambda_clr < 0.0 || lambda_cons < 0.0)
      throw ConfigError("LossConfig: mix coefficients must be >= 0");
  }
};

// cosine(a,b) = <a,b>/(|a||b|); defined as 0 when either vector is zero.
inline double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_sim: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

namespace detail {

// d cos(a,b) accumulated into ga and gb with the given coefficient.
inline void cosine_sim_grad(std::span<const double> a, std::span<const double> b, double coeff,
                            double* ga, double* gb) {
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na2 += a[i] * a[i];
    nb2 += b[i] * b[i];
  }
  if (na2 == 0.0 || nb2 == 0.0) return;  // cos defined 0, flat
  double na = std::sqrt(na2), nb = std::sqrt(nb2);
  double inv = 1.0 / (na * nb);
  double cab = dot * inv;
  for (size_t i = 0; i < a.size(); ++i) {
    if (ga) ga[i] += coeff * (b[i] * inv - cab * a[i] / na2);
    if (gb) gb[i] += coeff * (a[i] * inv - cab * b[i] / nb2);
  }
}

inline double clampp(double p, double eps) {
  return p < eps ? eps : (p > 1.0 - eps ? 1.0 - eps : p);
}

}  // namespace detail

// (1/N) sum_i w_i [ -y_i log p_i - (1-y_i) log(1-p_i) ], probabilities clamped
// to [eps, 1-eps]. grad_prob, when given, receives the gradient w.r.t. prob.
inline double weighted_bce(const Tensor& prob, const Tensor& mask, const Tensor& weights,
                           double eps, Tensor* grad_prob = nullptr) {
  if (!prob.same_shape(mask) || !prob.same_shape(weights))
    throw ShapeError("weighted_bce: prob, mask and weights must share a shape");
  const size_t n = prob.size();
  double loss = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double p = detail::clampp(prob[i], eps);
    double y = mask[i];
    loss += weights[i] * (-y * std::log(p) - (1.0 - y) * std::log(1.0 - p));
    if (grad_prob && prob[i] > eps && prob[i] < 1.0 - eps)
      (*grad_prob)[i] += weights[i] * (-y / p + (1.0 - y) / (1.0 - p)) / n;
  }
  return loss / n;
}

// Pixel indices entering the dense loss for one image: a uniform sample
// without replacement, or every pixel when the plane fits the budget.
inline std::vector<int> sample_pixels(int plane, int budget, std::mt19937_64& rng) {
  if (plane <= budget) {
    std::vector<int> all(plane);
    for (int i = 0; i < plane; ++i) all[i] = i;
    return all;
  }
  // Floyd's sampling.
  std::vector<int> picked;
  picked.reserve(budget);
  std::vector<char> in(plane, 0);
  for (int j = plane - budget; j < plane; ++j) {
    int t = std::uniform_int_distribution<int>(0, j)(rng);
    if (in[t]) t = j;
    in[t] = 1;
    picked.push_back(t);
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

// Dense InfoNCE over per-pixel embeddings (B, C, H, W). Positives pair each
// pixel with the same location in the augmented view; negatives are sampled
// pixels of other images in the batch. Returns the mean over sampled pixels.
inline double dense_clr(const Tensor& embeds, const Tensor& aug_embeds, const LossConfig& cfg,
                        uint64_t seed, Tensor* grad_embeds = nullptr,
                        Tensor* grad_aug = nullptr) {
  cfg.validate();
  if (!embeds.same_shape(aug_embeds))
    throw ShapeError("dense_clr: embeds and aug_embeds must share a shape");
  if (embeds.n < 2)
    throw ConfigError("dense contrastive loss requires >=2 samples per batch");

  const int B = embeds.n, C = embeds.c;
  const int plane = static_cast<int>(embeds.plane());
  auto rng = make_rng(seed, 0x64636c72);

  std::vector<std::vector<int>> samples(B);
  for (int b = 0; b < B; ++b) samples[b] = sample_pixels(plane, cfg.pixel_sample_budget, rng);

  // Gather an embedding vector (strided across channels) into scratch.
  auto gather = [&](const Tensor& t, int b, int pix, std::vector<double>& out) {
    out.resize(C);
    const double* base = t.v.data() + static_cast<size_t>(b) * C * plane + pix;
    for (int ch = 0; ch < C; ++ch) out[ch] = base[static_cast<size_t>(ch) * plane];
  };
  auto grad_ptr = [&](Tensor* t, int b, int pix) -> double* {
    return t ? t->v.data() + static_cast<size_t>(b) * C * plane + pix : nullptr;
  };
  // Strided accumulation helper for gradients.
  std::vector<double> xi, aj, gxi, gaj;

  size_t total = 0;
  for (int b = 0; b < B; ++b) total += samples[b].size();

  double loss = 0.0;
  std::vector<double> sims;   // denominator sims, positive first when included
  std::vector<std::pair<int, int>> owners;  // (image, pixel) of each aug term
  for (int b = 0; b < B; ++b) {
    for (int pix : samples[b]) {
      gather(embeds, b, pix, xi);
      std::vector<double> ai;
      gather(aug_embeds, b, pix, ai);
      double pos = cosine_sim(xi, ai);

      sims.clear();
      owners.clear();
      if (cfg.include_positive_in_denominator) {
        sims.push_back(pos);
        owners.emplace_back(b, pix);
      }
      for (int b2 = 0; b2 < B; ++b2) {
        if (b2 == b) continue;
        for (int j : samples[b2]) {
          gather(aug_embeds, b2, j, aj);
          sims.push_back(cosine_sim(xi, aj));
          owners.emplace_back(b2, j);
        }
      }

      // Stable log-sum-exp of sims/tau.
      double m = pos / cfg.tau;
      for (double s : sims) m = std::max(m, s / cfg.tau);
      double Z = 0.0;
      for (double s : sims) Z += std::exp(s / cfg.tau - m);
      loss += -pos / cfg.tau + m + std::log(Z);

      if (grad_embeds || grad_aug) {
        gxi.assign(C, 0.0);
        // d/d pos from the numerator.
        gaj.assign(C, 0.0);
        detail::cosine_sim_grad(xi, ai, -1.0 / (cfg.tau * total), gxi.data(), gaj.data());
        if (grad_aug) {
          double* gp = grad_ptr(grad_aug, b, pix);
          for (int ch = 0; ch < C; ++ch) gp[static_cast<size_t>(ch) * plane] += gaj[ch];
        }
        // Softmax terms from the denominator.
        for (size_t t = 0; t < sims.size(); ++t) {
          double soft = std::exp(sims[t] / cfg.tau - m) / Z;
          double coeff = soft / (cfg.tau * total);
          auto [bo, po] = owners[t];
          gather(aug_embeds, bo, po, aj);
          gaj.assign(C, 0.0);
          detail::cosine_sim_grad(xi, aj, coeff, gxi.data(), gaj.data());
          if (grad_aug) {
            double* gp = grad_ptr(grad_aug, bo, po);
            for (int ch = 0; ch < C; ++ch) gp[static_cast<size_t>(ch) * plane] += gaj[ch];
          }
        }
        if (grad_embeds) {
          double* gp = grad_ptr(grad_embeds, b, pix);
          for (int ch = 0; ch < C; ++ch) gp[static_cast<size_t>(ch) * plane] += gxi[ch];
        }
      }
    }
  }
  return loss / total;
}

// Symmetric cross-entropy between two probability maps, (1/N) sum of
// H(p1,p2)+H(p2,p1) with H(p,q) = -p log q - (1-p) log(1-q). The gradient is
// reported w.r.t. p1 only; the teacher side is treated as stop-gradient.
inline double consistency(const Tensor& p1, const Tensor& p2, double eps,
                          Tensor* grad_p1 = nullptr) {
  if (!p1.same_shape(p2)) throw ShapeError("consistency: p1 and p2 must share a shape");
  const size_t n = p1.size();
  double loss = 0.0;
  for (size_t i = 0; i < n; ++i) {
    double a = detail::clampp(p1[i], eps);
    double b = detail::clampp(p2[i], eps);
    loss += -a * std::log(b) - (1.0 - a) * std::log(1.0 - b)
            - b * std::log(a) - (1.0 - b) * std::log(1.0 - a);
    if (grad_p1 && p1[i] > eps && p1[i] < 1.0 - eps)
      (*grad_p1)[i] += (-std::log(b) + std::log(1.0 - b) - b / a + (1.0 - b) / (1.0 - a)) / n;
  }
  return loss / n;
}

struct LossBreakdown {
  double total = 0.0;
  double bce = 0.0;
  double clr = 0.0;
  double cons = 0.0;
};

struct TotalLossInputs {
  const Tensor* prob = nullptr;
  const Tensor* mask = nullptr;
  const Tensor* weights = nullptr;
  const Tensor* embeds = nullptr;
  const Tensor* aug_embeds = nullptr;
  const Tensor* teacher_prob = nullptr;
  uint64_t seed = 0;
};

struct TotalLossGrads {
  Tensor* prob = nullptr;       // receives lambda_bce * dBCE + lambda_cons * dCL
  Tensor* embeds = nullptr;     // receives lambda_clr * dCLR
  Tensor* aug_embeds = nullptr;
};

// lambda_bce*WBCE + lambda_clr*CLR + lambda_cons*CL with a per-term breakdown.
inline LossBreakdown total_loss(const TotalLossInputs& in, const LossConfig& cfg,
                                const TotalLossGrads& grads = {}) {
  cfg.validate();
  LossBreakdown out;
  if (cfg.lambda_bce > 0.0) {
    if (!in.prob || !in.mask || !in.weights)
      throw ConfigError("total_loss: BCE term enabled but prob/mask/weights missing");
    Tensor g;
    Tensor* gp = nullptr;
    if (grads.prob) { g = in.prob->zeros_like(); gp = &g; }
    out.bce = weighted_bce(*in.prob, *in.mask, *in.weights, cfg.clamp_eps, gp);
    if (gp)
      for (size_t i = 0; i < g.size(); ++i) (*grads.prob)[i] += cfg.lambda_bce * g[i];
  }
  if (cfg.lambda_clr > 0.0) {
    if (!in.embeds || !in.aug_embeds)
      throw ConfigError("total_loss: CLR term enabled but embeddings missing");
    Tensor ge, ga;
    Tensor *gep = nullptr, *gap = nullptr;
    if (grads.embeds) { ge = in.embeds->zeros_like(); gep = &ge; }
    if (grads.aug_embeds) { ga = in.aug_embeds->zeros_like(); gap = &ga; }
    out.clr = dense_clr(*in.embeds, *in.aug_embeds, cfg, in.seed, gep, gap);
    if (gep)
      for (size_t i = 0; i < ge.size(); ++i) (*grads.embeds)[i] += cfg.lambda_clr * ge[i];
    if (gap)
      for (size_t i = 0; i < ga.size(); ++i) (*grads.aug_embeds)[i] += cfg.lambda_clr * ga[i];
  }
  if (cfg.lambda_cons > 0.0) {
    if (!in.prob || !in.teacher_prob)
      throw ConfigError("total_loss: consistency term enabled but prob/teacher_prob missing");
    Tensor g;
    Tensor* gp = nullptr;
    if (grads.prob) { g = in.prob->zeros_like(); gp = &g; }
    out.cons = consistency(*in.prob, *in.teacher_prob, cfg.clamp_eps, gp);
    if (gp)
      for (size_t i = 0; i < g.size(); ++i) (*grads.prob)[i] += cfg.lambda_cons * g[i];
  }
  out.total = cfg.lambda_bce * out.bce + cfg.lambda_clr * out.clr + cfg.lambda_cons * out.cons;
  return out;
}

}  // namespace semdefect::losses
