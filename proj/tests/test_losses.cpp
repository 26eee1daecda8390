#include <catch2/catch_amalgamated.hpp>

#include "semdefect/augment.hpp"
#include "semdefect/losses.hpp"

using namespace semdefect;
using namespace semdefect::losses;

namespace {

Tensor random_tensor(int n, int c, int h, int w, std::mt19937_64& rng, double lo = -1.0,
                     double hi = 1.0) {
  Tensor t(n, c, h, w);
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.v) v = dist(rng);
  return t;
}

// Independent double-loop InfoNCE over all pixel pairs (full denominator).
double brute_force_dense_clr(const Tensor& e, const Tensor& a, double tau, bool include_pos) {
  const int B = e.n, C = e.c, P = e.h * e.w;
  auto vec = [&](const Tensor& t, int b, int p) {
    std::vector<double> v(C);
    for (int ch = 0; ch < C; ++ch) v[ch] = t.v[(static_cast<size_t>(b) * C + ch) * P + p];
    return v;
  };
  double total = 0.0;
  for (int b = 0; b < B; ++b)
    for (int p = 0; p < P; ++p) {
      auto xi = vec(e, b, p);
      double pos = cosine_sim(xi, vec(a, b, p));
      double denom = include_pos ? std::exp(pos / tau) : 0.0;
      for (int b2 = 0; b2 < B; ++b2) {
        if (b2 == b) continue;
        for (int j = 0; j < P; ++j) denom += std::exp(cosine_sim(xi, vec(a, b2, j)) / tau);
      }
      total += -std::log(std::exp(pos / tau) / denom);
    }
  return total / (B * P);
}

// Central finite differences compared by relative L2 error.
template <typename F>
double fd_relative_error(Tensor& x, const Tensor& analytic, F loss_fn, double h = 1e-6) {
  double num = 0.0, den = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    double orig = x[i];
    x[i] = orig + h;
    double up = loss_fn();
    x[i] = orig - h;
    double down = loss_fn();
    x[i] = orig;
    double fd = (up - down) / (2.0 * h);
    num += (analytic[i] - fd) * (analytic[i] - fd);
    den += fd * fd;
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

}  // namespace

TEST_CASE("cosine similarity oracle values") {
  std::vector<double> a{1.0, 2.0, -3.0};
  REQUIRE(cosine_sim(a, a) == Catch::Approx(1.0));
  std::vector<double> e1{1.0, 0.0}, e2{0.0, 1.0};
  REQUIRE(cosine_sim(e1, e2) == Catch::Approx(0.0));
  std::vector<double> d{1.0, 1.0};
  REQUIRE(cosine_sim(d, e1) == Catch::Approx(0.70710678).epsilon(1e-7));
  std::vector<double> zero{0.0, 0.0};
  REQUIRE(cosine_sim(zero, e1) == 0.0);
  REQUIRE(std::isfinite(cosine_sim(zero, zero)));
}

TEST_CASE("weighted BCE oracle values") {
  SECTION("single pixel, y=1, w=1, p=0.9 gives -ln 0.9") {
    Tensor p(1, 1, 1, 1, 0.9), y(1, 1, 1, 1, 1.0), w(1, 1, 1, 1, 1.0);
    REQUIRE(weighted_bce(p, y, w, 1e-6) == Catch::Approx(0.10536052).epsilon(1e-6));
  }
  SECTION("perfect prediction is at most -log(1-eps)") {
    Tensor p(1, 1, 4, 4, 0.0), y(1, 1, 4, 4, 0.0), w(1, 1, 4, 4, 1.0);
    for (int i = 0; i < 8; ++i) { p[i] = 1.0; y[i] = 1.0; }
    double eps = 1e-6;
    double loss = weighted_bce(p, y, w, eps);
    REQUIRE(loss <= -std::log(1.0 - eps) + 1e-12);
    REQUIRE(loss == Catch::Approx(0.0).margin(1e-5));
  }
  SECTION("uniform p=0.5 with balanced weights gives ln 2") {
    DefectMask mask{Image2D<uint8_t>(10, 10, 0)};
    for (int i = 0; i < 20; ++i) mask.labels[i] = 1;
    augment::WeightMap wm = augment::weight_map(mask);
    Tensor p(1, 1, 10, 10, 0.5), y(1, 1, 10, 10), w(1, 1, 10, 10);
    for (size_t i = 0; i < 100; ++i) {
      y[i] = mask.labels[i];
      w[i] = wm.weights[i];
    }
    REQUIRE(weighted_bce(p, y, w, 1e-6) == Catch::Approx(std::log(2.0)).epsilon(1e-9));
  }
  SECTION("all-ones weights with y==1 reduces to mean -log p") {
    auto rng = make_rng(5);
    Tensor p = random_tensor(1, 1, 3, 5, rng, 0.05, 0.95);
    Tensor y(1, 1, 3, 5, 1.0), w(1, 1, 3, 5, 1.0);
    double expected = 0.0;
    for (size_t i = 0; i < p.size(); ++i) expected += -std::log(p[i]);
    expected /= p.size();
    REQUIRE(weighted_bce(p, y, w, 1e-9) == Catch::Approx(expected).epsilon(1e-12));
  }
  SECTION("shape mismatch is a shape error") {
    Tensor p(1, 1, 2, 2), y(1, 1, 2, 3), w(1, 1, 2, 2);
    REQUIRE_THROWS_AS(weighted_bce(p, y, w, 1e-6), ShapeError);
  }
}

TEST_CASE("dense contrastive loss oracle values") {
  LossConfig cfg;
  cfg.tau = 1.0;
  cfg.pixel_sample_budget = 64;

  SECTION("positive sim 1, one negative sim 0 gives -log(e/(e+1))") {
    // Two one-pixel images with orthogonal unit embeddings.
    Tensor e(2, 2, 1, 1), a(2, 2, 1, 1);
    e.at(0, 0, 0, 0) = 1.0; e.at(0, 1, 0, 0) = 0.0;
    e.at(1, 0, 0, 0) = 0.0; e.at(1, 1, 0, 0) = 1.0;
    a = e;
    double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0));
    REQUIRE(dense_clr(e, a, cfg, 0) == Catch::Approx(expected).epsilon(1e-8));
    REQUIRE(dense_clr(e, a, cfg, 0) == Catch::Approx(0.31326169).epsilon(1e-6));
  }

  SECTION("identical embeddings give log K") {
    Tensor e(2, 3, 2, 2, 0.0), a(2, 3, 2, 2, 0.0);
    for (int b = 0; b < 2; ++b)
      for (int p = 0; p < 4; ++p) {
        e.v[(static_cast<size_t>(b) * 3 + 0) * 4 + p] = 0.3;
        a.v[(static_cast<size_t>(b) * 3 + 0) * 4 + p] = 0.3;
      }
    // K = positive + 4 pixels from the other image.
    REQUIRE(dense_clr(e, a, cfg, 0) == Catch::Approx(std::log(5.0)).epsilon(1e-9));
  }

  SECTION("matches the brute-force double loop on 2x4-pixel fixtures") {
    auto rng = make_rng(17);
    for (int trial = 0; trial < 10; ++trial) {
      Tensor e = random_tensor(2, 3, 2, 2, rng);
      Tensor a = random_tensor(2, 3, 2, 2, rng);
      LossConfig c2;
      c2.tau = 0.5;
      c2.pixel_sample_budget = 64;  // full denominator at 4 pixels
      REQUIRE(dense_clr(e, a, c2, trial) ==
              Catch::Approx(brute_force_dense_clr(e, a, 0.5, true)).epsilon(1e-6));
      c2.include_positive_in_denominator = false;
      REQUIRE(dense_clr(e, a, c2, trial) ==
              Catch::Approx(brute_force_dense_clr(e, a, 0.5, false)).epsilon(1e-6));
    }
  }

  SECTION("invariant to uniform positive scaling of embeddings") {
    auto rng = make_rng(23);
    Tensor e = random_tensor(2, 4, 2, 2, rng);
    Tensor a = random_tensor(2, 4, 2, 2, rng);
    double base = dense_clr(e, a, cfg, 3);
    for (double c : {0.1, 7.5, 1234.0}) {
      Tensor es = e, as = a;
      for (double& v : es.v) v *= c;
      for (double& v : as.v) v *= c;
      REQUIRE(dense_clr(es, as, cfg, 3) == Catch::Approx(base).epsilon(1e-6));
    }
  }

  SECTION("batch of 1 is a configuration error with the documented message") {
    Tensor e(1, 2, 2, 2), a(1, 2, 2, 2);
    REQUIRE_THROWS_WITH(dense_clr(e, a, cfg, 0),
                        Catch::Matchers::ContainsSubstring(">=2 samples per batch"));
  }
}

TEST_CASE("consistency loss oracle values") {
  SECTION("uniform 0.5 maps give 2 ln 2") {
    Tensor p1(1, 1, 4, 4, 0.5), p2(1, 1, 4, 4, 0.5);
    REQUIRE(consistency(p1, p2, 1e-6) == Catch::Approx(2.0 * std::log(2.0)).epsilon(1e-9));
    REQUIRE(consistency(p1, p2, 1e-6) == Catch::Approx(1.38629436).epsilon(1e-6));
  }
  SECTION("confident agreement tends to zero with eps") {
    for (double eps : {1e-3, 1e-6, 1e-9}) {
      Tensor p1(1, 1, 2, 2, 1.0), p2(1, 1, 2, 2, 1.0);
      double expected = 2.0 * (-(1.0 - eps) * std::log(1.0 - eps) - eps * std::log(eps));
      REQUIRE(consistency(p1, p2, eps) == Catch::Approx(expected).epsilon(1e-6));
    }
    REQUIRE(consistency(Tensor(1, 1, 2, 2, 1.0), Tensor(1, 1, 2, 2, 1.0), 1e-9) <
            consistency(Tensor(1, 1, 2, 2, 1.0), Tensor(1, 1, 2, 2, 1.0), 1e-3));
  }
  SECTION("maximum disagreement approaches 2(-log eps) per pixel") {
    double eps = 1e-6;
    Tensor p1(1, 1, 1, 1, 1.0 - eps), p2(1, 1, 1, 1, eps);
    double a = 1.0 - eps, b = eps;
    double expected = 2.0 * (-a * std::log(b) - (1.0 - a) * std::log(1.0 - b));
    REQUIRE(consistency(p1, p2, eps) == Catch::Approx(expected).epsilon(1e-9));
    REQUIRE(consistency(p1, p2, eps) == Catch::Approx(2.0 * -std::log(eps)).epsilon(1e-4));
  }
  SECTION("value is symmetric in its arguments") {
    auto rng = make_rng(31);
    Tensor p1 = random_tensor(2, 1, 3, 3, rng, 0.01, 0.99);
    Tensor p2 = random_tensor(2, 1, 3, 3, rng, 0.01, 0.99);
    REQUIRE(consistency(p1, p2, 1e-6) == Catch::Approx(consistency(p2, p1, 1e-6)).epsilon(1e-12));
  }
}

TEST_CASE("total loss composes the enabled terms") {
  Tensor prob(1, 1, 1, 1, 0.9), mask(1, 1, 1, 1, 1.0), weights(1, 1, 1, 1, 1.0);
  Tensor e(2, 2, 1, 1), a(2, 2, 1, 1);
  e.at(0, 0, 0, 0) = 1.0; e.at(1, 1, 0, 0) = 1.0;
  a = e;

  TotalLossInputs in;
  in.prob = &prob;
  in.mask = &mask;
  in.weights = &weights;
  in.embeds = &e;
  in.aug_embeds = &a;

  SECTION("lambda_clr = lambda_cons = 0 equals weighted_bce exactly") {
    LossConfig cfg;
    cfg.lambda_bce = 1.0;
    LossBreakdown out = total_loss(in, cfg);
    REQUIRE(out.total == weighted_bce(prob, mask, weights, cfg.clamp_eps));
  }
  SECTION("all lambdas zero gives zero") {
    LossConfig cfg;
    cfg.lambda_bce = 0.0;
    REQUIRE(total_loss(in, cfg).total == 0.0);
  }
  SECTION("bce + 0.5 clr matches the hand-derived combination") {
    LossConfig cfg;
    cfg.lambda_bce = 1.0;
    cfg.lambda_clr = 0.5;
    cfg.tau = 1.0;
    LossBreakdown out = total_loss(in, cfg);
    REQUIRE(out.total == Catch::Approx(0.26199137).epsilon(1e-6));
    REQUIRE(out.bce == Catch::Approx(0.10536052).epsilon(1e-6));
    REQUIRE(out.clr == Catch::Approx(0.31326169).epsilon(1e-6));
  }
  SECTION("enabled term with missing inputs is a configuration error") {
    LossConfig cfg;
    cfg.lambda_cons = 1.0;
    REQUIRE_THROWS_AS(total_loss(in, cfg), ConfigError);  // teacher_prob missing
  }
}

TEST_CASE("analytic gradients match central finite differences") {
  SECTION("weighted_bce, 20 seeds") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
      auto rng = make_rng(seed, 101);
      Tensor p = random_tensor(1, 1, 4, 8, rng, 0.1, 0.9);
      Tensor y(1, 1, 4, 8), w = random_tensor(1, 1, 4, 8, rng, 0.2, 3.0);
      for (double& v : y.v) v = std::uniform_int_distribution<int>(0, 1)(rng);
      Tensor grad = p.zeros_like();
      weighted_bce(p, y, w, 1e-6, &grad);
      double err = fd_relative_error(p, grad, [&] { return weighted_bce(p, y, w, 1e-6); });
      REQUIRE(err < 1e-4);
    }
  }
  SECTION("dense_clr, 20 seeds, both inputs") {
    LossConfig cfg;
    cfg.tau = 0.3;
    cfg.pixel_sample_budget = 64;
    for (uint64_t seed = 0; seed < 20; ++seed) {
      auto rng = make_rng(seed, 202);
      Tensor e = random_tensor(2, 2, 2, 2, rng);
      Tensor a = random_tensor(2, 2, 2, 2, rng);
      Tensor ge = e.zeros_like(), ga = a.zeros_like();
      dense_clr(e, a, cfg, seed, &ge, &ga);
      double err_e = fd_relative_error(e, ge, [&] { return dense_clr(e, a, cfg, seed); });
      double err_a = fd_relative_error(a, ga, [&] { return dense_clr(e, a, cfg, seed); });
      REQUIRE(err_e < 1e-4);
      REQUIRE(err_a < 1e-4);
    }
  }
  SECTION("consistency, 20 seeds, student side") {
    for (uint64_t seed = 0; seed < 20; ++seed) {
      auto rng = make_rng(seed, 303);
      Tensor p1 = random_tensor(1, 1, 4, 8, rng, 0.1, 0.9);
      Tensor p2 = random_tensor(1, 1, 4, 8, rng, 0.1, 0.9);
      Tensor grad = p1.zeros_like();
      consistency(p1, p2, 1e-6, &grad);
      double err = fd_relative_error(p1, grad, [&] { return consistency(p1, p2, 1e-6); });
      REQUIRE(err < 1e-4);
    }
  }
}

TEST_CASE("losses stay finite under randomized fuzzing") {
  auto rng = make_rng(404);
  LossConfig cfg;
  cfg.tau = 0.1;
  for (int trial = 0; trial < 200; ++trial) {
    Tensor p = random_tensor(2, 1, 3, 3, rng, -0.5, 1.5);  // deliberately out of range
    Tensor y(2, 1, 3, 3);
    for (double& v : y.v) v = std::uniform_int_distribution<int>(0, 1)(rng);
    Tensor w = random_tensor(2, 1, 3, 3, rng, 0.0, 5.0);
    REQUIRE(std::isfinite(weighted_bce(p, y, w, 1e-6)));

    Tensor p2 = random_tensor(2, 1, 3, 3, rng, -0.5, 1.5);
    REQUIRE(std::isfinite(consistency(p, p2, 1e-6)));

    Tensor e = random_tensor(2, 2, 2, 2, rng, -3.0, 3.0);
    Tensor a = random_tensor(2, 2, 2, 2, rng, -3.0, 3.0);
    if (trial % 7 == 0) for (int ch = 0; ch < 2; ++ch) e.v[ch * 4] = 0.0;  // zero vectors
    REQUIRE(std::isfinite(dense_clr(e, a, cfg, trial)));
  }
}
