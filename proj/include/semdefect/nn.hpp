#pragma once

#include <Eigen/Dense>

#include <functional>
#include <memory>

#include "tensor.hpp"

namespace semdefect::nn {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

// Trainable parameter with accumulated gradient.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;

  void init(std::string n, Tensor t) {
    name = std::move(n);
    grad = t.zeros_like();
    value = std::move(t);
  }
  void zero_grad() { grad.fill(0.0); }
};

// Reverse-mode tape over whole tensors. Node gradients are zero-initialized;
// callers seed gradients at output nodes and call backward().
class Graph {
public:
  int add(Tensor value) {
    values_.push_back(std::move(value));
    grads_.push_back(values_.back().zeros_like());
    return static_cast<int>(values_.size()) - 1;
  }

  const Tensor& value(int id) const { return values_[id]; }
  Tensor& grad(int id) { return grads_[id]; }

  void tape(std::function<void()> fn) { tape_.push_back(std::move(fn)); }

  void backward() {
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) (*it)();
  }

private:
  std::vector<Tensor> values_;
  std::vector<Tensor> grads_;
  std::vector<std::function<void()>> tape_;
};

// Leaf node backed by a Param; backward accumulates into the param gradient.
inline int leaf(Graph& g, Param& p) {
  int id = g.add(p.value);
  g.tape([&g, &p, id] {
    const Tensor& go = g.grad(id);
    for (size_t i = 0; i < go.size(); ++i) p.grad[i] += go[i];
  });
  return id;
}

inline int input(Graph& g, Tensor x) { return g.add(std::move(x)); }

namespace detail {

inline void im2col(const Tensor& x, int b, int k, int pad, Mat& col) {
  const int H = x.h, W = x.w, C = x.c;
  col.resize(C * k * k, H * W);
  for (int ch = 0; ch < C; ++ch)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        double* row = col.row((ch * k + ky) * k + kx).data();
        for (int y = 0; y < H; ++y) {
          int sy = y + ky - pad;
          if (sy < 0 || sy >= H) {
            std::fill(row + y * W, row + (y + 1) * W, 0.0);
            continue;
          }
          for (int x0 = 0; x0 < W; ++x0) {
            int sx = x0 + kx - pad;
            row[y * W + x0] = (sx < 0 || sx >= W) ? 0.0 : x.at(b, ch, sy, sx);
          }
        }
      }
}

inline void col2im_add(const Mat& col, int b, int k, int pad, Tensor& x) {
  const int H = x.h, W = x.w, C = x.c;
  for (int ch = 0; ch < C; ++ch)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const double* row = col.row((ch * k + ky) * k + kx).data();
        for (int y = 0; y < H; ++y) {
          int sy = y + ky - pad;
          if (sy < 0 || sy >= H) continue;
          for (int x0 = 0; x0 < W; ++x0) {
            int sx = x0 + kx - pad;
            if (sx < 0 || sx >= W) continue;
            x.at(b, ch, sy, sx) += row[y * W + x0];
          }
        }
      }
}

}  // namespace detail

// Same-padded stride-1 convolution. weight: (out_c, in_c, k, k); bias: (out_c).
inline int conv2d(Graph& g, int x, Param& weight, Param& bias) {
  const Tensor& in = g.value(x);
  const int k = weight.value.h;
  const int pad = k / 2;
  const int out_c = weight.value.n;
  if (weight.value.c != in.c)
    throw ShapeError("conv2d: weight expects " + std::to_string(weight.value.c) +
                     " input channels, got " + std::to_string(in.c));

  Tensor out(in.n, out_c, in.h, in.w);
  ConstMatMap wmat(weight.value.v.data(), out_c, weight.value.c * k * k);
  Mat col;
  for (int b = 0; b < in.n; ++b) {
    detail::im2col(in, b, k, pad, col);
    MatMap omat(out.v.data() + static_cast<size_t>(b) * out_c * out.plane(), out_c,
                static_cast<Eigen::Index>(out.plane()));
    omat.noalias() = wmat * col;
    for (int ch = 0; ch < out_c; ++ch) omat.row(ch).array() += bias.value[ch];
  }
  int id = g.add(std::move(out));

  g.tape([&g, &weight, &bias, x, id, k, pad, out_c] {
    const Tensor& in = g.value(x);
    const Tensor& go = g.value(id);  // for shape only
    Tensor& gx = g.grad(x);
    const Tensor& gout = g.grad(id);
    ConstMatMap wmat(weight.value.v.data(), out_c, weight.value.c * k * k);
    MatMap gwmat(weight.grad.v.data(), out_c, weight.value.c * k * k);
    Mat col, gcol;
    (void)go;
    for (int b = 0; b < in.n; ++b) {
      ConstMatMap gomat(gout.v.data() + static_cast<size_t>(b) * out_c * gout.plane(), out_c,
                        static_cast<Eigen::Index>(gout.plane()));
      detail::im2col(in, b, k, pad, col);
      gwmat.noalias() += gomat * col.transpose();
      for (int ch = 0; ch < out_c; ++ch) bias.grad[ch] += gomat.row(ch).sum();
      gcol.noalias() = wmat.transpose() * gomat;
      detail::col2im_add(gcol, b, k, pad, gx);
    }
  });
  return id;
}

inline int relu(Graph& g, int x) {
  Tensor out = g.value(x);
  for (double& v : out.v) v = v > 0.0 ? v : 0.0;
  int id = g.add(std::move(out));
  g.tape([&g, x, id] {
    const Tensor& in = g.value(x);
    Tensor& gx = g.grad(x);
    const Tensor& go = g.grad(id);
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += in[i] > 0.0 ? go[i] : 0.0;
  });
  return id;
}

inline int sigmoid(Graph& g, int x) {
  Tensor out = g.value(x);
  for (double& v : out.v) v = 1.0 / (1.0 + std::exp(-v));
  int id = g.add(std::move(out));
  g.tape([&g, x, id] {
    const Tensor& s = g.value(id);
    Tensor& gx = g.grad(x);
    const Tensor& go = g.grad(id);
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += go[i] * s[i] * (1.0 - s[i]);
  });
  return id;
}

// 2x2 max pooling, stride 2.
inline int maxpool2(Graph& g, int x) {
  const Tensor& in = g.value(x);
  if (in.h % 2 || in.w % 2) throw ShapeError("maxpool2: spatial dims must be even");
  Tensor out(in.n, in.c, in.h / 2, in.w / 2);
  auto argmax = std::make_shared<std::vector<size_t>>(out.size());
  for (int b = 0; b < in.n; ++b)
    for (int ch = 0; ch < in.c; ++ch)
      for (int y = 0; y < out.h; ++y)
        for (int x0 = 0; x0 < out.w; ++x0) {
          size_t best_i = 0;
          double best = -1e300;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              size_t i = ((static_cast<size_t>(b) * in.c + ch) * in.h + 2 * y + dy) * in.w +
                         2 * x0 + dx;
              if (in[i] > best) { best = in[i]; best_i = i; }
            }
          size_t o = ((static_cast<size_t>(b) * out.c + ch) * out.h + y) * out.w + x0;
          out[o] = best;
          (*argmax)[o] = best_i;
        }
  int id = g.add(std::move(out));
  g.tape([&g, x, id, argmax] {
    Tensor& gx = g.grad(x);
    const Tensor& go = g.grad(id);
    for (size_t o = 0; o < go.size(); ++o) gx[(*argmax)[o]] += go[o];
  });
  return id;
}

// Nearest-neighbor 2x upsampling.
inline int upsample2(Graph& g, int x) {
  const Tensor& in = g.value(x);
  Tensor out(in.n, in.c, in.h * 2, in.w * 2);
  for (int b = 0; b < in.n; ++b)
    for (int ch = 0; ch < in.c; ++ch)
      for (int y = 0; y < out.h; ++y)
        for (int x0 = 0; x0 < out.w; ++x0) out.at(b, ch, y, x0) = in.at(b, ch, y / 2, x0 / 2);
  int id = g.add(std::move(out));
  g.tape([&g, x, id] {
    Tensor& gx = g.grad(x);
    const Tensor& go = g.grad(id);
    for (int b = 0; b < gx.n; ++b)
      for (int ch = 0; ch < gx.c; ++ch)
        for (int y = 0; y < go.h; ++y)
          for (int x0 = 0; x0 < go.w; ++x0) gx.at(b, ch, y / 2, x0 / 2) += go.at(b, ch, y, x0);
  });
  return id;
}

inline int concat_channels(Graph& g, int a, int b) {
  const Tensor& ta = g.value(a);
  const Tensor& tb = g.value(b);
  if (ta.n != tb.n || ta.h != tb.h || ta.w != tb.w)
    throw ShapeError("concat_channels: batch/spatial dims must match");
  Tensor out(ta.n, ta.c + tb.c, ta.h, ta.w);
  const size_t plane = ta.plane();
  for (int s = 0; s < ta.n; ++s) {
    std::copy(ta.v.begin() + s * ta.c * plane, ta.v.begin() + (s + 1) * ta.c * plane,
              out.v.begin() + static_cast<size_t>(s) * out.c * plane);
    std::copy(tb.v.begin() + s * tb.c * plane, tb.v.begin() + (s + 1) * tb.c * plane,
              out.v.begin() + static_cast<size_t>(s) * out.c * plane + ta.c * plane);
  }
  int id = g.add(std::move(out));
  g.tape([&g, a, b, id] {
    Tensor& ga = g.grad(a);
    Tensor& gb = g.grad(b);
    const Tensor& go = g.grad(id);
    const size_t plane = ga.plane();
    for (int s = 0; s < ga.n; ++s) {
      const double* src = go.v.data() + static_cast<size_t>(s) * go.c * plane;
      double* da = ga.v.data() + static_cast<size_t>(s) * ga.c * plane;
      double* db = gb.v.data() + static_cast<size_t>(s) * gb.c * plane;
      for (size_t i = 0; i < static_cast<size_t>(ga.c) * plane; ++i) da[i] += src[i];
      for (size_t i = 0; i < static_cast<size_t>(gb.c) * plane; ++i)
        db[i] += src[ga.c * plane + i];
    }
  });
  return id;
}

// Per-sample group normalization with affine parameters. gamma/beta: (c).
inline int group_norm(Graph& g, int x, Param& gamma, Param& beta, int groups,
                      double eps = 1e-5) {
  const Tensor& in = g.value(x);
  if (in.c % groups != 0) throw ShapeError("group_norm: groups must divide channels");
  const int cg = in.c / groups;  // channels per group
  const size_t plane = in.plane();
  const size_t m = cg * plane;  // elements per (sample, group)

  Tensor out(in.n, in.c, in.h, in.w);
  auto xhat = std::make_shared<Tensor>(in.zeros_like());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(in.n) * groups);

  for (int b = 0; b < in.n; ++b)
    for (int gr = 0; gr < groups; ++gr) {
      const size_t off = (static_cast<size_t>(b) * in.c + gr * cg) * plane;
      double mean = 0.0;
      for (size_t i = 0; i < m; ++i) mean += in.v[off + i];
      mean /= m;
      double var = 0.0;
      for (size_t i = 0; i < m; ++i) {
        double d = in.v[off + i] - mean;
        var += d * d;
      }
      var /= m;
      double is = 1.0 / std::sqrt(var + eps);
      (*inv_std)[static_cast<size_t>(b) * groups + gr] = is;
      for (size_t i = 0; i < m; ++i) {
        double xh = (in.v[off + i] - mean) * is;
        xhat->v[off + i] = xh;
        int ch = gr * cg + static_cast<int>(i / plane);
        out.v[off + i] = gamma.value[ch] * xh + beta.value[ch];
      }
    }
  int id = g.add(std::move(out));

  g.tape([&g, &gamma, &beta, x, id, groups, cg, plane, m, xhat, inv_std] {
    Tensor& gx = g.grad(x);
    const Tensor& go = g.grad(id);
    for (int b = 0; b < gx.n; ++b)
      for (int gr = 0; gr < groups; ++gr) {
        const size_t off = (static_cast<size_t>(b) * gx.c + gr * cg) * plane;
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (size_t i = 0; i < m; ++i) {
          int ch = gr * cg + static_cast<int>(i / plane);
          double dxh = go.v[off + i] * gamma.value[ch];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xhat->v[off + i];
          gamma.grad[ch] += go.v[off + i] * xhat->v[off + i];
          beta.grad[ch] += go.v[off + i];
        }
        double is = (*inv_std)[static_cast<size_t>(b) * groups + gr];
        for (size_t i = 0; i < m; ++i) {
          int ch = gr * cg + static_cast<int>(i / plane);
          double dxh = go.v[off + i] * gamma.value[ch];
          gx.v[off + i] +=
              is * (dxh - sum_dxh / m - xhat->v[off + i] * sum_dxh_xh / m);
        }
      }
  });
  return id;
}

// Adam with bias correction.
class Adam {
public:
  explicit Adam(std::vector<Param*> params, double lr = 1e-3, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (Param* p : params_) {
      m_.push_back(p->value.zeros_like());
      v_.push_back(p->value.zeros_like());
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (size_t pi = 0; pi < params_.size(); ++pi) {
      Param& p = *params_[pi];
      for (size_t i = 0; i < p.value.size(); ++i) {
        double gr = p.grad[i];
        m_[pi][i] = beta1_ * m_[pi][i] + (1.0 - beta1_) * gr;
        v_[pi][i] = beta2_ * v_[pi][i] + (1.0 - beta2_) * gr * gr;
        p.value[i] -= lr_ * (m_[pi][i] / bc1) / (std::sqrt(v_[pi][i] / bc2) + eps_);
      }
    }
  }

  void zero_grad() {
    for (Param* p : params_) p->zero_grad();
  }

  double lr() const { return lr_; }

private:
  std::vector<Param*> params_;
  std::vector<Tensor> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace semdefect::nn
