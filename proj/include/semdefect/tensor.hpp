#pragma once

#include <cstdint>
#include <numeric>
#include <vector>

#include "core.hpp"

namespace semdefect {

// Dense (batch, channels, height, width) tensor of doubles, row-major.
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, double fill = 0.0)
      : n(n_), c(c_), h(h_), w(w_),
        v(static_cast<size_t>(n_) * c_ * h_ * w_, fill) {
    if (n_ <= 0 || c_ <= 0 || h_ <= 0 || w_ <= 0)
      throw ShapeError("Tensor: all dimensions must be positive");
  }

  size_t size() const { return v.size(); }
  size_t plane() const { return static_cast<size_t>(h) * w; }

  double& at(int b, int ch, int y, int x) {
    return v[((static_cast<size_t>(b) * c + ch) * h + y) * w + x];
  }
  double at(int b, int ch, int y, int x) const {
    return v[((static_cast<size_t>(b) * c + ch) * h + y) * w + x];
  }
  double& operator[](size_t i) { return v[i]; }
  double operator[](size_t i) const { return v[i]; }

  bool same_shape(const Tensor& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }

  Tensor zeros_like() const { return Tensor(n, c, h, w, 0.0); }

  void fill(double x) { std::fill(v.begin(), v.end(), x); }

  static Tensor from_image(const GrayImage& img) {
    Tensor t(1, 1, img.rows(), img.cols());
    std::copy(img.data(), img.data() + img.size(), t.v.begin());
    return t;
  }

  GrayImage to_image(int b = 0, int ch = 0) const {
    GrayImage img(h, w);
    const double* src = v.data() + (static_cast<size_t>(b) * c + ch) * plane();
    std::copy(src, src + plane(), img.data());
    return img;
  }
};

}  // namespace semdefect
