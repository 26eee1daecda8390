#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace semdefect {

// Error categories used across the library.
class ParameterError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class EnvironmentError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Dense row-major 2-D array.
template <typename T>
class Image2D {
public:
  Image2D() = default;
  Image2D(int rows, int cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * cols, fill) {
    if (rows <= 0 || cols <= 0)
      throw ParameterError("Image2D: rows and cols must be positive");
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& at(int r, int c) { return data_[static_cast<size_t>(r) * cols_ + c]; }
  const T& at(int r, int c) const { return data_[static_cast<size_t>(r) * cols_ + c]; }
  T& operator[](size_t i) { return data_[i]; }
  const T& operator[](size_t i) const { return data_[i]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  bool same_shape(const Image2D& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool operator==(const Image2D& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_ && data_ == o.data_;
  }

private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<T> data_;
};

using GrayImage = Image2D<double>;

// Single-channel SEM image with gray values in [0,1].
struct SemImage {
  GrayImage pixels;
  uint64_t seed = 0;

  int rows() const { return pixels.rows(); }
  int cols() const { return pixels.cols(); }
};

// Binary per-pixel ground-truth labels aligned to a SemImage.
struct DefectMask {
  Image2D<uint8_t> labels;

  int rows() const { return labels.rows(); }
  int cols() const { return labels.cols(); }

  size_t foreground_count() const {
    size_t n = 0;
    for (size_t i = 0; i < labels.size(); ++i) n += labels[i] ? 1 : 0;
    return n;
  }
};

inline void require_same_shape(const GrayImage& a, const GrayImage& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape mismatch");
}

inline double clip01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

// Deterministic per-purpose seed derivation (splitmix64 mixing).
inline uint64_t mix_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::mt19937_64 make_rng(uint64_t seed, uint64_t stream = 0) {
  return std::mt19937_64(mix_seed(seed, stream));
}

}  // namespace semdefect
