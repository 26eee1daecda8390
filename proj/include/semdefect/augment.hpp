#pragma once

#include <algorithm>

#include "core.hpp"

namespace semdefect::augment {

// Per-pixel loss weights balancing foreground against background.
struct WeightMap {
  GrayImage weights;
};

// Copy-paste defect implant: a random patch duplicated elsewhere in the same
// image, destination labeled as defect.
struct CopyPasteSpec {
  int patch_h_min = 4;
  int patch_h_max = 10;
  int patch_w_min = 4;
  int patch_w_max = 10;
  int min_displacement = 8;  // between source and destination centers
  int num_patches = 1;

  void validate(int rows, int cols) const {
    if (patch_h_min < 1 || patch_w_min < 1 || patch_h_max < patch_h_min ||
        patch_w_max < patch_w_min)
      throw ParameterError("CopyPasteSpec: invalid patch size range");
    if (patch_h_max > rows || patch_w_max > cols)
      throw ParameterError("CopyPasteSpec: patch larger than image");
    if (min_displacement < 1)
      throw ParameterError("CopyPasteSpec: min_displacement >= 1");
    if (num_patches < 1) throw ParameterError("CopyPasteSpec: num_patches >= 1");
  }
};

// Intensity-only augmentation; never touches geometry, so any paired mask
// stays valid.
struct PhotometricSpec {
  double noise_sigma = 0.0;
  double contrast_lo = 1.0;  // multiplicative
  double contrast_hi = 1.0;
  double brightness_lo = 0.0;  // additive
  double brightness_hi = 0.0;

  void validate() const {
    if (noise_sigma < 0.0) throw ParameterError("PhotometricSpec: noise_sigma >= 0");
    if (contrast_hi < contrast_lo || brightness_hi < brightness_lo)
      throw ParameterError("PhotometricSpec: ranges must be nonempty intervals");
    if (!std::isfinite(contrast_lo) || !std::isfinite(contrast_hi) ||
        !std::isfinite(brightness_lo) || !std::isfinite(brightness_hi))
      throw ParameterError("PhotometricSpec: ranges must be finite");
  }
};

struct Rect {
  int r0, c0, h, w;
  bool overlaps(const Rect& o) const {
    return r0 < o.r0 + o.h && o.r0 < r0 + h && c0 < o.c0 + o.w && o.c0 < c0 + w;
  }
  double center_dist(const Rect& o) const {
    return std::hypot((r0 + (h - 1) / 2.0) - (o.r0 + (o.h - 1) / 2.0),
                      (c0 + (w - 1) / 2.0) - (o.c0 + (o.w - 1) / 2.0));
  }
};

inline std::pair<SemImage, DefectMask> copy_paste(const SemImage& img, const CopyPasteSpec& spec,
                                                  uint64_t seed) {
  spec.validate(img.rows(), img.cols());
  auto rng = make_rng(seed, 0x636f7079);

  SemImage out{img.pixels, seed};
  DefectMask mask{Image2D<uint8_t>(img.rows(), img.cols(), 0)};

  for (int k = 0; k < spec.num_patches; ++k) {
    int ph = std::uniform_int_distribution<int>(spec.patch_h_min, spec.patch_h_max)(rng);
    int pw = std::uniform_int_distribution<int>(spec.patch_w_min, spec.patch_w_max)(rng);
    std::uniform_int_distribution<int> rdist(0, img.rows() - ph);
    std::uniform_int_distribution<int> cdist(0, img.cols() - pw);
    Rect src{rdist(rng), cdist(rng), ph, pw};
    Rect dst = src;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      dst = Rect{rdist(rng), cdist(rng), ph, pw};
      if (!dst.overlaps(src) && dst.center_dist(src) >= spec.min_displacement) break;
      if (attempt == 999)
        throw ParameterError("copy_paste: cannot place disjoint patch; image too small "
                             "for patch size and min_displacement");
    }
    for (int i = 0; i < ph; ++i)
      for (int j = 0; j < pw; ++j) {
        out.pixels.at(dst.r0 + i, dst.c0 + j) = img.pixels.at(src.r0 + i, src.c0 + j);
        mask.labels.at(dst.r0 + i, dst.c0 + j) = 1;
      }
  }
  return {std::move(out), std::move(mask)};
}

// out = clip(a*img + b + n, 0, 1) with a, b drawn once per call and n i.i.d.
inline SemImage photometric(const SemImage& img, const PhotometricSpec& spec, uint64_t seed) {
  spec.validate();
  auto rng = make_rng(seed, 0x70686f74);
  double a = spec.contrast_hi > spec.contrast_lo
                 ? std::uniform_real_distribution<double>(spec.contrast_lo, spec.contrast_hi)(rng)
                 : spec.contrast_lo;
  double b = spec.brightness_hi > spec.brightness_lo
                 ? std::uniform_real_distribution<double>(spec.brightness_lo,
                                                          spec.brightness_hi)(rng)
                 : spec.brightness_lo;
  std::normal_distribution<double> noise(0.0, spec.noise_sigma);
  SemImage out{GrayImage(img.rows(), img.cols()), seed};
  for (size_t i = 0; i < img.pixels.size(); ++i) {
    double n = spec.noise_sigma > 0.0 ? noise(rng) : 0.0;
    out.pixels[i] = clip01(a * img.pixels[i] + b + n);
  }
  return out;
}

// Class-balanced weights: N/(2*N_fg) on foreground, N/(2*N_bg) on background.
// All ones when only one class is present.
inline WeightMap weight_map(const DefectMask& mask) {
  const size_t n = mask.labels.size();
  const size_t n_fg = mask.foreground_count();
  const size_t n_bg = n - n_fg;
  WeightMap wm{GrayImage(mask.rows(), mask.cols(), 1.0)};
  if (n_fg == 0 || n_bg == 0) return wm;
  const double w_fg = static_cast<double>(n) / (2.0 * n_fg);
  const double w_bg = static_cast<double>(n) / (2.0 * n_bg);
  for (size_t i = 0; i < n; ++i) wm.weights[i] = mask.labels[i] ? w_fg : w_bg;
  return wm;
}

}  // namespace semdefect::augment
