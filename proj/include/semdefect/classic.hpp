#pragma once

#include <fftw3.h>

#include <complex>

#include "detect.hpp"
#include "simgen.hpp"

namespace semdefect::classic {

// Integer circular shift estimated from the argmax of the inverse transform
// of the normalized cross-power spectrum. Returns (dy, dx) such that
// def ~= circular_shift(ref, dy, dx), with dy in [-H/2, H/2) and dx in
// [-W/2, W/2).
inline std::pair<int, int> phase_correlate(const SemImage& ref, const SemImage& def) {
  require_same_shape(ref.pixels, def.pixels, "phase_correlate");
  const int H = ref.rows(), W = ref.cols();
  const size_t n = static_cast<size_t>(H) * W;

  auto is_constant = [](const GrayImage& img) {
    for (size_t i = 1; i < img.size(); ++i)
      if (img[i] != img[0]) return false;
    return true;
  };
  if (is_constant(ref.pixels) || is_constant(def.pixels))
    throw ParameterError("phase_correlate: constant image, spectrum normalization undefined");

  std::vector<std::complex<double>> fa(n), fb(n), cross(n), corr(n);
  for (size_t i = 0; i < n; ++i) {
    fa[i] = ref.pixels[i];
    fb[i] = def.pixels[i];
  }

  auto run_fft = [&](std::vector<std::complex<double>>& buf, int sign) {
    fftw_plan plan = fftw_plan_dft_2d(H, W, reinterpret_cast<fftw_complex*>(buf.data()),
                                      reinterpret_cast<fftw_complex*>(buf.data()), sign,
                                      FFTW_ESTIMATE);
    fftw_execute(plan);
    fftw_destroy_plan(plan);
  };
  run_fft(fa, FFTW_FORWARD);
  run_fft(fb, FFTW_FORWARD);

  for (size_t i = 0; i < n; ++i) {
    std::complex<double> r = fb[i] * std::conj(fa[i]);
    double mag = std::abs(r);
    cross[i] = mag > 1e-15 ? r / mag : std::complex<double>(0.0, 0.0);
  }
  corr = cross;
  run_fft(corr, FFTW_BACKWARD);

  size_t best = 0;
  for (size_t i = 1; i < n; ++i)
    if (corr[i].real() > corr[best].real()) best = i;
  int dy = static_cast<int>(best / W);
  int dx = static_cast<int>(best % W);
  if (dy >= (H + 1) / 2) dy -= H;
  if (dx >= (W + 1) / 2) dx -= W;
  return {dy, dx};
}

// Circularly shifts the reference onto the defect image's frame:
// register_image(ref, phase_correlate(ref, def)) aligns ref to def.
inline SemImage register_image(const SemImage& ref, std::pair<int, int> shift) {
  auto [dy, dx] = shift;
  if (std::abs(dy) > ref.rows() / 2 || std::abs(dx) > ref.cols() / 2)
    throw ParameterError("register_image: shift outside valid range");
  return SemImage{simgen::circular_shift(ref.pixels, dy, dx), ref.seed};
}

// Robust threshold on the absolute registered difference image, then
// connected components and ellipse fitting. Blob scores are the mean
// difference mapped into (0,1) by d/(d+t).
inline detect::DetectionSet diff_detect(const SemImage& aligned_ref, const SemImage& def,
                                        double k_sigma, int min_area) {
  require_same_shape(aligned_ref.pixels, def.pixels, "diff_detect");
  const size_t n = def.pixels.size();
  GrayImage d(def.rows(), def.cols());
  for (size_t i = 0; i < n; ++i) d[i] = std::abs(def.pixels[i] - aligned_ref.pixels[i]);

  std::vector<double> sorted(d.data(), d.data() + n);
  std::nth_element(sorted.begin(), sorted.begin() + n / 2, sorted.end());
  const double med = sorted[n / 2];
  for (size_t i = 0; i < n; ++i) sorted[i] = std::abs(d[i] - med);
  std::nth_element(sorted.begin(), sorted.begin() + n / 2, sorted.end());
  const double mad_sigma = 1.4826 * sorted[n / 2];
  const double t = med + k_sigma * mad_sigma;

  detect::DetectionSet out;
  // Strict inequality: a flat difference image (t == median == 0) stays empty.
  Image2D<uint8_t> mask(d.rows(), d.cols(), 0);
  for (size_t i = 0; i < n; ++i) mask[i] = d[i] > t ? 1 : 0;

  GrayImage score_map(d.rows(), d.cols());
  for (size_t i = 0; i < n; ++i) score_map[i] = d[i] / (d[i] + t + 1e-6);

  for (const detect::Blob& blob : detect::connected_components(mask)) {
    detect::Detection det = detect::fit_ellipse(blob, score_map);
    if (blob.area() < min_area)
      out.filtered.push_back(det);
    else
      out.detections.push_back(det);
  }
  return out;
}

// Full Ref-Def baseline on one pair.
inline detect::DetectionSet baseline_detect(const SemImage& ref, const SemImage& def,
                                            double k_sigma = 5.0, int min_area = 4) {
  return diff_detect(register_image(ref, phase_correlate(ref, def)), def, k_sigma, min_area);
}

}  // namespace semdefect::classic
