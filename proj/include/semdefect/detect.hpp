#pragma once

#include <algorithm>
#include <json.hpp>

#include "core.hpp"

namespace semdefect::detect {

using nlohmann::json;

// Maximal 4-connected foreground region of a binary map.
struct Blob {
  std::vector<std::pair<int, int>> pixels;  // (row, col)
  double mean_score = 0.0;

  int area() const { return static_cast<int>(pixels.size()); }
};

// Fitted ellipse with a confidence score from the probability map.
struct Detection {
  double center_row = 0.0;
  double center_col = 0.0;
  double major_axis = 0.0;
  double minor_axis = 0.0;
  double angle = 0.0;  // radians in [0, pi), 0 = major axis along columns
  double score = 0.0;  // in (0,1)
  int area = 0;
};

struct DetectionSet {
  std::vector<Detection> detections;
  std::vector<Detection> filtered;  // sub-min_area candidates, kept for evaluation
};

inline Image2D<uint8_t> binarize(const GrayImage& prob_map, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0))
    throw ParameterError("binarize: threshold must lie in (0,1)");
  Image2D<uint8_t> mask(prob_map.rows(), prob_map.cols(), 0);
  for (size_t i = 0; i < prob_map.size(); ++i) mask[i] = prob_map[i] >= threshold ? 1 : 0;
  return mask;
}

// 4-connected components, ordered by (min row, min col) of each blob.
inline std::vector<Blob> connected_components(const Image2D<uint8_t>& mask) {
  const int H = mask.rows(), W = mask.cols();
  Image2D<int> label(H, W, -1);
  std::vector<Blob> blobs;
  std::vector<std::pair<int, int>> stack;

  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) {
      if (!mask.at(r, c) || label.at(r, c) >= 0) continue;
      int id = static_cast<int>(blobs.size());
      blobs.emplace_back();
      stack.clear();
      stack.emplace_back(r, c);
      label.at(r, c) = id;
      while (!stack.empty()) {
        auto [y, x] = stack.back();
        stack.pop_back();
        blobs[id].pixels.emplace_back(y, x);
        const int dy[4] = {-1, 1, 0, 0};
        const int dx[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          int ny = y + dy[k], nx = x + dx[k];
          if (ny < 0 || ny >= H || nx < 0 || nx >= W) continue;
          if (!mask.at(ny, nx) || label.at(ny, nx) >= 0) continue;
          label.at(ny, nx) = id;
          stack.emplace_back(ny, nx);
        }
      }
      std::sort(blobs[id].pixels.begin(), blobs[id].pixels.end());
    }
  // Scan order already yields blobs sorted by (min row, min col) of the first
  // pixel encountered; make the contract explicit anyway.
  std::sort(blobs.begin(), blobs.end(), [](const Blob& a, const Blob& b) {
    return a.pixels.front() < b.pixels.front();
  });
  return blobs;
}

// Ellipse from the blob's second central moments: centroid, axes
// 2*sqrt(eigenvalues) floored at 0.5 px, angle of the major axis in [0, pi).
inline Detection fit_ellipse(const Blob& blob, const GrayImage& prob_map) {
  if (blob.pixels.empty()) throw ParameterError("fit_ellipse: empty blob");
  const double n = static_cast<double>(blob.pixels.size());
  double mr = 0.0, mc = 0.0, score = 0.0;
  for (auto [r, c] : blob.pixels) {
    mr += r;
    mc += c;
    score += prob_map.at(r, c);
  }
  mr /= n;
  mc /= n;
  score /= n;

  double srr = 0.0, scc = 0.0, src = 0.0;
  for (auto [r, c] : blob.pixels) {
    srr += (r - mr) * (r - mr);
    scc += (c - mc) * (c - mc);
    src += (r - mr) * (c - mc);
  }
  srr /= n;
  scc /= n;
  src /= n;

  // Eigen-decomposition of [[srr, src], [src, scc]].
  double tr = srr + scc;
  double det = srr * scc - src * src;
  double disc = std::sqrt(std::max(0.0, tr * tr / 4.0 - det));
  double l1 = tr / 2.0 + disc;  // major
  double l2 = tr / 2.0 - disc;

  double angle;
  if (std::abs(src) < 1e-12 && srr <= scc) {
    angle = 0.0;  // major axis along columns
  } else if (std::abs(src) < 1e-12) {
    angle = M_PI / 2.0;
  } else {
    // Eigenvector of l1: (src, l1 - srr) in (row, col) coordinates.
    angle = std::atan2(src, l1 - srr);
  }
  if (angle < 0.0) angle += M_PI;
  if (angle >= M_PI) angle -= M_PI;

  Detection d;
  d.center_row = mr;
  d.center_col = mc;
  d.major_axis = std::max(0.5, 2.0 * std::sqrt(std::max(0.0, l1)));
  d.minor_axis = std::max(0.5, 2.0 * std::sqrt(std::max(0.0, l2)));
  d.angle = angle;
  d.score = score;
  d.area = blob.area();
  return d;
}

// binarize -> connected components -> size filter -> ellipse fit.
inline DetectionSet detect(const GrayImage& prob_map, double threshold, int min_area) {
  if (min_area < 1) throw ParameterError("detect: min_area >= 1 required");
  DetectionSet out;
  for (const Blob& blob : connected_components(binarize(prob_map, threshold))) {
    Detection d = fit_ellipse(blob, prob_map);
    if (blob.area() < min_area)
      out.filtered.push_back(d);
    else
      out.detections.push_back(d);
  }
  return out;
}

inline json to_json(const Detection& d) {
  return json{{"center", {d.center_row, d.center_col}},
              {"axes", {d.major_axis, d.minor_axis}},
              {"angle", d.angle},
              {"score", d.score},
              {"area", d.area}};
}

inline Detection detection_from_json(const json& j) {
  Detection d;
  d.center_row = j.at("center").at(0).get<double>();
  d.center_col = j.at("center").at(1).get<double>();
  d.major_axis = j.at("axes").at(0).get<double>();
  d.minor_axis = j.at("axes").at(1).get<double>();
  d.angle = j.at("angle").get<double>();
  d.score = j.at("score").get<double>();
  d.area = j.at("area").get<int>();
  return d;
}

}  // namespace semdefect::detect
