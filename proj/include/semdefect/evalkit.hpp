#pragma once

#include <fstream>

#include "detect.hpp"
#include "png_io.hpp"

namespace semdefect::evalkit {

using detect::Detection;
using detect::DetectionSet;
using nlohmann::json;

// One ground-truth defect region (a connected component of the truth mask).
struct GtRegion {
  std::vector<std::pair<int, int>> pixels;
  double centroid_row = 0.0;
  double centroid_col = 0.0;

  static GtRegion from_pixels(std::vector<std::pair<int, int>> px) {
    GtRegion r;
    r.pixels = std::move(px);
    for (auto [y, x] : r.pixels) {
      r.centroid_row += y;
      r.centroid_col += x;
    }
    r.centroid_row /= r.pixels.size();
    r.centroid_col /= r.pixels.size();
    return r;
  }

  double distance_to(double row, double col) const {
    double best = 1e300;
    for (auto [y, x] : pixels) best = std::min(best, std::hypot(y - row, x - col));
    return best;
  }
};

inline std::vector<GtRegion> gt_regions_from_mask(const DefectMask& mask) {
  std::vector<GtRegion> out;
  for (const detect::Blob& b : detect::connected_components(mask.labels))
    out.push_back(GtRegion::from_pixels(b.pixels));
  return out;
}

enum class MatchMode { center_in_region, center_distance, mask_overlap };

struct MatchCriteria {
  MatchMode mode = MatchMode::center_in_region;
  double dilation_px = 2.0;          // center_in_region: gt dilated by this much
  double max_center_distance = 0.0;  // center_distance mode
  double min_mask_overlap = 0.0;     // mask_overlap mode, fraction of gt covered

  void validate() const {
    switch (mode) {
      case MatchMode::center_in_region:
        if (dilation_px < 0.0) throw ParameterError("MatchCriteria: dilation_px >= 0");
        break;
      case MatchMode::center_distance:
        if (!(max_center_distance > 0.0))
          throw ParameterError("MatchCriteria: max_center_distance > 0");
        break;
      case MatchMode::mask_overlap:
        if (!(min_mask_overlap > 0.0 && min_mask_overlap <= 1.0))
          throw ParameterError("MatchCriteria: min_mask_overlap in (0,1]");
        break;
    }
  }
};

namespace detail {

inline bool ellipse_contains(const Detection& d, double row, double col) {
  double dr = row - d.center_row, dc = col - d.center_col;
  // Rotate into the ellipse frame; angle 0 puts the major axis along columns.
  double along = dc * std::cos(d.angle) + dr * std::sin(d.angle);
  double across = -dc * std::sin(d.angle) + dr * std::cos(d.angle);
  double a = d.major_axis, b = d.minor_axis;
  return (along * along) / (a * a) + (across * across) / (b * b) <= 1.0;
}

inline bool matches(const Detection& d, const GtRegion& gt, const MatchCriteria& c) {
  switch (c.mode) {
    case MatchMode::center_in_region:
      return gt.distance_to(d.center_row, d.center_col) <= c.dilation_px;
    case MatchMode::center_distance:
      return std::hypot(d.center_row - gt.centroid_row, d.center_col - gt.centroid_col) <=
             c.max_center_distance;
    case MatchMode::mask_overlap: {
      size_t covered = 0;
      for (auto [y, x] : gt.pixels)
        if (ellipse_contains(d, y, x)) ++covered;
      return static_cast<double>(covered) / gt.pixels.size() >= c.min_mask_overlap;
    }
  }
  return false;
}

}  // namespace detail

struct MatchReport {
  int hits = 0;
  int misses = 0;
  int false_alarms = 0;
  int filtered = 0;
  std::vector<int> det_to_gt;  // per detection: matched gt index or -1

  MatchReport& operator+=(const MatchReport& o) {
    hits += o.hits;
    misses += o.misses;
    false_alarms += o.false_alarms;
    filtered += o.filtered;
    return *this;
  }
};

// Greedy one-to-one assignment in descending detection-score order. Filtered
// candidates enter neither precision nor recall.
inline MatchReport match(const std::vector<Detection>& dets, int filtered_count,
                         const std::vector<GtRegion>& gts, const MatchCriteria& criteria) {
  criteria.validate();
  MatchReport rep;
  rep.filtered = filtered_count;
  rep.det_to_gt.assign(dets.size(), -1);

  std::vector<size_t> order(dets.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](size_t a, size_t b) { return dets[a].score > dets[b].score; });

  std::vector<char> taken(gts.size(), 0);
  for (size_t oi : order) {
    const Detection& d = dets[oi];
    int best = -1;
    double best_dist = 1e300;
    for (size_t gi = 0; gi < gts.size(); ++gi) {
      if (taken[gi] || !detail::matches(d, gts[gi], criteria)) continue;
      double dist =
          std::hypot(d.center_row - gts[gi].centroid_row, d.center_col - gts[gi].centroid_col);
      if (dist < best_dist) {
        best_dist = dist;
        best = static_cast<int>(gi);
      }
    }
    if (best >= 0) {
      taken[best] = 1;
      rep.det_to_gt[oi] = best;
      ++rep.hits;
    } else {
      ++rep.false_alarms;
    }
  }
  for (char t : taken)
    if (!t) ++rep.misses;
  return rep;
}

// P = hits/(hits+FA), R = hits/(hits+misses); both 1 when the denominator is
// zero (vacuous convention).
inline std::pair<double, double> precision_recall(const MatchReport& rep) {
  double p = rep.hits + rep.false_alarms == 0
                 ? 1.0
                 : static_cast<double>(rep.hits) / (rep.hits + rep.false_alarms);
  double r = rep.hits + rep.misses == 0 ? 1.0
                                        : static_cast<double>(rep.hits) / (rep.hits + rep.misses);
  return {p, r};
}

inline double f_measure(double p, double r) {
  if (p < 0.0 || p > 1.0 || r < 0.0 || r > 1.0)
    throw ParameterError("f_measure: P and R must lie in [0,1]");
  return p + r == 0.0 ? 0.0 : 2.0 * p * r / (p + r);
}

struct PRPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
};

struct PRCurve {
  std::vector<PRPoint> points;  // sorted by threshold ascending
};

// Score-threshold sweep: at each threshold keep detections with score >= t,
// re-match, and record (t, P, R). Greedy matching is prefix-stable in score
// order, so recall is non-increasing in t.
inline PRCurve pr_curve(const std::vector<DetectionSet>& per_image_dets,
                        const std::vector<std::vector<GtRegion>>& per_image_gts,
                        const MatchCriteria& criteria, const std::vector<double>& grid) {
  if (per_image_dets.size() != per_image_gts.size())
    throw ShapeError("pr_curve: detections and ground truth must cover the same images");
  for (size_t i = 1; i < grid.size(); ++i)
    if (!(grid[i] > grid[i - 1]))
      throw ParameterError("pr_curve: threshold grid must be strictly increasing");
  for (double t : grid)
    if (!(t > 0.0 && t < 1.0)) throw ParameterError("pr_curve: thresholds must lie in (0,1)");

  PRCurve curve;
  for (double t : grid) {
    MatchReport total;
    for (size_t i = 0; i < per_image_dets.size(); ++i) {
      std::vector<Detection> kept;
      for (const Detection& d : per_image_dets[i].detections)
        if (d.score >= t) kept.push_back(d);
      total += match(kept, static_cast<int>(per_image_dets[i].filtered.size()),
                     per_image_gts[i], criteria);
    }
    auto [p, r] = precision_recall(total);
    curve.points.push_back({t, p, r});
  }
  return curve;
}

inline json to_json(const MatchReport& rep) {
  auto [p, r] = precision_recall(rep);
  return json{{"precision", p},
              {"recall", r},
              {"f_measure", f_measure(p, r)},
              {"counts",
               {{"hits", rep.hits},
                {"misses", rep.misses},
                {"false_alarms", rep.false_alarms},
                {"filtered", rep.filtered}}}};
}

inline void emit_metrics(const MatchReport& rep, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw EnvironmentError("emit_metrics: cannot write " + path);
  out << to_json(rep).dump(2) << "\n";
}

inline void emit_csv(const PRCurve& curve, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw EnvironmentError("emit_csv: cannot write " + path);
  out << "threshold,precision,recall\n";
  for (const PRPoint& p : curve.points)
    out << p.threshold << "," << p.precision << "," << p.recall << "\n";
}

namespace detail {

inline void draw_line(Image2D<uint8_t>& img, int r0, int c0, int r1, int c1, uint8_t v) {
  int dr = std::abs(r1 - r0), dc = std::abs(c1 - c0);
  int sr = r0 < r1 ? 1 : -1, sc = c0 < c1 ? 1 : -1;
  int err = (dc > dr ? dc : -dr) / 2;
  while (true) {
    if (r0 >= 0 && r0 < img.rows() && c0 >= 0 && c0 < img.cols()) img.at(r0, c0) = v;
    if (r0 == r1 && c0 == c1) break;
    int e2 = err;
    if (e2 > -dc) { err -= dr; c0 += sc; }
    if (e2 < dr) { err += dc; r0 += sr; }
  }
}

inline void draw_circle(Image2D<uint8_t>& img, int rc, int cc, int radius, uint8_t v) {
  for (int r = rc - radius; r <= rc + radius; ++r)
    for (int c = cc - radius; c <= cc + radius; ++c) {
      if (r < 0 || r >= img.rows() || c < 0 || c >= img.cols()) continue;
      double d = std::hypot(r - rc, c - cc);
      if (d >= radius - 0.8 && d <= radius + 0.8) img.at(r, c) = v;
    }
}

}  // namespace detail

// Renders the PR curve to a grayscale PNG with the maximum-recall point
// circled. Recall on x, precision on y, both spanning [0,1].
inline void emit_plot(const PRCurve& curve, const std::string& path) {
  const int size = 512, margin = 48;
  const int plot = size - 2 * margin;
  Image2D<uint8_t> img(size, size, 255);

  auto px = [&](double recall) { return margin + static_cast<int>(std::lround(recall * plot)); };
  auto py = [&](double precision) {
    return size - margin - static_cast<int>(std::lround(precision * plot));
  };

  for (int k = 1; k < 5; ++k) {  // grid every 0.2
    detail::draw_line(img, py(k * 0.2), px(0.0), py(k * 0.2), px(1.0), 220);
    detail::draw_line(img, py(0.0), px(k * 0.2), py(1.0), px(k * 0.2), 220);
  }
  detail::draw_line(img, py(0.0), px(0.0), py(0.0), px(1.0), 0);
  detail::draw_line(img, py(0.0), px(0.0), py(1.0), px(0.0), 0);
  detail::draw_line(img, py(1.0), px(0.0), py(1.0), px(1.0), 0);
  detail::draw_line(img, py(0.0), px(1.0), py(1.0), px(1.0), 0);

  for (size_t i = 1; i < curve.points.size(); ++i)
    detail::draw_line(img, py(curve.points[i - 1].precision), px(curve.points[i - 1].recall),
                      py(curve.points[i].precision), px(curve.points[i].recall), 0);

  if (!curve.points.empty()) {
    size_t best = 0;
    for (size_t i = 1; i < curve.points.size(); ++i)
      if (curve.points[i].recall > curve.points[best].recall) best = i;
    detail::draw_circle(img, py(curve.points[best].precision), px(curve.points[best].recall), 6,
                        0);
  }
  write_png_gray8(path, img);
}

}  // namespace semdefect::evalkit
