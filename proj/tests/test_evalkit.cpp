#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "semdefect/evalkit.hpp"

using namespace semdefect;
using namespace semdefect::evalkit;

namespace {

Detection det_at(double r, double c, double score) {
  Detection d;
  d.center_row = r;
  d.center_col = c;
  d.major_axis = 2.0;
  d.minor_axis = 2.0;
  d.score = score;
  d.area = 9;
  return d;
}

GtRegion gt_disk(int r, int c, int radius = 2) {
  std::vector<std::pair<int, int>> px;
  for (int y = r - radius; y <= r + radius; ++y)
    for (int x = c - radius; x <= c + radius; ++x)
      if (std::hypot(y - r, x - c) <= radius) px.emplace_back(y, x);
  return GtRegion::from_pixels(std::move(px));
}

// Optimal one-to-one assignment hit count by exhaustive search.
int optimal_hits(const std::vector<Detection>& dets, const std::vector<GtRegion>& gts,
                 const MatchCriteria& c) {
  std::vector<int> gt_idx(gts.size());
  for (size_t i = 0; i < gts.size(); ++i) gt_idx[i] = static_cast<int>(i);
  int best = 0;
  std::function<void(size_t, std::vector<char>&, int)> rec = [&](size_t di,
                                                                 std::vector<char>& used,
                                                                 int hits) {
    best = std::max(best, hits);
    if (di >= dets.size()) return;
    rec(di + 1, used, hits);  // leave det unmatched
    for (size_t gi = 0; gi < gts.size(); ++gi) {
      if (used[gi] || !evalkit::detail::matches(dets[di], gts[gi], c)) continue;
      used[gi] = 1;
      rec(di + 1, used, hits + 1);
      used[gi] = 0;
    }
  };
  std::vector<char> used(gts.size(), 0);
  rec(0, used, 0);
  return best;
}

}  // namespace

TEST_CASE("matching basics") {
  MatchCriteria c;  // center inside gt region dilated by 2 px

  SECTION("one centered detection is a hit") {
    auto rep = match({det_at(10, 10, 0.9)}, 0, {gt_disk(10, 10)}, c);
    REQUIRE(rep.hits == 1);
    REQUIRE(rep.misses == 0);
    REQUIRE(rep.false_alarms == 0);
    REQUIRE(rep.det_to_gt == std::vector<int>{0});
  }
  SECTION("no detections against two ground truths gives two misses") {
    auto rep = match({}, 0, {gt_disk(5, 5), gt_disk(20, 20)}, c);
    REQUIRE(rep.hits == 0);
    REQUIRE(rep.misses == 2);
    REQUIRE(rep.false_alarms == 0);
  }
  SECTION("two detections on one ground truth: one hit, one false alarm") {
    auto rep = match({det_at(10, 10, 0.9), det_at(11, 10, 0.8)}, 0, {gt_disk(10, 10)}, c);
    REQUIRE(rep.hits == 1);
    REQUIRE(rep.false_alarms == 1);
    REQUIRE(rep.det_to_gt[0] == 0);  // higher score wins the assignment
    REQUIRE(rep.det_to_gt[1] == -1);
  }
  SECTION("filtered candidates are carried but never counted") {
    auto rep = match({det_at(10, 10, 0.9)}, 3, {gt_disk(10, 10)}, c);
    REQUIRE(rep.filtered == 3);
    REQUIRE(rep.hits + rep.misses == 1);
    REQUIRE(rep.hits + rep.false_alarms == 1);
  }
}

TEST_CASE("greedy matching equals optimal assignment on small instances") {
  MatchCriteria c;
  auto rng = make_rng(42);
  for (int trial = 0; trial < 200; ++trial) {
    std::uniform_int_distribution<int> count(0, 4);
    std::uniform_real_distribution<double> pos(3.0, 28.0);
    std::uniform_real_distribution<double> score(0.1, 0.9);
    std::vector<Detection> dets;
    std::vector<GtRegion> gts;
    for (int i = count(rng); i > 0; --i) dets.push_back(det_at(pos(rng), pos(rng), score(rng)));
    for (int i = count(rng); i > 0; --i)
      gts.push_back(gt_disk(static_cast<int>(pos(rng)), static_cast<int>(pos(rng))));
    auto rep = match(dets, 0, gts, c);
    REQUIRE(rep.hits == optimal_hits(dets, gts, c));
    // Conservation invariants.
    REQUIRE(rep.hits + rep.misses == static_cast<int>(gts.size()));
    REQUIRE(rep.hits + rep.false_alarms == static_cast<int>(dets.size()));
  }
}

TEST_CASE("precision and recall conventions") {
  SECTION("13 hits, 7 FA, 7 misses gives 0.65/0.65") {
    MatchReport rep;
    rep.hits = 13;
    rep.false_alarms = 7;
    rep.misses = 7;
    auto [p, r] = precision_recall(rep);
    REQUIRE(p == Catch::Approx(0.65));
    REQUIRE(r == Catch::Approx(0.65));
  }
  SECTION("zero detections: vacuous precision, zero recall") {
    MatchReport rep;
    rep.misses = 3;
    auto [p, r] = precision_recall(rep);
    REQUIRE(p == 1.0);
    REQUIRE(r == 0.0);
  }
  SECTION("all hits, no FA") {
    MatchReport rep;
    rep.hits = 5;
    auto [p, r] = precision_recall(rep);
    REQUIRE(p == 1.0);
    REQUIRE(r == 1.0);
  }
}

TEST_CASE("F-measure") {
  REQUIRE(f_measure(0.84, 0.86) == Catch::Approx(0.84988).margin(0.005));
  REQUIRE(std::round(f_measure(0.84, 0.86) * 100.0) / 100.0 == 0.85);
  // Harmonic mean of 0.65/0.64 is 0.64496, consistent with a reported 0.65
  // within half a rounding unit.
  REQUIRE(f_measure(0.65, 0.64) == Catch::Approx(0.64496).margin(1e-5));
  REQUIRE(std::abs(f_measure(0.65, 0.64) - 0.65) < 0.0055);
  REQUIRE(f_measure(0.3, 0.3) == Catch::Approx(0.3));
  REQUIRE(f_measure(0.0, 0.0) == 0.0);

  SECTION("symmetric and bounded by min and arithmetic mean") {
    auto rng = make_rng(8);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 100; ++i) {
      double p = u(rng), r = u(rng);
      double f = f_measure(p, r);
      REQUIRE(f == Catch::Approx(f_measure(r, p)));
      REQUIRE(f >= std::min(p, r) - 1e-12);
      REQUIRE(f <= (p + r) / 2.0 + 1e-12);
    }
  }
}

TEST_CASE("PR curve") {
  MatchCriteria c;
  SECTION("single perfect detection crossing the score threshold") {
    DetectionSet ds;
    ds.detections.push_back(det_at(10, 10, 0.5));
    PRCurve curve = pr_curve({ds}, {{gt_disk(10, 10)}}, c, {0.1, 0.9});
    REQUIRE(curve.points.size() == 2);
    REQUIRE(curve.points[0].threshold == 0.1);
    REQUIRE(curve.points[0].precision == 1.0);
    REQUIRE(curve.points[0].recall == 1.0);
    REQUIRE(curve.points[1].precision == 1.0);  // vacuous at zero detections
    REQUIRE(curve.points[1].recall == 0.0);
  }
  SECTION("empty grid yields an empty curve") {
    DetectionSet ds;
    REQUIRE(pr_curve({ds}, {{}}, c, {}).points.empty());
  }
  SECTION("recall is non-increasing over random fixtures") {
    auto rng = make_rng(9);
    std::uniform_real_distribution<double> pos(3.0, 28.0), score(0.01, 0.99);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<DetectionSet> dets(3);
      std::vector<std::vector<GtRegion>> gts(3);
      for (int img = 0; img < 3; ++img) {
        for (int i = std::uniform_int_distribution<int>(0, 5)(rng); i > 0; --i)
          dets[img].detections.push_back(det_at(pos(rng), pos(rng), score(rng)));
        for (int i = std::uniform_int_distribution<int>(0, 3)(rng); i > 0; --i)
          gts[img].push_back(gt_disk(static_cast<int>(pos(rng)), static_cast<int>(pos(rng))));
      }
      PRCurve curve = pr_curve(dets, gts, c, {0.1, 0.2, 0.3, 0.5, 0.7, 0.9});
      for (size_t i = 1; i < curve.points.size(); ++i)
        REQUIRE(curve.points[i].recall <= curve.points[i - 1].recall + 1e-12);
    }
  }
  SECTION("non-increasing grid rejected") {
    DetectionSet ds;
    REQUIRE_THROWS_AS(pr_curve({ds}, {{}}, c, {0.5, 0.5}), ParameterError);
  }
}

TEST_CASE("metrics and plot emission") {
  namespace fs = std::filesystem;
  fs::path dir = fs::temp_directory_path() / "semdefect_test_evalkit";
  fs::create_directories(dir);

  MatchReport rep;
  rep.hits = 13;
  rep.false_alarms = 7;
  rep.misses = 7;
  rep.filtered = 2;
  fs::path metrics = dir / "metrics.json";
  emit_metrics(rep, metrics.string());
  {
    std::ifstream in(metrics);
    nlohmann::json j;
    in >> j;
    REQUIRE(j.at("precision").get<double>() == Catch::Approx(0.65));
    REQUIRE(j.at("recall").get<double>() == Catch::Approx(0.65));
    REQUIRE(j.at("f_measure").get<double>() == Catch::Approx(0.65));
    REQUIRE(j.at("counts").at("hits").get<int>() == 13);
    REQUIRE(j.at("counts").at("filtered").get<int>() == 2);
  }

  PRCurve curve;
  curve.points = {{0.1, 0.5, 0.95}, {0.5, 0.8, 0.7}, {0.9, 1.0, 0.2}};
  fs::path plot = dir / "pr.png";
  emit_plot(curve, plot.string());
  REQUIRE(fs::exists(plot));
  REQUIRE(fs::file_size(plot) > 0);

  // The max-recall marker sits at the (recall=0.95, precision=0.5) point.
  Image2D<uint8_t> img = read_png_gray8(plot.string());
  const int size = 512, margin = 48, plot_px = size - 2 * margin;
  int mx = margin + static_cast<int>(std::lround(0.95 * plot_px));
  int my = size - margin - static_cast<int>(std::lround(0.5 * plot_px));
  bool found_ring = false;
  for (int r = my - 7; r <= my + 7 && !found_ring; ++r)
    for (int c = mx - 7; c <= mx + 7 && !found_ring; ++c)
      if (std::hypot(r - my, c - mx) > 4.0 && img.at(r, c) == 0) found_ring = true;
  REQUIRE(found_ring);

  fs::path csv = dir / "pr.csv";
  emit_csv(curve, csv.string());
  std::ifstream in(csv);
  std::string header;
  std::getline(in, header);
  REQUIRE(header == "threshold,precision,recall");

  fs::remove_all(dir);
}
