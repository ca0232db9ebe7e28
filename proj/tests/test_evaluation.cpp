#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include <json.hpp>

#include "nerdd/errors.hpp"
#include "nerdd/evaluation.hpp"
#include "nerdd/geometry.hpp"
#include "oracles.hpp"

using namespace nerdd;

namespace {

std::vector<std::string> video_ids(int n) {
  std::vector<std::string> ids;
  for (int i = 0; i < n; ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "vid%03d", i);
    ids.emplace_back(buf);
  }
  return ids;
}

struct Instance {
  std::vector<ScoredBox> dets;
  std::vector<GroundTruthBox> gts;
};

// Small random scenes on an integer grid so overlaps are common and IoU ties are possible.
Instance random_instance(std::mt19937_64& rng) {
  Instance in;
  const int frames = 1 + static_cast<int>(rng() % 3);
  const int n_gt = 1 + static_cast<int>(rng() % 8);
  const int n_det = static_cast<int>(rng() % 12);
  auto rbox = [&] {
    return Box{static_cast<double>(rng() % 10), static_cast<double>(rng() % 10), 2.0 + static_cast<double>(rng() % 4),
               2.0 + static_cast<double>(rng() % 4)};
  };
  for (int i = 0; i < n_gt; ++i) in.gts.push_back({"v" + std::to_string(rng() % 2), static_cast<int>(rng() % frames), rbox()});
  for (int i = 0; i < n_det; ++i) {
    ScoredBox d{"v" + std::to_string(rng() % 2), static_cast<int>(rng() % frames), static_cast<double>(rng() % 6) / 5.0, rbox()};
    if (rng() % 2 && !in.gts.empty()) {
      const auto& g = in.gts[rng() % in.gts.size()];
      d.video_id = g.video_id;
      d.frame = g.frame;
      d.box = g.box;
      d.box.x += static_cast<double>(rng() % 3) * 0.5;
    }
    in.dets.push_back(d);
  }
  return in;
}

}  // namespace

TEST_CASE("iou") {
  CHECK(iou({0, 0, 2, 2}, {0, 0, 2, 2}) == 1.0);
  CHECK(iou({0, 0, 1, 1}, {3, 3, 1, 1}) == 0.0);
  CHECK(iou({0, 0, 2, 2}, {1, 0, 2, 2}) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("giou against a rasterized area oracle") {
  CHECK(giou({0, 0, 1, 1}, {0, 0, 1, 1}) == 1.0);
  // enclosing box 3x1, union 2, gap 1
  CHECK(giou({0, 0, 1, 1}, {2, 0, 1, 1}) == doctest::Approx(-1.0 / 3.0));
  std::mt19937_64 rng(41);
  for (int i = 0; i < 300; ++i) {
    // edges on a quarter-unit grid make the raster count exact
    auto q = [&](int n) { return static_cast<double>(rng() % static_cast<unsigned>(n)) / 4.0; };
    Box a{q(24), q(24), 0.25 + q(16), 0.25 + q(16)};
    Box b{q(24), q(24), 0.25 + q(16), 0.25 + q(16)};
    auto r = oracle::raster_areas(a, b, 4);
    const double expect_iou = r.inter / r.uni;
    const double expect_giou = expect_iou - (r.hull - r.uni) / r.hull;
    CHECK(iou(a, b) == doctest::Approx(expect_iou).epsilon(1e-12));
    CHECK(giou(a, b) == doctest::Approx(expect_giou).epsilon(1e-12));
    CHECK(giou(a, b) <= iou(a, b) + 1e-15);
    CHECK(giou(a, b) > -1.0);
    CHECK(iou(a, b) == iou(b, a));
    CHECK(giou(a, b) == giou(b, a));
  }
}

TEST_CASE("giou gradient") {
  std::mt19937_64 rng(42);
  std::uniform_real_distribution<double> c(0.2, 0.8), s(0.05, 0.4);
  for (int i = 0; i < 200; ++i) {
    CenterBox a{c(rng), c(rng), s(rng), s(rng)}, b{c(rng), c(rng), s(rng), s(rng)};
    auto g = giou_grad(a, b);
    CHECK(g.value == doctest::Approx(giou(to_corner(a), to_corner(b))));
    const double h = 1e-7;
    for (int k = 0; k < 4; ++k) {
      CenterBox p = a, m = a;
      double* pp[] = {&p.cx, &p.cy, &p.w, &p.h};
      double* mm[] = {&m.cx, &m.cy, &m.w, &m.h};
      *pp[k] += h;
      *mm[k] -= h;
      const double num = (giou(to_corner(p), to_corner(b)) - giou(to_corner(m), to_corner(b))) / (2 * h);
      CHECK(g.d_a[static_cast<std::size_t>(k)] == doctest::Approx(num).epsilon(1e-4).scale(1.0));
    }
  }
}

TEST_CASE("average precision worked cases") {
  std::vector<GroundTruthBox> gts{{"a", 0, {0, 0, 10, 10}}, {"a", 1, {5, 5, 10, 10}}, {"b", 0, {1, 1, 4, 4}}};
  SUBCASE("exact detections with arbitrary scores") {
    std::vector<ScoredBox> dets{{"a", 0, 0.1, gts[0].box}, {"a", 1, 0.9, gts[1].box}, {"b", 0, 0.5, gts[2].box}};
    CHECK(average_precision(dets, gts, 0.5) == 1.0);
    CHECK(average_precision(dets, gts, 0.95) == 1.0);
  }
  SUBCASE("no detections") { CHECK(average_precision({}, gts, 0.5) == 0.0); }
  SUBCASE("false positive outranking a true positive over three frames") {
    std::vector<GroundTruthBox> three{{"v", 0, {0, 0, 10, 10}}, {"v", 1, {0, 0, 10, 10}}, {"v", 2, {0, 0, 10, 10}}};
    std::vector<ScoredBox> dets{{"v", 0, 0.9, {0, 0, 10, 10}},
                                {"v", 1, 0.8, {50, 50, 10, 10}},
                                {"v", 1, 0.7, {0, 0, 10, 10}},
                                {"v", 2, 0.6, {1, 0, 10, 10}}};
    const double ap = average_precision(dets, three, 0.5);
    CHECK(ap == doctest::Approx(oracle::brute_force_ap(dets, three, 0.5)));
    // hand tabulation: recall steps 1/3 at precision 1, then 2/3 and 1 at precision 3/4
    CHECK(ap == doctest::Approx(1.0 / 3.0 + (2.0 / 3.0) * 0.75));
  }
  SUBCASE("detections on empty frames only add false positives") {
    std::vector<ScoredBox> dets{{"a", 7, 0.99, {0, 0, 10, 10}}, {"a", 0, 0.5, gts[0].box}};
    auto r = evaluate_threshold(dets, gts, 0.5);
    CHECK(r.tp == 1);
    CHECK(r.fp == 1);
    CHECK(r.fn == 2);
  }
  SUBCASE("no ground truth is undefined") {
    std::vector<ScoredBox> dets{{"a", 0, 0.5, {0, 0, 1, 1}}};
    CHECK_THROWS_AS(average_precision(dets, {}, 0.5), UndefinedApError);
  }
  SUBCASE("non-finite score") {
    std::vector<ScoredBox> dets{{"a", 0, NAN, {0, 0, 1, 1}}};
    CHECK_THROWS_AS(average_precision(dets, gts, 0.5), InputError);
  }
}

TEST_CASE("coco_map equals the brute-force tabulation on random instances") {
  std::mt19937_64 rng(43);
  for (int trial = 0; trial < 300; ++trial) {
    auto in = random_instance(rng);
    auto report = coco_map(in.dets, in.gts);
    const auto thr = coco_thresholds();
    REQUIRE(report.per_threshold.size() == 10);
    double mean = 0;
    for (std::size_t k = 0; k < thr.size(); ++k) {
      const double expect = oracle::brute_force_ap(in.dets, in.gts, thr[k]);
      REQUIRE(report.per_threshold[k].ap == doctest::Approx(expect).epsilon(1e-12));
      CHECK(report.per_threshold[k].tp + report.per_threshold[k].fn == in.gts.size());
      CHECK(report.per_threshold[k].tp + report.per_threshold[k].fp == in.dets.size());
      mean += expect;
    }
    CHECK(report.ap50_95 == doctest::Approx(mean / 10).epsilon(1e-12));
    CHECK(report.ap50 == report.per_threshold[0].ap);
    CHECK(report.ap75 == report.per_threshold[5].ap);
    for (double v : {report.ap50, report.ap75, report.ap50_95}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("AP ignores strictly monotone rescoring") {
  std::mt19937_64 rng(44);
  for (int trial = 0; trial < 100; ++trial) {
    auto in = random_instance(rng);
    auto mapped = in.dets;
    for (auto& d : mapped) d.score = std::exp(3 * d.score) - 7;
    CHECK(coco_map(mapped, in.gts).ap50_95 == coco_map(in.dets, in.gts).ap50_95);
  }
}

TEST_CASE("thresholds") {
  auto t = coco_thresholds();
  REQUIRE(t.size() == 10);
  CHECK(t.front() == 0.5);
  CHECK(t[5] == 0.75);
  CHECK(t.back() == 0.95);
}

TEST_CASE("jittered detections at IoU 0.6") {
  // shifting a w-wide box by s gives IoU (w - s) / (w + s); s = w / 4 gives exactly 0.6
  std::vector<GroundTruthBox> gts;
  std::vector<ScoredBox> dets;
  for (int f = 0; f < 20; ++f) {
    Box g{10.0 * f, 5, 16, 8};
    gts.push_back({"j", f, g});
    Box d = g;
    d.x += 4;
    dets.push_back({"j", f, 0.5 + 0.01 * f, d});
  }
  REQUIRE(iou(dets[0].box, gts[0].box) == doctest::Approx(0.6));
  auto r = coco_map(dets, gts);
  CHECK(r.ap50 == 1.0);
  CHECK(r.ap75 == 0.0);
  CHECK(r.ap50_95 == doctest::Approx(0.3));  // thresholds 0.50, 0.55, 0.60
  auto perfect = coco_map(std::vector<ScoredBox>{{"j", 0, 1.0, gts[0].box}}, std::vector<GroundTruthBox>{gts[0]});
  CHECK(perfect.ap50 == 1.0);
  CHECK(perfect.ap75 == 1.0);
  CHECK(perfect.ap50_95 == 1.0);
}

TEST_CASE("video split") {
  auto ids = video_ids(115);
  auto s = video_split(ids, 0.8, 0);
  CHECK(s.train.size() == 92);
  CHECK(s.test.size() == 23);
  std::set<std::string> all(s.train.begin(), s.train.end());
  for (const auto& t : s.test) CHECK(all.insert(t).second);
  CHECK(all == std::set<std::string>(ids.begin(), ids.end()));
  auto again = video_split(ids, 0.8, 0);
  CHECK(again.train == s.train);
  CHECK(again.test == s.test);
  auto shuffled = ids;
  std::reverse(shuffled.begin(), shuffled.end());
  CHECK(video_split(shuffled, 0.8, 0).train == s.train);
  CHECK(video_split(ids, 0.8, 1).train != s.train);
  CHECK(video_split(ids, 1.0, 5).test.empty());
  CHECK(video_split(ids, 0.0, 5).train.empty());
  CHECK_THROWS_AS(video_split(ids, 1.5, 0), ParameterError);
  CHECK_THROWS_AS(video_split({"a", "a"}, 0.5, 0), ParameterError);
}

TEST_CASE("detections JSON") {
  std::vector<ScoredBox> dets{{"a", 3, 0.25, {1, 2, 3, 4}}, {"b", 0, 1.0, {0.5, 0.5, 1, 1}}};
  CHECK(parse_detections_json(detections_to_json(dets)) == dets);
  CHECK(parse_detections_json("[]").empty());
  try {
    parse_detections_json(R"([{"video_id":"a","frame":0,"score":1,"x":0,"y":0,"w":1,"h":1},{"video_id":"a"}])");
    FAIL("expected SchemaError");
  } catch (const SchemaError& e) {
    CHECK(std::string(e.what()).find("$[1]") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_detections_json("{"), SchemaError);
}

TEST_CASE("report rendering") {
  std::vector<GroundTruthBox> gts{{"a", 0, {0, 0, 10, 10}}};
  std::vector<ScoredBox> dets{{"a", 0, 0.5, {0, 0, 10, 10}}};
  auto r = coco_map(dets, gts);
  auto j = nlohmann::json::parse(report_to_json(r));
  CHECK(j["AP50"] == 1.0);
  CHECK(j["per_threshold"].size() == 10);
  CHECK(report_to_table(r).find("AP50") != std::string::npos);
}
