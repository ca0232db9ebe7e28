#include <doctest.h>

#include <cmath>

#include "nerdd/errors.hpp"
#include "nerdd/training.hpp"

using namespace nerdd;

namespace {

fusion::FusionConfig small_config() {
  fusion::FusionConfig cfg;
  cfg.d = 16;
  cfg.patch = 16;
  cfg.n_queries = 5;
  return cfg;
}

}  // namespace

TEST_CASE("toy dataset shape") {
  const auto data = make_toy_dataset(10, 64, 7);
  REQUIRE(data.size() == 10);
  for (const auto& s : data) {
    CHECK(s.event.channels == 2);
    CHECK(s.rgb.channels == 3);
    CHECK(s.event.width == 64);
    CHECK(s.rgb.height == 64);
    CHECK(s.boxes.size() >= 1);
    CHECK(s.boxes.size() <= 2);
    REQUIRE(s.targets.size() == s.boxes.size());
    for (std::size_t i = 0; i < s.boxes.size(); ++i) {
      CHECK(s.targets[i].cx == doctest::Approx((s.boxes[i].x + s.boxes[i].w / 2) / 64));
      CHECK(s.targets[i].h == doctest::Approx(s.boxes[i].h / 64));
    }
    for (double v : s.event.data) {
      CHECK(v >= 0);
      CHECK(v <= 1);
    }
  }
  const auto again = make_toy_dataset(10, 64, 7);
  CHECK(again[3].rgb.data == data[3].rgb.data);
  CHECK(make_toy_dataset(10, 64, 8)[3].rgb.data != data[3].rgb.data);
}

TEST_CASE("input conversion") {
  CountFrame f(0, 3, 2);
  f.on_counts = {0, 2, 8, 0, 0, 1};
  f.off_counts = {4, 0, 0, 0, 1, 0};
  auto in = event_input(f, 4.0);
  CHECK(in.channels == 2);
  CHECK(in.at(0, 0, 1) == 0.5);
  CHECK(in.at(0, 0, 2) == 1.0);
  CHECK(in.at(1, 0, 0) == 1.0);
  CHECK(in.at(1, 1, 1) == 0.25);

  Image gray(2, 2, 1, 51);
  auto g = rgb_input(gray);
  CHECK(g.channels == 3);
  CHECK(g.at(2, 1, 1) == doctest::Approx(0.2));
}

TEST_CASE("scored boxes in pixels") {
  DetectionSet det{Eigen::MatrixXd(2, 2), Eigen::MatrixXd(2, 4)};
  det.probs << 0.9, 0.1, 0.2, 0.8;
  det.boxes << 0.5, 0.5, 0.25, 0.5, 0.1, 0.2, 0.1, 0.1;
  auto boxes = to_scored_boxes(det, "v", 3, 64, 32);
  REQUIRE(boxes.size() == 2);
  CHECK(boxes[0].video_id == "v");
  CHECK(boxes[0].frame == 3);
  CHECK(boxes[0].score == 0.9);
  CHECK(boxes[0].box.x == doctest::Approx(24));
  CHECK(boxes[0].box.y == doctest::Approx(8));
  CHECK(boxes[0].box.w == doctest::Approx(16));
  CHECK(boxes[0].box.h == doctest::Approx(16));
  CHECK(boxes[1].score == doctest::Approx(0.2));
}

TEST_CASE("batch loss gradient agrees with a finite difference") {
  const auto cfg = small_config();
  const auto data = make_toy_dataset(2, 32, 3);
  auto ps = fusion::init_params(cfg, 5);
  ps.zero_grad();
  const double base = batch_loss(cfg, data, ps, true);
  CHECK(std::isfinite(base));
  CHECK(base > 0);
  for (const std::string name : {"head.cls_b", "query", "tok.ev.w"}) {
    auto& v = ps.value(name);
    const double analytic = ps.grad(name)(0, 0);
    const double h = 1e-6;
    const double keep = v(0, 0);
    v(0, 0) = keep + h;
    const double up = batch_loss(cfg, data, ps, false);
    v(0, 0) = keep - h;
    const double down = batch_loss(cfg, data, ps, false);
    v(0, 0) = keep;
    const double numeric = (up - down) / (2 * h);
    CHECK(std::abs(analytic - numeric) <= 1e-4 * std::max({std::abs(analytic), std::abs(numeric), 1e-3}));
  }
}

TEST_CASE("short training run lowers the loss and is deterministic") {
  const auto cfg = small_config();
  const auto data = make_toy_dataset(4, 32, 11);
  TrainOptions opt;
  opt.steps = 40;
  opt.learning_rate = 5e-3;
  int calls = 0;
  auto a = train_toy(cfg, data, opt, 1, [&](int, double) { ++calls; });
  auto b = train_toy(cfg, data, opt, 1);
  CHECK(calls > 0);
  REQUIRE(a.losses.size() == static_cast<std::size_t>(opt.steps) + 1);
  CHECK(a.final_loss() < a.initial_loss());
  CHECK(a.losses == b.losses);
  CHECK(a.report.ap50 == b.report.ap50);
  for (const auto& name : a.params.names()) CHECK(a.params.value(name) == b.params.value(name));
  CHECK(evaluate_toy(cfg, data, a.params).ap50 == doctest::Approx(a.report.ap50));
}
