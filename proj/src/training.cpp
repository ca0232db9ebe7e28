#include "nerdd/training.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <random>

#include "nerdd/errors.hpp"
#include "nerdd/matching.hpp"

namespace nerdd {

using fusion::Matrix;
using fusion::ParamStore;
using fusion::PlanarImage;

namespace {

class Uniform {
 public:
  explicit Uniform(std::uint64_t seed) : gen_(seed) {}
  double operator()() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }
  int integer(int lo, int hi) { return lo + static_cast<int>((*this)() * (hi - lo + 1)); }

 private:
  std::mt19937_64 gen_;
};

bool overlaps(const Box& a, const Box& b, double margin) {
  return a.x < b.right() + margin && b.x < a.right() + margin && a.y < b.bottom() + margin &&
         b.y < a.bottom() + margin;
}

}  // namespace

std::vector<ToySample> make_toy_dataset(int count, int size, std::uint64_t seed) {
  if (count < 1 || size < 16) throw ParameterError("toy dataset needs count >= 1 and size >= 16");
  Uniform rng(seed);
  std::vector<ToySample> data;
  for (int s = 0; s < count; ++s) {
    ToySample sample;
    sample.event = PlanarImage(2, size, size);
    sample.rgb = PlanarImage(3, size, size);
    const int n_boxes = 1 + (s % 2);
    while (static_cast<int>(sample.boxes.size()) < n_boxes) {
      const int w = rng.integer(size / 6, size / 3);
      const int h = rng.integer(size / 6, size / 3);
      const Box b{static_cast<double>(rng.integer(1, size - w - 1)), static_cast<double>(rng.integer(1, size - h - 1)),
                  static_cast<double>(w), static_cast<double>(h)};
      bool clear = true;
      for (const auto& other : sample.boxes) clear = clear && !overlaps(b, other, 4);
      if (clear) sample.boxes.push_back(b);
    }

    for (int c = 0; c < 3; ++c) {
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) sample.rgb.at(c, y, x) = 0.7 + 0.1 * (rng() - 0.5);
      }
    }
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        if (rng() < 0.02) sample.event.at(rng() < 0.5 ? 0 : 1, y, x) = 0.5;
      }
    }
    for (const auto& b : sample.boxes) {
      const int x0 = static_cast<int>(b.x), y0 = static_cast<int>(b.y);
      const int x1 = static_cast<int>(b.right()) - 1, y1 = static_cast<int>(b.bottom()) - 1;
      for (int y = y0; y <= y1; ++y) {
        for (int x = x0; x <= x1; ++x) {
          for (int c = 0; c < 3; ++c) sample.rgb.at(c, y, x) = 0.15 + 0.1 * (rng() - 0.5);
          // the leading edge brightens, the trailing edge darkens
          if (x <= x0 + 1 || y <= y0 + 1) sample.event.at(0, y, x) = 1.0;
          if (x >= x1 - 1 || y >= y1 - 1) sample.event.at(1, y, x) = 1.0;
        }
      }
      const double inv = 1.0 / size;
      sample.targets.push_back({(b.x + b.w / 2) * inv, (b.y + b.h / 2) * inv, b.w * inv, b.h * inv});
    }
    data.push_back(std::move(sample));
  }
  return data;
}

double batch_loss(const fusion::FusionConfig& cfg, const std::vector<ToySample>& data, ParamStore& ps,
                  bool accumulate_grad) {
  double total = 0;
  const double scale = 1.0 / static_cast<double>(data.size());
  for (const auto& sample : data) {
    fusion::Tape tape;
    const auto out = fusion::forward_detect(tape, sample.event, sample.rgb, cfg, ps);
    const DetectionSet det = fusion::to_detection_set(tape.value(out));
    const SetLoss loss = matched_set_loss(det, sample.targets);
    total += loss.value * scale;
    if (accumulate_grad) tape.backward(out, fusion::head_gradient(loss) * scale);
  }
  return total;
}

std::vector<ScoredBox> to_scored_boxes(const DetectionSet& det, const std::string& video_id, int frame, int width,
                                       int height) {
  std::vector<ScoredBox> out;
  for (Eigen::Index i = 0; i < det.size(); ++i) {
    const Box b = to_corner(det.box(i));
    out.push_back({video_id, frame, det.probs(i, kDroneClass), Box{b.x * width, b.y * height, b.w * width, b.h * height}});
  }
  return out;
}

EvalReport evaluate_toy(const fusion::FusionConfig& cfg, const std::vector<ToySample>& data, ParamStore& ps) {
  std::vector<ScoredBox> dets;
  std::vector<GroundTruthBox> gts;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& s = data[i];
    const auto det = fusion::forward_detect(s.event, s.rgb, cfg, ps);
    const auto boxes = to_scored_boxes(det, "toy", static_cast<int>(i), s.rgb.width, s.rgb.height);
    dets.insert(dets.end(), boxes.begin(), boxes.end());
    for (const auto& b : s.boxes) gts.push_back({"toy", static_cast<int>(i), b});
  }
  return coco_map(dets, gts);
}

TrainResult train_toy(const fusion::FusionConfig& cfg, const std::vector<ToySample>& data, const TrainOptions& opt,
                      std::uint64_t seed, const std::function<void(int, double)>& on_step) {
  if (data.empty()) throw ParameterError("training set is empty");
  if (opt.steps < 0 || !(opt.learning_rate > 0)) throw ParameterError("invalid training options");
  TrainResult result;
  result.params = fusion::init_params(cfg, seed);
  ParamStore& ps = result.params;

  std::map<std::string, std::pair<Matrix, Matrix>> moments;
  for (const auto& name : ps.names()) {
    const Matrix& v = ps.value(name);
    moments[name] = {Matrix::Zero(v.rows(), v.cols()), Matrix::Zero(v.rows(), v.cols())};
  }

  for (int step = 1; step <= opt.steps; ++step) {
    ps.zero_grad();
    const double loss = batch_loss(cfg, data, ps, true);
    result.losses.push_back(loss);
    if (on_step) on_step(step - 1, loss);
    const double c1 = 1.0 - std::pow(opt.beta1, step);
    const double c2 = 1.0 - std::pow(opt.beta2, step);
    for (auto& [name, m] : moments) {
      const Matrix& g = ps.grad(name);
      m.first = opt.beta1 * m.first + (1.0 - opt.beta1) * g;
      m.second = opt.beta2 * m.second + (1.0 - opt.beta2) * g.cwiseProduct(g);
      Matrix& v = ps.value(name);
      v.array() -= opt.learning_rate * (m.first.array() / c1) / ((m.second.array() / c2).sqrt() + opt.epsilon);
    }
  }
  result.losses.push_back(batch_loss(cfg, data, ps, false));
  if (on_step) on_step(opt.steps, result.losses.back());
  result.report = evaluate_toy(cfg, data, ps);
  return result;
}

PlanarImage event_input(const CountFrame& frame, double saturation) {
  PlanarImage img(2, frame.height, frame.width);
  for (int y = 0; y < frame.height; ++y) {
    for (int x = 0; x < frame.width; ++x) {
      img.at(0, y, x) = std::min(1.0, frame.on(x, y) / saturation);
      img.at(1, y, x) = std::min(1.0, frame.off(x, y) / saturation);
    }
  }
  return img;
}

PlanarImage rgb_input(const Image& img) {
  PlanarImage out(3, img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        const int src = img.channels >= 3 ? c : 0;
        out.at(c, y, x) = img.at(x, y, src) / 255.0;
      }
    }
  }
  return out;
}

}  // namespace nerdd
