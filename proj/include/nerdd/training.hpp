#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nerdd/evaluation.hpp"
#include "nerdd/event_core.hpp"
#include "nerdd/fusion.hpp"
#include "nerdd/image.hpp"

namespace nerdd {

/// One registered event/RGB pair with its pixel-space ground truth.
struct ToySample {
  fusion::PlanarImage event;  // 2 channels: ON, OFF activity in [0, 1]
  fusion::PlanarImage rgb;    // 3 channels in [0, 1]
  std::vector<Box> boxes;     // pixels
  std::vector<CenterBox> targets;  // normalized to the image size
};

/// Fixed synthetic set: dark objects on a bright RGB background whose
/// outlines fire ON/OFF events, plus sensor noise in both modalities.
std::vector<ToySample> make_toy_dataset(int count = 10, int size = 64, std::uint64_t seed = 7);

struct TrainOptions {
  int steps = 500;
  double learning_rate = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainResult {
  std::vector<double> losses;  // mean set loss over the batch, before each step, then the final value
  EvalReport report;           // on the training set after the last step
  fusion::ParamStore params;
  double initial_loss() const { return losses.front(); }
  double final_loss() const { return losses.back(); }
};

/// Full-batch Adam on the mean set loss; Hungarian matching is recomputed every step.
TrainResult train_toy(const fusion::FusionConfig& cfg, const std::vector<ToySample>& data, const TrainOptions& opt,
                      std::uint64_t seed,
                      const std::function<void(int step, double loss)>& on_step = nullptr);

/// Mean matched set loss over `data`; fills parameter gradients when `accumulate_grad`.
double batch_loss(const fusion::FusionConfig& cfg, const std::vector<ToySample>& data, fusion::ParamStore& ps,
                  bool accumulate_grad);

/// Every query becomes a scored pixel box (score = drone probability); no suppression.
std::vector<ScoredBox> to_scored_boxes(const DetectionSet& det, const std::string& video_id, int frame,
                                       int width, int height);

EvalReport evaluate_toy(const fusion::FusionConfig& cfg, const std::vector<ToySample>& data,
                        fusion::ParamStore& ps);

/// Two-channel network input from ON/OFF counts, saturating at `saturation` events.
fusion::PlanarImage event_input(const CountFrame& frame, double saturation = 4.0);
/// Planar [0, 1] input from an 8-bit image (gray is replicated to 3 channels).
fusion::PlanarImage rgb_input(const Image& img);

}  // namespace nerdd
