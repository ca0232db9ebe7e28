#pragma once

#include <Eigen/Core>
#include <span>
#include <utility>
#include <vector>

#include "nerdd/geometry.hpp"

namespace nerdd {

using CostMatrix = Eigen::MatrixXd;

/// Detection-head output for one image. Row i of `probs` is (p_drone, p_no_object);
/// row i of `boxes` is (cx, cy, w, h) normalized to [0, 1].
struct DetectionSet {
  Eigen::MatrixXd probs;
  Eigen::MatrixXd boxes;

  Eigen::Index size() const { return probs.rows(); }
  CenterBox box(Eigen::Index i) const { return {boxes(i, 0), boxes(i, 1), boxes(i, 2), boxes(i, 3)}; }
};

inline constexpr int kDroneClass = 0;
inline constexpr int kNoObjectClass = 1;

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (prediction, ground truth), sorted by prediction
  double cost = 0;
};

/// Minimum-cost assignment. Rectangular matrices are padded internally; among
/// optimal assignments the lexicographically smallest pair list is returned.
Assignment hungarian(const CostMatrix& cost);

/// Exhaustive search over permutations; for tests and small problems only.
Assignment brute_force_assignment(const CostMatrix& cost);

struct LossWeights {
  double cls = 1.0;
  double l1 = 5.0;
  double giou = 2.0;
  double no_object = 0.1;
};

/// entry(i, j) = -cls * p_i(drone) + l1 * |b_i - g_j|_1 + giou * (1 - GIoU(b_i, g_j))
CostMatrix match_cost(const DetectionSet& pred, std::span<const CenterBox> gt,
                      const LossWeights& w = {});

struct SetLoss {
  double value = 0;
  Eigen::MatrixXd d_probs;  // same shape as pred.probs
  Eigen::MatrixXd d_boxes;  // same shape as pred.boxes
};

/// Matched queries: CE(drone) + l1 * L1 + giou * (1 - GIoU); unmatched: no_object * CE(no-object).
/// The assignment is treated as a constant for the gradients.
SetLoss set_loss(const DetectionSet& pred, std::span<const CenterBox> gt, const Assignment& assignment,
                 const LossWeights& w = {});

/// Hungarian matching on `match_cost` followed by `set_loss`.
SetLoss matched_set_loss(const DetectionSet& pred, std::span<const CenterBox> gt,
                         const LossWeights& w = {}, Assignment* assignment_out = nullptr);

}  // namespace nerdd
