#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nerdd/geometry.hpp"

namespace nerdd {

struct ScoredBox {
  std::string video_id;
  int frame = 0;
  double score = 0;
  Box box;

  friend bool operator==(const ScoredBox&, const ScoredBox&) = default;
};

struct GroundTruthBox {
  std::string video_id;
  int frame = 0;
  Box box;
};

struct ThresholdResult {
  double threshold = 0;
  double ap = 0;
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
};

/// All-point AP at one IoU threshold. Detections are ranked by descending
/// score (ties keep input order) and greedily matched to the highest-IoU
/// unmatched ground truth of the same video frame.
ThresholdResult evaluate_threshold(std::span<const ScoredBox> dets, std::span<const GroundTruthBox> gts,
                                   double iou_threshold);

double average_precision(std::span<const ScoredBox> dets, std::span<const GroundTruthBox> gts,
                         double iou_threshold);

struct EvalReport {
  double ap50 = 0;
  double ap75 = 0;
  double ap50_95 = 0;
  std::vector<ThresholdResult> per_threshold;  // 0.50, 0.55, ..., 0.95
};

/// The ten thresholds 0.50:0.05:0.95.
std::vector<double> coco_thresholds();

EvalReport coco_map(std::span<const ScoredBox> dets, std::span<const GroundTruthBox> gts);

struct SplitSpec {
  std::uint64_t seed = 0;
  double ratio = 0.8;
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// Seeded shuffle of the sorted ids, train gets the first round(ratio * n).
SplitSpec video_split(std::vector<std::string> video_ids, double ratio, std::uint64_t seed);

// Detections JSON: [{"video_id", "frame", "score", "x", "y", "w", "h"}]
std::vector<ScoredBox> parse_detections_json(const std::string& text);
std::string detections_to_json(std::span<const ScoredBox> dets);

std::string report_to_json(const EvalReport& report);
std::string report_to_table(const EvalReport& report);

}  // namespace nerdd
