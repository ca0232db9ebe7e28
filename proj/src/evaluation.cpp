#include "nerdd/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <json.hpp>

#include "nerdd/errors.hpp"

namespace nerdd {

using json = nlohmann::json;

ThresholdResult evaluate_threshold(std::span<const ScoredBox> dets, std::span<const GroundTruthBox> gts,
                                   double iou_threshold) {
  if (gts.empty()) throw UndefinedApError("no ground-truth boxes: AP is undefined");
  for (const auto& d : dets) {
    if (!std::isfinite(d.score)) throw InputError("detection score is not finite");
  }

  std::map<std::pair<std::string, int>, std::vector<std::size_t>> by_frame;
  for (std::size_t g = 0; g < gts.size(); ++g) by_frame[{gts[g].video_id, gts[g].frame}].push_back(g);

  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  std::vector<char> used(gts.size(), 0);
  std::vector<char> is_tp;
  is_tp.reserve(dets.size());
  for (std::size_t idx : order) {
    const ScoredBox& d = dets[idx];
    auto it = by_frame.find({d.video_id, d.frame});
    double best = -1;
    std::size_t best_g = 0;
    if (it != by_frame.end()) {
      for (std::size_t g : it->second) {
        if (used[g]) continue;
        const double v = iou(d.box, gts[g].box);
        if (v > best) {
          best = v;
          best_g = g;
        }
      }
    }
    if (best >= iou_threshold) {
      used[best_g] = 1;
      is_tp.push_back(1);
    } else {
      is_tp.push_back(0);
    }
  }

  ThresholdResult r;
  r.threshold = iou_threshold;
  const auto n = is_tp.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t k = 0; k < n; ++k) {
    tp += is_tp[k];
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
    recall[k] = static_cast<double>(tp) / static_cast<double>(gts.size());
  }
  for (std::size_t k = n; k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double prev_recall = 0;
  for (std::size_t k = 0; k < n; ++k) {
    r.ap += (recall[k] - prev_recall) * precision[k];
    prev_recall = recall[k];
  }
  r.tp = tp;
  r.fp = n - tp;
  r.fn = gts.size() - tp;
  return r;
}

double average_precision(std::span<const ScoredBox> dets, std::span<const GroundTruthBox> gts,
                         double iou_threshold) {
  return evaluate_threshold(dets, gts, iou_threshold).ap;
}

std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) t.push_back((50.0 + 5.0 * k) / 100.0);
  return t;
}

EvalReport coco_map(std::span<const ScoredBox> dets, std::span<const GroundTruthBox> gts) {
  EvalReport report;
  double sum = 0;
  for (double thr : coco_thresholds()) {
    report.per_threshold.push_back(evaluate_threshold(dets, gts, thr));
    sum += report.per_threshold.back().ap;
  }
  report.ap50 = report.per_threshold.front().ap;
  report.ap75 = report.per_threshold[5].ap;
  report.ap50_95 = sum / static_cast<double>(report.per_threshold.size());
  return report;
}

SplitSpec video_split(std::vector<std::string> video_ids, double ratio, std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ParameterError("split ratio must lie in [0, 1]");
  std::sort(video_ids.begin(), video_ids.end());
  if (std::adjacent_find(video_ids.begin(), video_ids.end()) != video_ids.end()) {
    throw ParameterError("duplicate video id in split input");
  }
  std::mt19937_64 rng(seed);
  for (std::size_t i = video_ids.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng() % i);
    std::swap(video_ids[i - 1], video_ids[j]);
  }
  const auto n_train = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(video_ids.size())));
  SplitSpec spec;
  spec.seed = seed;
  spec.ratio = ratio;
  spec.train.assign(video_ids.begin(), video_ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  spec.test.assign(video_ids.begin() + static_cast<std::ptrdiff_t>(n_train), video_ids.end());
  return spec;
}

std::vector<ScoredBox> parse_detections_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError(std::string("detections: ") + e.what());
  }
  if (!doc.is_array()) throw SchemaError("detections: expected a JSON array at $");
  std::vector<ScoredBox> out;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const json& d = doc[i];
    const std::string where = "$[" + std::to_string(i) + "]";
    for (const char* key : {"video_id", "frame", "score", "x", "y", "w", "h"}) {
      if (!d.contains(key)) throw SchemaError("detections: missing field " + where + "." + key);
    }
    try {
      out.push_back({d.at("video_id").get<std::string>(), d.at("frame").get<int>(), d.at("score").get<double>(),
                     Box{d.at("x").get<double>(), d.at("y").get<double>(), d.at("w").get<double>(),
                         d.at("h").get<double>()}});
    } catch (const json::exception& e) {
      throw SchemaError("detections: bad value at " + where + ": " + e.what());
    }
  }
  return out;
}

std::string detections_to_json(std::span<const ScoredBox> dets) {
  json doc = json::array();
  for (const auto& d : dets) {
    doc.push_back({{"video_id", d.video_id},
                   {"frame", d.frame},
                   {"score", d.score},
                   {"x", d.box.x},
                   {"y", d.box.y},
                   {"w", d.box.w},
                   {"h", d.box.h}});
  }
  return doc.dump(2);
}

std::string report_to_json(const EvalReport& report) {
  json doc;
  doc["AP50"] = report.ap50;
  doc["AP75"] = report.ap75;
  doc["AP50:95"] = report.ap50_95;
  json rows = json::array();
  for (const auto& t : report.per_threshold) {
    rows.push_back({{"iou", t.threshold}, {"ap", t.ap}, {"tp", t.tp}, {"fp", t.fp}, {"fn", t.fn}});
  }
  doc["per_threshold"] = rows;
  return doc.dump(2);
}

std::string report_to_table(const EvalReport& report) {
  std::ostringstream out;
  char line[128];
  out << " IoU     AP      TP      FP      FN\n";
  for (const auto& t : report.per_threshold) {
    std::snprintf(line, sizeof line, "%.2f  %.4f  %6zu  %6zu  %6zu\n", t.threshold, t.ap, t.tp, t.fp, t.fn);
    out << line;
  }
  std::snprintf(line, sizeof line, "AP50 %.4f  AP75 %.4f  AP50:95 %.4f\n", report.ap50, report.ap75,
                report.ap50_95);
  out << line;
  return out.str();
}

}  // namespace nerdd
