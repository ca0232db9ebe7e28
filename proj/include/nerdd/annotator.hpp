#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nerdd/event_core.hpp"
#include "nerdd/geometry.hpp"

namespace nerdd {

enum class BoxSource { Auto, Manual, Interp };

std::string to_string(BoxSource s);
BoxSource parse_box_source(const std::string& s);

inline constexpr int kNoTrack = -1;

/// One drone box at one frame, in pixels (top-left origin).
struct BoxAnnotation {
  int frame = 0;
  int track_id = kNoTrack;
  double x = 0, y = 0, w = 0, h = 0;
  BoxSource source = BoxSource::Auto;

  Box box() const { return {x, y, w, h}; }
  double center_x() const { return x + w / 2; }
  double center_y() const { return y + h / 2; }

  friend bool operator==(const BoxAnnotation&, const BoxAnnotation&) = default;
};

/// Keyframes ordered by strictly increasing frame, all sharing track_id.
struct Track {
  int track_id = kNoTrack;
  std::vector<BoxAnnotation> keyframes;

  friend bool operator==(const Track&, const Track&) = default;
};

enum class LinkMethod { Greedy, Hungarian };

struct BlobParams {
  std::uint32_t threshold = 2;  // min (on + off) events for an active pixel
  int connectivity = 8;         // 4 or 8
  int min_area = 9;             // component pixel count
  int max_area = 10'000;
  double max_link_distance = 40.0;
  int min_track_length = 5;
  LinkMethod link_method = LinkMethod::Greedy;
};

void validate(const BlobParams& params);

/// Tight boxes around connected components of active pixels, filtered by
/// component area, sorted by descending area. Boxes carry the frame index.
std::vector<BoxAnnotation> detect_blobs(const CountFrame& frame, const BlobParams& params);

/// Number of connected components before the area filter.
std::size_t count_components(const CountFrame& frame, const BlobParams& params);

struct LinkResult {
  std::vector<Track> tracks;
  std::size_t discarded_boxes = 0;  // boxes in tracks shorter than min_track_length
};

/// Frame-to-frame nearest-centroid linking. `per_frame_boxes[i]` are the
/// detections of consecutive frame i (their `frame` field is overwritten).
/// Surviving tracks are numbered 0.. in creation order.
LinkResult link_tracks(std::span<const std::vector<BoxAnnotation>> per_frame_boxes,
                       const BlobParams& params);

struct FrameRange {
  int first = 0;
  int last = 0;  // inclusive
};

/// Dense boxes between the first and last keyframe; gaps are filled by
/// per-coordinate linear interpolation (source = interp). Nothing is extrapolated.
std::vector<BoxAnnotation> interpolate_track(const Track& track,
                                             std::optional<FrameRange> range = std::nullopt);

enum class EditKind { Modify, Add, Delete };

std::string to_string(EditKind k);
EditKind parse_edit_kind(const std::string& s);

/// Targets are addressed by (frame, track_id).
struct Edit {
  EditKind kind = EditKind::Add;
  BoxAnnotation box;

  friend bool operator==(const Edit&, const Edit&) = default;
};

/// Applies edits in order. Modified and added boxes become source=manual.
/// Result is sorted by (frame, track_id).
std::vector<BoxAnnotation> merge_manual(std::vector<BoxAnnotation> boxes, std::span<const Edit> edits);

void sort_boxes(std::vector<BoxAnnotation>& boxes);

/// Groups boxes by track id (boxes without a track are skipped).
std::vector<Track> tracks_from_boxes(std::span<const BoxAnnotation> boxes);

/// Replaces the interpolated boxes of one track with a fresh interpolation
/// over its remaining (auto and manual) keyframes.
std::vector<BoxAnnotation> reinterpolate_track(std::vector<BoxAnnotation> boxes, int track_id);

/// Full automatic pass: accumulate, detect, link. Returned boxes are sorted.
std::vector<BoxAnnotation> annotate_stream(const EventStream& stream, const AccumulationConfig& cfg,
                                           std::int64_t duration_us, const BlobParams& params);

}  // namespace nerdd
