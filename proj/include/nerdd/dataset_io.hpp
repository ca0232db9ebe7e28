#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nerdd/annotator.hpp"
#include "nerdd/event_core.hpp"
#include "nerdd/registration.hpp"

namespace nerdd {

/// One recording. Relative paths are resolved against the manifest's directory at load time.
struct RecordingManifest {
  std::string video_id;
  std::string events_path;
  std::string rgb_path;         // directory of %06d.png frames
  double fps = 30;
  int width = 1280;             // registered (event) resolution
  int height = 720;
  RegistrationParams registration;
  std::optional<Intrinsics> event_intrinsics;
  std::optional<Intrinsics> rgb_intrinsics;
  std::string annotation_path;
  std::int64_t num_frames = 0;  // 0: derive from the event recording

  AccumulationConfig accumulation() const;

  friend bool operator==(const RecordingManifest&, const RecordingManifest&) = default;
};

/// Integral rates map to F/1; other rates are taken to a thousandth of a frame per second.
AccumulationConfig accumulation_for_fps(double fps);

struct ManifestOptions {
  bool check_paths = true;  // events and RGB references must exist
};

/// The manifest is a JSON array of recordings.
std::vector<RecordingManifest> load_manifest(const std::string& path, const ManifestOptions& opt = {});
std::vector<RecordingManifest> parse_manifest(const std::string& text, const std::string& base_dir = "",
                                              const ManifestOptions& opt = {.check_paths = false});
/// Paths are written as stored (absolute after a load).
void save_manifest(const std::string& path, std::span<const RecordingManifest> manifests);
std::string manifest_to_json(std::span<const RecordingManifest> manifests);

/// Rewrites one recording's t_offset_us in the manifest file, leaving everything else as written.
void update_manifest_offset(const std::string& path, const std::string& video_id, std::int64_t t_offset_us);

/// `<rgb dir>/%06d.png`
std::string rgb_frame_path(const RecordingManifest& m, int frame);
/// Undistort (if RGB intrinsics are given), crop/pad to the event resolution, then undo the x-shift.
Image register_rgb_frame(const Image& raw, const RecordingManifest& m);

struct AnnotationFile {
  std::string video_id;
  double fps = 30;
  int width = 0;
  int height = 0;
  std::vector<BoxAnnotation> boxes;

  friend bool operator==(const AnnotationFile&, const AnnotationFile&) = default;
};

AnnotationFile parse_annotations(const std::string& text);
std::string annotations_to_json(const AnnotationFile& ann);
AnnotationFile load_annotations(const std::string& path);
/// Atomic: written to a sibling temporary file, then renamed over `path`.
void save_annotations(const std::string& path, const AnnotationFile& ann);

/// One line of the review edit log: a box edit or a re-interpolation of a track.
struct LogEntry {
  enum class Kind { Edit, Interpolate };
  Kind kind = Kind::Edit;
  Edit edit;
  int track_id = kNoTrack;  // for Interpolate

  friend bool operator==(const LogEntry&, const LogEntry&) = default;
};

Edit parse_edit(const std::string& json_text);
std::string edit_to_json(const Edit& edit);
LogEntry parse_log_entry(const std::string& line);
std::string log_entry_to_json(const LogEntry& entry);
std::vector<LogEntry> load_edit_log(const std::string& path);  // missing file: empty log
void append_edit_log(const std::string& path, const LogEntry& entry);

/// Applies log entries in order to the automatic annotations.
std::vector<BoxAnnotation> replay_log(std::vector<BoxAnnotation> boxes, std::span<const LogEntry> log);

struct DatasetStats {
  std::uint64_t frames_total = 0;
  std::uint64_t frames_with_drone = 0;
  std::uint64_t frames_without_drone = 0;
  double total_length_s = 0;
  std::size_t video_count = 0;
  std::uint64_t box_count = 0;
  std::optional<double> fps;               // set when every recording shares it
  std::optional<std::pair<int, int>> resolution;
  double percent_with_drone() const;
};

/// Frames per recording come from `num_frames`, else from the event file's last timestamp.
/// A frame has a drone iff at least one box lies on it.
DatasetStats dataset_stats(std::span<const RecordingManifest> manifests,
                           const std::map<std::string, AnnotationFile>& annotations);

std::string stats_to_json(const DatasetStats& stats);

/// Frame count implied by an event file (reads only the header and last record).
std::uint64_t event_file_frame_count(const std::string& path, const AccumulationConfig& cfg);

std::string read_text_file(const std::string& path);
/// Atomic text write (temporary sibling, then rename).
void write_text_file(const std::string& path, const std::string& text);

}  // namespace nerdd
