#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "nerdd/annotator.hpp"
#include "nerdd/dataset_io.hpp"

namespace nerdd {

struct VideoSummary {
  std::string id;
  std::uint64_t frame_count = 0;
  std::size_t box_count = 0;
  bool dirty = false;  // the edit log holds at least one entry
};

struct FramePair {
  std::vector<std::uint8_t> rgb_png;
  std::vector<std::uint8_t> event_png;
  std::vector<BoxAnnotation> boxes;
};

struct ServiceOptions {
  std::size_t cache_capacity = 512;  // rendered frame pairs
};

/// Per video, the automatic annotations live in `<ann>.auto.json` (seeded from
/// the annotation file on first start), every accepted edit is appended to
/// `<ann>.edits.jsonl`, and the annotation file always holds the replayed state.
class ReviewService {
 public:
  explicit ReviewService(std::vector<RecordingManifest> manifests, ServiceOptions opt = {});
  ~ReviewService();
  ReviewService(const ReviewService&) = delete;
  ReviewService& operator=(const ReviewService&) = delete;

  std::vector<VideoSummary> list_videos() const;
  /// Both images are registered onto the event sensor grid. Throws NotFoundError.
  FramePair get_frame_pair(const std::string& video_id, int frame);
  /// Returns the boxes of the edited frame after the edit.
  std::vector<BoxAnnotation> post_edit(const std::string& video_id, const Edit& edit);
  /// Returns the track's boxes after re-interpolation.
  std::vector<BoxAnnotation> run_interpolation(const std::string& video_id, int track_id);
  AnnotationFile annotations(const std::string& video_id) const;

  std::size_t cached_frames() const;
  static std::string auto_path(const std::string& annotation_path);
  static std::string log_path(const std::string& annotation_path);

 private:
  struct Video;
  struct Cache;
  Video& video(const std::string& id) const;

  std::map<std::string, std::unique_ptr<Video>> videos_;
  std::unique_ptr<Cache> cache_;
};

/// HTTP front end:
///   GET  /videos
///   GET  /videos/{id}/frames/{i}
///   POST /videos/{id}/edits
///   POST /videos/{id}/tracks/{tid}/interpolate
///   GET  /videos/{id}/annotations
class ReviewHttpServer {
 public:
  explicit ReviewHttpServer(ReviewService& service, std::string static_dir = "");
  ~ReviewHttpServer();

  /// Port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Blocks until stop().
  void listen();
  /// Runs listen() on a background thread.
  void start();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

std::string summaries_to_json(const std::vector<VideoSummary>& videos);
std::string frame_pair_to_json(const std::string& video_id, int frame, const FramePair& pair);
std::string boxes_to_json(const std::vector<BoxAnnotation>& boxes);

}  // namespace nerdd
