#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "nerdd/dataset_io.hpp"
#include "nerdd/event_core.hpp"
#include "nerdd/image.hpp"

namespace fixture {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = fs::temp_directory_path() / ("nerdd_" + tag + "_" + std::to_string(rng() % 1'000'000'000));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  fs::path path_;
};

/// A small registered recording on disk: a square target moving right at
/// `speed` px per frame, drawn in both modalities, plus automatic annotations.
struct Recording {
  nerdd::RecordingManifest manifest;
  nerdd::AnnotationFile annotations;
};

inline Recording write_recording(const fs::path& dir, const std::string& id, int frames = 12, int width = 64,
                                 int height = 48, int speed = 2) {
  const fs::path root = dir / id;
  fs::create_directories(root / "rgb");
  nerdd::AccumulationConfig cfg(30);
  std::vector<nerdd::Event> evs;
  Recording rec;
  rec.annotations.video_id = id;
  rec.annotations.fps = 30;
  rec.annotations.width = width;
  rec.annotations.height = height;
  for (int f = 0; f < frames; ++f) {
    const int x0 = 4 + speed * f, y0 = 10;
    nerdd::Image rgb(width, height, 3, 200);
    for (int y = y0; y < y0 + 6; ++y)
      for (int x = x0; x < x0 + 6; ++x) {
        for (int c = 0; c < 3; ++c) rgb.at(x, y, c) = 20;
        for (int rep = 0; rep < 2; ++rep)
          evs.push_back({static_cast<std::uint64_t>(f) * cfg.interval_us() + 10, static_cast<std::uint16_t>(x),
                         static_cast<std::uint16_t>(y), nerdd::Polarity::On});
      }
    char name[32];
    std::snprintf(name, sizeof name, "%06d.png", f);
    nerdd::write_png((root / "rgb" / name).string(), rgb);
    if (f % 3 != 2) rec.annotations.boxes.push_back({f, 0, double(x0), double(y0), 6, 6, nerdd::BoxSource::Auto});
  }
  auto stream = nerdd::make_stream(static_cast<std::uint16_t>(width), static_cast<std::uint16_t>(height), evs);
  nerdd::write_event_file((root / "events.nev").string(), stream);

  auto& m = rec.manifest;
  m.video_id = id;
  m.events_path = (root / "events.nev").string();
  m.rgb_path = (root / "rgb").string();
  m.fps = 30;
  m.width = width;
  m.height = height;
  m.annotation_path = (root / "annotations.json").string();
  m.num_frames = frames;
  nerdd::save_annotations(m.annotation_path, rec.annotations);
  return rec;
}

}  // namespace fixture
