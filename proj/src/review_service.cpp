#include "nerdd/review_service.hpp"

#include <filesystem>
#include <list>
#include <mutex>
#include <thread>
#include <unordered_map>

#include <httplib.h>
#include <json.hpp>

#include "nerdd/errors.hpp"
#include "nerdd/event_core.hpp"
#include "nerdd/registration.hpp"

namespace nerdd {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

struct ReviewService::Video {
  RecordingManifest manifest;
  std::uint64_t frame_count = 0;
  mutable std::mutex mutex;
  std::vector<BoxAnnotation> auto_boxes;
  std::vector<BoxAnnotation> boxes;
  std::size_t log_entries = 0;
  std::shared_ptr<const EventStream> events;  // loaded on first render, on the RGB clock
};

struct ReviewService::Cache {
  struct Images {
    std::vector<std::uint8_t> rgb_png;
    std::vector<std::uint8_t> event_png;
  };
  std::size_t capacity;
  mutable std::mutex mutex;
  std::list<std::string> order;  // most recent first
  std::unordered_map<std::string, std::pair<std::shared_ptr<const Images>, std::list<std::string>::iterator>> map;

  std::shared_ptr<const Images> find(const std::string& key) {
    std::lock_guard lock(mutex);
    auto it = map.find(key);
    if (it == map.end()) return nullptr;
    order.splice(order.begin(), order, it->second.second);
    return it->second.first;
  }

  void put(const std::string& key, std::shared_ptr<const Images> images) {
    if (capacity == 0) return;
    std::lock_guard lock(mutex);
    if (auto it = map.find(key); it != map.end()) {
      order.erase(it->second.second);
      map.erase(it);
    }
    order.push_front(key);
    map.emplace(key, std::make_pair(std::move(images), order.begin()));
    while (map.size() > capacity) {
      map.erase(order.back());
      order.pop_back();
    }
  }
};

std::string ReviewService::auto_path(const std::string& annotation_path) {
  fs::path p(annotation_path);
  p.replace_extension(".auto.json");
  return p.string();
}

std::string ReviewService::log_path(const std::string& annotation_path) {
  fs::path p(annotation_path);
  p.replace_extension(".edits.jsonl");
  return p.string();
}

namespace {

AnnotationFile annotation_file(const RecordingManifest& m, std::vector<BoxAnnotation> boxes) {
  return AnnotationFile{m.video_id, m.fps, m.width, m.height, std::move(boxes)};
}

std::vector<BoxAnnotation> boxes_on_frame(const std::vector<BoxAnnotation>& boxes, int frame) {
  std::vector<BoxAnnotation> out;
  for (const auto& b : boxes) {
    if (b.frame == frame) out.push_back(b);
  }
  return out;
}

}  // namespace

ReviewService::ReviewService(std::vector<RecordingManifest> manifests, ServiceOptions opt)
    : cache_(std::make_unique<Cache>()) {
  cache_->capacity = opt.cache_capacity;
  for (auto& m : manifests) {
    auto v = std::make_unique<Video>();
    const std::string base = auto_path(m.annotation_path);
    if (fs::exists(base)) {
      v->auto_boxes = load_annotations(base).boxes;
    } else {
      if (fs::exists(m.annotation_path)) v->auto_boxes = load_annotations(m.annotation_path).boxes;
      save_annotations(base, annotation_file(m, v->auto_boxes));
    }
    sort_boxes(v->auto_boxes);
    const auto log = load_edit_log(log_path(m.annotation_path));
    v->boxes = replay_log(v->auto_boxes, log);
    v->log_entries = log.size();
    save_annotations(m.annotation_path, annotation_file(m, v->boxes));
    v->frame_count = m.num_frames > 0 ? static_cast<std::uint64_t>(m.num_frames)
                                      : event_file_frame_count(m.events_path, m.accumulation());
    v->manifest = std::move(m);
    const std::string id = v->manifest.video_id;
    videos_.emplace(id, std::move(v));
  }
}

ReviewService::~ReviewService() = default;

ReviewService::Video& ReviewService::video(const std::string& id) const {
  auto it = videos_.find(id);
  if (it == videos_.end()) throw NotFoundError("unknown video '" + id + "'");
  return *it->second;
}

std::vector<VideoSummary> ReviewService::list_videos() const {
  std::vector<VideoSummary> out;
  for (const auto& [id, v] : videos_) {
    std::lock_guard lock(v->mutex);
    out.push_back({id, v->frame_count, v->boxes.size(), v->log_entries > 0});
  }
  return out;
}

FramePair ReviewService::get_frame_pair(const std::string& video_id, int frame) {
  Video& v = video(video_id);
  if (frame < 0 || static_cast<std::uint64_t>(frame) >= v.frame_count) {
    throw NotFoundError("frame " + std::to_string(frame) + " out of range for video '" + video_id + "'");
  }
  FramePair pair;
  std::shared_ptr<const EventStream> events;
  {
    std::lock_guard lock(v.mutex);
    pair.boxes = boxes_on_frame(v.boxes, frame);
    events = v.events;
  }

  const std::string key = video_id + "#" + std::to_string(frame);
  auto images = cache_->find(key);
  if (!images) {
    const RecordingManifest& m = v.manifest;
    if (!events) {
      auto loaded = std::make_shared<EventStream>(apply_offset(read_event_file(m.events_path),
                                                               m.registration.t_offset_us).stream);
      std::lock_guard lock(v.mutex);
      if (!v.events) v.events = loaded;
      events = v.events;
    }
    const AccumulationConfig cfg = m.accumulation();
    const std::uint64_t dt = cfg.interval_us();
    Image ev = render_frame(accumulate_window(*events, frame * dt, (frame + 1) * dt, frame));
    if (m.event_intrinsics) ev = undistort_image(ev, *m.event_intrinsics);
    if (ev.width != m.width || ev.height != m.height) ev = crop_pad_rgb(ev, RegistrationParams{}, m.width, m.height);

    Image rgb(m.width, m.height, 3);
    const std::string path = rgb_frame_path(m, frame);
    if (fs::exists(path)) rgb = register_rgb_frame(read_png(path), m);
    auto fresh = std::make_shared<Cache::Images>();
    fresh->rgb_png = encode_png(rgb);
    fresh->event_png = encode_png(ev);
    cache_->put(key, fresh);
    images = fresh;
  }
  pair.rgb_png = images->rgb_png;
  pair.event_png = images->event_png;
  return pair;
}

std::vector<BoxAnnotation> ReviewService::post_edit(const std::string& video_id, const Edit& edit) {
  Video& v = video(video_id);
  std::lock_guard lock(v.mutex);
  if (edit.box.frame < 0 || static_cast<std::uint64_t>(edit.box.frame) >= v.frame_count) {
    throw UnknownTargetError("frame " + std::to_string(edit.box.frame) + " out of range", 0);
  }
  auto updated = merge_manual(v.boxes, std::span<const Edit>(&edit, 1));
  LogEntry entry;
  entry.edit = edit;
  append_edit_log(log_path(v.manifest.annotation_path), entry);
  save_annotations(v.manifest.annotation_path, annotation_file(v.manifest, updated));
  v.boxes = std::move(updated);
  ++v.log_entries;
  return boxes_on_frame(v.boxes, edit.box.frame);
}

std::vector<BoxAnnotation> ReviewService::run_interpolation(const std::string& video_id, int track_id) {
  Video& v = video(video_id);
  std::lock_guard lock(v.mutex);
  auto updated = reinterpolate_track(v.boxes, track_id);
  LogEntry entry;
  entry.kind = LogEntry::Kind::Interpolate;
  entry.track_id = track_id;
  append_edit_log(log_path(v.manifest.annotation_path), entry);
  save_annotations(v.manifest.annotation_path, annotation_file(v.manifest, updated));
  v.boxes = std::move(updated);
  ++v.log_entries;
  std::vector<BoxAnnotation> track;
  for (const auto& b : v.boxes) {
    if (b.track_id == track_id) track.push_back(b);
  }
  return track;
}

AnnotationFile ReviewService::annotations(const std::string& video_id) const {
  Video& v = video(video_id);
  std::lock_guard lock(v.mutex);
  return annotation_file(v.manifest, v.boxes);
}

std::size_t ReviewService::cached_frames() const {
  std::lock_guard lock(cache_->mutex);
  return cache_->map.size();
}

// ---------------------------------------------------------------------------
// JSON views

namespace {

json box_json(const BoxAnnotation& b) {
  return json{{"frame", b.frame}, {"track_id", b.track_id}, {"x", b.x},           {"y", b.y},
              {"w", b.w},         {"h", b.h},               {"source", to_string(b.source)}};
}

json boxes_json(const std::vector<BoxAnnotation>& boxes) {
  json arr = json::array();
  for (const auto& b : boxes) arr.push_back(box_json(b));
  return arr;
}

}  // namespace

std::string boxes_to_json(const std::vector<BoxAnnotation>& boxes) { return boxes_json(boxes).dump(); }

std::string summaries_to_json(const std::vector<VideoSummary>& videos) {
  json arr = json::array();
  for (const auto& v : videos) {
    arr.push_back({{"id", v.id}, {"frame_count", v.frame_count}, {"box_count", v.box_count}, {"dirty", v.dirty}});
  }
  return arr.dump();
}

std::string frame_pair_to_json(const std::string& video_id, int frame, const FramePair& pair) {
  json j{{"video_id", video_id},
         {"frame", frame},
         {"rgb_png_b64", base64_encode(pair.rgb_png)},
         {"event_png_b64", base64_encode(pair.event_png)},
         {"boxes", boxes_json(pair.boxes)}};
  return j.dump();
}

// ---------------------------------------------------------------------------
// HTTP

struct ReviewHttpServer::Impl {
  ReviewService& service;
  httplib::Server server;
  std::thread thread;

  explicit Impl(ReviewService& s) : service(s) {}
};

namespace {

void send_error(httplib::Response& res, int status, const std::string& kind, const std::string& message) {
  res.status = status;
  res.set_content(json{{"error", message}, {"kind", kind}}.dump(), "application/json");
}

template <class F>
auto guarded(F handler) {
  return [handler](const httplib::Request& req, httplib::Response& res) {
    try {
      handler(req, res);
    } catch (const NotFoundError& e) {
      send_error(res, 404, "not_found", e.what());
    } catch (const UnknownTargetError& e) {
      send_error(res, 404, "unknown_target", e.what());
    } catch (const SchemaError& e) {
      send_error(res, 400, "schema", e.what());
    } catch (const ParameterError& e) {
      send_error(res, 400, "parameter", e.what());
    } catch (const std::invalid_argument& e) {
      send_error(res, 400, "parameter", e.what());
    } catch (const std::out_of_range& e) {
      send_error(res, 400, "parameter", e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal", e.what());
    }
  };
}

}  // namespace

ReviewHttpServer::ReviewHttpServer(ReviewService& service, std::string static_dir)
    : impl_(std::make_unique<Impl>(service)) {
  auto& srv = impl_->server;
  ReviewService& svc = service;

  srv.Get("/videos", guarded([&svc](const httplib::Request&, httplib::Response& res) {
            res.set_content(summaries_to_json(svc.list_videos()), "application/json");
          }));
  srv.Get(R"(/videos/([^/]+)/frames/(-?\d+))", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.matches[1];
            const int frame = std::stoi(req.matches[2]);
            res.set_content(frame_pair_to_json(id, frame, svc.get_frame_pair(id, frame)), "application/json");
          }));
  srv.Post(R"(/videos/([^/]+)/edits)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
             const std::string id = req.matches[1];
             const Edit edit = parse_edit(req.body);
             const auto boxes = svc.post_edit(id, edit);
             res.set_content(json{{"frame", edit.box.frame}, {"boxes", boxes_json(boxes)}}.dump(), "application/json");
           }));
  srv.Post(R"(/videos/([^/]+)/tracks/(-?\d+)/interpolate)",
           guarded([&svc](const httplib::Request& req, httplib::Response& res) {
             const std::string id = req.matches[1];
             const int track = std::stoi(req.matches[2]);
             const auto boxes = svc.run_interpolation(id, track);
             res.set_content(json{{"track_id", track}, {"boxes", boxes_json(boxes)}}.dump(), "application/json");
           }));
  srv.Get(R"(/videos/([^/]+)/annotations)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
            res.set_content(annotations_to_json(svc.annotations(req.matches[1])), "application/json");
          }));
  if (!static_dir.empty()) {
    if (!srv.set_mount_point("/", static_dir)) throw IoError("static directory not found: " + static_dir);
  }
}

ReviewHttpServer::~ReviewHttpServer() { stop(); }

int ReviewHttpServer::bind(const std::string& host, int port) {
  int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) throw IoError("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void ReviewHttpServer::listen() { impl_->server.listen_after_bind(); }

void ReviewHttpServer::start() {
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void ReviewHttpServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace nerdd
