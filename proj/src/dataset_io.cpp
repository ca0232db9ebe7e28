#include "nerdd/dataset_io.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "nerdd/errors.hpp"

namespace nerdd {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

const json& require(const json& obj, const char* key, const std::string& where) {
  if (!obj.is_object()) throw SchemaError("expected an object at " + where);
  auto it = obj.find(key);
  if (it == obj.end()) throw SchemaError("missing field " + where + "." + key);
  return *it;
}

template <class T>
T get(const json& obj, const char* key, const std::string& where) {
  const json& v = require(obj, key, where);
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw SchemaError("wrong type for " + where + "." + key);
  }
}

template <class T>
T get_or(const json& obj, const char* key, const std::string& where, T fallback) {
  if (!obj.contains(key)) return fallback;
  return get<T>(obj, key, where);
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw SchemaError(what + ": invalid JSON: " + e.what());
  }
}

Intrinsics parse_intrinsics(const json& j, const std::string& where) {
  Intrinsics in;
  in.fx = get<double>(j, "fx", where);
  in.fy = get<double>(j, "fy", where);
  in.cx = get<double>(j, "cx", where);
  in.cy = get<double>(j, "cy", where);
  in.k1 = get_or<double>(j, "k1", where, 0.0);
  in.k2 = get_or<double>(j, "k2", where, 0.0);
  in.k3 = get_or<double>(j, "k3", where, 0.0);
  in.p1 = get_or<double>(j, "p1", where, 0.0);
  in.p2 = get_or<double>(j, "p2", where, 0.0);
  return in;
}

json intrinsics_json(const Intrinsics& in) {
  return json{{"fx", in.fx}, {"fy", in.fy}, {"cx", in.cx}, {"cy", in.cy}, {"k1", in.k1},
              {"k2", in.k2}, {"k3", in.k3}, {"p1", in.p1}, {"p2", in.p2}};
}

RegistrationParams parse_registration(const json& j, const std::string& where) {
  RegistrationParams r;
  r.x_shift = get<int>(j, "x_shift", where);
  r.t_offset_us = get<std::int64_t>(j, "t_offset_us", where);
  if (j.contains("crop")) {
    const std::string w = where + ".crop";
    const json& c = j.at("crop");
    r.crop = {get<int>(c, "x", w), get<int>(c, "y", w), get<int>(c, "w", w), get<int>(c, "h", w)};
  }
  if (j.contains("pad")) {
    const std::string w = where + ".pad";
    const json& p = j.at("pad");
    r.pad = {get<int>(p, "left", w), get<int>(p, "top", w), get<int>(p, "right", w), get<int>(p, "bottom", w)};
  }
  return r;
}

json registration_json(const RegistrationParams& r) {
  return json{{"x_shift", r.x_shift},
              {"t_offset_us", r.t_offset_us},
              {"crop", {{"x", r.crop.x}, {"y", r.crop.y}, {"w", r.crop.w}, {"h", r.crop.h}}},
              {"pad", {{"left", r.pad.left}, {"top", r.pad.top}, {"right", r.pad.right}, {"bottom", r.pad.bottom}}}};
}

std::string resolve(const std::string& base_dir, const std::string& p) {
  if (p.empty() || base_dir.empty() || fs::path(p).is_absolute()) return p;
  return (fs::path(base_dir) / p).lexically_normal().string();
}

json box_json(const BoxAnnotation& b) {
  return json{{"frame", b.frame}, {"track_id", b.track_id}, {"x", b.x},           {"y", b.y},
              {"w", b.w},         {"h", b.h},               {"source", to_string(b.source)}};
}

BoxAnnotation parse_box(const json& j, const std::string& where, bool need_geometry) {
  BoxAnnotation b;
  b.frame = get<int>(j, "frame", where);
  b.track_id = get<int>(j, "track_id", where);
  if (need_geometry) {
    b.x = get<double>(j, "x", where);
    b.y = get<double>(j, "y", where);
    b.w = get<double>(j, "w", where);
    b.h = get<double>(j, "h", where);
  }
  if (j.contains("source")) {
    try {
      b.source = parse_box_source(get<std::string>(j, "source", where));
    } catch (const Error&) {
      throw SchemaError("invalid value for " + where + ".source");
    }
  }
  return b;
}

json edit_json(const Edit& e) {
  json j{{"kind", to_string(e.kind)}, {"frame", e.box.frame}, {"track_id", e.box.track_id}};
  if (e.kind != EditKind::Delete) {
    j["x"] = e.box.x;
    j["y"] = e.box.y;
    j["w"] = e.box.w;
    j["h"] = e.box.h;
  }
  return j;
}

Edit parse_edit_object(const json& j, const std::string& where) {
  Edit e;
  try {
    e.kind = parse_edit_kind(get<std::string>(j, "kind", where));
  } catch (const SchemaError&) {
    throw;
  } catch (const Error&) {
    throw SchemaError("invalid value for " + where + ".kind");
  }
  e.box = parse_box(j, where, e.kind != EditKind::Delete);
  e.box.source = BoxSource::Manual;
  return e;
}

}  // namespace

AccumulationConfig accumulation_for_fps(double fps) {
  if (!(fps > 0) || !std::isfinite(fps)) throw ParameterError("fps must be positive");
  if (fps == std::floor(fps)) return AccumulationConfig(static_cast<std::uint64_t>(fps), 1);
  return AccumulationConfig(static_cast<std::uint64_t>(std::llround(fps * 1000.0)), 1000);
}

AccumulationConfig RecordingManifest::accumulation() const { return accumulation_for_fps(fps); }

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  static std::atomic<std::uint64_t> counter{0};
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const std::string tmp = path + ".tmp" + std::to_string(counter.fetch_add(1));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out << text;
    out.flush();
    if (!out) throw IoError("write failed for " + tmp);
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp);
    throw IoError("cannot replace " + path + ": " + ec.message());
  }
}

void update_manifest_offset(const std::string& path, const std::string& video_id, std::int64_t t_offset_us) {
  json doc = parse_json(read_text_file(path), "manifest");
  if (!doc.is_array()) throw SchemaError("manifest: expected a JSON array at $");
  for (auto& entry : doc) {
    if (entry.is_object() && entry.value("video_id", "") == video_id) {
      const std::string where = "$[video_id=" + video_id + "]";
      require(entry, "registration", where);
      entry["registration"]["t_offset_us"] = t_offset_us;
      write_text_file(path, doc.dump(2) + "\n");
      return;
    }
  }
  throw NotFoundError("manifest has no recording '" + video_id + "'");
}

std::string rgb_frame_path(const RecordingManifest& m, int frame) {
  char name[32];
  std::snprintf(name, sizeof name, "%06d.png", frame);
  return (fs::path(m.rgb_path) / name).string();
}

Image register_rgb_frame(const Image& raw, const RecordingManifest& m) {
  const Image undistorted = m.rgb_intrinsics ? undistort_image(raw, *m.rgb_intrinsics) : raw;
  return shift_image(crop_pad_rgb(undistorted, m.registration, m.width, m.height), -m.registration.x_shift);
}

std::vector<RecordingManifest> parse_manifest(const std::string& text, const std::string& base_dir,
                                              const ManifestOptions& opt) {
  const json doc = parse_json(text, "manifest");
  if (!doc.is_array()) throw SchemaError("manifest: expected a JSON array at $");
  std::vector<RecordingManifest> out;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < doc.size(); ++i) {
    const std::string where = "$[" + std::to_string(i) + "]";
    const json& j = doc[i];
    RecordingManifest m;
    m.video_id = get<std::string>(j, "video_id", where);
    if (m.video_id.empty()) throw SchemaError("empty " + where + ".video_id");
    if (!seen.insert(m.video_id).second) throw SchemaError("duplicate video_id '" + m.video_id + "' at " + where);
    m.events_path = resolve(base_dir, get<std::string>(j, "events", where));
    m.rgb_path = resolve(base_dir, get<std::string>(j, "rgb", where));
    m.fps = get<double>(j, "fps", where);
    if (!(m.fps > 0) || !std::isfinite(m.fps)) throw SchemaError(where + ".fps must be positive");
    m.width = get<int>(j, "width", where);
    m.height = get<int>(j, "height", where);
    if (m.width < 1 || m.height < 1 || m.width > 65535 || m.height > 65535) {
      throw SchemaError(where + ": resolution out of range");
    }
    m.annotation_path = resolve(base_dir, get<std::string>(j, "annotations", where));
    m.registration = parse_registration(require(j, "registration", where), where + ".registration");
    m.num_frames = get_or<std::int64_t>(j, "num_frames", where, 0);
    if (m.num_frames < 0) throw SchemaError(where + ".num_frames must be non-negative");
    if (j.contains("intrinsics")) {
      const json& in = j.at("intrinsics");
      if (in.contains("event")) m.event_intrinsics = parse_intrinsics(in.at("event"), where + ".intrinsics.event");
      if (in.contains("rgb")) m.rgb_intrinsics = parse_intrinsics(in.at("rgb"), where + ".intrinsics.rgb");
    }
    if (opt.check_paths) {
      if (!fs::is_regular_file(m.events_path)) {
        throw IoError("recording '" + m.video_id + "' (" + where + "): events file not found: " + m.events_path);
      }
      if (!fs::is_directory(m.rgb_path)) {
        throw IoError("recording '" + m.video_id + "' (" + where + "): RGB frame directory not found: " + m.rgb_path);
      }
    }
    out.push_back(std::move(m));
  }
  return out;
}

std::vector<RecordingManifest> load_manifest(const std::string& path, const ManifestOptions& opt) {
  const std::string base = fs::absolute(fs::path(path)).parent_path().string();
  return parse_manifest(read_text_file(path), base, opt);
}

std::string manifest_to_json(std::span<const RecordingManifest> manifests) {
  json doc = json::array();
  for (const auto& m : manifests) {
    json j{{"video_id", m.video_id},
           {"events", m.events_path},
           {"rgb", m.rgb_path},
           {"fps", m.fps},
           {"width", m.width},
           {"height", m.height},
           {"annotations", m.annotation_path},
           {"registration", registration_json(m.registration)}};
    if (m.num_frames > 0) j["num_frames"] = m.num_frames;
    if (m.event_intrinsics || m.rgb_intrinsics) {
      json in = json::object();
      if (m.event_intrinsics) in["event"] = intrinsics_json(*m.event_intrinsics);
      if (m.rgb_intrinsics) in["rgb"] = intrinsics_json(*m.rgb_intrinsics);
      j["intrinsics"] = in;
    }
    doc.push_back(j);
  }
  return doc.dump(2) + "\n";
}

void save_manifest(const std::string& path, std::span<const RecordingManifest> manifests) {
  write_text_file(path, manifest_to_json(manifests));
}

AnnotationFile parse_annotations(const std::string& text) {
  const json doc = parse_json(text, "annotations");
  AnnotationFile a;
  a.video_id = get<std::string>(doc, "video_id", "$");
  a.fps = get<double>(doc, "fps", "$");
  a.width = get<int>(doc, "width", "$");
  a.height = get<int>(doc, "height", "$");
  const json& boxes = require(doc, "boxes", "$");
  if (!boxes.is_array()) throw SchemaError("expected an array at $.boxes");
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    a.boxes.push_back(parse_box(boxes[i], "$.boxes[" + std::to_string(i) + "]", true));
  }
  return a;
}

std::string annotations_to_json(const AnnotationFile& ann) {
  json boxes = json::array();
  for (const auto& b : ann.boxes) boxes.push_back(box_json(b));
  json doc{{"video_id", ann.video_id},
           {"fps", ann.fps},
           {"width", ann.width},
           {"height", ann.height},
           {"boxes", boxes}};
  return doc.dump(1) + "\n";
}

AnnotationFile load_annotations(const std::string& path) { return parse_annotations(read_text_file(path)); }

void save_annotations(const std::string& path, const AnnotationFile& ann) {
  write_text_file(path, annotations_to_json(ann));
}

Edit parse_edit(const std::string& json_text) { return parse_edit_object(parse_json(json_text, "edit"), "$"); }

std::string edit_to_json(const Edit& edit) { return edit_json(edit).dump(); }

LogEntry parse_log_entry(const std::string& line) {
  const json j = parse_json(line, "edit log");
  LogEntry entry;
  if (get<std::string>(j, "kind", "$") == "interpolate") {
    entry.kind = LogEntry::Kind::Interpolate;
    entry.track_id = get<int>(j, "track_id", "$");
  } else {
    entry.edit = parse_edit_object(j, "$");
  }
  return entry;
}

std::string log_entry_to_json(const LogEntry& entry) {
  if (entry.kind == LogEntry::Kind::Interpolate) {
    return json{{"kind", "interpolate"}, {"track_id", entry.track_id}}.dump();
  }
  return edit_json(entry.edit).dump();
}

std::vector<LogEntry> load_edit_log(const std::string& path) {
  std::vector<LogEntry> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(parse_log_entry(line));
    } catch (const SchemaError& e) {
      throw SchemaError(path + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

void append_edit_log(const std::string& path, const LogEntry& entry) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot append to " + path);
  out << log_entry_to_json(entry) << '\n';
  out.flush();
  if (!out) throw IoError("append failed for " + path);
}

std::vector<BoxAnnotation> replay_log(std::vector<BoxAnnotation> boxes, std::span<const LogEntry> log) {
  sort_boxes(boxes);
  for (std::size_t i = 0; i < log.size(); ++i) {
    const LogEntry& e = log[i];
    if (e.kind == LogEntry::Kind::Interpolate) {
      boxes = reinterpolate_track(std::move(boxes), e.track_id);
    } else {
      try {
        boxes = merge_manual(std::move(boxes), std::span<const Edit>(&e.edit, 1));
      } catch (const UnknownTargetError& err) {
        const std::string what = err.what();
        throw UnknownTargetError(what.substr(what.find(": ") + 2), i);
      }
    }
  }
  return boxes;
}

double DatasetStats::percent_with_drone() const {
  if (frames_total == 0) return 0.0;
  return 100.0 * static_cast<double>(frames_with_drone) / static_cast<double>(frames_total);
}

std::uint64_t event_file_frame_count(const std::string& path, const AccumulationConfig& cfg) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open event file " + path);
  unsigned char header[kNev1HeaderSize];
  if (!in.read(reinterpret_cast<char*>(header), kNev1HeaderSize) || std::string(header, header + 4) != "NEV1") {
    throw FormatError(path + ": not a NEV1 file");
  }
  std::uint64_t count = 0;
  for (int i = 0; i < 8; ++i) count |= static_cast<std::uint64_t>(header[8 + i]) << (8 * i);
  if (count == 0) return 0;
  in.seekg(static_cast<std::streamoff>(kNev1HeaderSize + (count - 1) * kNev1RecordSize));
  unsigned char rec[8];
  if (!in.read(reinterpret_cast<char*>(rec), 8)) throw FormatError(path + ": truncated event records");
  std::uint64_t t = 0;
  for (int i = 0; i < 8; ++i) t |= static_cast<std::uint64_t>(rec[i]) << (8 * i);
  return cfg.frame_count(t + 1);
}

DatasetStats dataset_stats(std::span<const RecordingManifest> manifests,
                           const std::map<std::string, AnnotationFile>& annotations) {
  DatasetStats s;
  s.video_count = manifests.size();
  bool uniform_fps = true, uniform_res = true;
  for (std::size_t i = 0; i < manifests.size(); ++i) {
    const auto& m = manifests[i];
    const std::uint64_t frames = m.num_frames > 0 ? static_cast<std::uint64_t>(m.num_frames)
                                                  : event_file_frame_count(m.events_path, m.accumulation());
    std::set<int> with_drone;
    if (auto it = annotations.find(m.video_id); it != annotations.end()) {
      for (const auto& b : it->second.boxes) {
        if (b.frame >= 0 && static_cast<std::uint64_t>(b.frame) < frames) {
          with_drone.insert(b.frame);
          ++s.box_count;
        }
      }
    }
    s.frames_total += frames;
    s.frames_with_drone += with_drone.size();
    s.total_length_s += static_cast<double>(frames) / m.fps;
    if (i > 0) {
      uniform_fps = uniform_fps && m.fps == manifests[0].fps;
      uniform_res = uniform_res && m.width == manifests[0].width && m.height == manifests[0].height;
    }
  }
  s.frames_without_drone = s.frames_total - s.frames_with_drone;
  if (!manifests.empty() && uniform_fps) s.fps = manifests[0].fps;
  if (!manifests.empty() && uniform_res) s.resolution = std::make_pair(manifests[0].width, manifests[0].height);
  return s;
}

std::string stats_to_json(const DatasetStats& s) {
  json j{{"frames_total", s.frames_total},
         {"frames_with_drone", s.frames_with_drone},
         {"frames_without_drone", s.frames_without_drone},
         {"percent_with_drone", s.percent_with_drone()},
         {"total_length_s", s.total_length_s},
         {"video_count", s.video_count},
         {"box_count", s.box_count}};
  j["fps"] = s.fps ? json(*s.fps) : json(nullptr);
  if (s.resolution) {
    j["resolution"] = {s.resolution->first, s.resolution->second};
  } else {
    j["resolution"] = nullptr;
  }
  return j.dump(2);
}

}  // namespace nerdd
