#include "nerdd/annotator.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <tuple>

#include "nerdd/errors.hpp"
#include "nerdd/matching.hpp"

namespace nerdd {

std::string to_string(BoxSource s) {
  switch (s) {
    case BoxSource::Auto:
      return "auto";
    case BoxSource::Manual:
      return "manual";
    case BoxSource::Interp:
      return "interp";
  }
  return "auto";
}

BoxSource parse_box_source(const std::string& s) {
  if (s == "auto") return BoxSource::Auto;
  if (s == "manual") return BoxSource::Manual;
  if (s == "interp") return BoxSource::Interp;
  throw SchemaError("unknown box source '" + s + "'");
}

std::string to_string(EditKind k) {
  switch (k) {
    case EditKind::Modify:
      return "modify";
    case EditKind::Add:
      return "add";
    case EditKind::Delete:
      return "delete";
  }
  return "add";
}

EditKind parse_edit_kind(const std::string& s) {
  if (s == "modify") return EditKind::Modify;
  if (s == "add") return EditKind::Add;
  if (s == "delete") return EditKind::Delete;
  throw SchemaError("unknown edit kind '" + s + "'");
}

void validate(const BlobParams& p) {
  if (p.threshold < 1) throw ParameterError("blob threshold must be >= 1");
  if (p.connectivity != 4 && p.connectivity != 8) throw ParameterError("connectivity must be 4 or 8");
  if (p.min_area <= 0 || p.min_area > p.max_area) throw ParameterError("need 0 < min_area <= max_area");
  if (p.max_link_distance < 0) throw ParameterError("link distance must be non-negative");
}

namespace {

struct Component {
  int x0, y0, x1, y1;  // inclusive bounds
  int area;
};

std::vector<Component> components(const CountFrame& frame, const BlobParams& params) {
  const int w = frame.width;
  const int h = frame.height;
  std::vector<int> label(static_cast<std::size_t>(w) * h, -1);
  std::vector<Component> out;
  std::vector<int> stack;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t idx = static_cast<std::size_t>(y) * w + x;
      if (label[idx] >= 0 || frame.total(x, y) < params.threshold) continue;
      const int id = static_cast<int>(out.size());
      Component c{x, y, x, y, 0};
      label[idx] = id;
      stack.assign(1, static_cast<int>(idx));
      while (!stack.empty()) {
        const int cur = stack.back();
        stack.pop_back();
        const int cx = cur % w;
        const int cy = cur / w;
        ++c.area;
        c.x0 = std::min(c.x0, cx);
        c.x1 = std::max(c.x1, cx);
        c.y0 = std::min(c.y0, cy);
        c.y1 = std::max(c.y1, cy);
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            if (dx == 0 && dy == 0) continue;
            if (params.connectivity == 4 && dx != 0 && dy != 0) continue;
            const int nx = cx + dx;
            const int ny = cy + dy;
            if (nx < 0 || ny < 0 || nx >= w || ny >= h) continue;
            const std::size_t nidx = static_cast<std::size_t>(ny) * w + nx;
            if (label[nidx] >= 0 || frame.total(nx, ny) < params.threshold) continue;
            label[nidx] = id;
            stack.push_back(static_cast<int>(nidx));
          }
        }
      }
      out.push_back(c);
    }
  }
  return out;
}

double centroid_distance(const BoxAnnotation& a, const BoxAnnotation& b) {
  return std::hypot(a.center_x() - b.center_x(), a.center_y() - b.center_y());
}

}  // namespace

std::size_t count_components(const CountFrame& frame, const BlobParams& params) {
  validate(params);
  return components(frame, params).size();
}

std::vector<BoxAnnotation> detect_blobs(const CountFrame& frame, const BlobParams& params) {
  validate(params);
  std::vector<Component> comps = components(frame, params);
  std::erase_if(comps, [&](const Component& c) { return c.area < params.min_area || c.area > params.max_area; });
  std::stable_sort(comps.begin(), comps.end(), [](const Component& a, const Component& b) {
    return a.area > b.area;
  });
  std::vector<BoxAnnotation> boxes;
  boxes.reserve(comps.size());
  for (const auto& c : comps) {
    BoxAnnotation b;
    b.frame = static_cast<int>(frame.index);
    b.x = c.x0;
    b.y = c.y0;
    b.w = c.x1 - c.x0 + 1;
    b.h = c.y1 - c.y0 + 1;
    b.source = BoxSource::Auto;
    boxes.push_back(b);
  }
  return boxes;
}

LinkResult link_tracks(std::span<const std::vector<BoxAnnotation>> per_frame_boxes,
                       const BlobParams& params) {
  validate(params);
  std::vector<Track> all;
  std::vector<int> active;  // indices into `all` that received a box in the previous frame

  for (std::size_t f = 0; f < per_frame_boxes.size(); ++f) {
    std::vector<BoxAnnotation> boxes = per_frame_boxes[f];
    for (auto& b : boxes) b.frame = static_cast<int>(f);

    std::vector<int> box_to_track(boxes.size(), -1);
    if (params.link_method == LinkMethod::Greedy) {
      std::vector<std::tuple<double, int, int>> candidates;  // distance, active slot, box
      for (std::size_t a = 0; a < active.size(); ++a) {
        const BoxAnnotation& last = all[active[a]].keyframes.back();
        for (std::size_t b = 0; b < boxes.size(); ++b) {
          const double d = centroid_distance(last, boxes[b]);
          if (d <= params.max_link_distance) candidates.emplace_back(d, static_cast<int>(a), static_cast<int>(b));
        }
      }
      std::sort(candidates.begin(), candidates.end());
      std::vector<char> track_taken(active.size(), 0);
      for (auto [d, a, b] : candidates) {
        if (track_taken[a] || box_to_track[b] >= 0) continue;
        track_taken[a] = 1;
        box_to_track[b] = active[a];
      }
    } else if (!active.empty() && !boxes.empty()) {
      // gated optimal assignment; pairs beyond the gate cost more than any admissible set
      const double gate = params.max_link_distance;
      const double big = 1.0 + gate * static_cast<double>(std::max(active.size(), boxes.size()) + 1);
      CostMatrix cost(static_cast<Eigen::Index>(active.size()), static_cast<Eigen::Index>(boxes.size()));
      for (std::size_t a = 0; a < active.size(); ++a) {
        for (std::size_t b = 0; b < boxes.size(); ++b) {
          const double d = centroid_distance(all[active[a]].keyframes.back(), boxes[b]);
          cost(static_cast<Eigen::Index>(a), static_cast<Eigen::Index>(b)) = d <= gate ? d : big;
        }
      }
      for (auto [a, b] : hungarian(cost).pairs) {
        if (cost(a, b) <= gate) box_to_track[b] = active[a];
      }
    }

    std::vector<int> next_active;
    for (std::size_t b = 0; b < boxes.size(); ++b) {
      int t = box_to_track[b];
      if (t < 0) {
        t = static_cast<int>(all.size());
        all.push_back(Track{});
      }
      all[t].keyframes.push_back(boxes[b]);
      next_active.push_back(t);
    }
    std::sort(next_active.begin(), next_active.end());
    active = std::move(next_active);
  }

  LinkResult result;
  int next_id = 0;
  for (auto& t : all) {
    if (static_cast<int>(t.keyframes.size()) < params.min_track_length) {
      result.discarded_boxes += t.keyframes.size();
      continue;
    }
    t.track_id = next_id++;
    for (auto& b : t.keyframes) b.track_id = t.track_id;
    result.tracks.push_back(std::move(t));
  }
  return result;
}

std::vector<BoxAnnotation> interpolate_track(const Track& track, std::optional<FrameRange> range) {
  if (track.keyframes.empty()) throw ParameterError("cannot interpolate an empty track");
  for (std::size_t i = 1; i < track.keyframes.size(); ++i) {
    if (track.keyframes[i].frame <= track.keyframes[i - 1].frame) {
      throw ParameterError("track keyframes must have strictly increasing frames");
    }
  }
  auto in_range = [&](int f) { return !range || (f >= range->first && f <= range->last); };

  std::vector<BoxAnnotation> out;
  for (std::size_t k = 0; k < track.keyframes.size(); ++k) {
    const BoxAnnotation& a = track.keyframes[k];
    if (in_range(a.frame)) out.push_back(a);
    if (k + 1 == track.keyframes.size()) break;
    const BoxAnnotation& b = track.keyframes[k + 1];
    const double span = b.frame - a.frame;
    for (int f = a.frame + 1; f < b.frame; ++f) {
      if (!in_range(f)) continue;
      const double s = (f - a.frame) / span;
      BoxAnnotation g;
      g.frame = f;
      g.track_id = track.track_id;
      g.x = a.x + s * (b.x - a.x);
      g.y = a.y + s * (b.y - a.y);
      g.w = a.w + s * (b.w - a.w);
      g.h = a.h + s * (b.h - a.h);
      g.source = BoxSource::Interp;
      out.push_back(g);
    }
  }
  return out;
}

void sort_boxes(std::vector<BoxAnnotation>& boxes) {
  std::stable_sort(boxes.begin(), boxes.end(), [](const BoxAnnotation& a, const BoxAnnotation& b) {
    return std::tie(a.frame, a.track_id) < std::tie(b.frame, b.track_id);
  });
}

std::vector<BoxAnnotation> merge_manual(std::vector<BoxAnnotation> boxes, std::span<const Edit> edits) {
  auto find = [&](int frame, int track_id) {
    return std::find_if(boxes.begin(), boxes.end(), [&](const BoxAnnotation& b) {
      return b.frame == frame && b.track_id == track_id;
    });
  };
  for (std::size_t i = 0; i < edits.size(); ++i) {
    const Edit& e = edits[i];
    if (e.box.frame < 0) throw UnknownTargetError("negative frame index", i);
    if (e.kind != EditKind::Delete && (!(e.box.w > 0) || !(e.box.h > 0))) {
      throw ParameterError("edit " + std::to_string(i) + ": box size must be positive");
    }
    auto it = find(e.box.frame, e.box.track_id);
    switch (e.kind) {
      case EditKind::Modify: {
        if (it == boxes.end()) throw UnknownTargetError("no box to modify", i);
        BoxAnnotation b = e.box;
        b.source = BoxSource::Manual;
        *it = b;
        break;
      }
      case EditKind::Add: {
        if (it != boxes.end()) throw UnknownTargetError("box already exists at (frame, track)", i);
        BoxAnnotation b = e.box;
        b.source = BoxSource::Manual;
        boxes.push_back(b);
        break;
      }
      case EditKind::Delete:
        if (it == boxes.end()) throw UnknownTargetError("no box to delete", i);
        boxes.erase(it);
        break;
    }
  }
  sort_boxes(boxes);
  return boxes;
}

std::vector<Track> tracks_from_boxes(std::span<const BoxAnnotation> boxes) {
  std::map<int, Track> by_id;
  for (const auto& b : boxes) {
    if (b.track_id == kNoTrack) continue;
    Track& t = by_id[b.track_id];
    t.track_id = b.track_id;
    t.keyframes.push_back(b);
  }
  std::vector<Track> out;
  for (auto& [id, t] : by_id) {
    std::stable_sort(t.keyframes.begin(), t.keyframes.end(),
                     [](const BoxAnnotation& a, const BoxAnnotation& b) { return a.frame < b.frame; });
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<BoxAnnotation> reinterpolate_track(std::vector<BoxAnnotation> boxes, int track_id) {
  if (track_id == kNoTrack) throw ParameterError("cannot interpolate boxes without a track");
  std::erase_if(boxes, [&](const BoxAnnotation& b) { return b.track_id == track_id && b.source == BoxSource::Interp; });
  Track track{track_id, {}};
  for (const auto& b : boxes) {
    if (b.track_id == track_id) track.keyframes.push_back(b);
  }
  if (track.keyframes.empty()) throw NotFoundError("track " + std::to_string(track_id) + " has no keyframes");
  sort_boxes(track.keyframes);
  for (const auto& b : interpolate_track(track)) {
    if (b.source == BoxSource::Interp) boxes.push_back(b);
  }
  sort_boxes(boxes);
  return boxes;
}

std::vector<BoxAnnotation> annotate_stream(const EventStream& stream, const AccumulationConfig& cfg,
                                           std::int64_t duration_us, const BlobParams& params) {
  std::vector<std::vector<BoxAnnotation>> per_frame;
  accumulate_each(stream, cfg, duration_us,
                  [&](const CountFrame& f) { per_frame.push_back(detect_blobs(f, params)); });
  LinkResult linked = link_tracks(per_frame, params);
  std::vector<BoxAnnotation> boxes;
  for (const auto& t : linked.tracks) boxes.insert(boxes.end(), t.keyframes.begin(), t.keyframes.end());
  sort_boxes(boxes);
  return boxes;
}

}  // namespace nerdd
