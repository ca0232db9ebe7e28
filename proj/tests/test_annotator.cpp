#include <doctest.h>

#include <algorithm>
#include <random>

#include "nerdd/annotator.hpp"
#include "nerdd/errors.hpp"
#include "oracles.hpp"

using namespace nerdd;

namespace {

void fill_block(CountFrame& f, int x0, int y0, int w, int h, std::uint32_t count = 3) {
  for (int y = y0; y < y0 + h; ++y)
    for (int x = x0; x < x0 + w; ++x) f.on_counts[static_cast<std::size_t>(y) * f.width + x] = count;
}

BoxAnnotation box_at(int frame, int track, double x, double y, double w = 10, double h = 10,
                     BoxSource src = BoxSource::Auto) {
  return {frame, track, x, y, w, h, src};
}

}  // namespace

TEST_CASE("detect_blobs basics") {
  BlobParams p;
  CountFrame f(0, 40, 30);
  SUBCASE("empty frame") { CHECK(detect_blobs(f, p).empty()); }
  SUBCASE("one solid 5x5 block") {
    fill_block(f, 7, 4, 5, 5);
    auto boxes = detect_blobs(f, p);
    REQUIRE(boxes.size() == 1);
    CHECK(boxes[0].x == 7);
    CHECK(boxes[0].y == 4);
    CHECK(boxes[0].w == 5);
    CHECK(boxes[0].h == 5);
    CHECK(boxes[0].source == BoxSource::Auto);
    CHECK(boxes[0].track_id == kNoTrack);
  }
  SUBCASE("two blocks two columns apart, sorted by area") {
    fill_block(f, 2, 2, 4, 4);
    fill_block(f, 8, 2, 5, 5);
    auto boxes = detect_blobs(f, p);
    REQUIRE(boxes.size() == 2);
    CHECK(boxes[0].w == 5);
    CHECK(boxes[1].w == 4);
  }
  SUBCASE("below-threshold pixels are inactive") {
    fill_block(f, 2, 2, 5, 5, 1);
    CHECK(detect_blobs(f, p).empty());
  }
  SUBCASE("area filter") {
    fill_block(f, 2, 2, 2, 2);
    fill_block(f, 10, 10, 12, 12);
    p.max_area = 100;
    CHECK(detect_blobs(f, p).empty());
    CHECK(count_components(f, p) == 2);
  }
  SUBCASE("diagonal contact joins under 8-connectivity only") {
    fill_block(f, 2, 2, 3, 3);
    fill_block(f, 5, 5, 3, 3);
    CHECK(count_components(f, p) == 1);
    p.connectivity = 4;
    CHECK(count_components(f, p) == 2);
  }
}

TEST_CASE("component count agrees with flood fill on random frames") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const int w = 5 + static_cast<int>(rng() % 30), h = 5 + static_cast<int>(rng() % 20);
    CountFrame f(0, static_cast<std::uint16_t>(w), static_cast<std::uint16_t>(h));
    std::vector<std::uint8_t> active(f.on_counts.size());
    BlobParams p;
    p.threshold = 2;
    p.connectivity = trial % 2 ? 4 : 8;
    for (std::size_t i = 0; i < active.size(); ++i) {
      f.on_counts[i] = static_cast<std::uint32_t>(rng() % 3);
      f.off_counts[i] = static_cast<std::uint32_t>(rng() % 2);
      active[i] = f.on_counts[i] + f.off_counts[i] >= p.threshold;
    }
    REQUIRE(count_components(f, p) == oracle::flood_fill_components(active, w, h, p.connectivity));
    p.min_area = 1;
    p.max_area = w * h;
    CHECK(detect_blobs(f, p).size() == count_components(f, p));
  }
}

TEST_CASE("blob parameter validation") {
  BlobParams p;
  p.threshold = 0;
  CHECK_THROWS_AS(validate(p), ParameterError);
  p = {};
  p.min_area = 50;
  p.max_area = 10;
  CHECK_THROWS_AS(validate(p), ParameterError);
  p = {};
  p.connectivity = 6;
  CHECK_THROWS_AS(validate(p), ParameterError);
}

TEST_CASE("link_tracks") {
  BlobParams p;
  SUBCASE("stationary blob over ten frames") {
    std::vector<std::vector<BoxAnnotation>> frames(10, {box_at(0, kNoTrack, 20, 20)});
    auto r = link_tracks(frames, p);
    REQUIRE(r.tracks.size() == 1);
    CHECK(r.tracks[0].keyframes.size() == 10);
    CHECK(r.tracks[0].track_id == 0);
    for (int i = 0; i < 10; ++i) {
      CHECK(r.tracks[0].keyframes[static_cast<std::size_t>(i)].frame == i);
      CHECK(r.tracks[0].keyframes[static_cast<std::size_t>(i)].track_id == 0);
    }
  }
  SUBCASE("a jump beyond the link distance splits the track") {
    std::vector<std::vector<BoxAnnotation>> frames;
    for (int i = 0; i < 6; ++i) frames.push_back({box_at(0, kNoTrack, 20 + i, 20)});
    for (int i = 0; i < 6; ++i) frames.push_back({box_at(0, kNoTrack, 200 + i, 20)});
    auto r = link_tracks(frames, p);
    REQUIRE(r.tracks.size() == 2);
    CHECK(r.tracks[0].keyframes.front().frame == 0);
    CHECK(r.tracks[1].keyframes.front().frame == 6);
  }
  SUBCASE("short tracks are discarded") {
    std::vector<std::vector<BoxAnnotation>> frames(4, {box_at(0, kNoTrack, 20, 20)});
    auto r = link_tracks(frames, p);
    CHECK(r.tracks.empty());
    CHECK(r.discarded_boxes == 4);
  }
  SUBCASE("crossing targets stay on their nearest continuation") {
    std::vector<std::vector<BoxAnnotation>> frames;
    for (int i = 0; i < 6; ++i) frames.push_back({box_at(0, kNoTrack, 10 + 5 * i, 10), box_at(0, kNoTrack, 100, 10 + 5 * i)});
    for (auto method : {LinkMethod::Greedy, LinkMethod::Hungarian}) {
      p.link_method = method;
      auto r = link_tracks(frames, p);
      REQUIRE(r.tracks.size() == 2);
      for (const auto& t : r.tracks) {
        CHECK(t.keyframes.size() == 6);
        const bool horizontal = t.keyframes.front().y == t.keyframes.back().y;
        for (const auto& b : t.keyframes) CHECK((horizontal ? b.y == 10 : b.x == 100));
      }
    }
  }
}

TEST_CASE("linking conserves boxes") {
  std::mt19937_64 rng(12);
  BlobParams p;
  p.min_track_length = 3;
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::vector<BoxAnnotation>> frames(20);
    std::size_t total = 0;
    for (auto& f : frames) {
      const auto n = rng() % 4;
      for (std::size_t i = 0; i < n; ++i) f.push_back(box_at(0, kNoTrack, static_cast<double>(rng() % 200), static_cast<double>(rng() % 200)));
      total += n;
    }
    p.link_method = trial % 2 ? LinkMethod::Hungarian : LinkMethod::Greedy;
    auto r = link_tracks(frames, p);
    std::size_t in_tracks = 0;
    for (const auto& t : r.tracks) {
      in_tracks += t.keyframes.size();
      for (std::size_t k = 1; k < t.keyframes.size(); ++k) CHECK(t.keyframes[k].frame > t.keyframes[k - 1].frame);
    }
    CHECK(in_tracks + r.discarded_boxes == total);
  }
}

TEST_CASE("interpolate_track") {
  SUBCASE("linear midpoint") {
    Track t{3, {box_at(0, 3, 10, 0), box_at(2, 3, 20, 4)}};
    auto out = interpolate_track(t);
    REQUIRE(out.size() == 3);
    CHECK(out[1].frame == 1);
    CHECK(out[1].x == 15);
    CHECK(out[1].y == 2);
    CHECK(out[1].source == BoxSource::Interp);
    CHECK(out[1].track_id == 3);
    CHECK(out[0] == t.keyframes[0]);
    CHECK(out[2] == t.keyframes[1]);
  }
  SUBCASE("single keyframe") {
    Track t{1, {box_at(5, 1, 1, 1)}};
    CHECK(interpolate_track(t) == t.keyframes);
  }
  SUBCASE("dense track is unchanged") {
    Track t{1, {}};
    for (int i = 0; i < 6; ++i) t.keyframes.push_back(box_at(i, 1, i * 3.0, i * 2.0));
    CHECK(interpolate_track(t) == t.keyframes);
  }
  SUBCASE("range limits the output and nothing is extrapolated") {
    Track t{1, {box_at(10, 1, 0, 0), box_at(20, 1, 10, 0)}};
    auto out = interpolate_track(t, FrameRange{5, 14});
    REQUIRE(out.size() == 5);
    CHECK(out.front().frame == 10);
    CHECK(out.back().frame == 14);
    CHECK(out.back().x == 4);
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(interpolate_track(Track{}), ParameterError);
    Track bad{1, {box_at(3, 1, 0, 0), box_at(3, 1, 0, 0)}};
    CHECK_THROWS_AS(interpolate_track(bad), ParameterError);
  }
}

TEST_CASE("interpolation is exact at keyframes and monotone between them") {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(1, 100);
  for (int trial = 0; trial < 100; ++trial) {
    Track t{0, {}};
    int frame = 0;
    for (int k = 0; k < 4; ++k) {
      t.keyframes.push_back(box_at(frame, 0, u(rng), u(rng), u(rng), u(rng)));
      frame += 1 + static_cast<int>(rng() % 8);
    }
    auto out = interpolate_track(t);
    CHECK(out.size() == static_cast<std::size_t>(t.keyframes.back().frame - t.keyframes.front().frame + 1));
    for (const auto& key : t.keyframes) CHECK(out[static_cast<std::size_t>(key.frame)] == key);
    for (std::size_t k = 0; k + 1 < t.keyframes.size(); ++k) {
      const auto& a = t.keyframes[k];
      const auto& b = t.keyframes[k + 1];
      for (int f = a.frame; f < b.frame; ++f) {
        const auto& cur = out[static_cast<std::size_t>(f)];
        const auto& nxt = out[static_cast<std::size_t>(f + 1)];
        CHECK((b.x >= a.x ? nxt.x >= cur.x : nxt.x <= cur.x));
        CHECK((b.w >= a.w ? nxt.w >= cur.w : nxt.w <= cur.w));
      }
    }
  }
}

TEST_CASE("merge_manual") {
  std::vector<BoxAnnotation> base{box_at(0, 0, 1, 1), box_at(1, 0, 2, 2), box_at(1, 1, 50, 50)};
  SUBCASE("empty edit list") { CHECK(merge_manual(base, {}) == base); }
  SUBCASE("delete everything") {
    std::vector<Edit> edits;
    for (const auto& b : base) edits.push_back({EditKind::Delete, b});
    CHECK(merge_manual(base, edits).empty());
  }
  SUBCASE("add then modify against a hand-built result") {
    std::vector<Edit> edits{{EditKind::Add, box_at(0, 1, 30, 30, 5, 5)},
                            {EditKind::Modify, box_at(1, 0, 3, 3, 12, 12)},
                            {EditKind::Modify, box_at(0, 1, 31, 30, 5, 5)}};
    std::vector<BoxAnnotation> expected{box_at(0, 0, 1, 1), box_at(0, 1, 31, 30, 5, 5, BoxSource::Manual),
                                        box_at(1, 0, 3, 3, 12, 12, BoxSource::Manual), box_at(1, 1, 50, 50)};
    CHECK(merge_manual(base, edits) == expected);
  }
  SUBCASE("unknown target names the edit index") {
    std::vector<Edit> edits{{EditKind::Delete, box_at(0, 0, 1, 1)}, {EditKind::Modify, box_at(9, 0, 1, 1)}};
    try {
      merge_manual(base, edits);
      FAIL("expected UnknownTargetError");
    } catch (const UnknownTargetError& e) {
      CHECK(e.edit_index == 1);
      CHECK(std::string(e.what()).rfind("edit 1:", 0) == 0);
    }
    std::vector<Edit> dup{{EditKind::Add, box_at(0, 0, 5, 5)}};
    CHECK_THROWS_AS(merge_manual(base, dup), UnknownTargetError);
  }
  SUBCASE("repeated identical modifies are idempotent") {
    std::vector<Edit> once{{EditKind::Modify, box_at(1, 1, 40, 40)}};
    std::vector<Edit> twice{once[0], once[0]};
    auto a = merge_manual(base, once);
    CHECK(merge_manual(base, twice) == a);
    CHECK(merge_manual(a, once) == a);
  }
  SUBCASE("non-positive size is rejected") {
    std::vector<Edit> edits{{EditKind::Add, box_at(3, 2, 1, 1, 0, 4)}};
    CHECK_THROWS_AS(merge_manual(base, edits), ParameterError);
  }
}

TEST_CASE("reinterpolate_track replaces only that track's interpolated boxes") {
  std::vector<BoxAnnotation> boxes{box_at(0, 0, 0, 0), box_at(10, 0, 100, 0), box_at(3, 1, 5, 5, 10, 10, BoxSource::Interp)};
  auto once = reinterpolate_track(boxes, 0);
  CHECK(once.size() == 3 + 9);
  auto twice = reinterpolate_track(once, 0);
  CHECK(twice == once);
  CHECK(std::count_if(once.begin(), once.end(), [](const auto& b) { return b.track_id == 1; }) == 1);
  CHECK_THROWS_AS(reinterpolate_track(boxes, 7), NotFoundError);
  CHECK_THROWS_AS(reinterpolate_track(boxes, kNoTrack), ParameterError);
}

TEST_CASE("moving blob produces one track") {
  std::vector<Event> evs;
  AccumulationConfig cfg(30);
  for (std::uint64_t f = 0; f < 12; ++f) {
    const int x0 = 10 + static_cast<int>(f) * 3;
    for (int rep = 0; rep < 2; ++rep)
      for (int y = 20; y < 26; ++y)
        for (int x = x0; x < x0 + 6; ++x)
          evs.push_back({f * cfg.interval_us() + 100, static_cast<std::uint16_t>(x), static_cast<std::uint16_t>(y),
                         Polarity::On});
  }
  auto s = make_stream(96, 64, evs);
  auto boxes = annotate_stream(s, cfg, 12 * static_cast<std::int64_t>(cfg.interval_us()), BlobParams{});
  REQUIRE(boxes.size() == 12);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    CHECK(boxes[i].track_id == 0);
    CHECK(boxes[i].frame == static_cast<int>(i));
    CHECK(boxes[i].x == 10 + 3.0 * static_cast<double>(i));
    CHECK(boxes[i].w == 6);
  }
}

TEST_CASE("string conversions") {
  for (auto s : {BoxSource::Auto, BoxSource::Manual, BoxSource::Interp}) CHECK(parse_box_source(to_string(s)) == s);
  for (auto k : {EditKind::Modify, EditKind::Add, EditKind::Delete}) CHECK(parse_edit_kind(to_string(k)) == k);
  CHECK_THROWS_AS(parse_box_source("guess"), SchemaError);
  CHECK_THROWS_AS(parse_edit_kind("move"), SchemaError);
}
