#include <doctest.h>

#include <atomic>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "fixtures.hpp"
#include "nerdd/errors.hpp"
#include "nerdd/review_service.hpp"

using namespace nerdd;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> base64_decode(const std::string& s) {
  static const std::string alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::vector<std::uint8_t> out;
  std::uint32_t acc = 0;
  int bits = 0;
  for (char c : s) {
    if (c == '=') break;
    const auto pos = alphabet.find(c);
    REQUIRE(pos != std::string::npos);
    acc = (acc << 6) | static_cast<std::uint32_t>(pos);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xff));
    }
  }
  return out;
}

Edit make_edit(EditKind kind, int frame, int track, double x, double y = 10, double w = 6, double h = 6) {
  Edit e;
  e.kind = kind;
  e.box = {frame, track, x, y, w, h, BoxSource::Manual};
  return e;
}

std::size_t count_on_frame(const AnnotationFile& ann, int frame) {
  std::size_t n = 0;
  for (const auto& b : ann.boxes) n += b.frame == frame;
  return n;
}

}  // namespace

TEST_CASE("service with no videos") {
  ReviewService svc({});
  CHECK(svc.list_videos().empty());
  CHECK_THROWS_AS(svc.get_frame_pair("x", 0), NotFoundError);
  CHECK_THROWS_AS(svc.annotations("x"), NotFoundError);
}

TEST_CASE("listing agrees with dataset stats and tracks the dirty flag") {
  fixture::TempDir dir("svc_list");
  auto a = fixture::write_recording(dir.path(), "a");
  auto b = fixture::write_recording(dir.path(), "b", 9);
  std::vector<RecordingManifest> ms{a.manifest, b.manifest};
  const auto stats = dataset_stats(ms, {{"a", a.annotations}, {"b", b.annotations}});

  ReviewService svc(ms);
  auto list = svc.list_videos();
  REQUIRE(list.size() == 2);
  std::uint64_t frames = 0, boxes = 0;
  for (const auto& v : list) {
    frames += v.frame_count;
    boxes += v.box_count;
    CHECK_FALSE(v.dirty);
  }
  CHECK(frames == stats.frames_total);
  CHECK(boxes == stats.box_count);
  CHECK(fs::exists(ReviewService::auto_path(a.manifest.annotation_path)));

  svc.post_edit("b", make_edit(EditKind::Delete, 0, 0, 0));
  list = svc.list_videos();
  CHECK_FALSE(list[0].dirty);
  CHECK(list[1].dirty);
  CHECK(list[1].box_count == b.annotations.boxes.size() - 1);
}

TEST_CASE("frame pairs") {
  fixture::TempDir dir("svc_frames");
  auto rec = fixture::write_recording(dir.path(), "v");
  ReviewService svc({rec.manifest});

  auto pair = svc.get_frame_pair("v", 3);
  const Image rgb = decode_png(pair.rgb_png);
  const Image ev = decode_png(pair.event_png);
  CHECK(rgb.width == 64);
  CHECK(rgb.height == 48);
  CHECK(ev.width == 64);
  CHECK(ev.height == 48);
  REQUIRE(pair.boxes.size() == 1);
  CHECK(pair.boxes[0].x == 10);
  // the target square is dark in RGB and active in the event view
  CHECK(rgb.at(12, 12, 0) == 20);
  CHECK(rgb.at(40, 40, 0) == 200);
  CHECK(ev.at(12, 12, 0) != ev.at(40, 40, 0));

  CHECK(svc.get_frame_pair("v", 2).boxes.empty());
  CHECK_THROWS_AS(svc.get_frame_pair("v", 12), NotFoundError);
  CHECK_THROWS_AS(svc.get_frame_pair("v", -1), NotFoundError);
  CHECK_THROWS_AS(svc.get_frame_pair("w", 0), NotFoundError);
}

TEST_CASE("rendered frames are cached up to capacity") {
  fixture::TempDir dir("svc_cache");
  auto rec = fixture::write_recording(dir.path(), "v");
  ReviewService svc({rec.manifest}, ServiceOptions{4});
  auto first = svc.get_frame_pair("v", 0);
  for (int f = 0; f < 10; ++f) {
    svc.get_frame_pair("v", f);
    CHECK(svc.cached_frames() <= 4);
  }
  CHECK(svc.cached_frames() == 4);
  CHECK(svc.get_frame_pair("v", 0).rgb_png == first.rgb_png);

  ReviewService uncached({rec.manifest}, ServiceOptions{0});
  uncached.get_frame_pair("v", 1);
  CHECK(uncached.cached_frames() == 0);
}

TEST_CASE("edits persist as a log whose replay equals the annotation file") {
  fixture::TempDir dir("svc_edits");
  auto rec = fixture::write_recording(dir.path(), "v");
  const std::string ann = rec.manifest.annotation_path;
  {
    ReviewService svc({rec.manifest});
    auto after = svc.post_edit("v", make_edit(EditKind::Delete, 4, 0, 0));
    CHECK(after.empty());
    CHECK(svc.annotations("v").boxes.size() == rec.annotations.boxes.size() - 1);

    after = svc.post_edit("v", make_edit(EditKind::Add, 2, 0, 8.5));
    REQUIRE(after.size() == 1);
    CHECK(after[0].source == BoxSource::Manual);
    CHECK(after[0].x == 8.5);

    after = svc.post_edit("v", make_edit(EditKind::Modify, 0, 0, 5, 11));
    CHECK(after[0].y == 11);
    CHECK(after[0].source == BoxSource::Manual);

    SUBCASE("invalid targets leave the log untouched") {
      const std::string before = read_text_file(ReviewService::log_path(ann));
      CHECK_THROWS_AS(svc.post_edit("v", make_edit(EditKind::Modify, 5, 9, 0)), UnknownTargetError);
      CHECK_THROWS_AS(svc.post_edit("v", make_edit(EditKind::Delete, 2, 3, 0)), UnknownTargetError);
      CHECK_THROWS_AS(svc.post_edit("v", make_edit(EditKind::Add, 40, 0, 0)), UnknownTargetError);
      CHECK_THROWS_AS(svc.post_edit("w", make_edit(EditKind::Add, 1, 0, 0)), NotFoundError);
      CHECK(read_text_file(ReviewService::log_path(ann)) == before);
    }
  }
  const auto base = load_annotations(ReviewService::auto_path(ann));
  CHECK(base.boxes == rec.annotations.boxes);
  const auto log = load_edit_log(ReviewService::log_path(ann));
  CHECK(log.size() == 3);
  AnnotationFile replayed = base;
  replayed.boxes = replay_log(base.boxes, log);
  CHECK(annotations_to_json(replayed) == read_text_file(ann));

  // a restarted service picks up the same state
  ReviewService again({rec.manifest});
  CHECK(again.annotations("v").boxes == replayed.boxes);
  CHECK(again.list_videos()[0].dirty);
}

TEST_CASE("interpolation through the service") {
  fixture::TempDir dir("svc_interp");
  auto rec = fixture::write_recording(dir.path(), "v", 12);
  rec.annotations.boxes = {{0, 0, 4, 10, 6, 6, BoxSource::Auto}, {10, 0, 24, 10, 6, 6, BoxSource::Auto},
                           {3, 5, 0, 0, 4, 4, BoxSource::Auto}};
  save_annotations(rec.manifest.annotation_path, rec.annotations);
  ReviewService svc({rec.manifest});

  auto track = svc.run_interpolation("v", 0);
  REQUIRE(track.size() == 11);
  int interp = 0;
  for (const auto& b : track) {
    interp += b.source == BoxSource::Interp;
    CHECK(b.x == doctest::Approx(4 + 2.0 * b.frame));
  }
  CHECK(interp == 9);
  CHECK(svc.run_interpolation("v", 0) == track);
  CHECK(svc.run_interpolation("v", 5).size() == 1);
  CHECK(count_on_frame(svc.annotations("v"), 3) == 2);
  CHECK_THROWS_AS(svc.run_interpolation("w", 0), NotFoundError);

  const auto log = load_edit_log(ReviewService::log_path(rec.manifest.annotation_path));
  REQUIRE(log.size() == 3);
  CHECK(log[0].kind == LogEntry::Kind::Interpolate);
  CHECK(log[0].track_id == 0);
}

TEST_CASE("json views") {
  std::vector<BoxAnnotation> boxes{{1, 2, 3.5, 4, 5, 6, BoxSource::Interp}};
  auto j = json::parse(boxes_to_json(boxes));
  REQUIRE(j.size() == 1);
  CHECK(j[0]["frame"] == 1);
  CHECK(j[0]["track_id"] == 2);
  CHECK(j[0]["x"] == 3.5);
  CHECK(j[0]["source"] == "interp");

  auto s = json::parse(summaries_to_json({{"a", 3, 2, true}}));
  CHECK(s[0]["id"] == "a");
  CHECK(s[0]["frame_count"] == 3);
  CHECK(s[0]["box_count"] == 2);
  CHECK(s[0]["dirty"] == true);
}

TEST_CASE("http api") {
  fixture::TempDir dir("svc_http");
  auto a = fixture::write_recording(dir.path(), "a");
  auto b = fixture::write_recording(dir.path(), "b");
  ReviewService svc({a.manifest, b.manifest});
  ReviewHttpServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  REQUIRE(port > 0);
  server.start();
  httplib::Client cli("127.0.0.1", port);

  SUBCASE("listing") {
    auto res = cli.Get("/videos");
    REQUIRE(res);
    CHECK(res->status == 200);
    auto j = json::parse(res->body);
    REQUIRE(j.size() == 2);
    CHECK(j[0]["id"] == "a");
    CHECK(j[1]["frame_count"] == 12);
  }

  SUBCASE("frames") {
    auto res = cli.Get("/videos/a/frames/4");
    REQUIRE(res);
    CHECK(res->status == 200);
    auto j = json::parse(res->body);
    CHECK(j["video_id"] == "a");
    CHECK(j["frame"] == 4);
    CHECK(j["boxes"].size() == 1);
    const Image rgb = decode_png(base64_decode(j["rgb_png_b64"]));
    const Image ev = decode_png(base64_decode(j["event_png_b64"]));
    CHECK(rgb.width == 64);
    CHECK(ev.height == 48);

    auto missing = cli.Get("/videos/a/frames/99");
    REQUIRE(missing);
    CHECK(missing->status == 404);
    CHECK(json::parse(missing->body)["kind"] == "not_found");
    CHECK(cli.Get("/videos/zz/frames/0")->status == 404);
  }

  SUBCASE("edits and interpolation") {
    auto res = cli.Post("/videos/a/edits",
                        R"({"kind":"modify","frame":1,"track_id":0,"x":7,"y":9,"w":6,"h":6})", "application/json");
    REQUIRE(res);
    CHECK(res->status == 200);
    auto j = json::parse(res->body);
    CHECK(j["frame"] == 1);
    CHECK(j["boxes"][0]["x"] == 7);
    CHECK(j["boxes"][0]["source"] == "manual");

    auto bad_target = cli.Post("/videos/a/edits",
                               R"({"kind":"delete","frame":1,"track_id":4,"x":0,"y":0,"w":1,"h":1})",
                               "application/json");
    CHECK(bad_target->status == 404);
    CHECK(json::parse(bad_target->body)["kind"] == "unknown_target");
    auto bad_schema = cli.Post("/videos/a/edits", R"({"kind":"resize"})", "application/json");
    CHECK(bad_schema->status == 400);
    CHECK(cli.Post("/videos/a/edits", "not json", "application/json")->status == 400);

    auto interp = cli.Post("/videos/a/tracks/0/interpolate", "", "application/json");
    REQUIRE(interp);
    CHECK(interp->status == 200);
    auto ij = json::parse(interp->body);
    CHECK(ij["track_id"] == 0);
    CHECK(ij["boxes"].size() == 11);

    auto ann = json::parse(cli.Get("/videos/a/annotations")->body);
    CHECK(ann["video_id"] == "a");
    CHECK(ann["boxes"].size() == 11);
    CHECK(read_text_file(a.manifest.annotation_path) == annotations_to_json(svc.annotations("a")));
  }

  SUBCASE("concurrent edits on two videos") {
    std::atomic<int> failures{0};
    auto worker = [&](const std::string& id) {
      httplib::Client c("127.0.0.1", port);
      for (int f : {0, 1, 3, 4, 6, 7}) {
        json body{{"kind", "modify"}, {"frame", f}, {"track_id", 0}, {"x", 1.0 + f}, {"y", 2}, {"w", 6}, {"h", 6}};
        auto r = c.Post("/videos/" + id + "/edits", body.dump(), "application/json");
        if (!r || r->status != 200) ++failures;
      }
    };
    std::thread ta(worker, "a"), tb(worker, "b");
    ta.join();
    tb.join();
    CHECK(failures == 0);
    for (const auto* rec : {&a, &b}) {
      const auto& m = rec->manifest;
      CHECK(load_edit_log(ReviewService::log_path(m.annotation_path)).size() == 6);
      const auto saved = load_annotations(m.annotation_path);
      int manual = 0;
      for (const auto& box : saved.boxes) manual += box.source == BoxSource::Manual && box.x == 1.0 + box.frame;
      CHECK(manual == 6);
    }
  }

  server.stop();
}
