#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>

#include <CLI11.hpp>

#include "nerdd/annotator.hpp"
#include "nerdd/dataset_io.hpp"
#include "nerdd/errors.hpp"
#include "nerdd/evaluation.hpp"
#include "nerdd/event_core.hpp"
#include "nerdd/fusion.hpp"
#include "nerdd/gradcheck.hpp"
#include "nerdd/registration.hpp"
#include "nerdd/review_service.hpp"
#include "nerdd/training.hpp"

namespace fs = std::filesystem;
using namespace nerdd;

namespace {

EventStream load_events(const std::string& path, int width, int height) {
  if (fs::path(path).extension() == ".csv") {
    if (width <= 0 || height <= 0) throw ParameterError("CSV input needs --width and --height");
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    return read_event_csv(in, static_cast<std::uint16_t>(width), static_cast<std::uint16_t>(height));
  }
  return read_event_file(path);
}

std::int64_t default_duration(const EventStream& s) {
  return s.events.empty() ? 0 : static_cast<std::int64_t>(s.events.back().t) + 1;
}

struct ModelFlags {
  std::string strategy = "pool";
  std::string cutoff = "encoder";
  int queries = 5;
  int d = 64;
  int heads = 1;
  int patch = 16;
  int encoder_layers = 1;
  int decoder_layers = 1;
  bool layer_norm = false;

  void attach(CLI::App* app) {
    app->add_option("--strategy", strategy, "single_event|single_rgb|pool|asym_rgb_to_ev|asym_ev_to_rgb|symmetric")
        ->capture_default_str();
    app->add_option("--cutoff", cutoff, "backbone|encoder|decoder")->capture_default_str();
    app->add_option("--queries", queries, "object queries")->capture_default_str();
    app->add_option("--d", d, "model width")->capture_default_str();
    app->add_option("--heads", heads, "attention heads")->capture_default_str();
    app->add_option("--patch", patch, "tokenizer patch size")->capture_default_str();
    app->add_option("--encoder-layers", encoder_layers)->capture_default_str();
    app->add_option("--decoder-layers", decoder_layers)->capture_default_str();
    app->add_flag("--layer-norm", layer_norm, "post-attention layer normalization");
  }

  fusion::FusionConfig config() const {
    fusion::FusionConfig cfg;
    cfg.strategy = fusion::parse_strategy(strategy);
    cfg.cutoff = fusion::parse_cutoff(cutoff);
    cfg.n_queries = queries;
    cfg.d = d;
    cfg.heads = heads;
    cfg.patch = patch;
    cfg.encoder_layers = encoder_layers;
    cfg.decoder_layers = decoder_layers;
    cfg.layer_norm = layer_norm;
    fusion::validate(cfg);
    return cfg;
  }
};

std::map<std::string, AnnotationFile> load_annotation_dir(const std::string& dir) {
  std::map<std::string, AnnotationFile> out;
  if (!fs::is_directory(dir)) throw IoError("annotation directory not found: " + dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (e.path().extension() != ".json" || name.ends_with(".auto.json")) continue;
    files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    AnnotationFile a = load_annotations(f.string());
    out[a.video_id] = std::move(a);
  }
  return out;
}

std::map<std::string, AnnotationFile> load_manifest_annotations(const std::vector<RecordingManifest>& ms) {
  std::map<std::string, AnnotationFile> out;
  for (const auto& m : ms) {
    if (fs::exists(m.annotation_path)) out[m.video_id] = load_annotations(m.annotation_path);
  }
  return out;
}

std::vector<std::string> video_ids(const std::vector<RecordingManifest>& ms) {
  std::vector<std::string> ids;
  for (const auto& m : ms) ids.push_back(m.video_id);
  return ids;
}

std::vector<Image> load_rgb_frames(const RecordingManifest& m, std::size_t limit) {
  std::vector<Image> frames;
  for (std::size_t i = 0; i < limit; ++i) {
    const std::string p = rgb_frame_path(m, static_cast<int>(i));
    if (!fs::exists(p)) break;
    frames.push_back(read_png(p));
  }
  return frames;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Event + RGB drone detection toolkit"};
  app.require_subcommand(1);

  // accumulate
  auto* acc = app.add_subcommand("accumulate", "Render event pseudo-frames");
  std::string acc_events, acc_out;
  double acc_fps = 30;
  std::int64_t acc_duration = -1;
  int acc_width = 0, acc_height = 0;
  acc->add_option("--events", acc_events, "NEV1 or CSV event file")->required();
  acc->add_option("--fps", acc_fps, "frame rate")->capture_default_str();
  acc->add_option("--out", acc_out, "output directory")->required();
  acc->add_option("--duration-us", acc_duration, "recording length (default: last event + 1)");
  acc->add_option("--width", acc_width, "sensor width for CSV input");
  acc->add_option("--height", acc_height, "sensor height for CSV input");

  // stats
  auto* st = app.add_subcommand("stats", "Event stream or dataset statistics");
  std::string st_events, st_manifest, st_ann;
  st->add_option("--events", st_events, "event file");
  st->add_option("--manifest", st_manifest, "dataset manifest");
  st->add_option("--ann", st_ann, "annotation directory (default: paths in the manifest)");

  // sync
  auto* sy = app.add_subcommand("sync", "Show or estimate the event/RGB clock offset");
  std::string sy_manifest, sy_video;
  bool sy_estimate = false;
  int sy_max_lag = -1;
  sy->add_option("--manifest", sy_manifest)->required();
  sy->add_option("--video", sy_video, "restrict to one recording");
  sy->add_flag("--estimate-offset", sy_estimate, "cross-correlate activity and update t_offset_us in place");
  sy->add_option("--max-lag", sy_max_lag, "largest lag in frames (default n/4)");

  // annotate
  auto* an = app.add_subcommand("annotate", "Automatic blob detection and tracking");
  std::string an_events, an_out, an_video;
  double an_fps = 30;
  std::int64_t an_duration = -1;
  int an_width = 0, an_height = 0;
  BlobParams blob;
  bool an_hungarian = false;
  an->add_option("--events", an_events)->required();
  an->add_option("--fps", an_fps)->capture_default_str();
  an->add_option("--out", an_out, "annotation JSON")->required();
  an->add_option("--video-id", an_video, "default: events file stem");
  an->add_option("--duration-us", an_duration);
  an->add_option("--width", an_width);
  an->add_option("--height", an_height);
  an->add_option("--threshold", blob.threshold)->capture_default_str();
  an->add_option("--connectivity", blob.connectivity)->capture_default_str();
  an->add_option("--min-area", blob.min_area)->capture_default_str();
  an->add_option("--max-area", blob.max_area)->capture_default_str();
  an->add_option("--link-distance", blob.max_link_distance)->capture_default_str();
  an->add_option("--min-track-length", blob.min_track_length)->capture_default_str();
  an->add_flag("--hungarian", an_hungarian, "optimal frame-to-frame linking");

  // interpolate
  auto* ip = app.add_subcommand("interpolate", "Fill track gaps by linear interpolation");
  std::string ip_ann;
  std::vector<int> ip_tracks;
  ip->add_option("--ann", ip_ann)->required();
  ip->add_option("--track", ip_tracks, "track ids (default: all)");

  // grad-check
  auto* gc = app.add_subcommand("grad-check", "Analytic vs finite-difference gradients");
  std::string gc_op = "all";
  std::uint64_t gc_seed = 0;
  gc->add_option("--op", gc_op, "operation name or 'all'")->capture_default_str();
  gc->add_option("--seed", gc_seed)->capture_default_str();

  // train-toy
  auto* tt = app.add_subcommand("train-toy", "Overfit the synthetic toy set");
  ModelFlags tt_model;
  tt_model.attach(tt);
  TrainOptions tt_opt;
  std::uint64_t tt_seed = 0;
  int tt_log_every = 25;
  std::string tt_weights;
  tt->add_option("--steps", tt_opt.steps)->capture_default_str();
  tt->add_option("--lr", tt_opt.learning_rate)->capture_default_str();
  tt->add_option("--seed", tt_seed)->capture_default_str();
  tt->add_option("--log-every", tt_log_every)->capture_default_str();
  tt->add_option("--save-weights", tt_weights, "write trained parameters");

  // detect
  auto* de = app.add_subcommand("detect", "Run the detector over a dataset");
  ModelFlags de_model;
  de_model.attach(de);
  std::string de_manifest, de_weights, de_out, de_video;
  int de_max_frames = -1;
  std::uint64_t de_seed = 0;
  de->add_option("--manifest", de_manifest)->required();
  de->add_option("--weights", de_weights, "parameters from train-toy --save-weights");
  de->add_option("--seed", de_seed, "initialization seed when no weights are given");
  de->add_option("--out", de_out, "detections JSON (default: stdout)");
  de->add_option("--video", de_video);
  de->add_option("--max-frames", de_max_frames);

  // eval
  auto* ev = app.add_subcommand("eval", "COCO-style AP of detections");
  std::string ev_dets, ev_ann, ev_manifest, ev_split = "all";
  std::uint64_t ev_seed = 0;
  double ev_ratio = 0.8;
  ev->add_option("--dets", ev_dets)->required();
  ev->add_option("--ann", ev_ann, "annotation directory")->required();
  ev->add_option("--manifest", ev_manifest, "needed for --split train|test");
  ev->add_option("--split", ev_split, "all|train|test")->capture_default_str();
  ev->add_option("--seed", ev_seed)->capture_default_str();
  ev->add_option("--ratio", ev_ratio)->capture_default_str();

  // split
  auto* sp = app.add_subcommand("split", "Video-wise train/test split");
  std::string sp_manifest;
  std::uint64_t sp_seed = 0;
  double sp_ratio = 0.8;
  sp->add_option("--manifest", sp_manifest)->required();
  sp->add_option("--seed", sp_seed)->capture_default_str();
  sp->add_option("--ratio", sp_ratio)->capture_default_str();

  // serve
  auto* sv = app.add_subcommand("serve", "Annotation review HTTP service");
  std::string sv_manifest, sv_host = "127.0.0.1", sv_static;
  int sv_port = 8080;
  std::size_t sv_cache = 512;
  sv->add_option("--manifest", sv_manifest)->required();
  sv->add_option("--port", sv_port)->capture_default_str();
  sv->add_option("--host", sv_host)->capture_default_str();
  sv->add_option("--static", sv_static, "directory of UI assets");
  sv->add_option("--cache", sv_cache, "rendered frame pairs kept in memory")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (acc->parsed()) {
      const EventStream s = load_events(acc_events, acc_width, acc_height);
      const AccumulationConfig cfg = accumulation_for_fps(acc_fps);
      const std::int64_t duration = acc_duration >= 0 ? acc_duration : default_duration(s);
      fs::create_directories(acc_out);
      std::ofstream counts(fs::path(acc_out) / "counts.csv");
      counts << "frame,on,off,total\n";
      std::uint64_t frames = 0;
      const DropReport dropped = accumulate_each(s, cfg, duration, [&](const CountFrame& f) {
        char name[32];
        std::snprintf(name, sizeof name, "%06llu.png", static_cast<unsigned long long>(f.index));
        write_png((fs::path(acc_out) / name).string(), render_frame(f));
        std::uint64_t on = 0, off = 0;
        for (auto c : f.on_counts) on += c;
        for (auto c : f.off_counts) off += c;
        counts << f.index << ',' << on << ',' << off << ',' << on + off << '\n';
        ++frames;
      });
      std::printf("frames %llu  interval_us %llu  dropped %llu (after duration %llu, past last frame %llu)\n",
                  static_cast<unsigned long long>(frames), static_cast<unsigned long long>(cfg.interval_us()),
                  static_cast<unsigned long long>(dropped.total()),
                  static_cast<unsigned long long>(dropped.after_duration),
                  static_cast<unsigned long long>(dropped.past_last_frame));
    } else if (st->parsed()) {
      if (!st_events.empty()) {
        const StreamStats s = stream_stats(read_event_file(st_events));
        std::printf("{\"event_count\": %llu, \"duration_us\": %llu, \"on\": %llu, \"off\": %llu, \"mean_rate_hz\": %.6g}\n",
                    static_cast<unsigned long long>(s.event_count), static_cast<unsigned long long>(s.duration_us),
                    static_cast<unsigned long long>(s.on_count), static_cast<unsigned long long>(s.off_count),
                    s.mean_rate_hz);
      } else if (!st_manifest.empty()) {
        const auto ms = load_manifest(st_manifest, {.check_paths = false});
        const auto anns = st_ann.empty() ? load_manifest_annotations(ms) : load_annotation_dir(st_ann);
        std::cout << stats_to_json(dataset_stats(ms, anns)) << '\n';
      } else {
        throw ParameterError("stats needs --events or --manifest");
      }
    } else if (sy->parsed()) {
      const auto ms = load_manifest(sy_manifest);
      for (const auto& m : ms) {
        if (!sy_video.empty() && m.video_id != sy_video) continue;
        if (!sy_estimate) {
          std::printf("%s t_offset_us %lld\n", m.video_id.c_str(), static_cast<long long>(m.registration.t_offset_us));
          continue;
        }
        const EventStream s = read_event_file(m.events_path);
        const AccumulationConfig cfg = m.accumulation();
        const auto frames = load_rgb_frames(m, static_cast<std::size_t>(-1));
        const auto rgb_energy = frame_difference_energy(frames);
        const auto duration = static_cast<std::int64_t>(frames.size() * cfg.interval_us());
        auto ev_activity = event_activity(s, cfg, std::max<std::int64_t>(duration, default_duration(s)));
        // the first RGB entry is a placeholder 0; difference the event side the same way
        std::vector<double> ev_diff(ev_activity.size(), 0.0);
        for (std::size_t i = 1; i < ev_activity.size(); ++i) ev_diff[i] = ev_activity[i];
        const std::size_t n = std::min(ev_diff.size(), rgb_energy.size());
        const auto est = estimate_temporal_offset(std::span<const double>(ev_diff.data(), n),
                                                  std::span<const double>(rgb_energy.data(), n), cfg, sy_max_lag);
        update_manifest_offset(sy_manifest, m.video_id, est.t_offset_us);
        std::printf("%s lag_frames %d t_offset_us %lld score %.6f\n", m.video_id.c_str(), est.lag_frames,
                    static_cast<long long>(est.t_offset_us), est.score);
      }
    } else if (an->parsed()) {
      const EventStream s = load_events(an_events, an_width, an_height);
      blob.link_method = an_hungarian ? LinkMethod::Hungarian : LinkMethod::Greedy;
      const std::int64_t duration = an_duration >= 0 ? an_duration : default_duration(s);
      AnnotationFile out;
      out.video_id = an_video.empty() ? fs::path(an_events).stem().string() : an_video;
      out.fps = an_fps;
      out.width = s.width;
      out.height = s.height;
      out.boxes = annotate_stream(s, accumulation_for_fps(an_fps), duration, blob);
      save_annotations(an_out, out);
      std::set<int> tracks;
      for (const auto& b : out.boxes) tracks.insert(b.track_id);
      std::printf("%zu boxes in %zu tracks -> %s\n", out.boxes.size(), tracks.size(), an_out.c_str());
    } else if (ip->parsed()) {
      AnnotationFile ann = load_annotations(ip_ann);
      std::vector<int> ids = ip_tracks;
      if (ids.empty()) {
        for (const auto& t : tracks_from_boxes(ann.boxes)) ids.push_back(t.track_id);
      }
      for (int id : ids) ann.boxes = reinterpolate_track(std::move(ann.boxes), id);
      save_annotations(ip_ann, ann);
      const auto interp = std::count_if(ann.boxes.begin(), ann.boxes.end(),
                                        [](const BoxAnnotation& b) { return b.source == BoxSource::Interp; });
      std::printf("%zu tracks, %ld interpolated boxes\n", ids.size(), static_cast<long>(interp));
    } else if (gc->parsed()) {
      std::vector<std::string> ops;
      if (gc_op == "all") {
        ops = fusion::grad_check_ops();
      } else {
        ops.push_back(gc_op);
      }
      int failures = 0;
      for (const auto& op : ops) {
        const auto r = fusion::grad_check(op, gc_seed);
        const bool composite = op.rfind("forward_detect", 0) == 0;
        const double tol = composite ? 1e-3 : 1e-4;
        const bool ok = r.max_rel_error < tol;
        failures += !ok;
        std::printf("%-24s max_rel_error %.3e  (tol %.0e, %zu coords, %zu reduced steps, %zu skipped)  %s\n",
                    op.c_str(), r.max_rel_error, tol, r.coordinates, r.reduced_steps, r.skipped,
                    ok ? "ok" : "FAIL");
      }
      return failures == 0 ? 0 : 1;
    } else if (tt->parsed()) {
      const auto cfg = tt_model.config();
      const auto data = make_toy_dataset();
      const auto result = train_toy(cfg, data, tt_opt, tt_seed, [&](int step, double loss) {
        if (tt_log_every > 0 && (step % tt_log_every == 0 || step == tt_opt.steps)) {
          std::printf("step %4d  loss %.6f\n", step, loss);
        }
      });
      const double reduction = 1.0 - result.final_loss() / result.initial_loss();
      std::printf("loss %.6f -> %.6f (%.1f%% reduction)\n", result.initial_loss(), result.final_loss(),
                  100.0 * reduction);
      std::printf("train AP50 %.4f  AP75 %.4f  AP50:95 %.4f\n", result.report.ap50, result.report.ap75,
                  result.report.ap50_95);
      if (!tt_weights.empty()) fusion::save_params(tt_weights, result.params);
    } else if (de->parsed()) {
      auto cfg = de_model.config();
      const auto ms = load_manifest(de_manifest);
      fusion::ParamStore ps = fusion::init_params(cfg, de_seed);
      if (!de_weights.empty()) fusion::load_params(de_weights, ps);
      std::vector<ScoredBox> dets;
      for (const auto& m : ms) {
        if (!de_video.empty() && m.video_id != de_video) continue;
        const EventStream s = apply_offset(read_event_file(m.events_path), m.registration.t_offset_us).stream;
        const AccumulationConfig acfg = m.accumulation();
        std::uint64_t frames = m.num_frames > 0 ? static_cast<std::uint64_t>(m.num_frames)
                                                : event_file_frame_count(m.events_path, acfg);
        if (de_max_frames >= 0) frames = std::min<std::uint64_t>(frames, static_cast<std::uint64_t>(de_max_frames));
        const std::uint64_t dt = acfg.interval_us();
        for (std::uint64_t f = 0; f < frames; ++f) {
          const CountFrame cf = accumulate_window(s, f * dt, (f + 1) * dt, f);
          const std::string rgb_path = rgb_frame_path(m, static_cast<int>(f));
          const Image rgb = fs::exists(rgb_path) ? register_rgb_frame(read_png(rgb_path), m)
                                                 : Image(m.width, m.height, 3);
          const auto det = fusion::forward_detect(event_input(cf), rgb_input(rgb), cfg, ps);
          const auto boxes = to_scored_boxes(det, m.video_id, static_cast<int>(f), m.width, m.height);
          dets.insert(dets.end(), boxes.begin(), boxes.end());
        }
      }
      const std::string text = detections_to_json(dets);
      if (de_out.empty()) {
        std::cout << text << '\n';
      } else {
        write_text_file(de_out, text + "\n");
        std::printf("%zu detections -> %s\n", dets.size(), de_out.c_str());
      }
    } else if (ev->parsed()) {
      const auto dets_all = parse_detections_json(read_text_file(ev_dets));
      const auto anns = load_annotation_dir(ev_ann);
      std::set<std::string> keep;
      if (ev_split == "all") {
        for (const auto& [id, a] : anns) keep.insert(id);
      } else {
        if (ev_manifest.empty()) throw ParameterError("--split train|test needs --manifest");
        const auto spec = video_split(video_ids(load_manifest(ev_manifest, {.check_paths = false})), ev_ratio, ev_seed);
        if (ev_split == "train") {
          keep.insert(spec.train.begin(), spec.train.end());
        } else if (ev_split == "test") {
          keep.insert(spec.test.begin(), spec.test.end());
        } else {
          throw ParameterError("--split must be all, train or test");
        }
      }
      std::vector<GroundTruthBox> gts;
      for (const auto& [id, a] : anns) {
        if (!keep.count(id)) continue;
        for (const auto& b : a.boxes) gts.push_back({id, b.frame, b.box()});
      }
      std::vector<ScoredBox> dets;
      std::copy_if(dets_all.begin(), dets_all.end(), std::back_inserter(dets),
                   [&](const ScoredBox& d) { return keep.count(d.video_id) > 0; });
      const EvalReport report = coco_map(dets, gts);
      std::cout << report_to_table(report) << report_to_json(report) << '\n';
    } else if (sp->parsed()) {
      const auto spec = video_split(video_ids(load_manifest(sp_manifest, {.check_paths = false})), sp_ratio, sp_seed);
      std::printf("{\"seed\": %llu, \"ratio\": %g, \"train\": [", static_cast<unsigned long long>(spec.seed),
                  spec.ratio);
      for (std::size_t i = 0; i < spec.train.size(); ++i) std::printf("%s\"%s\"", i ? ", " : "", spec.train[i].c_str());
      std::printf("], \"test\": [");
      for (std::size_t i = 0; i < spec.test.size(); ++i) std::printf("%s\"%s\"", i ? ", " : "", spec.test[i].c_str());
      std::printf("]}\n");
      std::fprintf(stderr, "train %zu / test %zu\n", spec.train.size(), spec.test.size());
    } else if (sv->parsed()) {
      ReviewService service(load_manifest(sv_manifest), ServiceOptions{sv_cache});
      ReviewHttpServer server(service, sv_static);
      const int port = server.bind(sv_host, sv_port);
      std::fprintf(stderr, "listening on http://%s:%d\n", sv_host.c_str(), port);
      server.listen();
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
  return 0;
}
