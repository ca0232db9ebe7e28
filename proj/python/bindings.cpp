#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "nerdd/annotator.hpp"
#include "nerdd/dataset_io.hpp"
#include "nerdd/errors.hpp"
#include "nerdd/evaluation.hpp"
#include "nerdd/event_core.hpp"
#include "nerdd/fusion.hpp"
#include "nerdd/geometry.hpp"
#include "nerdd/gradcheck.hpp"
#include "nerdd/matching.hpp"
#include "nerdd/registration.hpp"
#include "nerdd/training.hpp"

namespace py = pybind11;
using namespace nerdd;

namespace {

using U64Array = py::array_t<std::uint64_t, py::array::c_style | py::array::forcecast>;
using U16Array = py::array_t<std::uint16_t, py::array::c_style | py::array::forcecast>;
using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

EventStream stream_from_arrays(int width, int height, const U64Array& t, const U16Array& x, const U16Array& y,
                               const U8Array& p) {
  const auto n = static_cast<std::size_t>(t.size());
  if (static_cast<std::size_t>(x.size()) != n || static_cast<std::size_t>(y.size()) != n ||
      static_cast<std::size_t>(p.size()) != n) {
    throw ParameterError("t, x, y and p must have the same length");
  }
  std::vector<Event> evs(n);
  auto tt = t.unchecked<1>();
  auto xx = x.unchecked<1>();
  auto yy = y.unchecked<1>();
  auto pp = p.unchecked<1>();
  for (std::size_t i = 0; i < n; ++i) {
    const auto k = static_cast<py::ssize_t>(i);
    if (pp(k) > 1) throw ParameterError("polarity must be 0 or 1");
    evs[i] = {tt(k), xx(k), yy(k), static_cast<Polarity>(pp(k))};
  }
  return make_stream(static_cast<std::uint16_t>(width), static_cast<std::uint16_t>(height), std::move(evs));
}

py::dict stream_to_arrays(const EventStream& s) {
  const auto n = static_cast<py::ssize_t>(s.events.size());
  py::array_t<std::uint64_t> t(n);
  py::array_t<std::uint16_t> x(n), y(n);
  py::array_t<std::uint8_t> p(n);
  auto tt = t.mutable_unchecked<1>();
  auto xx = x.mutable_unchecked<1>();
  auto yy = y.mutable_unchecked<1>();
  auto pp = p.mutable_unchecked<1>();
  for (py::ssize_t i = 0; i < n; ++i) {
    const Event& e = s.events[static_cast<std::size_t>(i)];
    tt(i) = e.t;
    xx(i) = e.x;
    yy(i) = e.y;
    pp(i) = static_cast<std::uint8_t>(e.p);
  }
  py::dict d;
  d["width"] = s.width;
  d["height"] = s.height;
  d["t"] = t;
  d["x"] = x;
  d["y"] = y;
  d["p"] = p;
  return d;
}

py::array_t<std::uint32_t> counts_array(const std::vector<std::uint32_t>& c, int w, int h) {
  py::array_t<std::uint32_t> a({h, w});
  std::copy(c.begin(), c.end(), a.mutable_data());
  return a;
}

py::dict box_dict(const BoxAnnotation& b) {
  py::dict d;
  d["frame"] = b.frame;
  d["track_id"] = b.track_id;
  d["x"] = b.x;
  d["y"] = b.y;
  d["w"] = b.w;
  d["h"] = b.h;
  d["source"] = to_string(b.source);
  return d;
}

BoxAnnotation box_from(const py::handle& h) {
  auto d = h.cast<py::dict>();
  BoxAnnotation b;
  b.frame = d["frame"].cast<int>();
  b.track_id = d.contains("track_id") ? d["track_id"].cast<int>() : kNoTrack;
  b.x = d["x"].cast<double>();
  b.y = d["y"].cast<double>();
  b.w = d["w"].cast<double>();
  b.h = d["h"].cast<double>();
  if (d.contains("source")) b.source = parse_box_source(d["source"].cast<std::string>());
  return b;
}

std::vector<BoxAnnotation> boxes_from(const py::iterable& items) {
  std::vector<BoxAnnotation> out;
  for (const auto& h : items) out.push_back(box_from(h));
  return out;
}

py::list box_list(const std::vector<BoxAnnotation>& boxes) {
  py::list out;
  for (const auto& b : boxes) out.append(box_dict(b));
  return out;
}

py::dict report_dict(const EvalReport& r) {
  py::dict d;
  d["AP50"] = r.ap50;
  d["AP75"] = r.ap75;
  d["AP50:95"] = r.ap50_95;
  py::list per;
  for (const auto& t : r.per_threshold) per.append(t.ap);
  d["per_threshold"] = per;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Event camera + RGB drone detection toolkit";

  auto base = py::register_exception<Error>(m, "NerddError", PyExc_RuntimeError);
  py::register_exception<FormatError>(m, "FormatError", base);
  py::register_exception<CorruptRecordError>(m, "CorruptRecordError", base);
  py::register_exception<OrderingError>(m, "OrderingError", base);
  py::register_exception<ParameterError>(m, "ParameterError", base);
  py::register_exception<ShapeError>(m, "ShapeError", base);
  py::register_exception<NumericError>(m, "NumericError", base);
  py::register_exception<ConfigError>(m, "ConfigError", base);
  py::register_exception<ContractError>(m, "ContractError", base);
  py::register_exception<InputError>(m, "InputError", base);
  py::register_exception<UnknownTargetError>(m, "UnknownTargetError", base);
  py::register_exception<UndefinedApError>(m, "UndefinedApError", base);
  py::register_exception<SchemaError>(m, "SchemaError", base);
  py::register_exception<IoError>(m, "IoError", base);
  py::register_exception<NotFoundError>(m, "NotFoundError", base);

  // events
  m.def("interval_us", [](std::uint64_t num, std::uint64_t den) { return AccumulationConfig(num, den).interval_us(); },
        py::arg("fps_num"), py::arg("fps_den") = 1);
  m.def("frame_count",
        [](std::uint64_t duration_us, std::uint64_t num, std::uint64_t den) {
          return AccumulationConfig(num, den).frame_count(duration_us);
        },
        py::arg("duration_us"), py::arg("fps_num"), py::arg("fps_den") = 1);
  m.def("read_events", [](const std::string& path) { return stream_to_arrays(read_event_file(path)); },
        py::arg("path"));
  m.def("write_events",
        [](const std::string& path, int width, int height, const U64Array& t, const U16Array& x, const U16Array& y,
           const U8Array& p) { write_event_file(path, stream_from_arrays(width, height, t, x, y, p)); },
        py::arg("path"), py::arg("width"), py::arg("height"), py::arg("t"), py::arg("x"), py::arg("y"),
        py::arg("p"));
  m.def(
      "accumulate",
      [](int width, int height, const U64Array& t, const U16Array& x, const U16Array& y, const U8Array& p,
         double fps, std::int64_t duration_us) {
        const auto stream = stream_from_arrays(width, height, t, x, y, p);
        const auto acc = accumulate(stream, accumulation_for_fps(fps), duration_us);
        py::list on, off;
        for (const auto& f : acc.frames) {
          on.append(counts_array(f.on_counts, width, height));
          off.append(counts_array(f.off_counts, width, height));
        }
        py::dict d;
        d["on"] = on;
        d["off"] = off;
        d["dropped_after_duration"] = acc.dropped.after_duration;
        d["dropped_past_last_frame"] = acc.dropped.past_last_frame;
        return d;
      },
      py::arg("width"), py::arg("height"), py::arg("t"), py::arg("x"), py::arg("y"), py::arg("p"),
      py::arg("fps") = 30.0, py::arg("duration_us"));

  // matching and evaluation
  m.def(
      "hungarian",
      [](const CostMatrix& cost) {
        const auto a = hungarian(cost);
        return py::make_tuple(a.pairs, a.cost);
      },
      py::arg("cost"), "Minimum-cost assignment; returns (pairs, cost).");
  m.def(
      "iou", [](std::array<double, 4> a, std::array<double, 4> b) {
        return iou(Box{a[0], a[1], a[2], a[3]}, Box{b[0], b[1], b[2], b[3]});
      },
      py::arg("a"), py::arg("b"));
  m.def(
      "coco_map",
      [](const py::iterable& dets, const py::iterable& gts) {
        std::vector<ScoredBox> d;
        std::vector<GroundTruthBox> g;
        for (const auto& h : dets) {
          auto o = h.cast<py::dict>();
          d.push_back({o["video_id"].cast<std::string>(), o["frame"].cast<int>(), o["score"].cast<double>(),
                       Box{o["x"].cast<double>(), o["y"].cast<double>(), o["w"].cast<double>(), o["h"].cast<double>()}});
        }
        for (const auto& h : gts) {
          auto o = h.cast<py::dict>();
          g.push_back({o["video_id"].cast<std::string>(), o["frame"].cast<int>(),
                       Box{o["x"].cast<double>(), o["y"].cast<double>(), o["w"].cast<double>(), o["h"].cast<double>()}});
        }
        return report_dict(coco_map(d, g));
      },
      py::arg("detections"), py::arg("ground_truth"));
  m.def(
      "video_split",
      [](std::vector<std::string> ids, double ratio, std::uint64_t seed) {
        const auto s = video_split(std::move(ids), ratio, seed);
        return py::make_tuple(s.train, s.test);
      },
      py::arg("video_ids"), py::arg("ratio") = 0.8, py::arg("seed") = 0);

  // registration
  m.def(
      "shift_project",
      [](std::array<double, 4> box, int x_shift, bool event_to_rgb, int width, int height) {
        RegistrationParams p;
        p.x_shift = x_shift;
        const auto r = shift_project(Box{box[0], box[1], box[2], box[3]}, p,
                                     event_to_rgb ? Direction::EventToRgb : Direction::RgbToEvent, width, height);
        const char* status = r.status == ProjectionStatus::Inside    ? "inside"
                             : r.status == ProjectionStatus::Partial ? "partial"
                                                                     : "out_of_view";
        return py::make_tuple(std::array<double, 4>{r.box.x, r.box.y, r.box.w, r.box.h}, status);
      },
      py::arg("box"), py::arg("x_shift"), py::arg("event_to_rgb") = true, py::arg("width") = 1280,
      py::arg("height") = 720);
  m.def(
      "estimate_temporal_offset",
      [](const std::vector<double>& event_activity, const std::vector<double>& rgb_activity, double fps,
         int max_lag) {
        const auto e = estimate_temporal_offset(event_activity, rgb_activity, accumulation_for_fps(fps), max_lag);
        py::dict d;
        d["lag_frames"] = e.lag_frames;
        d["t_offset_us"] = e.t_offset_us;
        d["score"] = e.score;
        return d;
      },
      py::arg("event_activity"), py::arg("rgb_activity"), py::arg("fps") = 30.0, py::arg("max_lag") = -1);

  // annotation
  m.def(
      "annotate",
      [](int width, int height, const U64Array& t, const U16Array& x, const U16Array& y, const U8Array& p,
         double fps, std::int64_t duration_us) {
        const auto stream = stream_from_arrays(width, height, t, x, y, p);
        return box_list(annotate_stream(stream, accumulation_for_fps(fps), duration_us, BlobParams{}));
      },
      py::arg("width"), py::arg("height"), py::arg("t"), py::arg("x"), py::arg("y"), py::arg("p"),
      py::arg("fps") = 30.0, py::arg("duration_us"));
  m.def(
      "reinterpolate_track",
      [](const py::iterable& boxes, int track_id) { return box_list(reinterpolate_track(boxes_from(boxes), track_id)); },
      py::arg("boxes"), py::arg("track_id"));
  m.def(
      "merge_manual",
      [](const py::iterable& boxes, const py::iterable& edits) {
        std::vector<Edit> es;
        for (const auto& h : edits) {
          auto d = h.cast<py::dict>();
          es.push_back({parse_edit_kind(d["kind"].cast<std::string>()), box_from(h)});
        }
        return box_list(merge_manual(boxes_from(boxes), es));
      },
      py::arg("boxes"), py::arg("edits"));

  // fusion and training
  m.def("valid_pairs", [] {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& [s, c] : fusion::valid_pairs()) out.emplace_back(fusion::to_string(s), fusion::to_string(c));
    return out;
  });
  m.def("grad_check_ops", [] { return fusion::grad_check_ops(); });
  m.def(
      "grad_check",
      [](const std::string& op, std::uint64_t seed) {
        const auto r = fusion::grad_check(op, seed);
        py::dict d;
        d["op"] = r.op;
        d["max_rel_error"] = r.max_rel_error;
        d["max_abs_error"] = r.max_abs_error;
        d["coordinates"] = r.coordinates;
        return d;
      },
      py::arg("op"), py::arg("seed") = 0);
  m.def(
      "train_toy",
      [](const std::string& strategy, const std::string& cutoff, int steps, std::uint64_t seed, int d, int queries,
         double lr) {
        fusion::FusionConfig cfg;
        cfg.strategy = fusion::parse_strategy(strategy);
        cfg.cutoff = fusion::parse_cutoff(cutoff);
        cfg.d = d;
        cfg.n_queries = queries;
        fusion::validate(cfg);
        TrainOptions opt;
        opt.steps = steps;
        opt.learning_rate = lr;
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train_toy(cfg, make_toy_dataset(), opt, seed);
        }
        py::dict out;
        out["losses"] = r.losses;
        out["report"] = report_dict(r.report);
        return out;
      },
      py::arg("strategy") = "pool", py::arg("cutoff") = "encoder", py::arg("steps") = 500, py::arg("seed") = 0,
      py::arg("d") = 64, py::arg("queries") = 5, py::arg("lr") = 2e-3);
}
