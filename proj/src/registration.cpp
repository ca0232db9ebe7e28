#include "nerdd/registration.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>

#include "nerdd/errors.hpp"

namespace nerdd {

namespace {

void validate(const Intrinsics& intr, int width, int height) {
  for (double v : {intr.fx, intr.fy, intr.cx, intr.cy, intr.k1, intr.k2, intr.k3, intr.p1, intr.p2}) {
    if (!std::isfinite(v)) throw ParameterError("intrinsics must be finite");
  }
  if (intr.fx <= 0 || intr.fy <= 0) throw ParameterError("focal lengths must be positive");
  if (intr.cx < 0 || intr.cx > width || intr.cy < 0 || intr.cy > height) {
    throw ParameterError("principal point outside the image");
  }
}

double pearson(std::span<const double> a, std::span<const double> b) {
  const auto n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0 || sbb <= 0) return std::nan("");
  return sab / std::sqrt(saa * sbb);
}

bool is_constant(std::span<const double> s) {
  return std::all_of(s.begin(), s.end(), [&](double v) { return v == s.front(); });
}

}  // namespace

void distort_normalized(const Intrinsics& intr, double x, double y, double& xd, double& yd) {
  const double r2 = x * x + y * y;
  const double radial = intr.k1 * r2 + intr.k2 * r2 * r2 + intr.k3 * r2 * r2 * r2;
  // written as displacements so zero coefficients are an exact identity
  xd = x + (x * radial + 2 * intr.p1 * x * y + intr.p2 * (r2 + 2 * x * x));
  yd = y + (y * radial + intr.p1 * (r2 + 2 * y * y) + 2 * intr.p2 * x * y);
}

Image undistort_image(const Image& img, const Intrinsics& intr) {
  validate(intr, img.width, img.height);
  Image out(img.width, img.height, img.channels);
  const int w = img.width;
  const int h = img.height;
  for (int v = 0; v < h; ++v) {
    for (int u = 0; u < w; ++u) {
      const double x = (u - intr.cx) / intr.fx;
      const double y = (v - intr.cy) / intr.fy;
      double xd = 0, yd = 0;
      distort_normalized(intr, x, y, xd, yd);
      const double su = u + intr.fx * (xd - x);
      const double sv = v + intr.fy * (yd - y);
      if (!(su >= 0 && su <= w - 1 && sv >= 0 && sv <= h - 1)) continue;
      const int x0 = static_cast<int>(std::floor(su));
      const int y0 = static_cast<int>(std::floor(sv));
      const int x1 = std::min(x0 + 1, w - 1);
      const int y1 = std::min(y0 + 1, h - 1);
      const double ax = su - x0;
      const double ay = sv - y0;
      for (int c = 0; c < img.channels; ++c) {
        const double val = (1 - ax) * (1 - ay) * img.at(x0, y0, c) + ax * (1 - ay) * img.at(x1, y0, c) +
                           (1 - ax) * ay * img.at(x0, y1, c) + ax * ay * img.at(x1, y1, c);
        out.at(u, v, c) = static_cast<std::uint8_t>(std::clamp(std::floor(val + 0.5), 0.0, 255.0));
      }
    }
  }
  return out;
}

Projection shift_project(const Box& box, const RegistrationParams& params, Direction dir, int width,
                         int height) {
  if (std::abs(params.x_shift) >= width) throw ParameterError("|x_shift| must be below the frame width");
  Box moved = box;
  moved.x += dir == Direction::EventToRgb ? params.x_shift : -params.x_shift;

  const double x1 = std::max(0.0, moved.x);
  const double y1 = std::max(0.0, moved.y);
  const double x2 = std::min<double>(width, moved.right());
  const double y2 = std::min<double>(height, moved.bottom());
  if (x2 <= x1 || y2 <= y1) return {moved, ProjectionStatus::OutOfView};
  if (moved.x >= 0 && moved.y >= 0 && moved.right() <= width && moved.bottom() <= height) {
    return {moved, ProjectionStatus::Inside};
  }
  return {Box{x1, y1, x2 - x1, y2 - y1}, ProjectionStatus::Partial};
}

Image crop_pad_rgb(const Image& img, const RegistrationParams& params, int target_width,
                   int target_height) {
  if (target_width < 1 || target_height < 1) throw ParameterError("target must be at least 1x1");
  CropRect crop = params.crop;
  if (crop.w == 0 && crop.h == 0) crop = {0, 0, img.width, img.height};
  if (crop.x < 0 || crop.y < 0 || crop.w <= 0 || crop.h <= 0 || crop.x + crop.w > img.width ||
      crop.y + crop.h > img.height) {
    throw ParameterError("crop rectangle outside the source image");
  }
  const Padding& pad = params.pad;
  if (pad.left < 0 || pad.top < 0 || pad.right < 0 || pad.bottom < 0) {
    throw ParameterError("padding must be non-negative");
  }
  Image out(target_width, target_height, img.channels);
  const int padded_w = crop.w + pad.left + pad.right;
  const int padded_h = crop.h + pad.top + pad.bottom;
  for (int v = 0; v < std::min(target_height, padded_h); ++v) {
    const int sy = v - pad.top;
    if (sy < 0 || sy >= crop.h) continue;
    for (int u = 0; u < std::min(target_width, padded_w); ++u) {
      const int sx = u - pad.left;
      if (sx < 0 || sx >= crop.w) continue;
      for (int c = 0; c < img.channels; ++c) out.at(u, v, c) = img.at(crop.x + sx, crop.y + sy, c);
    }
  }
  return out;
}

Image shift_image(const Image& img, int dx) {
  Image out(img.width, img.height, img.channels);
  for (int v = 0; v < img.height; ++v) {
    for (int u = 0; u < img.width; ++u) {
      const int su = u - dx;
      if (su < 0 || su >= img.width) continue;
      for (int c = 0; c < img.channels; ++c) out.at(u, v, c) = img.at(su, v, c);
    }
  }
  return out;
}

OffsetEstimate estimate_temporal_offset(std::span<const double> ev, std::span<const double> rgb,
                                        const AccumulationConfig& cfg, int max_lag) {
  if (ev.size() < 8 || rgb.size() < 8) throw ParameterError("activity series need at least 8 frames");
  if (is_constant(ev) || is_constant(rgb)) {
    throw UndefinedOffsetError("zero-variance activity series: offset undefined");
  }
  const auto n_ev = static_cast<int>(ev.size());
  const auto n_rgb = static_cast<int>(rgb.size());
  const int n = std::min(n_ev, n_rgb);
  const int limit = max_lag < 0 ? n / 4 : max_lag;
  const int min_overlap = std::max(8, n / 2);

  OffsetEstimate best;
  bool found = false;
  // visit lags by increasing magnitude so ties resolve toward the smallest shift
  for (int mag = 0; mag <= limit; ++mag) {
    for (int k : {-mag, mag}) {
      if (mag == 0 && k != 0) continue;
      const int begin = std::max(0, -k);
      const int end = std::min(n_rgb, n_ev - k);
      if (end - begin < min_overlap) continue;
      const double score = pearson(ev.subspan(begin + k, end - begin), rgb.subspan(begin, end - begin));
      if (std::isnan(score)) continue;
      if (!found || score > best.score) {
        best.lag_frames = k;
        best.score = score;
        found = true;
      }
      if (mag == 0) break;
    }
  }
  if (!found) throw UndefinedOffsetError("no lag with a defined correlation");
  best.t_offset_us = static_cast<std::int64_t>(best.lag_frames) * static_cast<std::int64_t>(cfg.interval_us());
  return best;
}

std::vector<double> event_activity(const EventStream& stream, const AccumulationConfig& cfg,
                                   std::int64_t duration_us) {
  std::vector<double> out;
  accumulate_each(stream, cfg, duration_us,
                  [&](const CountFrame& f) { out.push_back(static_cast<double>(f.event_total())); });
  return out;
}

std::vector<double> frame_difference_energy(std::span<const Image> frames) {
  std::vector<double> out(frames.size(), 0.0);
  for (std::size_t i = 1; i < frames.size(); ++i) {
    const auto& a = frames[i - 1].pixels;
    const auto& b = frames[i].pixels;
    if (a.size() != b.size()) throw ShapeError("frames differ in size");
    double sum = 0;
    for (std::size_t j = 0; j < a.size(); ++j) sum += std::abs(int{a[j]} - int{b[j]});
    out[i] = a.empty() ? 0.0 : sum / static_cast<double>(a.size());
  }
  return out;
}

OffsetResult apply_offset(const EventStream& stream, std::int64_t t_offset_us) {
  OffsetResult r;
  r.stream.width = stream.width;
  r.stream.height = stream.height;
  r.stream.events.reserve(stream.events.size());
  for (const auto& e : stream.events) {
    const auto t = static_cast<std::int64_t>(e.t) - t_offset_us;
    if (t < 0) {
      ++r.dropped;
      continue;
    }
    Event moved = e;
    moved.t = static_cast<std::uint64_t>(t);
    r.stream.events.push_back(moved);
  }
  return r;
}

}  // namespace nerdd
