#pragma once

#include <cstdint>
#include <span>

#include "nerdd/event_core.hpp"
#include "nerdd/geometry.hpp"
#include "nerdd/image.hpp"

namespace nerdd {

/// Pinhole intrinsics with Brown-Conrady distortion (3 radial, 2 tangential).
struct Intrinsics {
  double fx = 1, fy = 1;
  double cx = 0, cy = 0;
  double k1 = 0, k2 = 0, k3 = 0;
  double p1 = 0, p2 = 0;

  friend bool operator==(const Intrinsics&, const Intrinsics&) = default;
};

struct CropRect {
  int x = 0, y = 0, w = 0, h = 0;
  friend bool operator==(const CropRect&, const CropRect&) = default;
};

struct Padding {
  int left = 0, top = 0, right = 0, bottom = 0;
  friend bool operator==(const Padding&, const Padding&) = default;
};

struct RegistrationParams {
  int x_shift = 0;              // event column + x_shift = RGB column
  std::int64_t t_offset_us = 0; // event clock minus RGB clock
  CropRect crop;                // applied to the RGB frame; w == 0 means "full frame"
  Padding pad;

  friend bool operator==(const RegistrationParams&, const RegistrationParams&) = default;
};

/// Maps a normalized undistorted point to its distorted position.
void distort_normalized(const Intrinsics& intr, double x, double y, double& xd, double& yd);

/// Each output pixel is inverse-mapped through the distortion model and
/// bilinearly sampled; samples falling outside the source are 0.
Image undistort_image(const Image& img, const Intrinsics& intr);

enum class Direction { EventToRgb, RgbToEvent };
enum class ProjectionStatus { Inside, Partial, OutOfView };

struct Projection {
  Box box;
  ProjectionStatus status = ProjectionStatus::Inside;
};

/// Translates a pixel box by +/- x_shift and clamps it to a width x height frame.
Projection shift_project(const Box& box, const RegistrationParams& params, Direction dir, int width,
                         int height);

/// Crop, then pad with zeros, then fit onto a target-size canvas (zero fill or truncation).
Image crop_pad_rgb(const Image& img, const RegistrationParams& params, int target_width,
                   int target_height);

/// Shifts image content horizontally by `dx` columns with zero fill.
Image shift_image(const Image& img, int dx);

struct OffsetEstimate {
  int lag_frames = 0;
  std::int64_t t_offset_us = 0;
  double score = 0;  // normalized cross-correlation at the chosen lag
};

/// Finds the lag k in [-max_lag, max_lag] maximizing the Pearson correlation of
/// event[t + k] against rgb[t] over their overlap. A positive lag means the
/// event recording runs k frames behind the RGB one. max_lag < 0 selects n/4.
OffsetEstimate estimate_temporal_offset(std::span<const double> event_activity,
                                        std::span<const double> rgb_activity,
                                        const AccumulationConfig& cfg, int max_lag = -1);

/// Per-frame event totals, the event-side activity signal.
std::vector<double> event_activity(const EventStream& stream, const AccumulationConfig& cfg,
                                   std::int64_t duration_us);

/// Mean absolute difference between consecutive frames (first entry 0).
std::vector<double> frame_difference_energy(std::span<const Image> frames);

struct OffsetResult {
  EventStream stream;
  std::uint64_t dropped = 0;
};

/// Re-times events onto the RGB clock: t -> t - t_offset. Events that would
/// become negative are dropped.
OffsetResult apply_offset(const EventStream& stream, std::int64_t t_offset_us);

}  // namespace nerdd
