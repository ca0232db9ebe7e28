#pragma once

#include <array>

namespace nerdd {

/// Axis-aligned box, top-left corner plus size. Units are whatever the caller
/// uses (pixels for annotations, [0,1] for network outputs).
struct Box {
  double x = 0;
  double y = 0;
  double w = 0;
  double h = 0;

  double area() const { return w * h; }
  double right() const { return x + w; }
  double bottom() const { return y + h; }

  friend bool operator==(const Box&, const Box&) = default;
};

/// Center-size parameterization used by the detection heads.
struct CenterBox {
  double cx = 0;
  double cy = 0;
  double w = 0;
  double h = 0;

  friend bool operator==(const CenterBox&, const CenterBox&) = default;
};

inline Box to_corner(const CenterBox& b) { return {b.cx - b.w / 2, b.cy - b.h / 2, b.w, b.h}; }
inline CenterBox to_center(const Box& b) { return {b.x + b.w / 2, b.y + b.h / 2, b.w, b.h}; }

double iou(const Box& a, const Box& b);

/// IoU minus the empty fraction of the smallest enclosing box. Range (-1, 1].
double giou(const Box& a, const Box& b);

struct GiouWithGrad {
  double value = 0;
  std::array<double, 4> d_a{};  // d giou / d (cx, cy, w, h) of the first box
};

/// GIoU and its gradient with respect to the first box in center-size form.
/// At non-differentiable points (coincident edges) the one-sided derivative
/// that treats the first box as the active one is returned.
GiouWithGrad giou_grad(const CenterBox& a, const CenterBox& b);

}  // namespace nerdd
