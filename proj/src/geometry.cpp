#include "nerdd/geometry.hpp"

#include <algorithm>

namespace nerdd {

namespace {

struct Overlap {
  double inter = 0;
  double uni = 0;
  double enclose = 0;
};

Overlap overlap(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.right(), b.right()) - std::max(a.x, b.x));
  const double ih = std::max(0.0, std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y));
  Overlap o;
  o.inter = iw * ih;
  o.uni = a.area() + b.area() - o.inter;
  const double cw = std::max(a.right(), b.right()) - std::min(a.x, b.x);
  const double ch = std::max(a.bottom(), b.bottom()) - std::min(a.y, b.y);
  o.enclose = cw * ch;
  return o;
}

}  // namespace

double iou(const Box& a, const Box& b) {
  const Overlap o = overlap(a, b);
  return o.uni > 0 ? o.inter / o.uni : 0.0;
}

double giou(const Box& a, const Box& b) {
  const Overlap o = overlap(a, b);
  if (o.enclose <= 0) return 0.0;
  const double i = o.uni > 0 ? o.inter / o.uni : 0.0;
  return i - (o.enclose - o.uni) / o.enclose;
}

GiouWithGrad giou_grad(const CenterBox& ca, const CenterBox& cb) {
  const Box a = to_corner(ca);
  const Box b = to_corner(cb);
  const double ax1 = a.x, ay1 = a.y, ax2 = a.right(), ay2 = a.bottom();
  const double bx1 = b.x, by1 = b.y, bx2 = b.right(), by2 = b.bottom();

  const double iw_raw = std::min(ax2, bx2) - std::max(ax1, bx1);
  const double ih_raw = std::min(ay2, by2) - std::max(ay1, by1);
  const bool overlapping = iw_raw > 0 && ih_raw > 0;
  const double iw = overlapping ? iw_raw : 0.0;
  const double ih = overlapping ? ih_raw : 0.0;
  const double inter = iw * ih;
  const double area_a = a.area();
  const double uni = area_a + b.area() - inter;
  const double cw = std::max(ax2, bx2) - std::min(ax1, bx1);
  const double ch = std::max(ay2, by2) - std::min(ay1, by1);
  const double enc = cw * ch;

  GiouWithGrad out;
  out.value = inter / uni - 1.0 + uni / enc;

  const double dg_dI = 1.0 / uni;
  const double dg_dU = -inter / (uni * uni) + 1.0 / enc;
  const double dg_dC = -uni / (enc * enc);

  // derivatives w.r.t. corners (x1, y1, x2, y2) of a
  std::array<double, 4> dA{-(ay2 - ay1), -(ax2 - ax1), ay2 - ay1, ax2 - ax1};
  std::array<double, 4> dI{0, 0, 0, 0};
  if (overlapping) {
    dI[0] = ax1 >= bx1 ? -ih : 0.0;
    dI[2] = ax2 <= bx2 ? ih : 0.0;
    dI[1] = ay1 >= by1 ? -iw : 0.0;
    dI[3] = ay2 <= by2 ? iw : 0.0;
  }
  std::array<double, 4> dC{
      ax1 <= bx1 ? -ch : 0.0,
      ay1 <= by1 ? -cw : 0.0,
      ax2 >= bx2 ? ch : 0.0,
      ay2 >= by2 ? cw : 0.0,
  };
  std::array<double, 4> dcorner{};
  for (int k = 0; k < 4; ++k) {
    dcorner[k] = dg_dI * dI[k] + dg_dU * (dA[k] - dI[k]) + dg_dC * dC[k];
  }
  // x1 = cx - w/2, x2 = cx + w/2 (same for y)
  out.d_a[0] = dcorner[0] + dcorner[2];
  out.d_a[1] = dcorner[1] + dcorner[3];
  out.d_a[2] = 0.5 * (dcorner[2] - dcorner[0]);
  out.d_a[3] = 0.5 * (dcorner[3] - dcorner[1]);
  return out;
}

}  // namespace nerdd
