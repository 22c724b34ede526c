#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

#include "tide/ops.hpp"

namespace tide {

enum class BoxFormat {
  CenterNorm,  // (cx, cy, w, h), fractions of the image size
  CornerAbs,   // (x1, y1, x2, y2), pixels
};

struct ImageSize {
  double width = 0;
  double height = 0;
};

struct BoundingBox {
  BoxFormat format = BoxFormat::CenterNorm;
  std::array<double, 4> v{};

  static BoundingBox center_norm(double cx, double cy, double w, double h) {
    return {BoxFormat::CenterNorm, {cx, cy, w, h}};
  }
  static BoundingBox corner_abs(double x1, double y1, double x2, double y2) {
    return {BoxFormat::CornerAbs, {x1, y1, x2, y2}};
  }

  bool valid() const {
    if (format == BoxFormat::CornerAbs) return v[0] <= v[2] && v[1] <= v[3];
    return v[0] >= 0 && v[0] <= 1 && v[1] >= 0 && v[1] <= 1 && v[2] > 0 && v[2] <= 1 && v[3] > 0 && v[3] <= 1;
  }

  double area() const {
    if (format == BoxFormat::CenterNorm) return v[2] * v[3];
    return std::max(0.0, v[2] - v[0]) * std::max(0.0, v[3] - v[1]);
  }
};

inline BoundingBox convert(const BoundingBox& b, BoxFormat target, ImageSize size = {}) {
  if (b.format == target) return b;
  if (!(size.width > 0) || !(size.height > 0))
    throw DimError("box conversion needs a positive image size");
  if (target == BoxFormat::CornerAbs) {
    const auto& [cx, cy, w, h] = b.v;
    return BoundingBox::corner_abs((cx - w / 2) * size.width, (cy - h / 2) * size.height, (cx + w / 2) * size.width,
                                   (cy + h / 2) * size.height);
  }
  const auto& [x1, y1, x2, y2] = b.v;
  return BoundingBox::center_norm((x1 + x2) / 2 / size.width, (y1 + y2) / 2 / size.height, (x2 - x1) / size.width,
                                  (y2 - y1) / size.height);
}

namespace detail {

// Corners of a box in its own coordinate frame (normalized boxes stay
// normalized; only the corner layout changes).
inline std::array<double, 4> corners(const BoundingBox& b) {
  if (b.format == BoxFormat::CornerAbs) return b.v;
  const auto& [cx, cy, w, h] = b.v;
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

struct Overlap {
  double inter, uni, enclose;
};

inline Overlap overlap(const BoundingBox& a, const BoundingBox& b, const char* op) {
  if (a.format != b.format) throw FormatError(std::string(op) + ": box formats differ");
  const auto p = corners(a), q = corners(b);
  const double iw = std::max(0.0, std::min(p[2], q[2]) - std::max(p[0], q[0]));
  const double ih = std::max(0.0, std::min(p[3], q[3]) - std::max(p[1], q[1]));
  const double inter = iw * ih;
  const double area_a = std::max(0.0, p[2] - p[0]) * std::max(0.0, p[3] - p[1]);
  const double area_b = std::max(0.0, q[2] - q[0]) * std::max(0.0, q[3] - q[1]);
  const double ew = std::max(p[2], q[2]) - std::min(p[0], q[0]);
  const double eh = std::max(p[3], q[3]) - std::min(p[1], q[1]);
  return {inter, area_a + area_b - inter, ew * eh};
}

}  // namespace detail

// Intersection over union; 0 when the union is empty.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const auto o = detail::overlap(a, b, "iou");
  return o.uni > 0 ? o.inter / o.uni : 0.0;
}

// Generalized IoU: IoU - (|C| - |A u B|) / |C|, C the tightest enclosing box.
inline double giou(const BoundingBox& a, const BoundingBox& b) {
  const auto o = detail::overlap(a, b, "giou");
  const double i = o.uni > 0 ? o.inter / o.uni : 0.0;
  if (!(o.enclose > 0)) return i;
  return i - (o.enclose - o.uni) / o.enclose;
}

// Differentiable GIoU between matched rows of two [n,4] CenterNorm box
// tensors; returns [n]. Same math as giou() above.
inline Tensor giou_tensor(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.dim(1) != 4 || a.shape() != b.shape()) throw DimError("giou_tensor expects matching [n,4]");
  auto col = [](const Tensor& t, std::size_t c) { return reshape(slice(t, 1, c, 1), {t.dim(0)}); };
  auto corner = [&](const Tensor& t, std::array<Tensor, 4>& out) {
    const Tensor cx = col(t, 0), cy = col(t, 1), hw = scale(col(t, 2), 0.5), hh = scale(col(t, 3), 0.5);
    out = {sub(cx, hw), sub(cy, hh), add(cx, hw), add(cy, hh)};
  };
  std::array<Tensor, 4> p, q;
  corner(a, p);
  corner(b, q);
  const Tensor zero = Tensor::zeros({a.dim(0)});
  const Tensor iw = maximum(sub(minimum(p[2], q[2]), maximum(p[0], q[0])), zero);
  const Tensor ih = maximum(sub(minimum(p[3], q[3]), maximum(p[1], q[1])), zero);
  const Tensor inter = mul(iw, ih);
  const Tensor area_a = mul(col(a, 2), col(a, 3));
  const Tensor area_b = mul(col(b, 2), col(b, 3));
  const Tensor uni = sub(add(area_a, area_b), inter);
  const Tensor enclose = mul(sub(maximum(p[2], q[2]), minimum(p[0], q[0])), sub(maximum(p[3], q[3]), minimum(p[1], q[1])));
  const Tensor iou_t = div(inter, uni);
  return sub(iou_t, div(sub(enclose, uni), enclose));
}

}  // namespace tide
