// Copyright 2026 the qcdet authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include "qcdet/rng.hpp"

namespace qcdet {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr int kNumClasses = 3;  // 0 vehicle-like, 1 pedestrian-like, 2 cyclist-like

/// Plain-double view of a scalar; autograd scalars provide an ADL overload so
/// templated geometry can branch on values.
inline double scalar_value(double x) { return x; }

/// Wrap an angle to [-pi, pi). Angles already in range pass through
/// unchanged (bit-exact), which the zero-noise identity relies on.
inline double wrap_angle(double theta) {
  if (theta >= -kPi && theta < kPi) return theta;
  double t = std::fmod(theta + kPi, 2.0 * kPi);
  if (t < 0.0) t += 2.0 * kPi;
  return t - kPi;
}

/// Oriented 3D box. Center (cx,cy,cz) in meters, sizes l,w,h > 0, heading in
/// [-pi, pi) about the z axis, class_id in [0, kNumClasses).
struct Box3D {
  double cx = 0.0, cy = 0.0, cz = 0.0;
  double l = 1.0, w = 1.0, h = 1.0;
  double heading = 0.0;
  int class_id = 0;

  bool valid() const {
    return l > 0.0 && w > 0.0 && h > 0.0 && heading >= -kPi && heading < kPi &&
           class_id >= 0 && class_id < kNumClasses &&
           std::isfinite(cx) && std::isfinite(cy) && std::isfinite(cz);
  }
  double volume() const { return l * w * h; }
};

/// Noise magnitudes used both for GT noising groups and the denoising task.
struct BoxNoiseSpec {
  double box_noise_ratio = 0.4;    // in [0, 1)
  double label_noise_ratio = 0.5;  // in [0, 1]

  bool valid() const {
    return box_noise_ratio >= 0.0 && box_noise_ratio < 1.0 &&
           label_noise_ratio >= 0.0 && label_noise_ratio <= 1.0;
  }
};

/// Scalar-generic box parameters, the carrier for differentiable geometry.
template <class S>
struct BoxParams {
  S cx, cy, cz, l, w, h, heading;
};

inline BoxParams<double> params_of(const Box3D& b) {
  return {b.cx, b.cy, b.cz, b.l, b.w, b.h, b.heading};
}

template <class S>
using Point2 = std::array<S, 2>;

namespace detail {

template <class S>
S smin(const S& a, const S& b) {
  return scalar_value(a) <= scalar_value(b) ? a : b;
}

template <class S>
S smax(const S& a, const S& b) {
  return scalar_value(a) >= scalar_value(b) ? a : b;
}

}  // namespace detail

/// BEV corners of the rotated rectangle (cx, cy, l, w, heading), in
/// counter-clockwise order starting from the (+l/2, +w/2) corner.
template <class S>
std::array<Point2<S>, 4> box_corners_bev(const BoxParams<S>& b) {
  using std::cos;
  using std::sin;
  const S c = cos(b.heading);
  const S s = sin(b.heading);
  const S hl = b.l * 0.5;
  const S hw = b.w * 0.5;
  // Local corners (+hl,+hw), (-hl,+hw), (-hl,-hw), (+hl,-hw) rotated by the
  // heading; counter-clockwise so the shoelace area comes out positive.
  const std::array<std::array<double, 2>, 4> sign = {
      {{+1.0, +1.0}, {-1.0, +1.0}, {-1.0, -1.0}, {+1.0, -1.0}}};
  std::array<Point2<S>, 4> out;
  for (int i = 0; i < 4; ++i) {
    const S lx = hl * sign[i][0];
    const S ly = hw * sign[i][1];
    out[i] = {b.cx + c * lx - s * ly, b.cy + s * lx + c * ly};
  }
  return out;
}

inline std::array<Point2<double>, 4> box_corners_bev(const Box3D& b) {
  return box_corners_bev(params_of(b));
}

/// Signed shoelace area; positive for counter-clockwise polygons.
template <class S>
S polygon_area(const std::vector<Point2<S>>& poly) {
  S area = S(0.0);
  const std::size_t n = poly.size();
  if (n < 3) return area;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = (i + 1) % n;
    area = area + (poly[i][0] * poly[j][1] - poly[j][0] * poly[i][1]);
  }
  return area * 0.5;
}

/// Sutherland-Hodgman clip of a subject polygon against a convex CCW clip
/// polygon. Branches are decided on scalar values; intersection points stay
/// differentiable through the parametric interpolation.
template <class S>
std::vector<Point2<S>> clip_polygon(std::vector<Point2<S>> subject,
                                    const std::vector<Point2<S>>& clip) {
  const std::size_t m = clip.size();
  for (std::size_t e = 0; e < m && !subject.empty(); ++e) {
    const Point2<S>& a = clip[e];
    const Point2<S>& b = clip[(e + 1) % m];
    const S ex = b[0] - a[0];
    const S ey = b[1] - a[1];
    std::vector<Point2<S>> out;
    out.reserve(subject.size() + 2);
    const std::size_t n = subject.size();
    for (std::size_t i = 0; i < n; ++i) {
      const Point2<S>& p = subject[i];
      const Point2<S>& q = subject[(i + 1) % n];
      const S dp = ex * (p[1] - a[1]) - ey * (p[0] - a[0]);
      const S dq = ex * (q[1] - a[1]) - ey * (q[0] - a[0]);
      const bool pin = scalar_value(dp) >= 0.0;
      const bool qin = scalar_value(dq) >= 0.0;
      if (pin) out.push_back(p);
      if (pin != qin) {
        const S t = dp / (dp - dq);
        out.push_back({p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])});
      }
    }
    subject = std::move(out);
  }
  return subject;
}

/// Area of the BEV intersection of two rotated boxes. Degenerate
/// intersections collapse to 0.
template <class S>
S bev_intersection_area(const BoxParams<S>& a, const BoxParams<S>& b) {
  const auto ca = box_corners_bev(a);
  const auto cb = box_corners_bev(b);
  std::vector<Point2<S>> subject(ca.begin(), ca.end());
  std::vector<Point2<S>> clip(cb.begin(), cb.end());
  const auto inter = clip_polygon(std::move(subject), clip);
  if (inter.size() < 3) return S(0.0);
  const S area = polygon_area(inter);
  return scalar_value(area) > 0.0 ? area : S(0.0);
}

/// Rotated-box 3D IoU: BEV polygon intersection times vertical overlap over
/// union volume, clamped to [0, 1].
template <class S>
S iou3d(const BoxParams<S>& a, const BoxParams<S>& b) {
  using detail::smax;
  using detail::smin;
  const S bev = bev_intersection_area(a, b);
  const S za0 = a.cz - a.h * 0.5, za1 = a.cz + a.h * 0.5;
  const S zb0 = b.cz - b.h * 0.5, zb1 = b.cz + b.h * 0.5;
  const S zo = smax(S(0.0), smin(za1, zb1) - smax(za0, zb0));
  const S inter = bev * zo;
  const S va = a.l * a.w * a.h;
  const S vb = b.l * b.w * b.h;
  const S uni = va + vb - inter;
  const S iou = inter / uni;
  return smin(S(1.0), smax(S(0.0), iou));
}

inline double iou3d(const Box3D& a, const Box3D& b) {
  return iou3d(params_of(a), params_of(b));
}

/// Generalized IoU with an axis-aligned enclosing volume:
/// iou - (|C| - |A u B|) / |C|, in (-1, 1].
template <class S>
S giou3d(const BoxParams<S>& a, const BoxParams<S>& b) {
  using detail::smax;
  using detail::smin;
  const S iou = iou3d(a, b);

  const auto ca = box_corners_bev(a);
  const auto cb = box_corners_bev(b);
  S xmin = ca[0][0], xmax = ca[0][0], ymin = ca[0][1], ymax = ca[0][1];
  for (int i = 1; i < 4; ++i) {
    xmin = smin(xmin, ca[i][0]);
    xmax = smax(xmax, ca[i][0]);
    ymin = smin(ymin, ca[i][1]);
    ymax = smax(ymax, ca[i][1]);
  }
  for (int i = 0; i < 4; ++i) {
    xmin = smin(xmin, cb[i][0]);
    xmax = smax(xmax, cb[i][0]);
    ymin = smin(ymin, cb[i][1]);
    ymax = smax(ymax, cb[i][1]);
  }
  const S zmin = smin(a.cz - a.h * 0.5, b.cz - b.h * 0.5);
  const S zmax = smax(a.cz + a.h * 0.5, b.cz + b.h * 0.5);
  const S enclosing = (xmax - xmin) * (ymax - ymin) * (zmax - zmin);

  const S bev = bev_intersection_area(a, b);
  const S zo = smax(S(0.0), smin(a.cz + a.h * 0.5, b.cz + b.h * 0.5) -
                                smax(a.cz - a.h * 0.5, b.cz - b.h * 0.5));
  const S uni = a.l * a.w * a.h + b.l * b.w * b.h - bev * zo;
  return iou - (enclosing - uni) / enclosing;
}

inline double giou3d(const Box3D& a, const Box3D& b) {
  return giou3d(params_of(a), params_of(b));
}

/// BEV (2D) generalized IoU of the rotated footprints; used by the
/// GIoU-similarity ablation of the contrastive loss.
template <class S>
S giou_bev(const BoxParams<S>& a, const BoxParams<S>& b) {
  using detail::smax;
  using detail::smin;
  const S inter = bev_intersection_area(a, b);
  const S uni = a.l * a.w + b.l * b.w - inter;
  const S iou = smin(S(1.0), smax(S(0.0), inter / uni));

  const auto ca = box_corners_bev(a);
  const auto cb = box_corners_bev(b);
  S xmin = ca[0][0], xmax = ca[0][0], ymin = ca[0][1], ymax = ca[0][1];
  for (int i = 1; i < 4; ++i) {
    xmin = smin(xmin, ca[i][0]);
    xmax = smax(xmax, ca[i][0]);
    ymin = smin(ymin, ca[i][1]);
    ymax = smax(ymax, ca[i][1]);
  }
  for (int i = 0; i < 4; ++i) {
    xmin = smin(xmin, cb[i][0]);
    xmax = smax(xmax, cb[i][0]);
    ymin = smin(ymin, cb[i][1]);
    ymax = smax(ymax, cb[i][1]);
  }
  const S enclosing = (xmax - xmin) * (ymax - ymin);
  return iou - (enclosing - uni) / enclosing;
}

/// Perturb a box per the noise spec. Draw order is part of the contract so
/// seeded golden values stay valid: center x/y/z, size l/w/h, heading, label
/// flip decision, then (only if flipped) the replacement label.
///
/// Center shifts are uniform within +-ratio * (l/2, w/2, h/2) per axis, sizes
/// scale uniformly within [1-ratio, 1+ratio], heading moves uniformly within
/// +-ratio * pi/2 and is re-wrapped. With probability label_noise_ratio the
/// class is resampled uniformly from the other classes.
inline Box3D apply_box_noise(const Box3D& box, const BoxNoiseSpec& spec,
                             Rng& rng, int num_classes = kNumClasses) {
  const double r = spec.box_noise_ratio;
  Box3D out = box;
  out.cx = box.cx + rng.uniform(-r, r) * (box.l * 0.5);
  out.cy = box.cy + rng.uniform(-r, r) * (box.w * 0.5);
  out.cz = box.cz + rng.uniform(-r, r) * (box.h * 0.5);
  out.l = box.l * rng.uniform(1.0 - r, 1.0 + r);
  out.w = box.w * rng.uniform(1.0 - r, 1.0 + r);
  out.h = box.h * rng.uniform(1.0 - r, 1.0 + r);
  out.heading = wrap_angle(box.heading + rng.uniform(-r, r) * (kPi * 0.5));
  if (rng.bernoulli(spec.label_noise_ratio) && num_classes > 1) {
    const std::int64_t pick = rng.uniform_int(0, num_classes - 2);
    out.class_id = static_cast<int>(pick >= box.class_id ? pick + 1 : pick);
  }
  return out;
}

}  // namespace qcdet
