// Copyright 2026 The SMF Authors.
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

// Points, oriented boxes, per-box canonical frames and rotated-box IoU.
//
// Box convention: `l` runs along the heading (local +x), `w` across it
// (local +y), `h` is vertical. Yaw rotates local +x onto world axes
// counter-clockwise about +z.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <tuple>
#include <vector>

#include "smf/common.hpp"

namespace smf {

struct Vec3 {
  double x = 0, y = 0, z = 0;
  friend bool operator==(const Vec3&, const Vec3&) = default;
};

struct Point3 {
  double x = 0, y = 0, z = 0;
  double intensity = 0;
  friend bool operator==(const Point3&, const Point3&) = default;
};

struct BoundingBox3D {
  Vec3 center;
  double w = 1, l = 1, h = 1;
  double yaw = 0;
  std::uint32_t class_id = 0;
  std::uint64_t track_id = 0;

  friend bool operator==(const BoundingBox3D&, const BoundingBox3D&) = default;

  bool valid() const { return w > 0 && l > 0 && h > 0 && std::isfinite(yaw); }
  double volume() const { return w * l * h; }
  double bev_distance() const { return std::hypot(center.x, center.y); }
};

struct PointCloud {
  std::uint32_t frame_index = 0;
  std::vector<Point3> points;
  friend bool operator==(const PointCloud&, const PointCloud&) = default;
};

// ---------------------------------------------------------------------------
// Canonical (box-centred, yaw-aligned) frame.

inline Point3 to_canonical(const Point3& p, const BoundingBox3D& box) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const double dx = p.x - box.center.x, dy = p.y - box.center.y;
  return {c * dx + s * dy, -s * dx + c * dy, p.z - box.center.z, p.intensity};
}

inline Point3 from_canonical(const Point3& p, const BoundingBox3D& box) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  return {c * p.x - s * p.y + box.center.x, s * p.x + c * p.y + box.center.y, p.z + box.center.z, p.intensity};
}

inline std::vector<Point3> canonical_transform(std::span<const Point3> points, const BoundingBox3D& box) {
  std::vector<Point3> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(to_canonical(p, box));
  return out;
}

inline std::vector<Point3> inverse_canonical_transform(std::span<const Point3> points, const BoundingBox3D& box) {
  std::vector<Point3> out;
  out.reserve(points.size());
  for (const auto& p : points) out.push_back(from_canonical(p, box));
  return out;
}

/// Containment in canonical coordinates; the margin enlarges every dimension.
inline bool canonical_inside(const Point3& q, const BoundingBox3D& box, double margin) {
  return std::abs(q.x) <= 0.5 * (box.l + margin) && std::abs(q.y) <= 0.5 * (box.w + margin) &&
         std::abs(q.z) <= 0.5 * (box.h + margin);
}

inline bool box_contains(const BoundingBox3D& box, const Point3& p, double margin = 0.0) {
  return canonical_inside(to_canonical(p, box), box, margin);
}

/// Footprint test ignoring z (BEV masks).
inline bool box_contains_bev(const BoundingBox3D& box, double x, double y, double margin = 0.0) {
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const double dx = x - box.center.x, dy = y - box.center.y;
  return std::abs(c * dx + s * dy) <= 0.5 * (box.l + margin) && std::abs(-s * dx + c * dy) <= 0.5 * (box.w + margin);
}

inline std::vector<std::size_t> points_in_box(std::span<const Point3> points, const BoundingBox3D& box,
                                              double margin = 0.0) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < points.size(); ++i)
    if (box_contains(box, points[i], margin)) idx.push_back(i);
  return idx;
}

inline std::vector<std::size_t> points_in_box(const PointCloud& cloud, const BoundingBox3D& box, double margin = 0.0) {
  return points_in_box(std::span<const Point3>(cloud.points), box, margin);
}

// ---------------------------------------------------------------------------
// Rotated BEV overlap by Sutherland-Hodgman clipping of convex quads.

struct Vec2 {
  double x = 0, y = 0;
};

/// Footprint corners in counter-clockwise order.
inline std::array<Vec2, 4> bev_corners(const BoundingBox3D& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double hl = 0.5 * b.l, hw = 0.5 * b.w;
  const std::array<Vec2, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
  std::array<Vec2, 4> out{};
  for (int i = 0; i < 4; ++i)
    out[i] = {b.center.x + c * local[i].x - s * local[i].y, b.center.y + s * local[i].x + c * local[i].y};
  return out;
}

inline double polygon_area(std::span<const Vec2> poly) {
  double a = 0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    const Vec2& p = poly[i];
    const Vec2& q = poly[(i + 1) % poly.size()];
    a += p.x * q.y - q.x * p.y;
  }
  return 0.5 * std::abs(a);
}

/// Clips `subject` against the convex CCW polygon `clip`. Points on a clip edge count as inside.
inline std::vector<Vec2> clip_convex(std::vector<Vec2> subject, std::span<const Vec2> clip) {
  for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const Vec2 a = clip[e], b = clip[(e + 1) % clip.size()];
    auto side = [&](const Vec2& p) { return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x); };
    std::vector<Vec2> out;
    out.reserve(subject.size() + 2);
    for (std::size_t i = 0; i < subject.size(); ++i) {
      const Vec2 cur = subject[i], prev = subject[(i + subject.size() - 1) % subject.size()];
      const double sc = side(cur), sp = side(prev);
      const bool in_cur = sc >= 0, in_prev = sp >= 0;
      if (in_cur != in_prev) {
        const double t = sp / (sp - sc);
        out.push_back({prev.x + t * (cur.x - prev.x), prev.y + t * (cur.y - prev.y)});
      }
      if (in_cur) out.push_back(cur);
    }
    subject = std::move(out);
  }
  return subject;
}

namespace detail {
inline auto box_key(const BoundingBox3D& b) {
  return std::tuple(b.center.x, b.center.y, b.center.z, b.w, b.l, b.h, b.yaw);
}
// Orders the pair so f(a,b) and f(b,a) run the identical floating-point computation.
inline std::pair<const BoundingBox3D*, const BoundingBox3D*> ordered(const BoundingBox3D& a,
                                                                     const BoundingBox3D& b) {
  if (box_key(b) < box_key(a)) return {&b, &a};
  return {&a, &b};
}
}  // namespace detail

inline double bev_intersection_area(const BoundingBox3D& a, const BoundingBox3D& b) {
  auto [p, q] = detail::ordered(a, b);
  const auto ca = bev_corners(*p), cb = bev_corners(*q);
  const auto poly = clip_convex(std::vector<Vec2>(ca.begin(), ca.end()), cb);
  return poly.size() < 3 ? 0.0 : polygon_area(poly);
}

inline double rotated_iou_bev(const BoundingBox3D& a, const BoundingBox3D& b) {
  const double area_a = a.w * a.l, area_b = b.w * b.l;
  if (!(area_a > 0) || !(area_b > 0)) return 0.0;
  const double inter = bev_intersection_area(a, b);
  const double uni = area_a + area_b - inter;
  return uni > 0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

inline double iou_3d(const BoundingBox3D& a, const BoundingBox3D& b) {
  if (!(a.volume() > 0) || !(b.volume() > 0)) return 0.0;
  const double z_lo = std::max(a.center.z - 0.5 * a.h, b.center.z - 0.5 * b.h);
  const double z_hi = std::min(a.center.z + 0.5 * a.h, b.center.z + 0.5 * b.h);
  if (z_hi <= z_lo) return 0.0;
  const double inter = bev_intersection_area(a, b) * (z_hi - z_lo);
  const double uni = a.volume() + b.volume() - inter;
  return uni > 0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

enum class IouMode { kBev, k3d };

inline double box_iou(const BoundingBox3D& a, const BoundingBox3D& b, IouMode mode) {
  return mode == IouMode::kBev ? rotated_iou_bev(a, b) : iou_3d(a, b);
}

}  // namespace smf
