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

// Slow, independent reference implementations used only by tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <tuple>
#include <vector>

#include "smf/common.hpp"
#include "smf/geom.hpp"

namespace smf::oracle {

inline double dist2(const Point3& a, const Point3& b) {
  return (a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y) + (a.z - b.z) * (a.z - b.z);
}

/// Containment by projecting onto the box's unit axes.
inline bool inside_box(const Point3& p, const BoundingBox3D& b, double margin) {
  const double ux = std::cos(b.yaw), uy = std::sin(b.yaw);  // heading axis
  const double vx = -uy, vy = ux;                           // lateral axis
  const double rx = p.x - b.center.x, ry = p.y - b.center.y, rz = p.z - b.center.z;
  return std::abs(rx * ux + ry * uy) <= (b.l + margin) / 2 && std::abs(rx * vx + ry * vy) <= (b.w + margin) / 2 &&
         std::abs(rz) <= (b.h + margin) / 2;
}

inline bool inside_footprint(double x, double y, const BoundingBox3D& b) {
  return inside_box({x, y, b.center.z, 0}, b, 0.0);
}

inline double monte_carlo_iou_bev(const BoundingBox3D& a, const BoundingBox3D& b, std::size_t samples,
                                  std::uint64_t seed) {
  const double ra = 0.5 * std::hypot(a.l, a.w), rb = 0.5 * std::hypot(b.l, b.w);
  const double x0 = std::min(a.center.x - ra, b.center.x - rb), x1 = std::max(a.center.x + ra, b.center.x + rb);
  const double y0 = std::min(a.center.y - ra, b.center.y - rb), y1 = std::max(a.center.y + ra, b.center.y + rb);
  Rng rng(seed);
  std::size_t in_both = 0, in_any = 0;
  for (std::size_t i = 0; i < samples; ++i) {
    const double x = rng.uniform(x0, x1), y = rng.uniform(y0, y1);
    const bool ia = inside_footprint(x, y, a), ib = inside_footprint(x, y, b);
    in_both += ia && ib;
    in_any += ia || ib;
  }
  return in_any ? static_cast<double>(in_both) / static_cast<double>(in_any) : 0.0;
}

inline double monte_carlo_iou_3d(const BoundingBox3D& a, const BoundingBox3D& b, std::size_t samples,
                                 std::uint64_t seed) {
  const double ra = 0.5 * std::hypot(a.l, a.w), rb = 0.5 * std::hypot(b.l, b.w);
  const double x0 = std::min(a.center.x - ra, b.center.x - rb), x1 = std::max(a.center.x + ra, b.center.x + rb);
  const double y0 = std::min(a.center.y - ra, b.center.y - rb), y1 = std::max(a.center.y + ra, b.center.y + rb);
  const double z0 = std::min(a.center.z - a.h / 2, b.center.z - b.h / 2);
  const double z1 = std::max(a.center.z + a.h / 2, b.center.z + b.h / 2);
  Rng rng(seed);
  std::size_t in_both = 0, in_any = 0;
  for (std::size_t i = 0; i < samples; ++i) {
    const Point3 p{rng.uniform(x0, x1), rng.uniform(y0, y1), rng.uniform(z0, z1), 0};
    const bool ia = inside_box(p, a, 0), ib = inside_box(p, b, 0);
    in_both += ia && ib;
    in_any += ia || ib;
  }
  return in_any ? static_cast<double>(in_both) / static_cast<double>(in_any) : 0.0;
}

/// Exhaustive greedy farthest-point selection, recomputing every min-distance from scratch.
inline std::vector<std::size_t> greedy_fps(const std::vector<Point3>& pts, std::size_t k, std::size_t seed) {
  std::vector<std::size_t> chosen;
  if (k == 0 || pts.empty()) return chosen;
  chosen.push_back(seed);
  while (chosen.size() < std::min(k, pts.size())) {
    double best = -1;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (std::find(chosen.begin(), chosen.end(), i) != chosen.end()) continue;
      double md = std::numeric_limits<double>::infinity();
      for (std::size_t c : chosen) md = std::min(md, dist2(pts[i], pts[c]));
      if (md > best) {
        best = md;
        arg = i;
      }
    }
    chosen.push_back(arg);
  }
  return chosen;
}

using Cell = std::tuple<long long, long long, long long>;

inline Cell bucket(const Point3& p, const Vec3& v) {
  return {static_cast<long long>(std::floor(p.x / v.x)), static_cast<long long>(std::floor(p.y / v.y)),
          static_cast<long long>(std::floor(p.z / v.z))};
}

/// Per-voxel counts of an unconstrained bucketing.
inline std::map<Cell, std::size_t> bucket_counts(const std::vector<Point3>& pts, const Vec3& v) {
  std::map<Cell, std::size_t> m;
  for (const auto& p : pts) ++m[bucket(p, v)];
  return m;
}

/// Direct six-loop convolution, accumulating over (ci, ky, kx) in order.
inline std::vector<double> naive_conv2d(const std::vector<double>& x, std::size_t cin, std::size_t h, std::size_t w,
                                        const std::vector<double>& wt, std::size_t cout, std::size_t k,
                                        std::size_t stride, std::size_t pad, std::size_t& ho, std::size_t& wo) {
  ho = (h + 2 * pad - k) / stride + 1;
  wo = (w + 2 * pad - k) / stride + 1;
  std::vector<double> out(cout * ho * wo, 0.0);
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double acc = 0.0;
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t ky = 0; ky < k; ++ky)
            for (std::size_t kx = 0; kx < k; ++kx) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(ox * stride + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w)) continue;
              acc += wt[((co * cin + ci) * k + ky) * k + kx] * x[(ci * h + iy) * w + ix];
            }
        out[(co * ho + oy) * wo + ox] = acc;
      }
  return out;
}

/// Direct scatter form of a stride-2, pad-1, output-padding-1 transposed 3x3 convolution.
inline std::vector<double> naive_deconv2d(const std::vector<double>& x, std::size_t cin, std::size_t h, std::size_t w,
                                          const std::vector<double>& wt, std::size_t cout) {
  std::vector<double> out(cout * 4 * h * w, 0.0);
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t iy = 0; iy < h; ++iy)
      for (std::size_t ix = 0; ix < w; ++ix)
        for (std::size_t co = 0; co < cout; ++co)
          for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx) {
              const long oy = static_cast<long>(2 * iy + ky) - 1, ox = static_cast<long>(2 * ix + kx) - 1;
              if (oy < 0 || ox < 0 || oy >= static_cast<long>(2 * h) || ox >= static_cast<long>(2 * w)) continue;
              out[(co * 2 * h + oy) * 2 * w + ox] += x[(ci * h + iy) * w + ix] * wt[((ci * cout + co) * 3 + ky) * 3 + kx];
            }
  return out;
}

}  // namespace smf::oracle
