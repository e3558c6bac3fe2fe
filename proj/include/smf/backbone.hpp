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

// Toy center-based detector: voxelizer, voxel encoder, BEV scatter,
// multi-scale RPN (plus the plain two-block RPN), heads, targets, decoding.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "smf/common.hpp"
#include "smf/geom.hpp"
#include "smf/nn.hpp"
#include "smf/tensor.hpp"

namespace smf::model {

using ad::Shape;
using ad::Tensor;
using nn::ParamStore;

// ---------------------------------------------------------------------------
// Configuration

struct GridConfig {
  double x_min = -8, x_max = 8;
  double y_min = -8, y_max = 8;
  double z_min = -0.5, z_max = 3.5;
  double voxel_xy = 0.5;  // also the BEV cell size
  double voxel_z = 0.5;

  std::size_t nx() const { return static_cast<std::size_t>(std::llround((x_max - x_min) / voxel_xy)); }
  std::size_t ny() const { return static_cast<std::size_t>(std::llround((y_max - y_min) / voxel_xy)); }
  std::size_t nz() const { return static_cast<std::size_t>(std::llround((z_max - z_min) / voxel_z)); }
  bool operator==(const GridConfig&) const = default;
};

enum class RpnKind { kMultiScale, kRaw };

/// Plain two-block RPN: block b is a stride-s_b conv plus `layer_nums` convs;
/// every block is brought back to input resolution and concatenated.
struct RawRpnConfig {
  std::size_t in_channels = 16;
  std::size_t layer_nums = 2;
  std::array<std::size_t, 2> strides{2, 2};
  std::array<std::size_t, 2> filters{32, 64};
  std::array<std::size_t, 2> up_filters{16, 16};
  bool operator==(const RawRpnConfig&) const = default;
};

struct MsRpnConfig {
  std::size_t in_channels = 16;
  std::array<std::size_t, 3> widths{16, 32, 64};
  std::size_t bottleneck = 16;
  std::size_t out_channels = 32;
  bool cross_scale = true;
  bool operator==(const MsRpnConfig&) const = default;
};

struct ModelConfig {
  GridConfig grid;
  std::size_t voxel_channels = 16;
  RpnKind rpn = RpnKind::kMultiScale;
  MsRpnConfig ms;
  RawRpnConfig raw;
  std::size_t head_channels = 32;
  std::size_t num_classes = 2;
  double gaussian_overlap = 0.7;
  int min_radius = 2;

  std::size_t rpn_out() const {
    return rpn == RpnKind::kRaw ? raw.up_filters[0] + raw.up_filters[1] : ms.out_channels;
  }
  bool operator==(const ModelConfig&) const = default;

  /// 16 m square at 0.5 m cells; small enough for single-core training.
  static ModelConfig bench() { return {}; }

  /// 32 m square at 0.25 m cells (128 x 128 BEV).
  static ModelConfig desk() {
    ModelConfig c;
    c.grid = {-16, 16, -16, 16, -0.5, 3.5, 0.25, 0.25};
    c.voxel_channels = 32;
    c.ms = {32, {64, 128, 256}, 64, 128, true};
    c.raw = {32, 2, {2, 2}, {128, 256}, {64, 64}};
    c.head_channels = 64;
    return c;
  }

  /// Full-size range and voxel size; kept for format fidelity, not trained here.
  static ModelConfig full_range() {
    ModelConfig c = desk();
    c.grid = {-75.2, 75.2, -75.2, 75.2, -2, 4, 0.1, 0.15};
    return c;
  }
};

// ---------------------------------------------------------------------------
// Voxels

using VoxelCoord = std::array<int, 3>;  // (ix, iy, iz)

struct SparseVoxelGrid {
  GridConfig grid;
  std::vector<VoxelCoord> coords;  // sorted, unique
  Tensor features;                 // [N x C]

  std::size_t size() const { return coords.size(); }
  Vec3 center(std::size_t i) const {
    return {grid.x_min + (coords[i][0] + 0.5) * grid.voxel_xy, grid.y_min + (coords[i][1] + 0.5) * grid.voxel_xy,
            grid.z_min + (coords[i][2] + 0.5) * grid.voxel_z};
  }
};

inline constexpr std::size_t kVoxelInputFeatures = 5;

/// Returns false for points outside the range.
inline bool voxel_of(const Point3& p, const GridConfig& g, VoxelCoord& out) {
  const double fx = std::floor((p.x - g.x_min) / g.voxel_xy);
  const double fy = std::floor((p.y - g.y_min) / g.voxel_xy);
  const double fz = std::floor((p.z - g.z_min) / g.voxel_z);
  if (fx < 0 || fy < 0 || fz < 0 || fx >= static_cast<double>(g.nx()) || fy >= static_cast<double>(g.ny()) ||
      fz >= static_cast<double>(g.nz()))
    return false;
  out = {static_cast<int>(fx), static_cast<int>(fy), static_cast<int>(fz)};
  return true;
}

/// Per voxel: mean xyz offset from the voxel center, mean intensity, n / (n + 4).
inline SparseVoxelGrid voxelize(std::span<const Point3> points, const GridConfig& g) {
  struct Acc {
    double sx = 0, sy = 0, sz = 0, si = 0;
    std::size_t n = 0;
  };
  std::vector<std::pair<VoxelCoord, std::size_t>> keyed;
  keyed.reserve(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) {
    VoxelCoord c;
    if (voxel_of(points[i], g, c)) keyed.push_back({c, i});
  }
  std::stable_sort(keyed.begin(), keyed.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

  SparseVoxelGrid out;
  out.grid = g;
  std::vector<Acc> acc;
  for (const auto& [c, i] : keyed) {
    if (out.coords.empty() || out.coords.back() != c) {
      out.coords.push_back(c);
      acc.emplace_back();
    }
    const auto& p = points[i];
    auto& a = acc.back();
    a.sx += p.x;
    a.sy += p.y;
    a.sz += p.z;
    a.si += p.intensity;
    ++a.n;
  }
  std::vector<double> f;
  f.reserve(out.coords.size() * kVoxelInputFeatures);
  for (std::size_t v = 0; v < out.coords.size(); ++v) {
    const auto& a = acc[v];
    const double n = static_cast<double>(a.n);
    const Vec3 c = out.center(v);
    f.push_back(a.sx / n - c.x);
    f.push_back(a.sy / n - c.y);
    f.push_back(a.sz / n - c.z);
    f.push_back(a.si / n);
    f.push_back(n / (n + 4.0));
  }
  out.features = Tensor::from({out.coords.size(), kVoxelInputFeatures}, std::move(f));
  return out;
}

inline SparseVoxelGrid voxelize(const PointCloud& cloud, const GridConfig& g) { return voxelize(cloud.points, g); }

struct CoordHash {
  std::size_t operator()(const VoxelCoord& c) const {
    return static_cast<std::size_t>(mix_seed({static_cast<std::uint64_t>(c[0]), static_cast<std::uint64_t>(c[1]),
                                              static_cast<std::uint64_t>(c[2])}));
  }
};

/// 6-connected occupied neighbours, in the row order of `coords`.
inline ad::Adjacency six_neighbors(const std::vector<VoxelCoord>& coords) {
  std::unordered_map<VoxelCoord, std::size_t, CoordHash> at;
  at.reserve(coords.size() * 2);
  for (std::size_t i = 0; i < coords.size(); ++i) at.emplace(coords[i], i);
  static constexpr int kOff[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  ad::Adjacency adj;
  adj.offset.reserve(coords.size() + 1);
  for (const auto& c : coords) {
    for (const auto& o : kOff) {
      auto it = at.find({c[0] + o[0], c[1] + o[1], c[2] + o[2]});
      if (it != at.end()) adj.index.push_back(it->second);
    }
    adj.offset.push_back(adj.index.size());
  }
  return adj;
}

inline void add_voxel_encoder(ParamStore& p, std::size_t c, Rng& rng, const std::string& pre = "vfe") {
  p.add_normal(pre + ".w1", {kVoxelInputFeatures, c}, kVoxelInputFeatures, rng);
  p.add_constant(pre + ".b1", {c}, 0.0);
  p.add_normal(pre + ".w2", {c, c}, c, rng);
  p.add_constant(pre + ".b2", {c}, 0.0);
  p.add_normal(pre + ".w3", {2 * c, c}, 2 * c, rng);
  p.add_constant(pre + ".b3", {c}, 0.0);
}

/// Two-layer point-wise MLP, then concat with the mean of occupied
/// 6-neighbours and one mixing layer. Coordinates are untouched.
inline SparseVoxelGrid encode_voxels(const ParamStore& p, const SparseVoxelGrid& in, const std::string& pre = "vfe") {
  using namespace ad;
  if (in.size() == 0) {
    SparseVoxelGrid out = in;
    out.features = Tensor::zeros({0, p.get(pre + ".b3").numel()});
    return out;
  }
  auto h = relu(nn::linear(in.features, p.get(pre + ".w1"), p.get(pre + ".b1")));
  h = relu(nn::linear(h, p.get(pre + ".w2"), p.get(pre + ".b2")));
  const auto nb = neighbor_mean(h, six_neighbors(in.coords));
  SparseVoxelGrid out;
  out.grid = in.grid;
  out.coords = in.coords;
  out.features = relu(nn::linear(concat({h, nb}, 1), p.get(pre + ".w3"), p.get(pre + ".b3")));
  return out;
}

/// Max over z of every (ix, iy) column; [C x ny x nx], empty cells zero.
inline Tensor scatter_to_bev(const SparseVoxelGrid& g) {
  const std::size_t c = g.features.rank() == 2 ? g.features.dim(1) : 0;
  const std::size_t h = g.grid.ny(), w = g.grid.nx();
  if (g.size() == 0) return Tensor::zeros({c, h, w});
  std::vector<std::size_t> cell(g.size());
  for (std::size_t i = 0; i < g.size(); ++i)
    cell[i] = static_cast<std::size_t>(g.coords[i][1]) * w + static_cast<std::size_t>(g.coords[i][0]);
  return ad::scatter_max(g.features, cell, h, w);
}

// ---------------------------------------------------------------------------
// Region proposal networks. All convs are bias-free; 3x3 convs in the conv groups
// are followed by a scale-only channel norm, then ReLU.

inline void add_conv(ParamStore& p, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                     Rng& rng) {
  p.add_normal(name, {cout, cin, k, k}, cin * k * k, rng);
}

/// Conv weight plus the scale of the channel norm that follows it.
inline void add_conv_norm(ParamStore& p, const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                          Rng& rng) {
  add_conv(p, name, cin, cout, k, rng);
  p.add_constant(name + ".g", {cout}, 1.0);
}

inline void add_deconv(ParamStore& p, const std::string& name, std::size_t cin, std::size_t cout, Rng& rng) {
  // Each output pixel sees about cin * 9 / 4 taps.
  p.add_normal(name, {cin, cout, 3, 3}, std::max<std::size_t>(1, cin * 9 / 4), rng);
}

inline void add_ms_rpn(ParamStore& p, const MsRpnConfig& c, Rng& rng, const std::string& pre = "rpn") {
  std::size_t prev = c.in_channels;
  for (std::size_t g = 0; g < 3; ++g) {
    for (std::size_t i = 0; i < 3; ++i) {
      add_conv_norm(p, pre + ".g" + std::to_string(g) + "." + std::to_string(i), i == 0 ? prev : c.widths[g],
                    c.widths[g], 3, rng);
    }
    prev = c.widths[g];
  }
  if (c.cross_scale) {
    add_deconv(p, pre + ".up2", c.widths[2], c.widths[1], rng);
    add_deconv(p, pre + ".up1", c.widths[1], c.widths[0], rng);
  }
  for (std::size_t g = 0; g < 3; ++g) {
    const auto s = std::to_string(g);
    add_conv(p, pre + ".down" + s, c.widths[g], c.bottleneck, 1, rng);
    add_conv(p, pre + ".expand" + s, c.bottleneck, c.out_channels, 1, rng);
    p.add_normal(pre + ".score" + s, {1, c.out_channels, 1, 1}, c.out_channels, rng, 1.0);
  }
}

struct RpnOutput {
  Tensor fused;                // [out x H x W]
  std::vector<Tensor> levels;  // distillation points, all at input resolution
  Tensor spatial_weights;      // [3 x H x W] for the multi-scale RPN
};

inline Tensor conv_relu(const Tensor& x, const Tensor& w, std::size_t stride = 1) {
  const std::size_t k = w.dim(2);
  return ad::relu(ad::conv2d(x, w, stride, k / 2));
}

inline Tensor conv_norm_relu(const ParamStore& p, const std::string& name, const Tensor& x, std::size_t stride = 1) {
  const auto& w = p.get(name);
  return ad::relu(ad::channel_norm(ad::conv2d(x, w, stride, w.dim(2) / 2), p.get(name + ".g")));
}

inline RpnOutput ms_rpn_forward(const ParamStore& p, const MsRpnConfig& c, const Tensor& bev,
                                const std::string& pre = "rpn") {
  using namespace ad;
  if (bev.rank() != 3 || bev.dim(0) != c.in_channels || bev.dim(1) % 4 || bev.dim(2) % 4)
    throw ShapeError("ms_rpn", "input " + shape_str(bev.shape()) + ", need [" + std::to_string(c.in_channels) +
                                   " x 4k x 4k]");
  std::array<Tensor, 3> s;
  Tensor x = bev;
  for (std::size_t g = 0; g < 3; ++g) {
    for (std::size_t i = 0; i < 3; ++i)
      x = conv_norm_relu(p, pre + ".g" + std::to_string(g) + "." + std::to_string(i), x, (i == 0 && g > 0) ? 2 : 1);
    s[g] = x;
  }
  std::array<Tensor, 3> e = s;
  if (c.cross_scale) {
    e[1] = relu(add(s[1], deconv2d(s[2], p.get(pre + ".up2"))));
    e[0] = relu(add(s[0], deconv2d(e[1], p.get(pre + ".up1"))));
  }
  const std::array<Tensor, 3> up = {e[0], bilinear_upsample(e[1], 2), bilinear_upsample(e[2], 4)};

  RpnOutput out;
  std::vector<Tensor> expanded, scores;
  for (std::size_t g = 0; g < 3; ++g) {
    const auto sfx = std::to_string(g);
    auto mid = conv_relu(up[g], p.get(pre + ".down" + sfx));
    out.levels.push_back(mid);
    expanded.push_back(conv_relu(mid, p.get(pre + ".expand" + sfx)));
    scores.push_back(conv2d(expanded.back(), p.get(pre + ".score" + sfx), 1, 0));
  }
  out.spatial_weights = softmax(concat(scores, 0), 0);
  Tensor fused;
  for (std::size_t g = 0; g < 3; ++g) {
    auto term = mul_spatial(expanded[g], slice(out.spatial_weights, 0, g, g + 1));
    fused = g == 0 ? term : add(fused, term);
  }
  out.fused = fused;
  out.levels.push_back(fused);
  return out;
}

inline void add_raw_rpn(ParamStore& p, const RawRpnConfig& c, Rng& rng, const std::string& pre = "rpn") {
  std::size_t prev = c.in_channels, total_stride = 1;
  for (std::size_t b = 0; b < 2; ++b) {
    const auto bs = pre + ".b" + std::to_string(b);
    add_conv_norm(p, bs + ".0", prev, c.filters[b], 3, rng);
    for (std::size_t i = 0; i < c.layer_nums; ++i)
      add_conv_norm(p, bs + "." + std::to_string(i + 1), c.filters[b], c.filters[b], 3, rng);
    prev = c.filters[b];
    total_stride *= c.strides[b];
    if (total_stride == 1) {
      add_conv(p, bs + ".up0", c.filters[b], c.up_filters[b], 1, rng);
    } else {
      std::size_t cin = c.filters[b];
      for (std::size_t s = 1, i = 0; s < total_stride; s *= 2, ++i) {
        add_deconv(p, bs + ".up" + std::to_string(i), cin, c.up_filters[b], rng);
        cin = c.up_filters[b];
      }
    }
  }
}

inline RpnOutput raw_rpn_forward(const ParamStore& p, const RawRpnConfig& c, const Tensor& bev,
                                 const std::string& pre = "rpn") {
  using namespace ad;
  if (bev.rank() != 3 || bev.dim(0) != c.in_channels)
    throw ShapeError("raw_rpn", "input " + shape_str(bev.shape()) + ", need " + std::to_string(c.in_channels) +
                                    " channels");
  Tensor x = bev;
  std::size_t total_stride = 1;
  std::vector<Tensor> ups;
  for (std::size_t b = 0; b < 2; ++b) {
    const auto bs = pre + ".b" + std::to_string(b);
    if (c.strides[b] != 1 && c.strides[b] != 2) throw Error("raw_rpn: strides must be 1 or 2");
    x = conv_norm_relu(p, bs + ".0", x, c.strides[b]);
    for (std::size_t i = 0; i < c.layer_nums; ++i) x = conv_norm_relu(p, bs + "." + std::to_string(i + 1), x);
    total_stride *= c.strides[b];
    Tensor u;
    if (total_stride == 1) {
      u = conv_relu(x, p.get(bs + ".up0"));
    } else {
      u = x;
      for (std::size_t s = 1, i = 0; s < total_stride; s *= 2, ++i)
        u = relu(deconv2d(u, p.get(bs + ".up" + std::to_string(i))));
    }
    ups.push_back(u);
  }
  RpnOutput out;
  out.fused = concat(ups, 0);
  out.levels = {out.fused};
  return out;
}

// ---------------------------------------------------------------------------
// Detector

inline constexpr std::size_t kRegChannels = 8;  // dx, dy, z, log w, log l, log h, sin yaw, cos yaw
inline constexpr double kHeatmapPriorBias = -2.19;

inline ParamStore init_detector(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(mix_seed({seed, 0xde7ec7}));
  ParamStore p;
  add_voxel_encoder(p, cfg.voxel_channels, rng);
  if (cfg.rpn == RpnKind::kMultiScale) {
    auto ms = cfg.ms;
    ms.in_channels = cfg.voxel_channels;
    add_ms_rpn(p, ms, rng);
  } else {
    auto raw = cfg.raw;
    raw.in_channels = cfg.voxel_channels;
    add_raw_rpn(p, raw, rng);
  }
  add_conv(p, "head.shared", cfg.rpn_out(), cfg.head_channels, 3, rng);
  p.add_constant("head.shared_b", {cfg.head_channels}, 0.0);
  p.add_normal("head.heat", {cfg.num_classes, cfg.head_channels, 1, 1}, cfg.head_channels, rng, 1.0);
  p.add_constant("head.heat_b", {cfg.num_classes}, kHeatmapPriorBias);
  p.add_normal("head.reg", {kRegChannels, cfg.head_channels, 1, 1}, cfg.head_channels, rng, 0.1);
  p.add_constant("head.reg_b", {kRegChannels}, 0.0);
  return p;
}

struct ResponseMaps {
  Tensor logits;   // [K x H x W]
  Tensor heatmap;  // sigmoid(logits)
  Tensor reg;      // [8 x H x W]
};

inline ResponseMaps detection_head(const ParamStore& p, const Tensor& fused) {
  using namespace ad;
  const auto h = relu(add_bias(conv2d(fused, p.get("head.shared"), 1, 1), p.get("head.shared_b")));
  ResponseMaps r;
  r.logits = add_bias(conv2d(h, p.get("head.heat"), 1, 0), p.get("head.heat_b"));
  r.heatmap = sigmoid(r.logits);
  r.reg = add_bias(conv2d(h, p.get("head.reg"), 1, 0), p.get("head.reg_b"));
  return r;
}

struct DetectorOutput {
  SparseVoxelGrid voxels;  // encoded
  Tensor bev;
  RpnOutput rpn;
  ResponseMaps resp;
};

/// Forward pass from an already voxelized (raw feature) grid.
inline DetectorOutput detector_forward(const ParamStore& p, const ModelConfig& cfg, const SparseVoxelGrid& raw) {
  DetectorOutput out;
  out.voxels = encode_voxels(p, raw);
  out.bev = scatter_to_bev(out.voxels);
  if (cfg.rpn == RpnKind::kMultiScale) {
    auto ms = cfg.ms;
    ms.in_channels = cfg.voxel_channels;
    out.rpn = ms_rpn_forward(p, ms, out.bev);
  } else {
    auto raw_cfg = cfg.raw;
    raw_cfg.in_channels = cfg.voxel_channels;
    out.rpn = raw_rpn_forward(p, raw_cfg, out.bev);
  }
  out.resp = detection_head(p, out.rpn.fused);
  return out;
}

inline DetectorOutput detector_forward(const ParamStore& p, const ModelConfig& cfg, std::span<const Point3> points) {
  return detector_forward(p, cfg, voxelize(points, cfg.grid));
}

/// Channel count of each distillation level.
inline std::vector<std::size_t> level_channels(const ModelConfig& cfg) {
  if (cfg.rpn == RpnKind::kRaw) return {cfg.rpn_out()};
  return {cfg.ms.bottleneck, cfg.ms.bottleneck, cfg.ms.bottleneck, cfg.ms.out_channels};
}

// ---------------------------------------------------------------------------
// Targets

/// Largest radius r (in cells) such that a box shifted by r keeps IoU >= min_overlap
/// with the target (three-case rule on the box footprint in cells).
inline double gaussian_radius(double height, double width, double min_overlap) {
  const double a1 = 1, b1 = height + width, c1 = width * height * (1 - min_overlap) / (1 + min_overlap);
  const double r1 = (b1 + std::sqrt(b1 * b1 - 4 * a1 * c1)) / 2;
  const double a2 = 4, b2 = 2 * (height + width), c2 = (1 - min_overlap) * width * height;
  const double r2 = (b2 + std::sqrt(b2 * b2 - 4 * a2 * c2)) / 2;
  const double a3 = 4 * min_overlap, b3 = -2 * min_overlap * (height + width), c3 = (min_overlap - 1) * width * height;
  const double r3 = (b3 + std::sqrt(b3 * b3 - 4 * a3 * c3)) / 2;
  return std::min({r1, r2, r3});
}

struct Targets {
  Tensor heatmap;                       // [K x H x W]
  std::vector<std::size_t> center;      // flat cell index y * W + x per object
  std::vector<std::uint32_t> cls;       // per object
  Tensor reg;                           // [8 x n_objects]
  std::vector<BoundingBox3D> boxes;     // objects that made it into the map
};

/// Continuous cell coordinates of a world position.
inline void world_to_cell(const GridConfig& g, double x, double y, double& cx, double& cy) {
  cx = (x - g.x_min) / g.voxel_xy;
  cy = (y - g.y_min) / g.voxel_xy;
}

inline Targets build_targets(const std::vector<BoundingBox3D>& boxes, const ModelConfig& cfg) {
  const auto& g = cfg.grid;
  const std::size_t h = g.ny(), w = g.nx(), k = cfg.num_classes;
  Targets t;
  std::vector<double> heat(k * h * w, 0.0);
  std::vector<std::array<double, kRegChannels>> regs;
  for (const auto& b : boxes) {
    if (b.class_id >= k) continue;
    double cx, cy;
    world_to_cell(g, b.center.x, b.center.y, cx, cy);
    const double fx = std::floor(cx), fy = std::floor(cy);
    if (fx < 0 || fy < 0 || fx >= static_cast<double>(w) || fy >= static_cast<double>(h)) continue;
    const int ix = static_cast<int>(fx), iy = static_cast<int>(fy);
    const double rad = gaussian_radius(b.l / g.voxel_xy, b.w / g.voxel_xy, cfg.gaussian_overlap);
    const int r = std::max(cfg.min_radius, static_cast<int>(rad));
    const double sigma = r / 3.0;
    double* plane = heat.data() + b.class_id * h * w;
    for (int dy = -r; dy <= r; ++dy)
      for (int dx = -r; dx <= r; ++dx) {
        const int x = ix + dx, y = iy + dy;
        if (x < 0 || y < 0 || x >= static_cast<int>(w) || y >= static_cast<int>(h)) continue;
        const double v = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
        double& dst = plane[static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)];
        dst = std::max(dst, v);
      }
    t.center.push_back(static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix));
    t.cls.push_back(b.class_id);
    t.boxes.push_back(b);
    regs.push_back({cx - fx, cy - fy, b.center.z, std::log(b.w), std::log(b.l), std::log(b.h), std::sin(b.yaw),
                    std::cos(b.yaw)});
  }
  t.heatmap = Tensor::from({k, h, w}, std::move(heat));
  std::vector<double> rv(kRegChannels * regs.size());
  for (std::size_t i = 0; i < regs.size(); ++i)
    for (std::size_t d = 0; d < kRegChannels; ++d) rv[d * regs.size() + i] = regs[i][d];
  t.reg = Tensor::from({kRegChannels, regs.size()}, std::move(rv));
  return t;
}

/// Box encoded by the 8 regression values at cell (ix, iy).
inline BoundingBox3D decode_box(const GridConfig& g, std::size_t ix, std::size_t iy, const double* r) {
  auto clamp_exp = [](double v) { return std::exp(std::clamp(v, -6.0, 6.0)); };
  BoundingBox3D b;
  b.center = {g.x_min + (static_cast<double>(ix) + r[0]) * g.voxel_xy,
              g.y_min + (static_cast<double>(iy) + r[1]) * g.voxel_xy, r[2]};
  b.w = clamp_exp(r[3]);
  b.l = clamp_exp(r[4]);
  b.h = clamp_exp(r[5]);
  b.yaw = (r[6] == 0 && r[7] == 0) ? 0.0 : wrap_angle(std::atan2(r[6], r[7]));
  return b;
}

/// Gathers the 8 regression channels of a [8 x H x W] map at one flat cell.
inline std::array<double, kRegChannels> reg_at(const Tensor& reg, std::size_t cell) {
  const std::size_t hw = reg.dim(1) * reg.dim(2);
  std::array<double, kRegChannels> r;
  for (std::size_t d = 0; d < kRegChannels; ++d) r[d] = reg[d * hw + cell];
  return r;
}

struct Detection {
  BoundingBox3D box;
  double score = 0;
};

/// 3x3 local-max peaks above the threshold, best first.
inline std::vector<Detection> decode_detections(const ResponseMaps& resp, const GridConfig& g,
                                                double score_threshold = 0.1, std::size_t max_det = 100) {
  const auto& hm = resp.heatmap;
  const std::size_t k = hm.dim(0), h = hm.dim(1), w = hm.dim(2);
  std::vector<Detection> dets;
  for (std::size_t c = 0; c < k; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double s = hm[(c * h + y) * w + x];
        if (s < score_threshold) continue;
        bool peak = true;
        for (int dy = -1; dy <= 1 && peak; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
            if ((dx == 0 && dy == 0) || yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w))
              continue;
            const double o = hm[(c * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xx)];
            // Plateaus: the first cell in raster order wins.
            if (o > s || (o == s && (dy < 0 || (dy == 0 && dx < 0)))) {
              peak = false;
              break;
            }
          }
        if (!peak) continue;
        const auto r = reg_at(resp.reg, y * w + x);
        Detection d{decode_box(g, x, y, r.data()), s};
        d.box.class_id = static_cast<std::uint32_t>(c);
        dets.push_back(d);
      }
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) { return a.score > b.score; });
  if (dets.size() > max_det) dets.resize(max_det);
  return dets;
}

// ---------------------------------------------------------------------------
// Supervised loss

struct SupervisedLoss {
  Tensor cls, reg, total;
};

/// Focal loss over the heatmap plus L1 on the regression at object centers,
/// both normalized by the object count. total = cls + alpha * reg.
inline SupervisedLoss supervised_loss(const ResponseMaps& r, const Targets& t, double alpha = 2.0) {
  using namespace ad;
  const double norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, t.center.size()));
  SupervisedLoss out;
  out.cls = scale(focal_loss(r.logits, t.heatmap), norm);
  if (t.center.empty()) {
    out.reg = Tensor::scalar(0.0);
  } else {
    const std::size_t hw = r.reg.dim(1) * r.reg.dim(2);
    const auto picked = index_select(reshape(r.reg, {kRegChannels, hw}), 1, t.center);
    out.reg = scale(sum(abs(sub(picked, t.reg))), norm);
  }
  out.total = add(out.cls, scale(out.reg, alpha));
  return out;
}

/// Trainable-parameter count of an RPN alone.
inline std::size_t count_ms_rpn(const MsRpnConfig& c) {
  Rng rng(0);
  ParamStore p;
  p.shapes_only = true;
  add_ms_rpn(p, c, rng);
  return p.parameter_count();
}

inline std::size_t count_raw_rpn(const RawRpnConfig& c) {
  Rng rng(0);
  ParamStore p;
  p.shapes_only = true;
  add_raw_rpn(p, c, rng);
  return p.parameter_count();
}

}  // namespace smf::model
