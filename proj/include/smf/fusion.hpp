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

// Multi-view dense object fusion.
//
// For an object annotated in a target frame, points of the same track are
// gathered from every frame of the sequence in the object's canonical frame,
// farthest-point sampled per local group of frames, denoised and grid
// subsampled. The fused objects of one frame are cached in a binary file and
// later appended to the frame's own points to form the multi-frame cloud.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "smf/common.hpp"
#include "smf/geom.hpp"
#include "smf/parallel.hpp"

namespace smf {

struct Frame {
  PointCloud cloud;
  std::vector<BoundingBox3D> boxes;
  friend bool operator==(const Frame&, const Frame&) = default;

  const BoundingBox3D* find_track(std::uint64_t track_id) const {
    for (const auto& b : boxes)
      if (b.track_id == track_id) return &b;
    return nullptr;
  }
};

struct FrameSequence {
  std::vector<Frame> frames;
};

/// Group t (1-based) holds frames [first, first + size) as sequence positions.
struct FrameGroup {
  std::size_t index = 0;
  std::size_t first = 0;
  std::size_t size = 0;
};

struct FusedObject {
  std::uint64_t track_id = 0;
  BoundingBox3D box;           // pose in the target frame
  std::vector<Point3> points;  // canonical coordinates
  friend bool operator==(const FusedObject&, const FusedObject&) = default;
};

struct FusedObjectFile {
  std::vector<FusedObject> objects;
  friend bool operator==(const FusedObjectFile&, const FusedObjectFile&) = default;
};

struct FusionConfig {
  std::size_t group_size = 5;
  Vec3 voxel{0.1, 0.1, 0.15};
  std::size_t max_per_voxel = 5;
  double denoise_fraction = 0.005;
  std::size_t denoise_neighbors = 8;
  double box_margin = 0.0;
};

// ---------------------------------------------------------------------------

inline std::vector<FrameGroup> group_frames(std::size_t num_frames, std::size_t group_size = 5) {
  if (group_size == 0) throw Error("group_frames: group_size must be >= 1");
  std::vector<FrameGroup> groups;
  for (std::size_t t = 0; t < num_frames / group_size; ++t) groups.push_back({t + 1, t * group_size, group_size});
  return groups;
}

inline std::vector<FrameGroup> group_frames(const FrameSequence& seq, std::size_t group_size = 5) {
  return group_frames(seq.frames.size(), group_size);
}

/// Rounded mean in-box count over the group frames where the track is annotated.
inline std::size_t avg_points_per_frame(std::uint64_t track_id, const FrameGroup& group, const FrameSequence& seq,
                                        double margin = 0.0) {
  std::size_t total = 0, appearances = 0;
  for (std::size_t f = group.first; f < group.first + group.size && f < seq.frames.size(); ++f) {
    const auto* box = seq.frames[f].find_track(track_id);
    if (!box) continue;
    total += points_in_box(seq.frames[f].cloud, *box, margin).size();
    ++appearances;
  }
  if (appearances == 0) return 0;
  return static_cast<std::size_t>(std::llround(static_cast<double>(total) / static_cast<double>(appearances)));
}

inline double squared_distance(const Point3& a, const Point3& b) {
  const double dx = a.x - b.x, dy = a.y - b.y, dz = a.z - b.z;
  return dx * dx + dy * dy + dz * dz;
}

/// Greedy max-min selection starting at `seed_index`. Ties go to the lowest index.
/// k >= |points| selects every point.
inline std::vector<std::size_t> farthest_point_sampling(std::span<const Point3> points, std::size_t k,
                                                        std::size_t seed_index = 0) {
  const std::size_t n = points.size();
  k = std::min(k, n);
  std::vector<std::size_t> chosen;
  if (k == 0) return chosen;
  if (seed_index >= n) throw Error("farthest_point_sampling: seed_index out of range");
  chosen.reserve(k);
  std::vector<double> min_d(n, std::numeric_limits<double>::infinity());
  std::vector<char> taken(n, 0);
  std::size_t cur = seed_index;
  for (;;) {
    chosen.push_back(cur);
    taken[cur] = 1;
    if (chosen.size() == k) break;
    std::size_t best = n;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      min_d[i] = std::min(min_d[i], squared_distance(points[i], points[cur]));
      if (min_d[i] > best_d) {
        best_d = min_d[i];
        best = i;
      }
    }
    cur = best;
  }
  return chosen;
}

/// Statistical outlier removal: drops the ceil(fraction * n) points with the
/// largest mean distance to their `neighbors` nearest neighbours. Clouds with
/// n <= neighbors + 1 are returned unchanged.
inline std::vector<Point3> denoise(std::span<const Point3> points, double fraction = 0.005,
                                   std::size_t neighbors = 8) {
  if (fraction < 0.0 || fraction >= 1.0) throw Error("denoise: fraction must be in [0, 1)");
  const std::size_t n = points.size();
  std::vector<Point3> out(points.begin(), points.end());
  if (n <= neighbors + 1) return out;
  const auto remove = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  if (remove == 0) return out;

  std::vector<double> score(n);
  std::vector<double> nearest(neighbors);
  for (std::size_t i = 0; i < n; ++i) {
    std::fill(nearest.begin(), nearest.end(), std::numeric_limits<double>::infinity());
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double d = squared_distance(points[i], points[j]);
      if (d < nearest.back()) {
        auto pos = std::upper_bound(nearest.begin(), nearest.end(), d);
        std::copy_backward(pos, nearest.end() - 1, nearest.end());
        *pos = d;
      }
    }
    double s = 0;
    for (double d : nearest) s += std::sqrt(d);
    score[i] = s / static_cast<double>(neighbors);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });
  std::vector<char> drop(n, 0);
  for (std::size_t r = 0; r < remove; ++r) drop[order[r]] = 1;
  out.clear();
  for (std::size_t i = 0; i < n; ++i)
    if (!drop[i]) out.push_back(points[i]);
  return out;
}

struct VoxelKey {
  std::int64_t x, y, z;
  friend bool operator==(const VoxelKey&, const VoxelKey&) = default;
};

struct VoxelKeyHash {
  std::size_t operator()(const VoxelKey& k) const noexcept {
    std::uint64_t h = static_cast<std::uint64_t>(k.x) * 0x9e3779b97f4a7c15ULL;
    h ^= static_cast<std::uint64_t>(k.y) * 0xc2b2ae3d27d4eb4fULL + (h << 6) + (h >> 2);
    h ^= static_cast<std::uint64_t>(k.z) * 0x165667b19e3779f9ULL + (h << 6) + (h >> 2);
    return static_cast<std::size_t>(h);
  }
};

inline VoxelKey voxel_key(const Point3& p, const Vec3& voxel) {
  return {static_cast<std::int64_t>(std::floor(p.x / voxel.x)), static_cast<std::int64_t>(std::floor(p.y / voxel.y)),
          static_cast<std::int64_t>(std::floor(p.z / voxel.z))};
}

/// Keeps the first `max_per_voxel` points of every voxel, in input order.
inline std::vector<Point3> grid_subsample(std::span<const Point3> points, const Vec3& voxel = {0.1, 0.1, 0.15},
                                          std::size_t max_per_voxel = 5) {
  if (!(voxel.x > 0 && voxel.y > 0 && voxel.z > 0)) throw Error("grid_subsample: voxel size must be positive");
  std::unordered_map<VoxelKey, std::size_t, VoxelKeyHash> counts;
  std::vector<Point3> out;
  out.reserve(points.size());
  for (const auto& p : points) {
    auto& c = counts[voxel_key(p, voxel)];
    if (c < max_per_voxel) {
      ++c;
      out.push_back(p);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

/// Running totals of one fusion, exposed for accounting checks.
struct FusionTrace {
  std::vector<std::size_t> group_targets;  // N_t per group
  std::size_t sampled = 0;                 // after step 2 (sum of FPS outputs)
  std::size_t denoised = 0;                // after step 3
  std::size_t subsampled = 0;              // after step 4
};

inline FusedObject fuse_object(std::uint64_t track_id, std::size_t target_frame, const FrameSequence& seq,
                               const FusionConfig& cfg = {}, FusionTrace* trace = nullptr) {
  if (target_frame >= seq.frames.size()) throw Error("fuse_object: target frame out of range");
  const BoundingBox3D* target_box = seq.frames[target_frame].find_track(track_id);
  if (!target_box) throw Error("fuse_object: track not in frame");

  std::vector<Point3> dense;
  for (const FrameGroup& g : group_frames(seq, cfg.group_size)) {
    std::vector<Point3> group_points;
    std::size_t total = 0, appearances = 0;
    for (std::size_t f = g.first; f < g.first + g.size; ++f) {
      const Frame& frame = seq.frames[f];
      const auto* box = frame.find_track(track_id);
      if (!box) continue;
      const auto idx = points_in_box(frame.cloud, *box, cfg.box_margin);
      for (std::size_t i : idx) group_points.push_back(to_canonical(frame.cloud.points[i], *box));
      total += idx.size();
      ++appearances;
    }
    const std::size_t target =
        appearances == 0
            ? 0
            : static_cast<std::size_t>(std::llround(static_cast<double>(total) / static_cast<double>(appearances)));
    if (trace) trace->group_targets.push_back(target);
    if (target == 0 || group_points.empty()) continue;
    const std::size_t seed = mix_seed({track_id, target_frame, g.index}) % group_points.size();
    for (std::size_t i : farthest_point_sampling(group_points, target, seed)) dense.push_back(group_points[i]);
  }
  if (trace) trace->sampled = dense.size();

  dense = denoise(dense, cfg.denoise_fraction, cfg.denoise_neighbors);
  if (trace) trace->denoised = dense.size();
  dense = grid_subsample(dense, cfg.voxel, cfg.max_per_voxel);
  if (trace) trace->subsampled = dense.size();

  FusedObject obj;
  obj.track_id = track_id;
  obj.box = *target_box;
  obj.box.center = {to_f32(obj.box.center.x), to_f32(obj.box.center.y), to_f32(obj.box.center.z)};
  obj.box.w = to_f32(obj.box.w);
  obj.box.l = to_f32(obj.box.l);
  obj.box.h = to_f32(obj.box.h);
  obj.box.yaw = to_f32(obj.box.yaw);
  obj.points.reserve(dense.size());
  for (const auto& p : dense) obj.points.push_back({to_f32(p.x), to_f32(p.y), to_f32(p.z), to_f32(p.intensity)});
  return obj;
}

/// Fuses every annotated object of every frame. Output slot j is the file for
/// frame j; the result does not depend on `jobs`.
inline std::vector<FusedObjectFile> fuse_sequence(const FrameSequence& seq, const FusionConfig& cfg = {},
                                                  std::size_t jobs = 1) {
  struct Task {
    std::size_t frame, slot;
  };
  std::vector<Task> tasks;
  std::vector<FusedObjectFile> files(seq.frames.size());
  for (std::size_t f = 0; f < seq.frames.size(); ++f) {
    files[f].objects.resize(seq.frames[f].boxes.size());
    for (std::size_t b = 0; b < seq.frames[f].boxes.size(); ++b) tasks.push_back({f, b});
  }
  parallel_for(tasks.size(), jobs, [&](std::size_t i) {
    const Task& t = tasks[i];
    files[t.frame].objects[t.slot] = fuse_object(seq.frames[t.frame].boxes[t.slot].track_id, t.frame, seq, cfg);
  });
  return files;
}

// ---------------------------------------------------------------------------
// FusedObjectFile: "SMFB", u32 version=1, u32 object_count, u32 reserved=0,
// then per object: u64 track_id, 7 x f32 box (cx,cy,cz,w,l,h,yaw), u32 class,
// u32 point_count, point_count x 4 x f32 (x,y,z,intensity). Little-endian.

inline constexpr std::uint32_t kFusedFileVersion = 1;

inline void write_box7(ByteWriter& w, const BoundingBox3D& b) {
  for (double v : {b.center.x, b.center.y, b.center.z, b.w, b.l, b.h, b.yaw}) w.f32(static_cast<float>(v));
}

inline BoundingBox3D read_box7(ByteReader& r) {
  BoundingBox3D b;
  b.center.x = r.f32("box");
  b.center.y = r.f32("box");
  b.center.z = r.f32("box");
  b.w = r.f32("box");
  b.l = r.f32("box");
  b.h = r.f32("box");
  b.yaw = r.f32("box");
  return b;
}

inline std::vector<std::uint8_t> encode_fused_file(const FusedObjectFile& file) {
  ByteWriter w;
  w.bytes("SMFB", 4);
  w.u32(kFusedFileVersion);
  w.u32(static_cast<std::uint32_t>(file.objects.size()));
  w.u32(0);
  for (const auto& o : file.objects) {
    w.u64(o.track_id);
    write_box7(w, o.box);
    w.u32(o.box.class_id);
    w.u32(static_cast<std::uint32_t>(o.points.size()));
    for (const auto& p : o.points) {
      w.f32(static_cast<float>(p.x));
      w.f32(static_cast<float>(p.y));
      w.f32(static_cast<float>(p.z));
      w.f32(static_cast<float>(p.intensity));
    }
  }
  return w.take();
}

inline FusedObjectFile decode_fused_file(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  r.expect_magic("SMFB");
  const std::size_t version_at = r.pos();
  if (r.u32("version") != kFusedFileVersion) throw ParseError(version_at, "unsupported version");
  const std::size_t count_at = r.pos();
  const std::uint32_t count = r.u32("object_count");
  const std::size_t reserved_at = r.pos();
  if (r.u32("reserved") != 0) throw ParseError(reserved_at, "reserved field must be zero");
  // Smallest possible object record is 8 + 28 + 4 + 4 bytes.
  if (static_cast<std::uint64_t>(count) * 44 > r.remaining())
    throw ParseError(count_at, "object_count exceeds file size");
  FusedObjectFile file;
  file.objects.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    FusedObject o;
    o.track_id = r.u64("track_id");
    o.box = read_box7(r);
    o.box.class_id = r.u32("class_id");
    o.box.track_id = o.track_id;
    const std::size_t n_at = r.pos();
    const std::uint32_t n = r.u32("point_count");
    if (static_cast<std::uint64_t>(n) * 16 > r.remaining()) throw ParseError(n_at, "point_count exceeds file size");
    o.points.resize(n);
    for (auto& p : o.points) {
      p.x = r.f32("point");
      p.y = r.f32("point");
      p.z = r.f32("point");
      p.intensity = r.f32("point");
    }
    file.objects.push_back(std::move(o));
  }
  if (r.remaining() != 0) throw ParseError(r.pos(), "trailing bytes after last object");
  return file;
}

inline void write_fused_file(const FusedObjectFile& file, const std::string& path) {
  write_file_bytes(path, encode_fused_file(file));
}

inline FusedObjectFile read_fused_file(const std::string& path) { return decode_fused_file(read_file_bytes(path)); }

// ---------------------------------------------------------------------------

/// Frame points first and unchanged, then every fused object placed at its
/// frame pose. The single-frame cloud is therefore a prefix of the result.
inline PointCloud assemble_multiframe(const Frame& frame, const FusedObjectFile& fused) {
  PointCloud out = frame.cloud;
  for (const auto& obj : fused.objects) {
    const BoundingBox3D* box = frame.find_track(obj.track_id);
    if (!box)
      throw Error("assemble_multiframe: fused track " + std::to_string(obj.track_id) + " has no box in frame " +
                  std::to_string(frame.cloud.frame_index));
    for (const auto& p : obj.points) out.points.push_back(from_canonical(p, *box));
  }
  return out;
}

}  // namespace smf
