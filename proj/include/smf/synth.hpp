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

// Synthetic annotated sequences: box-shell objects seen from a fixed sensor,
// only sensor-facing faces sampled, plus a ground plane. Also the frame file
// format and the surface-coverage counter.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "smf/common.hpp"
#include "smf/fusion.hpp"
#include "smf/geom.hpp"
#include "smf/parallel.hpp"

namespace smf::synth {

struct ObjectSpec {
  std::uint32_t class_id = 0;
  double w = 1.8, l = 4.2, h = 1.6;
  double x0 = 5, y0 = 0, yaw0 = 0;
  double speed = 0;     // meters per frame along the heading
  double yaw_rate = 0;  // radians per frame
  // Alternative motion: circle the sensor at fixed yaw (used by the orbit benchmark).
  double orbit_radius = 0;
  double orbit_rate = 0;
};

struct SensorSpec {
  Vec3 origin{0, 0, 1.8};
  double density = 1200;  // points per m^2 at 1 m, falls off with range^2
  double max_range = 12;
  double dropout = 0.0;
  double ground_density = 250;  // points per m^2 at 1 m
  double ground_extent = 8;     // ground sampled in [-e, e]^2
  double min_ground_range = 1.5;
  bool ground = true;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  std::size_t num_frames = 20;
  std::vector<ObjectSpec> objects;
  SensorSpec sensor;

  void validate() const {
    if (num_frames == 0) throw Error("scene: num_frames must be positive");
    if (sensor.density < 0 || sensor.ground_density < 0 || sensor.max_range <= 0)
      throw Error("scene: sensor densities must be >= 0 and range > 0");
    if (sensor.dropout < 0 || sensor.dropout >= 1) throw Error("scene: dropout must be in [0, 1)");
    for (const auto& o : objects)
      if (!(o.w > 0 && o.l > 0 && o.h > 0)) throw Error("scene: object sizes must be positive");
  }
};

/// Pose of object `o` at frame t.
inline BoundingBox3D object_box(const ObjectSpec& o, std::size_t t, std::uint64_t track_id) {
  BoundingBox3D b;
  b.w = o.w;
  b.l = o.l;
  b.h = o.h;
  b.class_id = o.class_id;
  b.track_id = track_id;
  const double ft = static_cast<double>(t);
  if (o.orbit_radius > 0) {
    const double a = std::atan2(o.y0, o.x0) + o.orbit_rate * ft;
    b.center = {o.orbit_radius * std::cos(a), o.orbit_radius * std::sin(a), o.h / 2};
    b.yaw = wrap_angle(o.yaw0);
  } else {
    // Arc of constant speed and yaw rate, integrated in closed form.
    double x = o.x0, y = o.y0;
    if (std::abs(o.yaw_rate) < 1e-12) {
      x += o.speed * ft * std::cos(o.yaw0);
      y += o.speed * ft * std::sin(o.yaw0);
    } else {
      const double r = o.speed / o.yaw_rate, a1 = o.yaw0 + o.yaw_rate * ft;
      x += r * (std::sin(a1) - std::sin(o.yaw0));
      y += r * (std::cos(o.yaw0) - std::cos(a1));
    }
    b.center = {x, y, o.h / 2};
    b.yaw = wrap_angle(o.yaw0 + o.yaw_rate * ft);
  }
  return b;
}

/// Face f of a box in canonical coordinates: 0/1 = +x/-x (ends), 2/3 = +y/-y
/// (sides), 4/5 = +z/-z. Returns outward normal and the two in-plane half extents.
struct Face {
  Vec3 normal, u, v;  // unit vectors
  double du = 0, dv = 0, offset = 0;
};

inline Face box_face(const BoundingBox3D& b, int f) {
  const double hl = b.l / 2, hw = b.w / 2, hh = b.h / 2;
  switch (f) {
    case 0: return {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, hw, hh, hl};
    case 1: return {{-1, 0, 0}, {0, 1, 0}, {0, 0, 1}, hw, hh, hl};
    case 2: return {{0, 1, 0}, {1, 0, 0}, {0, 0, 1}, hl, hh, hw};
    case 3: return {{0, -1, 0}, {1, 0, 0}, {0, 0, 1}, hl, hh, hw};
    case 4: return {{0, 0, 1}, {1, 0, 0}, {0, 1, 0}, hl, hw, hh};
    default: return {{0, 0, -1}, {1, 0, 0}, {0, 1, 0}, hl, hw, hh};
  }
}

/// Expected count with a stochastic remainder, so densities below one point stay unbiased.
inline std::size_t draw_count(double expected, Rng& rng) {
  if (expected <= 0) return 0;
  const double fl = std::floor(expected);
  return static_cast<std::size_t>(fl) + (rng.bernoulli(expected - fl) ? 1 : 0);
}

inline constexpr double kBodyReflectance = 0.6;
inline constexpr double kFrontReflectance = 0.9;

/// Surface points of the faces of `b` that face the sensor.
inline void render_box(const BoundingBox3D& b, const SensorSpec& s, Rng& rng, std::vector<Point3>& out) {
  const Point3 eye = to_canonical({s.origin.x, s.origin.y, s.origin.z, 0}, b);
  for (int f = 0; f < 5; ++f) {  // the bottom face never faces a sensor above ground
    const Face face = box_face(b, f);
    const Vec3 c{face.normal.x * face.offset, face.normal.y * face.offset, face.normal.z * face.offset};
    const double tx = eye.x - c.x, ty = eye.y - c.y, tz = eye.z - c.z;
    const double dist = std::sqrt(tx * tx + ty * ty + tz * tz);
    const double cosine = (tx * face.normal.x + ty * face.normal.y + tz * face.normal.z) / dist;
    if (cosine <= 0 || dist > s.max_range) continue;
    const double area = 4 * face.du * face.dv;
    // The front face reflects more strongly so heading is observable.
    const double reflectance = f == 0 ? kFrontReflectance : kBodyReflectance;
    const std::size_t n = draw_count(area * s.density * cosine / (dist * dist), rng);
    for (std::size_t i = 0; i < n; ++i) {
      const double a = rng.uniform(-face.du, face.du), bb = rng.uniform(-face.dv, face.dv);
      const double intensity = std::clamp(reflectance + 0.1 * rng.normal(), 0.0, 1.0);
      if (rng.bernoulli(s.dropout)) continue;
      const Point3 q{c.x + a * face.u.x + bb * face.v.x, c.y + a * face.u.y + bb * face.v.y,
                     c.z + a * face.u.z + bb * face.v.z, intensity};
      out.push_back(from_canonical(q, b));
    }
  }
}

/// Ground points with range-dependent density, none under any object.
inline void render_ground(const std::vector<BoundingBox3D>& boxes, const SensorSpec& s, Rng& rng,
                          std::vector<Point3>& out) {
  if (!s.ground) return;
  const double e = s.ground_extent, cell = 0.5;
  const int n = static_cast<int>(std::llround(2 * e / cell));
  for (int iy = 0; iy < n; ++iy)
    for (int ix = 0; ix < n; ++ix) {
      const double cx = -e + (ix + 0.5) * cell, cy = -e + (iy + 0.5) * cell;
      const double r2 = cx * cx + cy * cy + s.origin.z * s.origin.z;
      if (std::sqrt(cx * cx + cy * cy) < s.min_ground_range || r2 > s.max_range * s.max_range) continue;
      const std::size_t k = draw_count(cell * cell * s.ground_density * s.origin.z / (r2 * std::sqrt(r2)) * 4, rng);
      for (std::size_t i = 0; i < k; ++i) {
        const double x = cx + rng.uniform(-cell / 2, cell / 2), y = cy + rng.uniform(-cell / 2, cell / 2);
        const double z = 0.02 * rng.normal();
        const double intensity = std::clamp(0.2 + 0.05 * rng.normal(), 0.0, 1.0);
        if (rng.bernoulli(s.dropout)) continue;
        if (std::any_of(boxes.begin(), boxes.end(), [&](const auto& b) { return box_contains_bev(b, x, y); }))
          continue;
        out.push_back({x, y, z, intensity});
      }
    }
}

inline Point3 quantize(const Point3& p) { return {to_f32(p.x), to_f32(p.y), to_f32(p.z), to_f32(p.intensity)}; }

inline BoundingBox3D quantize(BoundingBox3D b) {
  b.center = {to_f32(b.center.x), to_f32(b.center.y), to_f32(b.center.z)};
  b.w = to_f32(b.w);
  b.l = to_f32(b.l);
  b.h = to_f32(b.h);
  b.yaw = to_f32(b.yaw);
  return b;
}

inline std::uint64_t track_id_of(std::uint64_t seed, std::size_t object) { return mix_seed({seed, object}) >> 16; }

/// Frame t alone; every frame draws from its own stream.
inline Frame generate_frame(const SceneSpec& spec, std::size_t t) {
  Rng rng(mix_seed({spec.seed, 0xf7a3e, t}));
  Frame f;
  f.cloud.frame_index = t;
  for (std::size_t i = 0; i < spec.objects.size(); ++i)
    f.boxes.push_back(quantize(object_box(spec.objects[i], t, track_id_of(spec.seed, i))));
  std::vector<Point3> pts;
  for (const auto& b : f.boxes) render_box(b, spec.sensor, rng, pts);
  render_ground(f.boxes, spec.sensor, rng, pts);
  f.cloud.points.reserve(pts.size());
  for (const auto& p : pts) f.cloud.points.push_back(quantize(p));
  return f;
}

inline FrameSequence generate_sequence(const SceneSpec& spec, std::size_t jobs = 1) {
  spec.validate();
  FrameSequence seq;
  seq.frames.resize(spec.num_frames);
  parallel_for(spec.num_frames, jobs, [&](std::size_t t) { seq.frames[t] = generate_frame(spec, t); });
  return seq;
}

// ---------------------------------------------------------------------------
// Scene presets

struct ClassShape {
  double w, l, h, dw, dl, dh;
};

inline constexpr ClassShape kVehicle{1.8, 4.2, 1.6, 0.15, 0.4, 0.15};
inline constexpr ClassShape kCyclist{0.7, 1.8, 1.7, 0.1, 0.15, 0.1};

struct BenchmarkSpec {
  std::size_t num_frames = 20;
  std::size_t min_objects = 3, max_objects = 6;
  double cyclist_fraction = 0.35;
  double region = 6.5;  // object starts in [-region, region]^2
  double min_range = 3.0;
  SensorSpec sensor{.density = 500, .max_range = 12, .dropout = 0.3, .ground_density = 250};
};

/// Random scene: non-overlapping objects on gentle arcs.
inline SceneSpec random_scene(std::uint64_t seed, const BenchmarkSpec& b = {}) {
  Rng rng(mix_seed({seed, 0x5ce4e}));
  SceneSpec s;
  s.seed = seed;
  s.num_frames = b.num_frames;
  s.sensor = b.sensor;
  const std::size_t n = b.min_objects + rng.below(b.max_objects - b.min_objects + 1);
  std::vector<BoundingBox3D> placed;
  for (std::size_t tries = 0; s.objects.size() < n && tries < 200; ++tries) {
    ObjectSpec o;
    o.class_id = rng.bernoulli(b.cyclist_fraction) ? 1 : 0;
    const ClassShape& cs = o.class_id == 0 ? kVehicle : kCyclist;
    o.w = cs.w + rng.uniform(-cs.dw, cs.dw);
    o.l = cs.l + rng.uniform(-cs.dl, cs.dl);
    o.h = cs.h + rng.uniform(-cs.dh, cs.dh);
    o.x0 = rng.uniform(-b.region, b.region);
    o.y0 = rng.uniform(-b.region, b.region);
    o.yaw0 = rng.uniform(-kPi, kPi);
    o.speed = rng.uniform(0.0, o.class_id == 0 ? 0.35 : 0.2);
    o.yaw_rate = rng.uniform(-0.12, 0.12);
    if (std::hypot(o.x0, o.y0) < b.min_range) continue;
    // No overlap with earlier objects anywhere along the trajectory.
    bool clash = false;
    for (std::size_t t = 0; t < s.num_frames && !clash; ++t) {
      const auto me = object_box(o, t, 0);
      auto grown = me;
      grown.w += 0.5;
      grown.l += 0.5;
      if (std::hypot(me.center.x, me.center.y) < b.min_range - 1) clash = true;
      for (std::size_t k = 0; k < s.objects.size() && !clash; ++k) {
        auto other = object_box(s.objects[k], t, 0);
        if (bev_intersection_area(grown, other) > 0) clash = true;
      }
    }
    if (!clash) s.objects.push_back(o);
  }
  return s;
}

/// One vehicle circling the sensor at fixed heading over the whole sequence,
/// so every lateral face faces the sensor at some point.
inline SceneSpec orbit_scene(std::uint64_t seed, std::size_t num_frames = 20) {
  SceneSpec s;
  s.seed = seed;
  s.num_frames = num_frames;
  ObjectSpec o;
  o.x0 = 6;
  o.y0 = 0;
  o.yaw0 = 0.3;
  o.orbit_radius = 6;
  o.orbit_rate = 2 * kPi / static_cast<double>(num_frames);
  s.objects.push_back(o);
  s.sensor.density = 1200;
  s.sensor.dropout = 0.1;
  s.sensor.ground = false;
  return s;
}

// ---------------------------------------------------------------------------
// Surface coverage over the four lateral faces of a box.

struct CoverageGrid {
  std::size_t total = 0;
  std::vector<char> hit;
};

/// Bins of roughly `bin` meters on faces 0..3; a canonical point counts
/// toward the lateral face it is nearest to, if within `tol` of it.
inline double lateral_coverage(std::span<const Point3> canonical, const BoundingBox3D& b, double bin = 0.4,
                               double tol = 0.05) {
  struct Layout {
    std::size_t nu, nv, first;
  };
  std::vector<Layout> faces;
  std::size_t total = 0;
  for (int f = 0; f < 4; ++f) {
    const Face face = box_face(b, f);
    const std::size_t nu = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(2 * face.du / bin)));
    const std::size_t nv = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(2 * face.dv / bin)));
    faces.push_back({nu, nv, total});
    total += nu * nv;
  }
  std::vector<char> hit(total, 0);
  for (const auto& p : canonical) {
    int best = -1;
    double best_gap = tol;
    for (int f = 0; f < 4; ++f) {
      const Face face = box_face(b, f);
      const double along = p.x * face.normal.x + p.y * face.normal.y;
      const double gap = std::abs(along - face.offset);
      if (gap <= best_gap) {
        best_gap = gap;
        best = f;
      }
    }
    if (best < 0) continue;
    const Face face = box_face(b, best);
    const double a = p.x * face.u.x + p.y * face.u.y + p.z * face.u.z;
    const double c = p.x * face.v.x + p.y * face.v.y + p.z * face.v.z;
    if (std::abs(a) > face.du || std::abs(c) > face.dv) continue;
    const auto& L = faces[static_cast<std::size_t>(best)];
    const std::size_t iu = std::min(L.nu - 1, static_cast<std::size_t>((a + face.du) / (2 * face.du) * L.nu));
    const std::size_t iv = std::min(L.nv - 1, static_cast<std::size_t>((c + face.dv) / (2 * face.dv) * L.nv));
    hit[L.first + iu * L.nv + iv] = 1;
  }
  return static_cast<double>(std::count(hit.begin(), hit.end(), 1)) / static_cast<double>(total);
}

struct OrbitReport {
  double max_single_frame = 0;  // best single-frame coverage
  double min_fused = 1;         // worst fused coverage over target frames
};

inline OrbitReport orbit_benchmark(std::uint64_t seed, std::size_t num_frames = 20, std::size_t jobs = 1) {
  const auto seq = generate_sequence(orbit_scene(seed, num_frames), jobs);
  const auto fused = fuse_sequence(seq, {}, jobs);
  OrbitReport r;
  for (std::size_t t = 0; t < seq.frames.size(); ++t) {
    const auto& f = seq.frames[t];
    for (const auto& b : f.boxes) {
      const auto idx = points_in_box(f.cloud, b);
      std::vector<Point3> can;
      for (auto i : idx) can.push_back(to_canonical(f.cloud.points[i], b));
      r.max_single_frame = std::max(r.max_single_frame, lateral_coverage(can, b));
    }
    for (const auto& o : fused[t].objects) r.min_fused = std::min(r.min_fused, lateral_coverage(o.points, o.box));
  }
  return r;
}

// ---------------------------------------------------------------------------
// FrameFile: "SMFF", u32 version=1, u32 frame_index, u32 point_count,
// u32 box_count, points as 4 x f32, boxes as u64 track, u32 class, 7 x f32.

inline constexpr std::uint32_t kFrameFileVersion = 1;

inline std::vector<std::uint8_t> encode_frame(const Frame& f) {
  ByteWriter w;
  w.bytes("SMFF", 4);
  w.u32(kFrameFileVersion);
  w.u32(static_cast<std::uint32_t>(f.cloud.frame_index));
  w.u32(static_cast<std::uint32_t>(f.cloud.points.size()));
  w.u32(static_cast<std::uint32_t>(f.boxes.size()));
  for (const auto& p : f.cloud.points) {
    w.f32(static_cast<float>(p.x));
    w.f32(static_cast<float>(p.y));
    w.f32(static_cast<float>(p.z));
    w.f32(static_cast<float>(p.intensity));
  }
  for (const auto& b : f.boxes) {
    w.u64(b.track_id);
    w.u32(b.class_id);
    write_box7(w, b);
  }
  return w.take();
}

inline Frame decode_frame(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  r.expect_magic("SMFF");
  const std::size_t version_at = r.pos();
  if (r.u32("version") != kFrameFileVersion) throw ParseError(version_at, "unsupported version");
  Frame f;
  f.cloud.frame_index = r.u32("frame_index");
  const std::size_t np_at = r.pos();
  const std::uint32_t np = r.u32("point_count");
  const std::size_t nb_at = r.pos();
  const std::uint32_t nb = r.u32("box_count");
  if (static_cast<std::uint64_t>(np) * 16 > r.remaining()) throw ParseError(np_at, "point_count exceeds file size");
  if (static_cast<std::uint64_t>(np) * 16 + static_cast<std::uint64_t>(nb) * 40 != r.remaining())
    throw ParseError(nb_at, "box_count does not match file size");
  f.cloud.points.resize(np);
  for (auto& p : f.cloud.points) {
    p.x = r.f32("point");
    p.y = r.f32("point");
    p.z = r.f32("point");
    p.intensity = r.f32("point");
  }
  f.boxes.resize(nb);
  for (auto& b : f.boxes) {
    const auto track = r.u64("track_id");
    const auto cls = r.u32("class_id");
    b = read_box7(r);
    b.track_id = track;
    b.class_id = cls;
  }
  return f;
}

inline std::string frame_path(const std::string& dir, std::size_t t) {
  char name[32];
  std::snprintf(name, sizeof name, "frame_%06zu.smff", t);
  return (std::filesystem::path(dir) / name).string();
}

inline std::string fused_path(const std::string& dir, std::size_t t) {
  char name[32];
  std::snprintf(name, sizeof name, "fused_%06zu.smfb", t);
  return (std::filesystem::path(dir) / name).string();
}

inline void write_frame(const Frame& f, const std::string& path) { write_file_bytes(path, encode_frame(f)); }
inline Frame read_frame(const std::string& path) { return decode_frame(read_file_bytes(path)); }

inline void write_sequence(const FrameSequence& seq, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t t = 0; t < seq.frames.size(); ++t) write_frame(seq.frames[t], frame_path(dir, t));
}

inline FrameSequence read_sequence(const std::string& dir) {
  FrameSequence seq;
  for (std::size_t t = 0;; ++t) {
    const auto p = frame_path(dir, t);
    if (!std::filesystem::exists(p)) break;
    seq.frames.push_back(read_frame(p));
  }
  if (seq.frames.empty()) throw Error("no frames in " + dir + "; run `smf generate` first");
  return seq;
}

}  // namespace smf::synth
