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

#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "smf/common.hpp"
#include "smf/tensor.hpp"

namespace smf::nn {

using ad::Shape;
using ad::Tensor;

/// Named, ordered set of trainable leaves.
class ParamStore {
 public:
  /// Skip random initialisation; for counting parameters of large configs.
  bool shapes_only = false;

  Tensor& add(const std::string& name, Shape shape, std::vector<double> values) {
    if (index_.count(name)) throw Error("duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, Tensor::from(std::move(shape), std::move(values), true)});
    return entries_.back().second;
  }

  /// Stores `t` itself (shared storage), not a copy.
  Tensor& add(const std::string& name, Tensor t) {
    if (index_.count(name)) throw Error("duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.push_back({name, std::move(t)});
    return entries_.back().second;
  }

  /// He-normal initialisation with the given fan-in.
  Tensor& add_normal(const std::string& name, Shape shape, std::size_t fan_in, Rng& rng, double gain = 2.0) {
    const double sd = std::sqrt(gain / static_cast<double>(std::max<std::size_t>(fan_in, 1)));
    std::vector<double> v(ad::numel(shape));
    if (!shapes_only)
      for (double& x : v) x = rng.normal(0.0, sd);
    return add(name, std::move(shape), std::move(v));
  }

  Tensor& add_constant(const std::string& name, Shape shape, double value) {
    return add(name, shape, std::vector<double>(ad::numel(shape), value));
  }

  const Tensor& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw Error("unknown parameter " + name);
    return entries_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

  void set_trainable(bool on) {
    for (auto& [_, t] : entries_) t.set_requires_grad(on);
  }

  /// Deep copy of the values (fresh leaves).
  ParamStore clone() const {
    ParamStore out;
    for (const auto& [name, t] : entries_) out.add(name, t.shape(), t.values());
    return out;
  }

  /// Copies values from `other` for every parameter both stores share by name and shape.
  void load_values(const ParamStore& other) {
    for (auto& [name, t] : entries_) {
      if (!other.contains(name)) throw Error("checkpoint lacks parameter " + name);
      const Tensor& src = other.get(name);
      if (src.shape() != t.shape())
        throw Error("parameter " + name + " shape " + ad::shape_str(src.shape()) + " vs " + ad::shape_str(t.shape()));
      t.values() = src.values();
    }
  }

  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      const auto& [na, ta] = a.entries_[i];
      const auto& [nb, tb] = b.entries_[i];
      if (na != nb || ta.shape() != tb.shape() || ta.values() != tb.values()) return false;
    }
    return true;
  }

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline Tensor linear(const Tensor& x, const Tensor& weight) { return ad::matmul(x, weight); }
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return ad::add_bias(ad::matmul(x, weight), bias);
}

// ---------------------------------------------------------------------------
// Checkpoint: "SMFW", u32 version, u32 count, then per parameter u16 name
// length + UTF-8 name, u8 rank, u32 x rank dims, f64 values. Little-endian.

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline std::vector<std::uint8_t> encode_checkpoint(const ParamStore& params) {
  ByteWriter w;
  w.bytes("SMFW", 4);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.entries().size()));
  for (const auto& [name, t] : params.entries()) {
    if (name.size() > 0xffff) throw Error("parameter name too long: " + name);
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name.data(), name.size());
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.values()) w.f64(v);
  }
  return w.take();
}

inline ParamStore decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes);
  r.expect_magic("SMFW");
  const std::size_t version_at = r.pos();
  if (r.u32("version") != kCheckpointVersion) throw ParseError(version_at, "unsupported version");
  const std::uint32_t count = r.u32("count");
  ParamStore out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint16_t len = r.u16("name length");
    std::string name = r.str(len, "name");
    const std::uint8_t rank = r.u8("rank");
    Shape shape(rank);
    for (auto& d : shape) d = r.u32("dims");
    const std::size_t n_at = r.pos();
    std::uint64_t n = 1;
    for (auto d : shape) {
      n *= d;
      if (n > r.remaining()) throw ParseError(n_at, "parameter " + name + " larger than file");
    }
    if (n * 8 > r.remaining()) throw ParseError(n_at, "truncated values of " + name);
    std::vector<double> v(n);
    for (double& x : v) x = r.f64("values");
    if (out.contains(name)) throw ParseError(n_at, "duplicate parameter " + name);
    out.add(name, std::move(shape), std::move(v));
  }
  if (r.remaining() != 0) throw ParseError(r.pos(), "trailing bytes after last parameter");
  return out;
}

inline void save_checkpoint(const ParamStore& params, const std::string& path) {
  write_file_bytes(path, encode_checkpoint(params));
}
inline ParamStore load_checkpoint(const std::string& path) { return decode_checkpoint(read_file_bytes(path)); }

// ---------------------------------------------------------------------------

/// Cosine annealing from lr_max at step 0 to 0 at step == total.
inline double cosine_lr(std::size_t step, std::size_t total, double lr_max) {
  if (total == 0) return lr_max;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return 0.5 * lr_max * (1.0 + std::cos(kPi * t));
}

/// Linear warmup over the first `warmup` steps, then cosine decay over the rest.
inline double warmup_cosine_lr(std::size_t step, std::size_t total, std::size_t warmup, double lr_max) {
  if (step < warmup) return lr_max * static_cast<double>(step + 1) / static_cast<double>(warmup);
  return cosine_lr(step - warmup, total > warmup ? total - warmup : 0, lr_max);
}

/// SGD with heavy-ball momentum: v <- m v + g ; p <- p - lr v.
class SgdMomentum {
 public:
  explicit SgdMomentum(double momentum = 0.9, double weight_decay = 0.0, double clip_norm = 0.0)
      : momentum_(momentum), weight_decay_(weight_decay), clip_norm_(clip_norm) {}

  /// Returns the gradient norm before clipping.
  double step(ParamStore& params, double lr) {
    double sq = 0;
    for (auto& [_, t] : params.entries())
      for (double g : t.grad()) sq += g * g;
    const double norm = std::sqrt(sq);
    const double k = (clip_norm_ > 0 && norm > clip_norm_) ? clip_norm_ / norm : 1.0;
    for (auto& [name, t] : params.entries()) {
      auto& vel = velocity_[name];
      if (vel.size() != t.numel()) vel.assign(t.numel(), 0.0);
      const auto& g = t.grad();
      auto& p = t.values();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = (g.empty() ? 0.0 : g[i] * k) + weight_decay_ * p[i];
        vel[i] = momentum_ * vel[i] + gi;
        p[i] -= lr * vel[i];
      }
    }
    return norm;
  }

 private:
  double momentum_, weight_decay_, clip_norm_;
  std::unordered_map<std::string, std::vector<double>> velocity_;
};

inline void sgd_step(ParamStore& params, SgdMomentum& opt, double lr) { opt.step(params, lr); }

}  // namespace smf::nn
