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

// Run configuration: flat INI sections of key = value. One table drives
// parsing, printing and the documentation, so every key round-trips.

#pragma once

#include <charconv>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "smf/backbone.hpp"
#include "smf/common.hpp"
#include "smf/distill.hpp"
#include "smf/fusion.hpp"
#include "smf/synth.hpp"

namespace smf::config {

struct ArmSwitches {
  bool voxel = true, bev = true, rsp = true;
  bool multi_frame_teacher = true;
  bool operator==(const ArmSwitches&) const = default;
};

struct RunConfig {
  // [data]
  std::size_t train_scenes = 32, test_scenes = 4, frames = 20;
  std::uint64_t train_seed = 1000, test_seed = 2000;
  double density = 500, dropout = 0.3;
  std::size_t min_objects = 3, max_objects = 6;
  // [fusion]
  FusionConfig fusion;
  // [model]
  model::ModelConfig model = model::ModelConfig::bench();
  // [train]
  std::size_t teacher_steps = 2000, student_steps = 800;
  double lr = 0.01, momentum = 0.9, weight_decay = 1e-4, clip_norm = 10.0;
  std::size_t warmup_steps = 100;
  std::uint64_t seed = 1;
  std::size_t log_every = 20;
  // [distill]
  distill::DistillWeights weights;
  ArmSwitches arms;
  distill::EncoderKind encoder = distill::EncoderKind::kAttention;
  // [eval]
  double score_threshold = 0.1;
  std::size_t max_det = 50;
  // [run]
  std::size_t jobs = 1;
  std::vector<std::uint64_t> seeds{1, 2, 3};

  bool operator==(const RunConfig& o) const;
};

// ---------------------------------------------------------------------------
// Value codecs

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw Error("config: " + key + ": not a number: '" + v + "'");
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw Error("config: " + key + ": not a non-negative integer: '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw Error("config: " + key + ": expected true/false, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

struct Key {
  std::string section, name, doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
  std::string full() const { return section + "." + name; }
};

template <typename T>
Key num_key(std::string sec, std::string name, std::string doc, T RunConfig::*member) {
  const std::string full = sec + "." + name;
  return {sec, name, doc,
          [member](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>)
              return fmt_double(c.*member);
            else
              return std::to_string(c.*member);
          },
          [member, full](RunConfig& c, const std::string& v) {
            if constexpr (std::is_floating_point_v<T>)
              c.*member = parse_double(full, v);
            else
              c.*member = static_cast<T>(parse_uint(full, v));
          }};
}

/// Key bound to a nested field reached through `ref`.
template <typename F>
Key nested_double(std::string sec, std::string name, std::string doc, F ref) {
  const std::string full = sec + "." + name;
  return {sec, name, doc, [ref](const RunConfig& c) { return fmt_double(ref(const_cast<RunConfig&>(c))); },
          [ref, full](RunConfig& c, const std::string& v) { ref(c) = parse_double(full, v); }};
}

template <typename F>
Key nested_size(std::string sec, std::string name, std::string doc, F ref) {
  const std::string full = sec + "." + name;
  return {sec, name, doc, [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); },
          [ref, full](RunConfig& c, const std::string& v) {
            ref(c) = static_cast<std::remove_reference_t<decltype(ref(c))>>(parse_uint(full, v));
          }};
}

template <typename F>
Key nested_bool(std::string sec, std::string name, std::string doc, F ref) {
  const std::string full = sec + "." + name;
  return {sec, name, doc,
          [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [ref, full](RunConfig& c, const std::string& v) { ref(c) = parse_bool(full, v); }};
}

inline const std::vector<Key>& keys() {
  static const std::vector<Key> k = [] {
    std::vector<Key> v;
    // data
    v.push_back(num_key("data", "train_scenes", "number of training sequences", &RunConfig::train_scenes));
    v.push_back(num_key("data", "test_scenes", "number of test sequences", &RunConfig::test_scenes));
    v.push_back(num_key("data", "frames", "frames per sequence", &RunConfig::frames));
    v.push_back(num_key("data", "train_seed", "base seed of training scenes", &RunConfig::train_seed));
    v.push_back(num_key("data", "test_seed", "base seed of test scenes", &RunConfig::test_seed));
    v.push_back(num_key("data", "density", "object surface points per m^2 at 1 m", &RunConfig::density));
    v.push_back(num_key("data", "dropout", "per-point drop probability", &RunConfig::dropout));
    v.push_back(num_key("data", "min_objects", "fewest objects per scene", &RunConfig::min_objects));
    v.push_back(num_key("data", "max_objects", "most objects per scene", &RunConfig::max_objects));
    // fusion
    v.push_back(nested_size("fusion", "group_size", "frames per fusion group",
                            [](RunConfig& c) -> std::size_t& { return c.fusion.group_size; }));
    v.push_back(Key{"fusion", "voxel", "grid-subsample voxel x,y,z in meters",
                    [](const RunConfig& c) {
                      return fmt_double(c.fusion.voxel.x) + "," + fmt_double(c.fusion.voxel.y) + "," +
                             fmt_double(c.fusion.voxel.z);
                    },
                    [](RunConfig& c, const std::string& s) {
                      const auto parts = split_list(s);
                      if (parts.size() != 3) throw Error("config: fusion.voxel needs three values");
                      c.fusion.voxel = {parse_double("fusion.voxel", parts[0]), parse_double("fusion.voxel", parts[1]),
                                        parse_double("fusion.voxel", parts[2])};
                    }});
    v.push_back(nested_size("fusion", "max_per_voxel", "points kept per subsample voxel",
                            [](RunConfig& c) -> std::size_t& { return c.fusion.max_per_voxel; }));
    v.push_back(nested_double("fusion", "denoise", "fraction of points removed as outliers",
                              [](RunConfig& c) -> double& { return c.fusion.denoise_fraction; }));
    // model
    v.push_back(nested_double("model", "range", "half-width of the square detection range in meters",
                              [](RunConfig& c) -> double& { return c.model.grid.x_max; }));
    v.push_back(nested_double("model", "cell", "BEV cell and voxel xy size in meters",
                              [](RunConfig& c) -> double& { return c.model.grid.voxel_xy; }));
    v.push_back(nested_double("model", "voxel_z", "voxel height in meters",
                              [](RunConfig& c) -> double& { return c.model.grid.voxel_z; }));
    v.push_back(nested_size("model", "voxel_channels", "encoded voxel feature width",
                            [](RunConfig& c) -> std::size_t& { return c.model.voxel_channels; }));
    v.push_back(Key{"model", "rpn", "multiscale or raw",
                    [](const RunConfig& c) {
                      return std::string(c.model.rpn == model::RpnKind::kRaw ? "raw" : "multiscale");
                    },
                    [](RunConfig& c, const std::string& s) {
                      if (s == "raw")
                        c.model.rpn = model::RpnKind::kRaw;
                      else if (s == "multiscale")
                        c.model.rpn = model::RpnKind::kMultiScale;
                      else
                        throw Error("config: model.rpn: expected multiscale or raw");
                    }});
    v.push_back(Key{"model", "rpn_widths", "three conv-group widths of the multi-scale RPN",
                    [](const RunConfig& c) {
                      const auto& w = c.model.ms.widths;
                      return std::to_string(w[0]) + "," + std::to_string(w[1]) + "," + std::to_string(w[2]);
                    },
                    [](RunConfig& c, const std::string& s) {
                      const auto parts = split_list(s);
                      if (parts.size() != 3) throw Error("config: model.rpn_widths needs three values");
                      for (std::size_t i = 0; i < 3; ++i) c.model.ms.widths[i] = parse_uint("model.rpn_widths", parts[i]);
                    }});
    v.push_back(nested_size("model", "bottleneck", "bottleneck width (distilled levels)",
                            [](RunConfig& c) -> std::size_t& { return c.model.ms.bottleneck; }));
    v.push_back(nested_size("model", "rpn_out", "RPN output width",
                            [](RunConfig& c) -> std::size_t& { return c.model.ms.out_channels; }));
    v.push_back(nested_bool("model", "cross_scale", "deconv paths between scales",
                            [](RunConfig& c) -> bool& { return c.model.ms.cross_scale; }));
    v.push_back(nested_size("model", "head_channels", "shared head conv width",
                            [](RunConfig& c) -> std::size_t& { return c.model.head_channels; }));
    v.push_back(Key{"model", "min_radius", "smallest heatmap radius in cells",
                    [](const RunConfig& c) { return std::to_string(c.model.min_radius); },
                    [](RunConfig& c, const std::string& s) {
                      c.model.min_radius = static_cast<int>(parse_uint("model.min_radius", s));
                    }});
    // train
    v.push_back(num_key("train", "teacher_steps", "teacher optimisation steps", &RunConfig::teacher_steps));
    v.push_back(num_key("train", "student_steps", "student optimisation steps", &RunConfig::student_steps));
    v.push_back(num_key("train", "lr", "peak learning rate (cosine schedule)", &RunConfig::lr));
    v.push_back(num_key("train", "momentum", "SGD momentum", &RunConfig::momentum));
    v.push_back(num_key("train", "weight_decay", "L2 weight decay", &RunConfig::weight_decay));
    v.push_back(num_key("train", "warmup_steps", "linear learning-rate warmup steps", &RunConfig::warmup_steps));
    v.push_back(num_key("train", "clip_norm", "gradient-norm clip, 0 disables", &RunConfig::clip_norm));
    v.push_back(num_key("train", "seed", "initialisation and data-order seed", &RunConfig::seed));
    v.push_back(num_key("train", "log_every", "loss-log interval in steps", &RunConfig::log_every));
    // distill
    auto w = [](auto member) { return [member](RunConfig& c) -> double& { return c.weights.*member; }; };
    v.push_back(nested_double("distill", "tau", "heatmap foreground threshold", w(&distill::DistillWeights::tau)));
    v.push_back(nested_double("distill", "pi1", "classification response weight", w(&distill::DistillWeights::pi1)));
    v.push_back(nested_double("distill", "pi2", "regression response weight", w(&distill::DistillWeights::pi2)));
    v.push_back(nested_double("distill", "alpha", "supervised regression weight", w(&distill::DistillWeights::alpha)));
    v.push_back(nested_double("distill", "beta", "voxel distillation weight", w(&distill::DistillWeights::beta)));
    v.push_back(nested_double("distill", "lambda", "BEV distillation weight", w(&distill::DistillWeights::lambda)));
    v.push_back(nested_double("distill", "mu", "response distillation weight", w(&distill::DistillWeights::mu)));
    v.push_back(nested_double("distill", "context_margin", "box enlargement for voxel selection (m)",
                              w(&distill::DistillWeights::context_margin)));
    v.push_back(nested_bool("distill", "adaptive", "adaptive response weights",
                            [](RunConfig& c) -> bool& { return c.weights.adaptive; }));
    v.push_back(Key{"distill", "iou", "3d or bev IoU for regression weights",
                    [](const RunConfig& c) { return std::string(c.weights.iou_mode == IouMode::kBev ? "bev" : "3d"); },
                    [](RunConfig& c, const std::string& s) {
                      if (s == "bev")
                        c.weights.iou_mode = IouMode::kBev;
                      else if (s == "3d")
                        c.weights.iou_mode = IouMode::k3d;
                      else
                        throw Error("config: distill.iou: expected 3d or bev");
                    }});
    v.push_back(nested_bool("distill", "voxel", "enable voxel distillation",
                            [](RunConfig& c) -> bool& { return c.arms.voxel; }));
    v.push_back(nested_bool("distill", "bev", "enable BEV distillation", [](RunConfig& c) -> bool& { return c.arms.bev; }));
    v.push_back(nested_bool("distill", "rsp", "enable response distillation",
                            [](RunConfig& c) -> bool& { return c.arms.rsp; }));
    v.push_back(nested_bool("distill", "multi_frame_teacher", "teacher sees fused multi-frame clouds",
                            [](RunConfig& c) -> bool& { return c.arms.multi_frame_teacher; }));
    v.push_back(Key{"distill", "encoder", "attention or mlp",
                    [](const RunConfig& c) {
                      return std::string(c.encoder == distill::EncoderKind::kMlp ? "mlp" : "attention");
                    },
                    [](RunConfig& c, const std::string& s) {
                      if (s == "mlp")
                        c.encoder = distill::EncoderKind::kMlp;
                      else if (s == "attention")
                        c.encoder = distill::EncoderKind::kAttention;
                      else
                        throw Error("config: distill.encoder: expected attention or mlp");
                    }});
    // eval
    v.push_back(num_key("eval", "score_threshold", "minimum detection score", &RunConfig::score_threshold));
    v.push_back(num_key("eval", "max_det", "detections kept per frame", &RunConfig::max_det));
    // run
    v.push_back(num_key("run", "jobs", "worker threads for parallel stages", &RunConfig::jobs));
    v.push_back(Key{"run", "seeds", "comma-separated student seeds for ablation",
                    [](const RunConfig& c) {
                      std::string s;
                      for (std::size_t i = 0; i < c.seeds.size(); ++i) s += (i ? "," : "") + std::to_string(c.seeds[i]);
                      return s;
                    },
                    [](RunConfig& c, const std::string& s) {
                      c.seeds.clear();
                      for (const auto& p : split_list(s)) c.seeds.push_back(parse_uint("run.seeds", p));
                      if (c.seeds.empty()) throw Error("config: run.seeds must not be empty");
                    }});
    return v;
  }();
  return k;
}

/// Derived fields that mirror a single configured value.
inline void normalize(RunConfig& c) {
  auto& g = c.model.grid;
  g.x_min = -g.x_max;
  g.y_min = -g.x_max;
  g.y_max = g.x_max;
  c.model.ms.in_channels = c.model.voxel_channels;
  c.model.raw.in_channels = c.model.voxel_channels;
}

inline void validate(const RunConfig& c) {
  const auto& g = c.model.grid;
  if (g.x_max <= 0 || g.voxel_xy <= 0 || g.voxel_z <= 0) throw Error("config: range and cell sizes must be positive");
  if (g.nx() % 4 != 0 || std::abs(static_cast<double>(g.nx()) * g.voxel_xy - 2 * g.x_max) > 1e-9)
    throw Error("config: 2 * model.range / model.cell must be a whole multiple of 4");
  if (c.model.voxel_channels % distill::kHeads != 0) throw Error("config: model.voxel_channels must be a multiple of 8");
  if (c.min_objects > c.max_objects) throw Error("config: data.min_objects > data.max_objects");
  if (c.fusion.group_size == 0) throw Error("config: fusion.group_size must be positive");
  if (c.jobs == 0) throw Error("config: run.jobs must be positive");
  c.weights.validate();
}

inline RunConfig parse(const std::string& text, RunConfig base = {}) {
  std::map<std::string, const Key*> by_name;
  for (const auto& k : keys()) by_name[k.full()] = &k;
  std::istringstream in(text);
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw Error("config line " + std::to_string(lineno) + ": bad section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = section + "." + trim(line.substr(0, eq));
    auto it = by_name.find(key);
    if (it == by_name.end()) throw Error("config line " + std::to_string(lineno) + ": unknown key " + key);
    it->second->set(base, trim(line.substr(eq + 1)));
  }
  normalize(base);
  validate(base);
  return base;
}

inline RunConfig load(const std::string& path) {
  const auto bytes = read_file_bytes(path);
  return parse(std::string(bytes.begin(), bytes.end()));
}

inline std::string to_ini(const RunConfig& c) {
  std::string out, section;
  for (const auto& k : keys()) {
    if (k.section != section) {
      if (!section.empty()) out += "\n";
      section = k.section;
      out += "[" + section + "]\n";
    }
    out += k.name + " = " + k.get(c) + "\n";
  }
  return out;
}

inline std::string documentation() {
  std::string out;
  for (const auto& k : keys()) out += "  " + k.full() + ": " + k.doc + "\n";
  return out;
}

inline bool RunConfig::operator==(const RunConfig& o) const { return to_ini(*this) == to_ini(o); }

}  // namespace smf::config
