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

// End-to-end pipeline: datasets, teacher pretraining, student distillation
// with a frozen teacher, evaluation and the ablation grid.

#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "smf/backbone.hpp"
#include "smf/config.hpp"
#include "smf/distill.hpp"
#include "smf/eval.hpp"
#include "smf/fusion.hpp"
#include "smf/nn.hpp"
#include "smf/parallel.hpp"
#include "smf/synth.hpp"

namespace smf::pipeline {

using ad::Tensor;
using config::RunConfig;
using model::SparseVoxelGrid;
using nn::ParamStore;

// ---------------------------------------------------------------------------
// Data

/// One annotated frame with both input modalities.
struct Sample {
  Frame frame;
  PointCloud multi;  // frame points followed by fused object points
};

struct SceneData {
  FrameSequence seq;
  std::vector<FusedObjectFile> fused;
};

inline synth::BenchmarkSpec benchmark_spec(const RunConfig& c) {
  synth::BenchmarkSpec b;
  b.num_frames = c.frames;
  b.min_objects = c.min_objects;
  b.max_objects = c.max_objects;
  b.sensor.density = c.density;
  b.sensor.dropout = c.dropout;
  return b;
}

inline std::uint64_t scene_seed(std::uint64_t base, std::size_t i) { return mix_seed({base, i}); }

inline SceneData make_scene(const RunConfig& c, std::uint64_t seed, std::size_t jobs) {
  SceneData s;
  s.seq = synth::generate_sequence(synth::random_scene(seed, benchmark_spec(c)), jobs);
  s.fused = fuse_sequence(s.seq, c.fusion, jobs);
  return s;
}

inline std::vector<Sample> samples_of(const SceneData& s) {
  std::vector<Sample> out;
  for (std::size_t t = 0; t < s.seq.frames.size(); ++t)
    out.push_back({s.seq.frames[t], assemble_multiframe(s.seq.frames[t], s.fused[t])});
  return out;
}

/// Generates and fuses `count` scenes in memory.
inline std::vector<Sample> build_samples(const RunConfig& c, std::uint64_t base_seed, std::size_t count,
                                         std::size_t jobs) {
  std::vector<SceneData> scenes(count);
  // Scenes in parallel, each generated single-threaded; output is independent of jobs.
  parallel_for(count, jobs, [&](std::size_t i) { scenes[i] = make_scene(c, scene_seed(base_seed, i), 1); });
  std::vector<Sample> out;
  for (const auto& s : scenes) {
    auto part = samples_of(s);
    out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return out;
}

inline std::string scene_dir(const std::string& root, const std::string& split, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%03zu", i);
  return (std::filesystem::path(root) / split / buf).string();
}

inline std::size_t split_count(const RunConfig& c, const std::string& split) {
  return split == "train" ? c.train_scenes : c.test_scenes;
}

inline std::uint64_t split_seed(const RunConfig& c, const std::string& split) {
  return split == "train" ? c.train_seed : c.test_seed;
}

/// Writes frame files for both splits under `root`.
inline void write_generated(const RunConfig& c, const std::string& root, std::size_t jobs) {
  for (std::string split : {"train", "test"}) {
    const std::size_t n = split_count(c, split);
    parallel_for(n, jobs, [&](std::size_t i) {
      const auto spec = synth::random_scene(scene_seed(split_seed(c, split), i), benchmark_spec(c));
      synth::write_sequence(synth::generate_sequence(spec, 1), scene_dir(root, split, i));
    });
  }
}

/// Fuses one generated sequence and writes its fused files into `out`.
inline void fuse_directory(const FusionConfig& f, const std::string& dir, const std::string& out, std::size_t jobs) {
  const auto seq = synth::read_sequence(dir);
  const auto files = fuse_sequence(seq, f, jobs);
  std::filesystem::create_directories(out);
  for (std::size_t t = 0; t < files.size(); ++t) write_fused_file(files[t], synth::fused_path(out, t));
}

/// Fuses every generated scene under `root`; fused files go to the mirrored
/// scene directory under `out_root` (by default next to the frames).
inline void write_fused(const RunConfig& c, const std::string& root, std::size_t jobs, std::string out_root = "") {
  if (out_root.empty()) out_root = root;
  for (std::string split : {"train", "test"})
    for (std::size_t i = 0; i < split_count(c, split); ++i)
      fuse_directory(c.fusion, scene_dir(root, split, i), scene_dir(out_root, split, i), jobs);
}

/// Loads a split written by write_generated + write_fused.
inline std::vector<Sample> read_samples(const RunConfig& c, const std::string& root, const std::string& split,
                                        std::string fused_root = "") {
  if (fused_root.empty()) fused_root = root;
  std::vector<Sample> out;
  for (std::size_t i = 0; i < split_count(c, split); ++i) {
    const auto dir = scene_dir(root, split, i);
    SceneData s;
    s.seq = synth::read_sequence(dir);
    for (std::size_t t = 0; t < s.seq.frames.size(); ++t) {
      const auto path = synth::fused_path(scene_dir(fused_root, split, i), t);
      if (!std::filesystem::exists(path)) throw Error("missing fused file " + path + "; run `smf fuse` first");
      s.fused.push_back(read_fused_file(path));
    }
    auto part = samples_of(s);
    out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-sample preprocessing

struct Prepared {
  SparseVoxelGrid student_in, teacher_in;  // raw voxel features
  model::Targets targets;
  std::vector<eval::GroundTruth> truths;
  std::vector<distill::MatchedVoxelPair> pairs;
  std::vector<std::size_t> student_rows;
  std::vector<Vec3> pair_pos;
  std::vector<std::size_t> bev_mask, fg, fg_cells;
};

/// Boxes whose center lies inside the detection range.
inline std::vector<BoundingBox3D> boxes_in_range(const Frame& f, const model::GridConfig& g) {
  std::vector<BoundingBox3D> out;
  for (const auto& b : f.boxes)
    if (b.center.x >= g.x_min && b.center.x < g.x_max && b.center.y >= g.y_min && b.center.y < g.y_max)
      out.push_back(b);
  return out;
}

inline Prepared prepare(const Sample& s, const RunConfig& c, bool multi_frame_teacher) {
  const auto& g = c.model.grid;
  Prepared p;
  p.student_in = model::voxelize(s.frame.cloud, g);
  p.teacher_in = multi_frame_teacher ? model::voxelize(s.multi, g) : p.student_in;
  const auto boxes = boxes_in_range(s.frame, g);
  p.targets = model::build_targets(boxes, c.model);
  for (const auto& b : boxes) p.truths.push_back({b, points_in_box(s.frame.cloud, b).size()});
  p.pairs = distill::select_and_match_voxels(p.student_in, p.teacher_in, boxes, c.weights.context_margin);
  for (const auto& m : p.pairs) {
    p.student_rows.push_back(m.student);
    p.pair_pos.push_back(p.student_in.center(m.student));
  }
  p.bev_mask = distill::bev_box_mask(boxes, g);
  p.fg = distill::foreground_mask(p.targets.heatmap, c.weights.tau);
  p.fg_cells = distill::spatial_cells(p.fg, g.nx() * g.ny());
  return p;
}

inline std::vector<Prepared> prepare_all(const std::vector<Sample>& samples, const RunConfig& c,
                                         bool multi_frame_teacher, std::size_t jobs) {
  std::vector<Prepared> out(samples.size());
  parallel_for(samples.size(), jobs, [&](std::size_t i) { out[i] = prepare(samples[i], c, multi_frame_teacher); });
  return out;
}

/// Frozen-teacher outputs a student step needs, gathered once per sample.
struct TeacherCache {
  Tensor voxels;             // [pairs x C]
  std::vector<Tensor> bev;   // per level, [C x |mask|]
  Tensor heatmap, reg;       // full response maps
};

inline TeacherCache teacher_cache(const ParamStore& teacher, const RunConfig& c, const Prepared& p) {
  const auto out = model::detector_forward(teacher, c.model, p.teacher_in);
  TeacherCache tc;
  std::vector<std::size_t> rows;
  for (const auto& m : p.pairs) rows.push_back(m.teacher);
  tc.voxels = ad::detach(ad::index_select(out.voxels.features, 0, rows));
  for (const auto& l : out.rpn.levels) tc.bev.push_back(ad::detach(distill::gather_cells(l, p.bev_mask)));
  tc.heatmap = ad::detach(out.resp.heatmap);
  tc.reg = ad::detach(out.resp.reg);
  return tc;
}

inline std::vector<TeacherCache> teacher_caches(const ParamStore& teacher, const RunConfig& c,
                                                const std::vector<Prepared>& data, std::size_t jobs) {
  std::vector<TeacherCache> out(data.size());
  parallel_for(data.size(), jobs, [&](std::size_t i) { out[i] = teacher_cache(teacher, c, data[i]); });
  return out;
}

// ---------------------------------------------------------------------------
// Training

struct LogRow {
  std::size_t step = 0;
  double cls = 0, reg = 0, vxl = 0, bev = 0, rsp_c = 0, rsp_r = 0, total = 0, lr = 0;
};

inline std::string loss_log_csv(const std::vector<LogRow>& rows) {
  std::ostringstream s;
  s.precision(10);
  s << "step,L_cls,L_reg,L_vxl,L_bev,L_rsp_c,L_rsp_r,total,lr\n";
  for (const auto& r : rows)
    s << r.step << "," << r.cls << "," << r.reg << "," << r.vxl << "," << r.bev << "," << r.rsp_c << "," << r.rsp_r
      << "," << r.total << "," << r.lr << "\n";
  return s.str();
}

/// Distillation-side trainable parameters: voxel encoder and BEV adapters.
inline ParamStore init_aux(const RunConfig& c, std::uint64_t seed) {
  Rng rng(mix_seed({seed, 0xa0c5}));
  ParamStore p;
  if (c.encoder == distill::EncoderKind::kAttention)
    distill::add_attention_encoder(p, c.model.voxel_channels, rng);
  else
    distill::add_mlp_encoder(p, c.model.voxel_channels, rng);
  const auto ch = model::level_channels(c.model);
  distill::add_bev_adapters(p, ch, ch, rng);
  return p;
}

/// Visit order for `steps` steps: a fresh permutation per epoch.
inline std::vector<std::size_t> visit_order(std::size_t n, std::size_t steps, std::uint64_t seed) {
  std::vector<std::size_t> order;
  if (n == 0) return order;
  Rng rng(mix_seed({seed, 0x0de5}));
  std::vector<std::size_t> perm(n);
  while (order.size() < steps) {
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
    order.insert(order.end(), perm.begin(), perm.end());
  }
  order.resize(steps);
  return order;
}

/// Loss terms of one student step. With no cache (or an arm switched off)
/// the distillation terms are zero constants.
inline distill::LossTerms student_terms(const ParamStore& student, const ParamStore& aux, const RunConfig& c,
                                        const Prepared& p, const TeacherCache* tc, const config::ArmSwitches& arms,
                                        bool train_on_teacher_input = false) {
  const auto out = model::detector_forward(student, c.model, train_on_teacher_input ? p.teacher_in : p.student_in);
  const auto sup = model::supervised_loss(out.resp, p.targets, c.weights.alpha);
  distill::LossTerms t;
  t.cls = sup.cls;
  t.reg = sup.reg;
  t.vxl = t.bev = t.rsp_c = t.rsp_r = Tensor::scalar(0.0);
  if (tc && arms.voxel && !p.pairs.empty()) {
    const auto xs = ad::index_select(out.voxels.features, 0, p.student_rows);
    const auto enc = c.encoder == distill::EncoderKind::kAttention
                         ? distill::attention_encode(aux, xs, p.pair_pos)
                         : distill::mlp_encode(aux, xs);
    t.vxl = distill::voxel_distill_loss(enc, tc->voxels);
    t.matched_voxels = p.pairs.size();
  }
  if (tc && arms.bev) {
    t.bev = distill::bev_distill_loss(aux, out.rpn.levels, tc->bev, p.bev_mask);
    t.bev_cells = p.bev_mask.size();
  }
  if (tc && arms.rsp) {
    const auto& w = c.weights;
    t.rsp_c = distill::adaptive_cls_loss(out.resp.heatmap, tc->heatmap, p.fg, w.adaptive, w.smooth_l1_beta);
    t.rsp_r = distill::adaptive_reg_loss(out.resp.reg, tc->reg, p.fg_cells, c.model.grid, w.iou_mode, w.adaptive,
                                         w.smooth_l1_beta);
    t.foreground = p.fg.size();
  }
  distill::combine(t, c.weights);
  return t;
}

struct TrainResult {
  ParamStore params, aux;
  std::vector<LogRow> log;
};

using Progress = std::function<void(const LogRow&)>;

/// SGD with momentum on a cosine schedule. `tc` null means plain supervised
/// training; `on_teacher_input` trains on the teacher modality (teacher pretraining).
inline TrainResult train(const RunConfig& c, const std::vector<Prepared>& data, const std::vector<TeacherCache>* tc,
                         const config::ArmSwitches& arms, std::size_t steps, std::uint64_t seed,
                         bool on_teacher_input, const Progress& progress = {}) {
  if (data.empty()) throw Error("train: empty training set");
  if (tc && tc->size() != data.size()) throw Error("train: teacher cache does not match the training set");
  TrainResult r{model::init_detector(c.model, seed), init_aux(c, seed), {}};
  nn::SgdMomentum opt(c.momentum, c.weight_decay, c.clip_norm), opt_aux(c.momentum, c.weight_decay, c.clip_norm);
  const auto order = visit_order(data.size(), steps, seed);
  for (std::size_t s = 0; s < steps; ++s) {
    const std::size_t i = order[s];
    r.params.zero_grad();
    r.aux.zero_grad();
    auto t = student_terms(r.params, r.aux, c, data[i], tc ? &(*tc)[i] : nullptr, arms, on_teacher_input);
    ad::backward(t.total);
    const double lr = nn::warmup_cosine_lr(s, steps, c.warmup_steps, c.lr);
    opt.step(r.params, lr);
    if (tc) opt_aux.step(r.aux, lr);
    if (c.log_every && (s % c.log_every == 0 || s + 1 == steps)) {
      LogRow row{s,           t.cls.item(),   t.reg.item(),   t.vxl.item(), t.bev.item(),
                 t.rsp_c.item(), t.rsp_r.item(), t.total.item(), lr};
      r.log.push_back(row);
      if (progress) progress(row);
    }
  }
  return r;
}

inline TrainResult train_teacher(const RunConfig& c, const std::vector<Prepared>& data,
                                 const Progress& progress = {}) {
  return train(c, data, nullptr, {}, c.teacher_steps, mix_seed({c.seed, 0x7eac4e7}), true, progress);
}

inline TrainResult train_student(const RunConfig& c, const std::vector<Prepared>& data,
                                 const std::vector<TeacherCache>* tc, std::uint64_t seed,
                                 const Progress& progress = {}) {
  return train(c, data, tc, c.arms, c.student_steps, seed, false, progress);
}

// ---------------------------------------------------------------------------
// Evaluation

inline eval::EvalConfig eval_config(const RunConfig& c) {
  eval::EvalConfig e;
  e.num_classes = c.model.num_classes;
  e.iou_mode = c.weights.iou_mode;
  return e;
}

inline eval::EvalReport evaluate(const ParamStore& params, const RunConfig& c, const std::vector<Prepared>& data,
                                 bool on_teacher_input, std::size_t jobs) {
  std::vector<eval::FrameResult> frames(data.size());
  parallel_for(data.size(), jobs, [&](std::size_t i) {
    const auto out =
        model::detector_forward(params, c.model, on_teacher_input ? data[i].teacher_in : data[i].student_in);
    frames[i].detections = model::decode_detections(out.resp, c.model.grid, c.score_threshold, c.max_det);
    frames[i].truths = data[i].truths;
  });
  return eval::evaluate(frames, eval_config(c));
}

// ---------------------------------------------------------------------------
// Ablation grid

struct Arm {
  std::string name;
  config::ArmSwitches switches;
};

inline std::vector<Arm> ablation_arms() {
  return {{"baseline", {false, false, false, true}}, {"+voxel", {true, false, false, true}},
          {"+bev", {false, true, false, true}},       {"+rsp", {false, false, true, true}},
          {"all", {true, true, true, true}},          {"all-single-frame-teacher", {true, true, true, false}}};
}

struct ArmResult {
  std::string name;
  std::vector<double> scores;  // per seed
  double mean() const { return scores.empty() ? 0 : std::accumulate(scores.begin(), scores.end(), 0.0) / scores.size(); }
  /// Sample standard deviation.
  double stddev() const {
    if (scores.size() < 2) return 0;
    const double m = mean();
    double s = 0;
    for (double v : scores) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(scores.size() - 1));
  }
};

struct AblationReport {
  double teacher_multi = 0, teacher_single = 0;  // teachers on their own input modality
  std::vector<ArmResult> arms;

  const ArmResult& arm(const std::string& name) const {
    for (const auto& a : arms)
      if (a.name == name) return a;
    throw Error("no ablation arm named " + name);
  }

  std::string to_csv() const {
    std::ostringstream s;
    s.precision(6);
    s << "arm,mean,std";
    const std::size_t n = arms.empty() ? 0 : arms[0].scores.size();
    for (std::size_t i = 0; i < n; ++i) s << ",seed" << i;
    s << "\n";
    for (const auto& a : arms) {
      s << a.name << "," << a.mean() << "," << a.stddev();
      for (double v : a.scores) s << "," << v;
      s << "\n";
    }
    return s.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["teacher_multi_frame"] = teacher_multi;
    j["teacher_single_frame"] = teacher_single;
    for (const auto& a : arms)
      j["arms"].push_back({{"name", a.name}, {"mean", a.mean()}, {"std", a.stddev()}, {"scores", a.scores}});
    return j;
  }
};

using Logger = std::function<void(const std::string&)>;

/// Trains both teachers once, then every arm for every seed. Arms never share
/// mutable state: each student starts from init_detector(seed).
inline AblationReport run_ablation(const RunConfig& c, const std::vector<Sample>& train_set,
                                   const std::vector<Sample>& test_set, std::size_t jobs, const Logger& log = {}) {
  AblationReport rep;
  const auto say = [&](const std::string& m) {
    if (log) log(m);
  };
  struct Modality {
    std::vector<Prepared> train, test;
    ParamStore teacher;
    std::vector<TeacherCache> cache;
  };
  Modality mod[2];  // 0: single-frame teacher, 1: multi-frame teacher
  for (int mf = 1; mf >= 0; --mf) {
    auto& m = mod[mf];
    m.train = prepare_all(train_set, c, mf, jobs);
    m.test = prepare_all(test_set, c, mf, jobs);
    m.teacher = train_teacher(c, m.train).params;
    m.teacher.set_trainable(false);
    m.cache = teacher_caches(m.teacher, c, m.train, jobs);
    const double score = evaluate(m.teacher, c, m.test, true, jobs).score();
    (mf ? rep.teacher_multi : rep.teacher_single) = score;
    say(std::string(mf ? "multi" : "single") + "-frame teacher: " + std::to_string(score));
  }
  for (const auto& arm : ablation_arms()) {
    ArmResult ar{arm.name, {}};
    RunConfig rc = c;
    rc.arms = arm.switches;
    const bool distilled = arm.switches.voxel || arm.switches.bev || arm.switches.rsp;
    const auto& m = mod[arm.switches.multi_frame_teacher ? 1 : 0];
    for (auto seed : c.seeds) {
      const auto r = train_student(rc, m.train, distilled ? &m.cache : nullptr, seed);
      ar.scores.push_back(evaluate(r.params, rc, m.test, false, jobs).score());
      say(arm.name + " seed " + std::to_string(seed) + ": " + std::to_string(ar.scores.back()));
    }
    rep.arms.push_back(std::move(ar));
  }
  return rep;
}

}  // namespace smf::pipeline
