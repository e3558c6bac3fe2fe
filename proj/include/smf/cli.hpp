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

// The `smf` command line: generate, fuse, pretrain-teacher, distill-student,
// eval, gradcheck and ablate. Every command writes a run manifest into its
// output directory.

#pragma once

#include <CLI11.hpp>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <json.hpp>
#include <map>
#include <string>
#include <vector>

#include "smf/config.hpp"
#include "smf/gradsuite.hpp"
#include "smf/pipeline.hpp"

#ifndef SMF_GIT_HASH
#define SMF_GIT_HASH "unknown"
#endif

namespace smf::cli {

namespace fs = std::filesystem;
using config::RunConfig;

// ---------------------------------------------------------------------------
// Hashing and manifests

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string hash_file(const std::string& path) {
  const auto b = read_file_bytes(path);
  return hex64(fnv1a64(b.data(), b.size()));
}

/// Digest over every regular file under `dir` with one of `exts`, in path
/// order; each file contributes its relative path and contents.
inline std::pair<std::string, std::size_t> hash_tree(const std::string& dir, const std::vector<std::string>& exts) {
  std::vector<fs::path> files;
  if (fs::exists(dir))
    for (const auto& e : fs::recursive_directory_iterator(dir))
      if (e.is_regular_file() && std::find(exts.begin(), exts.end(), e.path().extension().string()) != exts.end())
        files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& f : files) {
    const auto rel = fs::relative(f, dir).generic_string();
    h = fnv1a64(reinterpret_cast<const std::uint8_t*>(rel.data()), rel.size(), h);
    const auto b = read_file_bytes(f.string());
    h = fnv1a64(b.data(), b.size(), h);
  }
  return {hex64(h), files.size()};
}

struct Manifest {
  nlohmann::json j;

  Manifest(const std::string& command, const RunConfig& c) {
    j["command"] = command;
    j["git"] = SMF_GIT_HASH;
    j["config"] = config::to_ini(c);
    j["seeds"] = {{"train", c.seed},
                  {"data_train", c.train_seed},
                  {"data_test", c.test_seed},
                  {"ablation", c.seeds}};
    j["jobs"] = c.jobs;
  }
  void input(const std::string& name, const std::string& path) {
    j["inputs"][name] = {{"path", path}, {"fnv1a64", hash_file(path)}};
  }
  void artifact(const std::string& path) { j["artifacts"][fs::path(path).filename().string()] = hash_file(path); }
  void tree(const std::string& name, const std::string& dir, const std::vector<std::string>& exts) {
    const auto [h, n] = hash_tree(dir, exts);
    j["artifacts"][name] = {{"fnv1a64", h}, {"files", n}};
  }
  /// Written as manifest_<command>.json so commands sharing a directory keep theirs.
  void write(const std::string& dir) const {
    const auto s = j.dump(2) + "\n";
    const auto name = "manifest_" + j["command"].get<std::string>() + ".json";
    write_file_bytes((fs::path(dir) / name).string(), {s.begin(), s.end()});
  }
};

inline void write_text(const std::string& path, const std::string& s) { write_file_bytes(path, {s.begin(), s.end()}); }

// ---------------------------------------------------------------------------
// Commands

struct Options {
  std::string config, out, data, fused, sequence, teacher, checkpoint, split = "test";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> jobs;
  bool teacher_input = false, quiet = false;
  // fuse overrides
  std::optional<std::size_t> group_size, max_per_voxel;
  std::optional<std::string> voxel;
  std::optional<double> denoise;
};

inline RunConfig load_config(const Options& o) {
  RunConfig c = o.config.empty() ? config::parse("") : config::load(o.config);
  if (o.seed) c.seed = *o.seed;
  if (o.jobs) {
    if (*o.jobs == 0 || *o.jobs > 256) throw Error("--jobs must be in [1, 256]");
    c.jobs = *o.jobs;
  }
  if (o.group_size) c.fusion.group_size = *o.group_size;
  if (o.max_per_voxel) c.fusion.max_per_voxel = *o.max_per_voxel;
  if (o.denoise) c.fusion.denoise_fraction = *o.denoise;
  if (o.voxel) {
    const auto parts = config::split_list(*o.voxel);
    if (parts.size() != 3) throw Error("--voxel expects three comma-separated sizes");
    c.fusion.voxel = {config::parse_double("--voxel", parts[0]), config::parse_double("--voxel", parts[1]),
                      config::parse_double("--voxel", parts[2])};
  }
  config::validate(c);
  return c;
}

inline void require(const std::string& value, const std::string& flag) {
  if (value.empty()) throw Error(flag + " is required");
}

inline std::string fused_root(const Options& o) { return o.fused.empty() ? o.data : o.fused; }

inline int cmd_generate(const Options& o, std::ostream& log) {
  require(o.out, "--out");
  auto c = load_config(o);
  if (o.seed) {
    c.train_seed = *o.seed;
    c.test_seed = *o.seed + 1;
  }
  pipeline::write_generated(c, o.out, c.jobs);
  Manifest m("generate", c);
  m.tree("frames", o.out, {".smff"});
  m.write(o.out);
  write_text((fs::path(o.out) / "config.ini").string(), config::to_ini(c));
  log << "generated " << c.train_scenes << " train and " << c.test_scenes << " test scenes in " << o.out << "\n";
  return 0;
}

inline int cmd_fuse(const Options& o, std::ostream& log) {
  require(o.sequence, "--sequence");
  require(o.out, "--out");
  const auto c = load_config(o);
  const auto t0 = std::chrono::steady_clock::now();
  if (fs::exists(synth::frame_path(o.sequence, 0))) {
    pipeline::fuse_directory(c.fusion, o.sequence, o.out, c.jobs);
  } else if (fs::exists(fs::path(o.sequence) / "train")) {
    pipeline::write_fused(c, o.sequence, c.jobs, o.out);
  } else {
    throw Error("no frames under " + o.sequence + "; run `smf generate` first");
  }
  Manifest m("fuse", c);
  m.j["inputs"]["sequence"] = o.sequence;
  m.tree("fused", o.out, {".smfb"});
  m.write(o.out);
  log << "fused " << m.j["artifacts"]["fused"]["files"] << " frames into " << o.out << " in "
      << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
  return 0;
}

inline void warn_empty_foreground(const std::vector<pipeline::Prepared>& data, std::ostream& log) {
  std::size_t empty = 0;
  for (const auto& p : data) empty += p.fg.empty();
  if (empty)
    log << "warning: " << empty << " of " << data.size()
        << " training frames have no foreground cells; their response distillation loss is 0\n";
}

inline pipeline::Progress progress_printer(std::ostream& log, bool quiet, std::size_t steps) {
  if (quiet) return {};
  return [&log, steps](const pipeline::LogRow& r) {
    if (r.step % 100 == 0 || r.step + 1 == steps)
      log << "step " << r.step << "/" << steps << " total " << r.total << " lr " << r.lr << "\n";
  };
}

inline int cmd_pretrain_teacher(const Options& o, std::ostream& log) {
  require(o.data, "--data");
  require(o.out, "--out");
  const auto c = load_config(o);
  const bool mf = c.arms.multi_frame_teacher;
  const auto data = pipeline::prepare_all(pipeline::read_samples(c, o.data, "train", fused_root(o)), c, mf, c.jobs);
  fs::create_directories(o.out);
  const auto r = pipeline::train_teacher(c, data, progress_printer(log, o.quiet, c.teacher_steps));
  const auto ckpt = (fs::path(o.out) / "teacher.smfw").string();
  nn::save_checkpoint(r.params, ckpt);
  const auto log_path = (fs::path(o.out) / "loss_log.csv").string();
  write_text(log_path, pipeline::loss_log_csv(r.log));
  Manifest m("pretrain-teacher", c);
  m.j["teacher_input"] = mf ? "multi-frame" : "single-frame";
  m.j["inputs"]["data"] = o.data;
  m.artifact(ckpt);
  m.artifact(log_path);
  m.write(o.out);
  log << "teacher checkpoint " << ckpt << "\n";
  return 0;
}

inline int cmd_distill_student(const Options& o, std::ostream& log) {
  require(o.data, "--data");
  require(o.out, "--out");
  require(o.teacher, "--teacher");
  const auto c = load_config(o);
  if (!fs::exists(o.teacher))
    throw Error("missing teacher checkpoint " + o.teacher + "; run `smf pretrain-teacher` first");
  auto teacher = nn::load_checkpoint(o.teacher);
  teacher.set_trainable(false);
  const auto data = pipeline::prepare_all(pipeline::read_samples(c, o.data, "train", fused_root(o)), c,
                                          c.arms.multi_frame_teacher, c.jobs);
  const bool distilled = c.arms.voxel || c.arms.bev || c.arms.rsp;
  if (distilled && c.arms.rsp) warn_empty_foreground(data, log);
  std::vector<pipeline::TeacherCache> cache;
  if (distilled) cache = pipeline::teacher_caches(teacher, c, data, c.jobs);
  fs::create_directories(o.out);
  const auto r = pipeline::train_student(c, data, distilled ? &cache : nullptr, c.seed,
                                         progress_printer(log, o.quiet, c.student_steps));
  const auto ckpt = (fs::path(o.out) / "student.smfw").string();
  nn::save_checkpoint(r.params, ckpt);
  const auto log_path = (fs::path(o.out) / "loss_log.csv").string();
  write_text(log_path, pipeline::loss_log_csv(r.log));
  Manifest m("distill-student", c);
  m.j["inputs"]["data"] = o.data;
  m.input("teacher_checkpoint", o.teacher);
  m.artifact(ckpt);
  m.artifact(log_path);
  m.write(o.out);
  log << "student checkpoint " << ckpt << "\n";
  return 0;
}

inline int cmd_eval(const Options& o, std::ostream& log) {
  require(o.data, "--data");
  require(o.out, "--out");
  require(o.checkpoint, "--checkpoint");
  const auto c = load_config(o);
  if (o.split != "train" && o.split != "test") throw Error("--split must be train or test");
  if (!fs::exists(o.checkpoint))
    throw Error("missing checkpoint " + o.checkpoint + "; run `smf distill-student` or `smf pretrain-teacher` first");
  const auto params = nn::load_checkpoint(o.checkpoint);
  const auto data =
      pipeline::prepare_all(pipeline::read_samples(c, o.data, o.split, fused_root(o)), c, o.teacher_input, c.jobs);
  const auto rep = pipeline::evaluate(params, c, data, o.teacher_input, c.jobs);
  fs::create_directories(o.out);
  const auto csv = (fs::path(o.out) / "eval.csv").string(), json = (fs::path(o.out) / "eval.json").string();
  write_text(csv, rep.to_csv());
  auto j = rep.to_json();
  j["protocol"] = {{"split", o.split},
                   {"input", o.teacher_input ? "multi-frame" : "single-frame"},
                   {"iou_mode", c.weights.iou_mode == IouMode::kBev ? "bev" : "3d"},
                   {"iou_thresholds", pipeline::eval_config(c).iou_thresholds},
                   {"level1_min_points", pipeline::eval_config(c).level1_min_points},
                   {"level2_min_points", pipeline::eval_config(c).level2_min_points},
                   {"ap_points", 101}};
  write_text(json, j.dump(2) + "\n");
  Manifest m("eval", c);
  m.j["inputs"]["data"] = o.data;
  m.input("checkpoint", o.checkpoint);
  m.artifact(csv);
  m.artifact(json);
  m.write(o.out);
  char line[160];
  std::snprintf(line, sizeof line, "mAP L1 %.4f  mAPH L1 %.4f  mAP L2 %.4f  mAPH L2 %.4f\n", rep.map_l1, rep.maph_l1,
                rep.map_l2, rep.maph_l2);
  log << line;
  return 0;
}

inline int cmd_gradcheck(const Options& o, std::ostream& log) {
  const auto results = gradsuite::run_all();
  bool ok = true;
  std::string csv = "op,ok,max_rel_error,checked\n";
  for (const auto& r : results) {
    char line[160];
    std::snprintf(line, sizeof line, "%-24s %-4s max rel err %.3e over %zu elements\n", r.name.c_str(),
                  r.ok ? "ok" : "FAIL", r.max_rel_error, r.checked);
    log << line;
    std::snprintf(line, sizeof line, "%s,%d,%.6e,%zu\n", r.name.c_str(), r.ok ? 1 : 0, r.max_rel_error, r.checked);
    csv += line;
    ok &= r.ok;
  }
  log << (ok ? "all " : "FAILED: not all ") << results.size() << " gradient checks passed\n";
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    write_text((fs::path(o.out) / "gradcheck.csv").string(), csv);
    Manifest m("gradcheck", load_config(o));
    m.artifact((fs::path(o.out) / "gradcheck.csv").string());
    m.write(o.out);
  }
  return ok ? 0 : 1;
}

inline int cmd_ablate(const Options& o, std::ostream& log) {
  require(o.data, "--data");
  require(o.out, "--out");
  auto c = load_config(o);
  if (o.seed) c.seeds = {*o.seed, *o.seed + 1, *o.seed + 2};
  const auto train = pipeline::read_samples(c, o.data, "train", fused_root(o));
  const auto test = pipeline::read_samples(c, o.data, "test", fused_root(o));
  const auto rep = pipeline::run_ablation(c, train, test, c.jobs, [&](const std::string& s) {
    if (!o.quiet) log << s << "\n";
  });
  fs::create_directories(o.out);
  const auto csv = (fs::path(o.out) / "ablation.csv").string(), json = (fs::path(o.out) / "ablation.json").string();
  write_text(csv, rep.to_csv());
  write_text(json, rep.to_json().dump(2) + "\n");
  Manifest m("ablate", c);
  m.j["inputs"]["data"] = o.data;
  m.artifact(csv);
  m.artifact(json);
  m.write(o.out);
  char line[160];
  std::snprintf(line, sizeof line, "%-26s %8s %8s\n", "arm", "mean", "std");
  log << line;
  for (const auto& a : rep.arms) {
    std::snprintf(line, sizeof line, "%-26s %8.4f %8.4f\n", a.name.c_str(), a.mean(), a.stddev());
    log << line;
  }
  std::snprintf(line, sizeof line, "teacher (multi-frame input) %.4f, teacher (single-frame input) %.4f\n",
                rep.teacher_multi, rep.teacher_single);
  log << line;
  return 0;
}

// ---------------------------------------------------------------------------
// Argument parsing

inline int run(const std::vector<std::string>& args, std::ostream& log = std::cerr) {
  CLI::App app{"Multi-frame to single-frame detector distillation on synthetic LiDAR scenes", "smf"};
  app.require_subcommand(1);
  app.footer("Config keys (INI sections, key = value):\n" + config::documentation());
  Options o;
  auto common = [&](CLI::App* s) {
    s->add_option("--config", o.config, "INI config file")->check(CLI::ExistingFile);
    s->add_option("--seed", o.seed, "seed override");
    s->add_option("--jobs", o.jobs, "worker threads");
    s->add_flag("--quiet", o.quiet, "suppress progress");
  };
  auto* gen = app.add_subcommand("generate", "write synthetic train/test sequences");
  auto* fuse = app.add_subcommand("fuse", "multi-view dense fusion of object points");
  auto* pre = app.add_subcommand("pretrain-teacher", "train the teacher detector");
  auto* dis = app.add_subcommand("distill-student", "train the single-frame student against a frozen teacher");
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint (AP / APH)");
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  auto* ab = app.add_subcommand("ablate", "ablation grid over distillation modules and seeds");
  for (auto* s : {gen, fuse, pre, dis, ev, gc, ab}) common(s);
  gen->add_option("--out", o.out, "data root")->required();
  fuse->add_option("--sequence", o.sequence, "scene directory or data root")->required();
  fuse->add_option("--out", o.out, "output directory")->required();
  fuse->add_option("--group-size", o.group_size, "frames per group");
  fuse->add_option("--voxel", o.voxel, "grid subsample voxel, x,y,z");
  fuse->add_option("--max-per-voxel", o.max_per_voxel, "points kept per voxel");
  fuse->add_option("--denoise", o.denoise, "fraction of points removed as outliers");
  for (auto* s : {pre, dis, ev, ab}) {
    s->add_option("--data", o.data, "data root written by generate")->required();
    s->add_option("--fused", o.fused, "fused root written by fuse (default: --data)");
    s->add_option("--out", o.out, "output directory")->required();
  }
  dis->add_option("--teacher", o.teacher, "teacher checkpoint")->required();
  ev->add_option("--checkpoint", o.checkpoint, "detector checkpoint")->required();
  ev->add_option("--split", o.split, "train or test");
  ev->add_flag("--teacher-input", o.teacher_input, "evaluate on multi-frame inputs");
  gc->add_option("--out", o.out, "output directory for gradcheck.csv");

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    std::ostringstream out, err;
    const int code = app.exit(e, out, err);
    log << out.str() << err.str();
    return code;
  }
  try {
    if (*gen) return cmd_generate(o, log);
    if (*fuse) return cmd_fuse(o, log);
    if (*pre) return cmd_pretrain_teacher(o, log);
    if (*dis) return cmd_distill_student(o, log);
    if (*ev) return cmd_eval(o, log);
    if (*gc) return cmd_gradcheck(o, log);
    if (*ab) return cmd_ablate(o, log);
  } catch (const std::exception& e) {
    log << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}

inline int run(int argc, char** argv, std::ostream& log = std::cerr) {
  return run(std::vector<std::string>(argv + 1, argv + argc), log);
}

}  // namespace smf::cli
