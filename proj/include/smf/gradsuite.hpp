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

// Finite-difference checks of every differentiable op, the network blocks,
// the distillation losses and the combined objective, at toy shapes.

#pragma once

#include <string>
#include <vector>

#include "smf/backbone.hpp"
#include "smf/distill.hpp"
#include "smf/gradcheck.hpp"

namespace smf::gradsuite {

using ad::GradCheckResult;
using ad::Shape;
using ad::Tensor;
using nn::ParamStore;

namespace detail {

inline Tensor rand_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

// Kinks of relu/abs stay out of reach of the FD step.
inline Tensor away_from_zero(Shape shape, Rng& rng) {
  auto t = rand_tensor(std::move(shape), rng);
  for (double& x : t.values()) x = (x < 0 ? -1 : 1) * (0.05 + std::abs(x));
  return t;
}

inline Tensor project(const Tensor& t) {
  Rng rng(t.numel() * 7919 + 1);
  return ad::sum(ad::mul(t, rand_tensor(t.shape(), rng)));
}

inline std::vector<Tensor> copy_params(const ParamStore& p, std::vector<std::string>& names) {
  std::vector<Tensor> out;
  for (const auto& [n, t] : p.entries()) {
    names.push_back(n);
    out.push_back(Tensor::from(t.shape(), t.values()));
  }
  return out;
}

inline ParamStore rebuild(const std::vector<std::string>& names, const std::vector<Tensor>& in, std::size_t first = 0) {
  ParamStore q;
  for (std::size_t i = 0; i < names.size(); ++i) q.add(names[i], in[first + i]);
  return q;
}

inline void nudge_biases(ParamStore& p, double v) {
  for (auto& [n, t] : p.entries())
    if (t.rank() == 1 && (n.ends_with("b") || n.find("_b") != std::string::npos))
      for (double& x : t.values()) x += v;
}

}  // namespace detail

/// Checks of the individual tensor ops.
inline std::vector<GradCheckResult> primitive_checks() {
  using namespace ad;
  using detail::project;
  Rng rng(5);
  auto t = [&](Shape s) { return detail::rand_tensor(std::move(s), rng); };
  auto nz = [&](Shape s) { return detail::away_from_zero(std::move(s), rng); };
  std::vector<GradCheckResult> out;
  auto check = [&](const std::string& name, const ScalarFn& fn, std::vector<Tensor> in) {
    out.push_back(gradcheck(name, fn, std::move(in)));
  };
  check("add", [](auto& in) { return project(add(in[0], in[1])); }, {t({3, 4}), t({3, 4})});
  check("sub", [](auto& in) { return project(sub(in[0], in[1])); }, {t({3, 4}), t({3, 4})});
  check("mul", [](auto& in) { return project(mul(in[0], in[1])); }, {t({3, 4}), t({3, 4})});
  check("scale", [](auto& in) { return project(scale(in[0], -1.7)); }, {t({5})});
  check("matmul", [](auto& in) { return project(matmul(in[0], in[1])); }, {t({3, 4}), t({4, 5})});
  check("transpose", [](auto& in) { return project(transpose(in[0])); }, {t({3, 4})});
  check("relu", [](auto& in) { return project(relu(in[0])); }, {nz({4, 4})});
  check("sigmoid", [](auto& in) { return project(sigmoid(in[0])); }, {t({4, 4})});
  check("abs", [](auto& in) { return project(abs(in[0])); }, {nz({6})});
  check("smooth_l1", [](auto& in) { return project(smooth_l1(in[0], 1.0)); },
        {Tensor::from({6}, {-2.5, -0.7, -0.2, 0.3, 0.8, 1.9})});
  check("softmax", [](auto& in) { return project(softmax(in[0], 1)); }, {t({3, 4})});
  check("softmax_dim0", [](auto& in) { return project(softmax(in[0], 0)); }, {t({3, 2, 2})});
  check("concat", [](auto& in) { return project(concat({in[0], in[1]}, 1)); }, {t({2, 3}), t({2, 2})});
  check("slice", [](auto& in) { return project(slice(in[0], 1, 1, 3)); }, {t({3, 4})});
  check("reshape", [](auto& in) { return project(reshape(in[0], {6, 2})); }, {t({3, 4})});
  check("index_select", [](auto& in) { return project(index_select(in[0], 0, {2, 0, 2})); }, {t({3, 4})});
  check("add_bias", [](auto& in) { return project(add_bias(in[0], in[1])); }, {t({2, 3, 3}), t({2})});
  check("mul_spatial", [](auto& in) { return project(mul_spatial(in[0], in[1])); }, {t({3, 2, 4}), t({1, 2, 4})});
  check("channel_norm", [](auto& in) { return project(channel_norm(in[0], in[1])); },
        {t({3, 3, 4}), detail::rand_tensor({3}, rng, 0.5, 1.5)});
  check("conv2d", [](auto& in) { return project(conv2d(in[0], in[1], 1, 1)); }, {t({2, 6, 5}), t({3, 2, 3, 3})});
  check("conv2d_stride2", [](auto& in) { return project(conv2d(in[0], in[1], 2, 1)); },
        {t({2, 6, 5}), t({3, 2, 3, 3})});
  check("deconv2d", [](auto& in) { return project(deconv2d(in[0], in[1])); }, {t({2, 3, 4}), t({2, 3, 3, 3})});
  check("bilinear_upsample", [](auto& in) { return project(bilinear_upsample(in[0], 4)); }, {t({2, 3, 3})});
  check("scatter_max", [](auto& in) { return project(scatter_max(in[0], {0, 3, 3, 1}, 2, 2)); }, {t({4, 3})});
  Adjacency adj;
  adj.index = {1, 2, 0, 0};
  adj.offset = {0, 2, 3, 4, 4};
  check("neighbor_mean", [adj](auto& in) { return project(neighbor_mean(in[0], adj)); }, {t({4, 3})});
  check("sum", [](auto& in) { return sum(in[0]); }, {t({3, 3})});
  check("mean", [](auto& in) { return mean(in[0]); }, {t({3, 3})});
  check("sum_squares", [](auto& in) { return sum_squares(in[0]); }, {t({3, 3})});
  check("mse_loss", [](auto& in) { return mse_loss(in[0], in[1]); }, {t({3, 3}), t({3, 3})});
  check("smooth_l1_loss", [](auto& in) { return smooth_l1_loss(in[0], in[1], 1.0); },
        {detail::rand_tensor({8}, rng, -3, 3), Tensor::zeros({8})});
  auto target = detail::rand_tensor({2, 3, 3}, rng, 0, 0.9);
  target.values()[4] = 1.0;
  check("focal_loss", [target](auto& in) { return focal_loss(in[0], target); },
        {detail::rand_tensor({2, 3, 3}, rng, -3, 3)});
  return out;
}

/// Gradient of `fn` with respect to every tensor in `p`.
inline GradCheckResult param_check(const std::string& name, const ParamStore& p,
                                   const std::function<Tensor(const ParamStore&)>& fn, std::size_t max_elements) {
  std::vector<std::string> names;
  auto in = detail::copy_params(p, names);
  return ad::gradcheck(
      name, [&](const std::vector<Tensor>& x) { return fn(detail::rebuild(names, x)); }, std::move(in),
      {.max_elements_per_input = max_elements});
}

/// A toy detector pair plus one sample with both input modalities.
struct ToyScene {
  model::ModelConfig cfg;
  ParamStore student, teacher, aux;
  model::SparseVoxelGrid s_in, t_in;
  std::vector<BoundingBox3D> boxes;
  model::Targets targets;

  ToyScene() {
    cfg.grid = {-2, 2, -2, 2, -0.5, 1.5, 0.5, 0.5};
    cfg.voxel_channels = 8;
    cfg.ms = {8, {4, 4, 4}, 4, 4, true};
    cfg.head_channels = 4;
    student = model::init_detector(cfg, 1);
    teacher = model::init_detector(cfg, 2);
    teacher.set_trainable(false);
    Rng rng(3);
    distill::add_attention_encoder(aux, 8, rng);
    const auto ch = model::level_channels(cfg);
    distill::add_bev_adapters(aux, ch, ch, rng);
    detail::nudge_biases(student, 0.05);
    detail::nudge_biases(aux, 0.05);
    std::vector<Point3> pts;
    for (int i = 0; i < 80; ++i)
      pts.push_back({rng.uniform(-1.9, 1.9), rng.uniform(-1.9, 1.9), rng.uniform(-0.4, 1.4), rng.uniform()});
    s_in = model::voxelize(std::span<const Point3>(pts.data(), 50), cfg.grid);
    t_in = model::voxelize(pts, cfg.grid);
    BoundingBox3D b;
    b.center = {0.3, -0.4, 0.75};
    b.l = 2;
    b.w = 1;
    b.h = 1.5;
    b.yaw = 0.5;
    b.class_id = 1;
    boxes = {b};
    targets = model::build_targets(boxes, cfg);
  }

  distill::LossTerms terms(const ParamStore& s, const ParamStore& a, distill::WeightTape* tape = nullptr) const {
    using namespace distill;
    const auto so = model::detector_forward(s, cfg, s_in);
    const auto to = model::detector_forward(teacher, cfg, t_in);
    std::vector<std::size_t> sr, tr;
    std::vector<Vec3> pos;
    for (const auto& m : select_and_match_voxels(s_in, t_in, boxes, 0.8)) {
      sr.push_back(m.student);
      tr.push_back(m.teacher);
      pos.push_back(s_in.center(m.student));
    }
    const auto sup = model::supervised_loss(so.resp, targets);
    LossTerms t;
    t.cls = sup.cls;
    t.reg = sup.reg;
    t.vxl = voxel_distill_loss(attention_encode(a, ad::index_select(so.voxels.features, 0, sr), pos),
                               ad::index_select(to.voxels.features, 0, tr));
    const auto mask = bev_box_mask(boxes, cfg.grid);
    std::vector<Tensor> tl;
    for (const auto& l : to.rpn.levels) tl.push_back(gather_cells(l, mask));
    t.bev = bev_distill_loss(a, so.rpn.levels, tl, mask);
    const auto g = foreground_mask(targets.heatmap, 0.1);
    t.rsp_c = adaptive_cls_loss(so.resp.heatmap, to.resp.heatmap, g, true, 1.0, tape);
    t.rsp_r = adaptive_reg_loss(so.resp.reg, to.resp.reg, spatial_cells(g, cfg.grid.nx() * cfg.grid.ny()), cfg.grid,
                                IouMode::k3d, true, 1.0, tape);
    combine(t, DistillWeights{});
    return t;
  }
};

/// Checks of the model blocks, the distillation losses and the full objective.
inline std::vector<GradCheckResult> model_checks() {
  std::vector<GradCheckResult> out;
  const ToyScene scene;
  // Attention encoder: parameters and input features together.
  {
    ParamStore p;
    Rng rng(9);
    distill::add_attention_encoder(p, 16, rng);
    detail::nudge_biases(p, 0.03);
    const auto x = detail::rand_tensor({5, 16}, rng);
    std::vector<Vec3> pos;
    for (int i = 0; i < 5; ++i) pos.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0, 1)});
    std::vector<std::string> names;
    auto in = detail::copy_params(p, names);
    in.insert(in.begin(), Tensor::from(x.shape(), x.values()));
    out.push_back(ad::gradcheck(
        "attention_encoder",
        [&](const std::vector<Tensor>& v) {
          return detail::project(distill::attention_encode(detail::rebuild(names, v, 1), v[0], pos));
        },
        std::move(in), {.max_elements_per_input = 24}));
  }
  // Backbone blocks.
  {
    ParamStore p;
    Rng rng(13), in(14);
    const model::MsRpnConfig ms{4, {4, 6, 8}, 3, 5, true};
    model::add_ms_rpn(p, ms, rng);
    const auto x = detail::rand_tensor({4, 8, 8}, in, 0, 1);
    out.push_back(param_check(
        "ms_rpn", p, [&](const ParamStore& q) { return detail::project(model::ms_rpn_forward(q, ms, x).fused); }, 12));
  }
  out.push_back(param_check(
      "detector_head", scene.student,
      [&](const ParamStore& q) {
        const auto r = model::detector_forward(q, scene.cfg, scene.s_in).resp;
        return ad::add(detail::project(r.heatmap), detail::project(r.reg));
      },
      6));
  // The three distillation losses, each with respect to student and aux parameters.
  const std::size_t ns = scene.student.entries().size();
  std::vector<std::string> names;
  auto all = detail::copy_params(scene.student, names);
  {
    auto aux = detail::copy_params(scene.aux, names);
    all.insert(all.end(), aux.begin(), aux.end());
  }
  // Response weights are frozen at the base point (see WeightTape).
  distill::WeightTape tape;
  scene.terms(scene.student, scene.aux, &tape);
  tape.replay = true;
  auto loss_check = [&](const std::string& name, auto pick, std::size_t max_elements) {
    out.push_back(ad::gradcheck(
        name,
        [&](const std::vector<Tensor>& in) {
          ParamStore s, a;
          for (std::size_t i = 0; i < in.size(); ++i) (i < ns ? s : a).add(names[i], in[i]);
          tape.next = 0;
          auto t = scene.terms(s, a, &tape);
          return pick(t);
        },
        all, {.max_elements_per_input = max_elements}));
  };
  loss_check("voxel_distill_loss", [](distill::LossTerms& t) { return t.vxl; }, 4);
  loss_check("bev_distill_loss", [](distill::LossTerms& t) { return t.bev; }, 4);
  loss_check("response_distill_loss", [](distill::LossTerms& t) { return t.rsp; }, 4);
  loss_check("composite_loss", [](distill::LossTerms& t) { return t.total; }, 4);
  return out;
}

inline std::vector<GradCheckResult> run_all() {
  auto out = primitive_checks();
  auto more = model_checks();
  out.insert(out.end(), more.begin(), more.end());
  return out;
}

}  // namespace smf::gradsuite
