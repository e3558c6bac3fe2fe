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

// Teacher-to-student losses: voxel feature distillation through a
// self-attention encoder, masked multi-level BEV feature distillation and
// adaptively weighted response distillation, plus the combined objective.

#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "smf/backbone.hpp"
#include "smf/common.hpp"
#include "smf/geom.hpp"
#include "smf/nn.hpp"
#include "smf/tensor.hpp"

namespace smf::distill {

using ad::Shape;
using ad::Tensor;
using model::SparseVoxelGrid;
using model::VoxelCoord;
using nn::ParamStore;

struct DistillWeights {
  double tau = 0.1;     // heatmap foreground threshold
  double pi1 = 2.0;     // classification response
  double pi2 = 1.0;     // regression response
  double alpha = 2.0;   // supervised regression
  double beta = 8.0;    // voxel
  double lambda = 1.0;  // BEV
  double mu = 1.0;      // response
  double context_margin = 0.8;
  double smooth_l1_beta = 1.0;
  bool adaptive = true;
  IouMode iou_mode = IouMode::k3d;

  void validate() const {
    for (double v : {tau, pi1, pi2, alpha, beta, lambda, mu, context_margin})
      if (!(v >= 0)) throw Error("distill weights must be non-negative");
    if (smooth_l1_beta <= 0) throw Error("smooth_l1_beta must be positive");
  }
};

// ---------------------------------------------------------------------------
// Voxel selection and matching

struct MatchedVoxelPair {
  VoxelCoord coord;
  std::size_t student = 0;
  std::size_t teacher = 0;
  friend bool operator==(const MatchedVoxelPair&, const MatchedVoxelPair&) = default;
};

/// Student voxels whose centers fall in any margin-enlarged box, each paired
/// with the teacher voxel at the same coordinates.
inline std::vector<MatchedVoxelPair> select_and_match_voxels(const SparseVoxelGrid& student,
                                                             const SparseVoxelGrid& teacher,
                                                             const std::vector<BoundingBox3D>& boxes,
                                                             double margin) {
  std::vector<MatchedVoxelPair> out;
  if (boxes.empty()) return out;
  for (std::size_t i = 0; i < student.size(); ++i) {
    const Vec3 c = student.center(i);
    const Point3 p{c.x, c.y, c.z, 0};
    if (!std::any_of(boxes.begin(), boxes.end(), [&](const auto& b) { return box_contains(b, p, margin); })) continue;
    auto it = std::lower_bound(teacher.coords.begin(), teacher.coords.end(), student.coords[i]);
    if (it == teacher.coords.end() || *it != student.coords[i]) throw Error("subset property violated");
    out.push_back({student.coords[i], i, static_cast<std::size_t>(it - teacher.coords.begin())});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Voxel encoder applied to the selected student voxels

inline constexpr std::size_t kHeads = 8;

enum class EncoderKind { kAttention, kMlp };

inline void add_attention_encoder(ParamStore& p, std::size_t c, Rng& rng, const std::string& pre = "att") {
  if (c % kHeads) throw Error("attention width must be a multiple of 8");
  p.add_normal(pre + ".wq", {c, c}, c, rng, 1.0);
  p.add_normal(pre + ".wk", {c, c}, c, rng, 1.0);
  p.add_normal(pre + ".wv", {c, c}, c, rng, 1.0);
  p.add_normal(pre + ".wr", {3, kHeads}, 3, rng, 1.0);
  p.add_normal(pre + ".wo", {c, c}, c, rng, 1.0);
  p.add_constant(pre + ".bo", {c}, 0.0);
  p.add_normal(pre + ".f1", {c, 2 * c}, c, rng);
  p.add_constant(pre + ".f1b", {2 * c}, 0.0);
  p.add_normal(pre + ".f2", {2 * c, c}, 2 * c, rng, 1.0);
  p.add_constant(pre + ".f2b", {c}, 0.0);
}

inline void add_mlp_encoder(ParamStore& p, std::size_t c, Rng& rng, const std::string& pre = "att") {
  p.add_normal(pre + ".f1", {c, 2 * c}, c, rng);
  p.add_constant(pre + ".f1b", {2 * c}, 0.0);
  p.add_normal(pre + ".f2", {2 * c, c}, 2 * c, rng, 1.0);
  p.add_constant(pre + ".f2b", {c}, 0.0);
}

inline Tensor ffn_residual(const ParamStore& p, const Tensor& x, const std::string& pre) {
  using namespace ad;
  const auto h = relu(nn::linear(x, p.get(pre + ".f1"), p.get(pre + ".f1b")));
  return add(x, nn::linear(h, p.get(pre + ".f2"), p.get(pre + ".f2b")));
}

struct AttentionTrace {
  std::vector<Tensor> weights;  // per head, [N x N], rows sum to 1
};

/// Multi-head self-attention over the selected voxels. Head h scores pair
/// (i, j) as (q_i . k_j + w_r . (p_j - p_i)) / sqrt(C / 8), then the block
/// adds a projected residual and a two-layer FFN residual.
inline Tensor attention_encode(const ParamStore& p, const Tensor& x, std::span<const Vec3> positions,
                               const std::string& pre = "att", AttentionTrace* trace = nullptr) {
  using namespace ad;
  if (x.rank() != 2 || x.dim(0) == 0) throw Error("attention_encode: need at least one voxel");
  const std::size_t n = x.dim(0), c = x.dim(1), dh = c / kHeads;
  if (positions.size() != n) throw ShapeError("attention_encode", "positions vs rows");
  std::vector<double> pos(n * 3);
  for (std::size_t i = 0; i < n; ++i) {
    pos[3 * i] = positions[i].x;
    pos[3 * i + 1] = positions[i].y;
    pos[3 * i + 2] = positions[i].z;
  }
  const auto q = matmul(x, p.get(pre + ".wq"));
  const auto k = matmul(x, p.get(pre + ".wk"));
  const auto v = matmul(x, p.get(pre + ".wv"));
  const auto u = matmul(Tensor::from({n, 3}, std::move(pos)), p.get(pre + ".wr"));  // [N x 8]
  const auto ones_col = Tensor::from({n, 1}, std::vector<double>(n, 1.0));
  const auto ones_row = Tensor::from({1, n}, std::vector<double>(n, 1.0));
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> heads;
  for (std::size_t h = 0; h < kHeads; ++h) {
    const auto qh = slice(q, 1, h * dh, (h + 1) * dh);
    const auto kh = slice(k, 1, h * dh, (h + 1) * dh);
    const auto vh = slice(v, 1, h * dh, (h + 1) * dh);
    const auto uh = slice(u, 1, h, h + 1);
    // r_ij = u_j - u_i
    const auto r = sub(matmul(ones_col, transpose(uh)), matmul(uh, ones_row));
    const auto a = softmax(scale(add(matmul(qh, transpose(kh)), r), inv), 1);
    if (trace) trace->weights.push_back(a);
    heads.push_back(matmul(a, vh));
  }
  const auto attended = add(x, nn::linear(concat(heads, 1), p.get(pre + ".wo"), p.get(pre + ".bo")));
  return ffn_residual(p, attended, pre);
}

inline Tensor mlp_encode(const ParamStore& p, const Tensor& x, const std::string& pre = "att") {
  return ffn_residual(p, x, pre);
}

/// (1/N) sum_i ||a_i - b_i||^2.
inline Tensor voxel_distill_loss(const Tensor& student, const Tensor& teacher) {
  using namespace ad;
  ad::detail::require_same("voxel_distill_loss", student, teacher);
  if (student.dim(0) == 0) return Tensor::scalar(0.0);
  return scale(sum_squares(sub(student, teacher)), 1.0 / static_cast<double>(student.dim(0)));
}

// ---------------------------------------------------------------------------
// BEV feature distillation

inline void add_bev_adapters(ParamStore& p, std::span<const std::size_t> student_channels,
                             std::span<const std::size_t> teacher_channels, Rng& rng, const std::string& pre = "bev") {
  for (std::size_t l = 0; l < student_channels.size(); ++l) {
    const auto s = std::to_string(l);
    p.add_normal(pre + ".adapt" + s, {teacher_channels[l], student_channels[l], 1, 1}, student_channels[l], rng);
    p.add_constant(pre + ".adapt_b" + s, {teacher_channels[l]}, 0.0);
  }
}

/// Flat cells (y * W + x) whose centers lie inside any box footprint.
inline std::vector<std::size_t> bev_box_mask(const std::vector<BoundingBox3D>& boxes, const model::GridConfig& g) {
  const std::size_t h = g.ny(), w = g.nx();
  std::vector<std::size_t> cells;
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const double cx = g.x_min + (static_cast<double>(x) + 0.5) * g.voxel_xy;
      const double cy = g.y_min + (static_cast<double>(y) + 0.5) * g.voxel_xy;
      if (std::any_of(boxes.begin(), boxes.end(), [&](const auto& b) { return box_contains_bev(b, cx, cy); }))
        cells.push_back(y * w + x);
    }
  return cells;
}

/// Columns of a [C x H x W] map at the given flat cells, as [C x |cells|].
inline Tensor gather_cells(const Tensor& map, const std::vector<std::size_t>& cells) {
  const std::size_t c = map.dim(0), hw = map.dim(1) * map.dim(2);
  return ad::index_select(ad::reshape(map, {c, hw}), 1, cells);
}

/// Sum over levels of (1/|B|) sum over masked cells of ||adapt(f_s) - f_t||^2.
/// `teacher[l]` holds the teacher level already gathered at `mask`.
inline Tensor bev_distill_loss(const ParamStore& p, const std::vector<Tensor>& student,
                               const std::vector<Tensor>& teacher, const std::vector<std::size_t>& mask,
                               const std::string& pre = "bev") {
  using namespace ad;
  if (student.size() != teacher.size()) throw Error("bev_distill_loss: level count mismatch");
  if (mask.empty() || student.empty()) return Tensor::scalar(0.0);
  const double inv = 1.0 / static_cast<double>(mask.size());
  Tensor total;
  for (std::size_t l = 0; l < student.size(); ++l) {
    const auto s = std::to_string(l);
    // 1x1 conv on the masked columns only; equal to convolving the full map then gathering.
    const auto w = p.get(pre + ".adapt" + s);
    const auto wm = reshape(w, {w.dim(0), w.dim(1)});
    const auto cols = gather_cells(student[l], mask);
    const auto adapted = relu(transpose(add_bias(transpose(matmul(wm, cols)), p.get(pre + ".adapt_b" + s))));
    ad::detail::require_same("bev_distill_loss", adapted, teacher[l]);
    const auto term = scale(sum_squares(sub(adapted, detach(teacher[l]))), inv);
    total = l == 0 ? term : add(total, term);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Response distillation

/// Flat (class, y, x) indices of the target heatmap above tau.
inline std::vector<std::size_t> foreground_mask(const Tensor& gt_heatmap, double tau) {
  std::vector<std::size_t> g;
  for (std::size_t i = 0; i < gt_heatmap.numel(); ++i)
    if (gt_heatmap[i] > tau) g.push_back(i);
  return g;
}

/// Spatial cells (y * W + x) touched by a (class, y, x) index set, sorted.
inline std::vector<std::size_t> spatial_cells(const std::vector<std::size_t>& g, std::size_t hw) {
  std::vector<std::size_t> cells;
  for (std::size_t i : g) cells.push_back(i % hw);
  std::sort(cells.begin(), cells.end());
  cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
  return cells;
}

/// w_i = s_i * sum(L) / sum(s * L). Empty vector when the denominator is 0.
inline std::vector<double> adaptive_weights(std::span<const double> s, std::span<const double> loss) {
  double total = 0, weighted = 0;
  for (std::size_t i = 0; i < loss.size(); ++i) {
    total += loss[i];
    weighted += s[i] * loss[i];
  }
  if (weighted == 0) return {};
  std::vector<double> w(loss.size());
  for (std::size_t i = 0; i < loss.size(); ++i) w[i] = s[i] * total / weighted;
  return w;
}

/// Adaptive weights enter the graph as constants, so a finite-difference
/// check of a loss that uses them must hold them fixed too: record the
/// weights at the base point, then replay them for the perturbed evaluations.
struct WeightTape {
  bool replay = false;
  std::vector<std::vector<double>> w;  // one entry per weighted loss, in call order
  std::size_t next = 0;
};

/// Weighted mean (1/n) sum w_i L_i with the weights held constant.
inline Tensor weighted_mean(const Tensor& per_item, std::span<const double> scores, bool adaptive,
                            WeightTape* tape = nullptr) {
  using namespace ad;
  const std::size_t n = per_item.numel();
  std::vector<double> w;
  if (tape && tape->replay) {
    w = tape->w.at(tape->next++);
  } else {
    w = adaptive ? adaptive_weights(scores, per_item.values()) : std::vector<double>(n, 1.0);
    if (tape) tape->w.push_back(w);
  }
  if (w.empty()) return Tensor::scalar(0.0);
  if (w.size() != n) throw Error("weighted_mean: replayed weights do not match the loss");
  return scale(sum(mul(per_item, Tensor::from(per_item.shape(), std::move(w)))), 1.0 / static_cast<double>(n));
}

/// Smooth-L1 between student and teacher heatmaps on G, weighted by the
/// student score at each position.
inline Tensor adaptive_cls_loss(const Tensor& h_student, const Tensor& h_teacher, const std::vector<std::size_t>& g,
                                bool adaptive = true, double beta = 1.0, WeightTape* tape = nullptr) {
  using namespace ad;
  ad::detail::require_same("adaptive_cls_loss", h_student, h_teacher);
  if (g.empty()) return Tensor::scalar(0.0);
  const std::size_t n = h_student.numel();
  const auto s = index_select(reshape(h_student, {n}), 0, g);
  const auto t = index_select(reshape(detach(h_teacher), {n}), 0, g);
  const auto per = smooth_l1(sub(s, t), beta);
  return weighted_mean(per, s.values(), adaptive, tape);
}

/// Per cell, mean smooth-L1 over the 8 regression channels, weighted by the
/// IoU of the decoded student and teacher boxes.
inline Tensor adaptive_reg_loss(const Tensor& reg_student, const Tensor& reg_teacher,
                                const std::vector<std::size_t>& cells, const model::GridConfig& grid,
                                IouMode mode = IouMode::k3d, bool adaptive = true, double beta = 1.0,
                                WeightTape* tape = nullptr) {
  using namespace ad;
  ad::detail::require_same("adaptive_reg_loss", reg_student, reg_teacher);
  if (cells.empty()) return Tensor::scalar(0.0);
  const std::size_t d = reg_student.dim(0), w = reg_student.dim(2), hw = reg_student.dim(1) * w;
  const auto s = index_select(reshape(reg_student, {d, hw}), 1, cells);
  const auto t = index_select(reshape(detach(reg_teacher), {d, hw}), 1, cells);
  const auto ones = Tensor::from({1, d}, std::vector<double>(d, 1.0 / static_cast<double>(d)));
  const auto per = matmul(ones, smooth_l1(sub(s, t), beta));  // [1 x n]
  std::vector<double> iou(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto rs = model::reg_at(reg_student, cells[i]);
    const auto rt = model::reg_at(reg_teacher, cells[i]);
    const auto bs = model::decode_box(grid, cells[i] % w, cells[i] / w, rs.data());
    const auto bt = model::decode_box(grid, cells[i] % w, cells[i] / w, rt.data());
    iou[i] = box_iou(bs, bt, mode);
  }
  return weighted_mean(per, iou, adaptive, tape);
}

inline Tensor response_distill_loss(const Tensor& cls, const Tensor& reg, double pi1, double pi2) {
  return ad::add(ad::scale(cls, pi1), ad::scale(reg, pi2));
}

// ---------------------------------------------------------------------------
// Combined objective

struct LossTerms {
  Tensor cls, reg, vxl, bev, rsp_c, rsp_r, rsp, total;
  std::size_t matched_voxels = 0, bev_cells = 0, foreground = 0;
};

/// cls + alpha reg + beta vxl + lambda bev + mu rsp.
inline Tensor total_loss(const Tensor& cls, const Tensor& reg, const Tensor& vxl, const Tensor& bev, const Tensor& rsp,
                         const DistillWeights& w) {
  using namespace ad;
  return add(add(add(add(cls, scale(reg, w.alpha)), scale(vxl, w.beta)), scale(bev, w.lambda)), scale(rsp, w.mu));
}

/// Fills rsp = pi1 rsp_c + pi2 rsp_r and the total.
inline Tensor combine(LossTerms& t, const DistillWeights& w) {
  t.rsp = response_distill_loss(t.rsp_c, t.rsp_r, w.pi1, w.pi2);
  t.total = total_loss(t.cls, t.reg, t.vxl, t.bev, t.rsp, w);
  return t.total;
}

}  // namespace smf::distill
