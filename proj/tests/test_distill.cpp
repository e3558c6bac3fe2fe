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

#include <gtest/gtest.h>

#include <map>

#include "oracles.hpp"
#include "smf/distill.hpp"
#include "smf/gradcheck.hpp"

namespace smf::distill {
namespace {

using model::GridConfig;

Tensor rand_tensor(Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  std::vector<double> v(ad::numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

Tensor project(const Tensor& t) {
  Rng rng(t.numel() * 977 + 3);
  return ad::sum(ad::mul(t, rand_tensor(t.shape(), rng)));
}

BoundingBox3D box_at(double x, double y, double yaw, double l = 2.0, double w = 1.0) {
  BoundingBox3D b;
  b.center = {x, y, 0.75};
  b.l = l;
  b.w = w;
  b.h = 1.5;
  b.yaw = yaw;
  return b;
}

GridConfig grid() { return {-4, 4, -4, 4, -0.5, 2.5, 0.5, 0.5}; }

SparseVoxelGrid random_cloud_grid(Rng& rng, std::size_t n, std::vector<Point3>* points = nullptr) {
  std::vector<Point3> pts;
  for (std::size_t i = 0; i < n; ++i)
    pts.push_back({rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(-0.5, 2.5), rng.uniform()});
  if (points) *points = pts;
  return model::voxelize(pts, grid());
}

// ---------------------------------------------------------------------------
// Selection and matching

TEST(Matching, NoBoxesGivesEmpty) {
  Rng rng(1);
  const auto s = random_cloud_grid(rng, 200);
  EXPECT_TRUE(select_and_match_voxels(s, s, {}, 0.8).empty());
}

TEST(Matching, AgreesWithBruteForceLookup) {
  Rng rng(2);
  std::vector<Point3> pts;
  const auto student = random_cloud_grid(rng, 300, &pts);
  for (int i = 0; i < 300; ++i)
    pts.push_back({rng.uniform(-4, 4), rng.uniform(-4, 4), rng.uniform(-0.5, 2.5), rng.uniform()});
  const auto teacher = model::voxelize(pts, grid());
  const std::vector<BoundingBox3D> boxes{box_at(1, 1, 0.4), box_at(-2, 0.5, 2.0, 3, 1.5)};
  const auto pairs = select_and_match_voxels(student, teacher, boxes, 0.8);
  // Oracle: linear scan over every student voxel and every teacher coord.
  std::vector<MatchedVoxelPair> expect;
  for (std::size_t i = 0; i < student.size(); ++i) {
    const Vec3 c = student.center(i);
    bool in = false;
    for (const auto& b : boxes) in |= oracle::inside_box({c.x, c.y, c.z, 0}, b, 0.8);
    if (!in) continue;
    for (std::size_t j = 0; j < teacher.size(); ++j)
      if (teacher.coords[j] == student.coords[i]) expect.push_back({student.coords[i], i, j});
  }
  EXPECT_FALSE(expect.empty());
  EXPECT_EQ(pairs, expect);
}

TEST(Matching, MarginGrowsTheSelection) {
  Rng rng(3);
  const auto s = random_cloud_grid(rng, 400);
  const std::vector<BoundingBox3D> boxes{box_at(0.3, -0.2, 0.9)};
  const auto tight = select_and_match_voxels(s, s, boxes, 0.0);
  const auto wide = select_and_match_voxels(s, s, boxes, 0.8);
  EXPECT_GT(wide.size(), tight.size());
  for (const auto& p : tight) EXPECT_NE(std::find(wide.begin(), wide.end(), p), wide.end());
}

TEST(Matching, MissingTeacherVoxelIsAnError) {
  Rng rng(4);
  const auto s = random_cloud_grid(rng, 200);
  SparseVoxelGrid empty;
  empty.grid = grid();
  try {
    select_and_match_voxels(s, empty, {box_at(0, 0, 0, 6, 6)}, 0.8);
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("subset property violated"), std::string::npos);
  }
}

// ---------------------------------------------------------------------------
// Attention encoder

struct Enc {
  ParamStore p;
  explicit Enc(std::size_t c, std::uint64_t seed = 5) {
    Rng rng(seed);
    add_attention_encoder(p, c, rng);
    // Nudge biases so FD steps do not straddle ReLU kinks at exactly zero.
    for (auto& [n, t] : p.entries())
      if (n.back() == 'b')
        for (double& v : t.values()) v = 0.03;
  }
};

TEST(Attention, SingleVoxelWeightIsOne) {
  Enc e(16);
  Rng rng(6);
  const auto x = rand_tensor({1, 16}, rng);
  const std::vector<Vec3> pos{{0.5, 1, 0.2}};
  AttentionTrace tr;
  const auto y = attention_encode(e.p, x, pos, "att", &tr);
  ASSERT_EQ(tr.weights.size(), kHeads);
  for (const auto& w : tr.weights) EXPECT_EQ(w.item(), 1.0);
  // With one voxel every head returns v, so the block is FFN(x + proj(v)).
  const auto v = ad::matmul(x, e.p.get("att.wv"));
  const auto attended = ad::add(x, nn::linear(v, e.p.get("att.wo"), e.p.get("att.bo")));
  const auto expect = ffn_residual(e.p, attended, "att");
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(y[i], expect[i], 1e-14);
}

TEST(Attention, RowsSumToOneAndSymmetricPair) {
  Enc e(16);
  Rng rng(7);
  const auto row = rand_tensor({1, 16}, rng);
  const auto x = ad::concat({row, row}, 0);
  const std::vector<Vec3> pos{{-1, 0, 0.5}, {1, 0, 0.5}};
  AttentionTrace tr;
  const auto y = attention_encode(e.p, x, pos, "att", &tr);
  for (const auto& w : tr.weights) {
    EXPECT_NEAR(w[0] + w[1], 1.0, 1e-12);
    EXPECT_NEAR(w[2] + w[3], 1.0, 1e-12);
  }
  // Identical features: the two outputs see the same values and must agree.
  for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(y[c], y[16 + c], 1e-12);
}

TEST(Attention, PermutationEquivariantAndTranslationInvariant) {
  Enc e(16);
  Rng rng(8);
  const std::size_t n = 6;
  const auto x = rand_tensor({n, 16}, rng);
  std::vector<Vec3> pos;
  for (std::size_t i = 0; i < n; ++i) pos.push_back({rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(0, 2)});
  AttentionTrace tr;
  const auto y = attention_encode(e.p, x, pos, "att", &tr);
  for (const auto& w : tr.weights)
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < n; ++j) s += w[i * n + j];
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  const std::vector<std::size_t> perm{4, 2, 0, 5, 1, 3};
  std::vector<Vec3> ppos;
  for (auto i : perm) ppos.push_back(pos[i]);
  const auto yp = attention_encode(e.p, ad::index_select(x, 0, perm), ppos);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 16; ++c) EXPECT_NEAR(yp[i * 16 + c], y[perm[i] * 16 + c], 1e-12);
  // Only relative positions enter the scores.
  std::vector<Vec3> shifted;
  for (const auto& p : pos) shifted.push_back({p.x + 3, p.y - 1, p.z + 0.5});
  const auto ys = attention_encode(e.p, x, shifted);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(ys[i], y[i], 1e-12);
}

TEST(Attention, EmptyInputIsAnError) {
  Enc e(8);
  EXPECT_THROW(attention_encode(e.p, Tensor::zeros({0, 8}), {}), Error);
}

TEST(Attention, GradCheckParamsAndInput) {
  Enc e(16);
  Rng rng(9);
  const auto x = rand_tensor({5, 16}, rng);
  std::vector<Vec3> pos;
  for (int i = 0; i < 5; ++i) pos.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0, 1)});
  std::vector<std::string> names;
  std::vector<Tensor> inputs{Tensor::from(x.shape(), x.values())};
  for (const auto& [n, t] : e.p.entries()) {
    names.push_back(n);
    inputs.push_back(Tensor::from(t.shape(), t.values()));
  }
  const auto r = ad::gradcheck(
      "attention_encode",
      [&](const std::vector<Tensor>& in) {
        ParamStore q;
        for (std::size_t i = 0; i < names.size(); ++i) q.add(names[i], in[i + 1]);
        return project(attention_encode(q, in[0], pos));
      },
      inputs, {.max_elements_per_input = 24});
  EXPECT_TRUE(r.ok) << r.max_rel_error;
}

// ---------------------------------------------------------------------------
// Voxel and BEV losses

TEST(VoxelLoss, Values) {
  Rng rng(10);
  const auto a = rand_tensor({4, 8}, rng), b = rand_tensor({4, 8}, rng);
  EXPECT_EQ(voxel_distill_loss(a, a).item(), 0.0);
  std::vector<double> d(8, 0.0);
  d[0] = 1;
  EXPECT_EQ(voxel_distill_loss(Tensor::from({1, 8}, d), Tensor::zeros({1, 8})).item(), 1.0);
  double s = 0;
  for (std::size_t i = 0; i < 32; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  EXPECT_NEAR(voxel_distill_loss(a, b).item(), s / 4, 1e-12);
}

TEST(BevMask, MatchesPointInRotatedRect) {
  const auto g = grid();
  const std::vector<BoundingBox3D> boxes{box_at(1.1, 0.7, 0.6, 3, 1.2), box_at(-2, -2.3, -1.1, 2, 2)};
  const auto mask = bev_box_mask(boxes, g);
  std::vector<std::size_t> expect;
  for (std::size_t y = 0; y < g.ny(); ++y)
    for (std::size_t x = 0; x < g.nx(); ++x) {
      const double cx = g.x_min + (x + 0.5) * g.voxel_xy, cy = g.y_min + (y + 0.5) * g.voxel_xy;
      bool in = false;
      for (const auto& b : boxes) in |= oracle::inside_footprint(cx, cy, b);
      if (in) expect.push_back(y * g.nx() + x);
    }
  EXPECT_FALSE(expect.empty());
  EXPECT_EQ(mask, expect);
  EXPECT_TRUE(bev_box_mask({}, g).empty());
}

struct BevCase {
  ParamStore p;
  std::vector<Tensor> student, teacher_full;
  std::vector<std::size_t> mask{3, 7, 8, 20};
  BevCase() {
    Rng rng(11);
    const std::vector<std::size_t> sc{3, 4}, tc{5, 4};
    add_bev_adapters(p, sc, tc, rng);
    for (auto& [n, t] : p.entries())
      if (n.find("adapt_b") != std::string::npos)
        for (double& v : t.values()) v = 0.2;
    for (std::size_t l = 0; l < 2; ++l) {
      student.push_back(rand_tensor({sc[l], 5, 5}, rng));
      teacher_full.push_back(rand_tensor({tc[l], 5, 5}, rng));
    }
  }
  std::vector<Tensor> teacher() const {
    std::vector<Tensor> t;
    for (const auto& f : teacher_full) t.push_back(gather_cells(f, mask));
    return t;
  }
};

TEST(BevLoss, MatchesIndependentRecomputation) {
  BevCase bc;
  const double got = bev_distill_loss(bc.p, bc.student, bc.teacher(), bc.mask).item();
  double expect = 0;
  for (std::size_t l = 0; l < 2; ++l) {
    // Full 1x1 conv on the whole map, then read the masked cells.
    const auto& w = bc.p.get("bev.adapt" + std::to_string(l));
    const auto& b = bc.p.get("bev.adapt_b" + std::to_string(l));
    const std::size_t co = w.dim(0), ci = w.dim(1);
    double term = 0;
    for (std::size_t cell : bc.mask)
      for (std::size_t o = 0; o < co; ++o) {
        double a = b[o];
        for (std::size_t i = 0; i < ci; ++i) a += w[o * ci + i] * bc.student[l][i * 25 + cell];
        a = std::max(0.0, a);
        const double d = a - bc.teacher_full[l][o * 25 + cell];
        term += d * d;
      }
    expect += term / bc.mask.size();
  }
  EXPECT_NEAR(got, expect, 1e-12);
  EXPECT_EQ(bev_distill_loss(bc.p, bc.student, bc.teacher(), {}).item(), 0.0);
}

TEST(BevLoss, ZeroWhenTeacherEqualsAdaptedStudent) {
  BevCase bc;
  std::vector<Tensor> adapted;
  for (std::size_t l = 0; l < 2; ++l) {
    const auto& w = bc.p.get("bev.adapt" + std::to_string(l));
    const auto cols = gather_cells(bc.student[l], bc.mask);
    adapted.push_back(ad::relu(ad::transpose(ad::add_bias(
        ad::transpose(ad::matmul(ad::reshape(w, {w.dim(0), w.dim(1)}), cols)), bc.p.get("bev.adapt_b" + std::to_string(l))))));
  }
  EXPECT_EQ(bev_distill_loss(bc.p, bc.student, adapted, bc.mask).item(), 0.0);
}

// ---------------------------------------------------------------------------
// Response losses

TEST(Foreground, ThresholdAndCells) {
  EXPECT_TRUE(foreground_mask(Tensor::zeros({2, 4, 4}), 0.1).empty());
  model::ModelConfig cfg;
  BoundingBox3D b = box_at(0.25, 0.25, 0.0, 4.2, 1.8);
  const auto t = model::build_targets({b}, cfg);
  const auto g = foreground_mask(t.heatmap, 0.1);
  std::size_t brute = 0;
  for (double v : t.heatmap.values()) brute += v > 0.1;
  EXPECT_EQ(g.size(), brute);
  // Contiguous blob around the center cell.
  const std::size_t w = cfg.grid.nx();
  for (std::size_t i : g) {
    const long dx = static_cast<long>(i % w) - 16, dy = static_cast<long>(i / w) - 16;
    EXPECT_LE(std::max(std::labs(dx), std::labs(dy)), cfg.min_radius);
  }
  EXPECT_EQ(spatial_cells({5, 5 + 16, 9}, 16), (std::vector<std::size_t>{5, 9}));
}

TEST(AdaptiveWeights, WorkedExample) {
  const std::vector<double> s{0.8, 0.2}, l{0.3, 0.3};
  const auto w = adaptive_weights(s, l);
  ASSERT_EQ(w.size(), 2u);
  EXPECT_NEAR(w[0], 1.6, 1e-15);
  EXPECT_NEAR(w[1], 0.4, 1e-15);
  EXPECT_NEAR(w[0] * l[0] + w[1] * l[1], l[0] + l[1], 1e-15);
  EXPECT_TRUE(adaptive_weights(std::vector<double>{0, 0}, l).empty());
}

TEST(AdaptiveWeights, PreserveTheLossSum) {
  Rng rng(12);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(40);
    std::vector<double> s(n), l(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = rng.uniform(1e-3, 1);
      l[i] = rng.uniform(0, 5);
    }
    const auto w = adaptive_weights(s, l);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < n; ++i) {
      lhs += w[i] * l[i];
      rhs += l[i];
    }
    ASSERT_NEAR(lhs, rhs, 1e-9);
  }
}

TEST(ResponseLoss, ClsMatchesDirectEvaluation) {
  Rng rng(13);
  const auto hs = rand_tensor({2, 4, 4}, rng, 0.01, 0.99), ht = rand_tensor({2, 4, 4}, rng, 0.01, 0.99);
  const std::vector<std::size_t> g{1, 5, 17, 30};
  EXPECT_EQ(adaptive_cls_loss(hs, hs, g).item(), 0.0);
  EXPECT_EQ(adaptive_cls_loss(hs, ht, {}).item(), 0.0);
  double sum_l = 0, sum_sl = 0;
  std::vector<double> l;
  for (auto i : g) {
    const double d = std::abs(hs[i] - ht[i]);
    l.push_back(d < 1 ? 0.5 * d * d : d - 0.5);
    sum_l += l.back();
    sum_sl += hs[i] * l.back();
  }
  double expect = 0;
  for (std::size_t k = 0; k < g.size(); ++k) expect += hs[g[k]] * sum_l / sum_sl * l[k];
  expect /= g.size();
  EXPECT_NEAR(adaptive_cls_loss(hs, ht, g).item(), expect, 1e-14);
  EXPECT_NEAR(adaptive_cls_loss(hs, ht, g, false).item(), sum_l / g.size(), 1e-14);
}

TEST(ResponseLoss, RegIdenticalBoxesGiveUnweightedMean) {
  Rng rng(14);
  const GridConfig g{-2, 2, -2, 2, -0.5, 2.5, 0.5, 0.5};
  auto rs = rand_tensor({8, 8, 8}, rng, -0.5, 0.5);
  const std::vector<std::size_t> cells{9, 27, 40};
  EXPECT_EQ(adaptive_reg_loss(rs, rs, cells, g).item(), 0.0);
  // Only the x offset differs, by the same amount in every cell, so the
  // per-cell losses are equal.
  auto rt = Tensor::from(rs.shape(), rs.values());
  for (std::size_t c : cells) rt.values()[0 * 64 + c] += 0.3;
  const double mean = 0.5 * 0.3 * 0.3 / 8;
  EXPECT_NEAR(adaptive_reg_loss(rs, rt, cells, g, IouMode::k3d, false).item(), mean, 1e-12);
  // Equal per-cell losses: adaptive weights average to one, so the value is unchanged.
  EXPECT_NEAR(adaptive_reg_loss(rs, rt, cells, g).item(), mean, 1e-12);
}

TEST(ResponseLoss, RspArithmetic) {
  EXPECT_NEAR(response_distill_loss(Tensor::scalar(0.3), Tensor::scalar(0.1), 2, 1).item(), 0.7, 1e-15);
  EXPECT_EQ(response_distill_loss(Tensor::scalar(0), Tensor::scalar(0), 2, 1).item(), 0.0);
}

TEST(TotalLoss, UnitComponentsGiveThirteen) {
  const DistillWeights w;
  const auto one = Tensor::scalar(1.0);
  EXPECT_EQ(total_loss(one, one, one, one, one, w).item(), 13.0);
  const auto zero = Tensor::scalar(0.0);
  EXPECT_EQ(total_loss(zero, zero, zero, zero, zero, w).item(), 0.0);
  LossTerms t{one, one, one, one, Tensor::scalar(0.3), Tensor::scalar(0.1), {}, {}, 0, 0, 0};
  EXPECT_NEAR(combine(t, w).item(), 1 + 2 + 8 + 1 + 0.7, 1e-12);
}

// ---------------------------------------------------------------------------
// Composite objective: every student-side parameter gets a correct gradient,
// frozen teacher parameters get none.

struct Composite {
  model::ModelConfig cfg;
  ParamStore student, teacher, aux;
  SparseVoxelGrid s_in, t_in;
  std::vector<BoundingBox3D> boxes;
  model::Targets targets;

  Composite() {
    cfg.grid = {-2, 2, -2, 2, -0.5, 1.5, 0.5, 0.5};
    cfg.voxel_channels = 8;
    cfg.ms = {8, {4, 4, 4}, 4, 4, true};
    cfg.head_channels = 4;
    student = model::init_detector(cfg, 1);
    teacher = model::init_detector(cfg, 2);
    teacher.set_trainable(false);
    Rng rng(3);
    add_attention_encoder(aux, 8, rng);
    const std::vector<std::size_t> ch{4, 4, 4, 4};
    add_bev_adapters(aux, ch, ch, rng);
    for (auto* p : {&student, &aux})
      for (auto& [n, t] : p->entries())
        if (n.back() == 'b' || n.ends_with("_b") || n.find("adapt_b") != std::string::npos)
          for (double& v : t.values()) v += 0.05;
    std::vector<Point3> pts;
    for (int i = 0; i < 80; ++i)
      pts.push_back({rng.uniform(-1.9, 1.9), rng.uniform(-1.9, 1.9), rng.uniform(-0.4, 1.4), rng.uniform()});
    s_in = model::voxelize(std::span<const Point3>(pts.data(), 50), cfg.grid);
    t_in = model::voxelize(pts, cfg.grid);
    boxes = {box_at(0.3, -0.4, 0.5, 2, 1)};
    boxes[0].class_id = 1;
    targets = model::build_targets(boxes, cfg);
  }

  Tensor loss(const ParamStore& s, const ParamStore& a, WeightTape* tape = nullptr) const {
    const auto so = model::detector_forward(s, cfg, s_in);
    const auto to = model::detector_forward(teacher, cfg, t_in);
    const auto pairs = select_and_match_voxels(s_in, t_in, boxes, 0.8);
    std::vector<std::size_t> sr, tr;
    std::vector<Vec3> pos;
    for (const auto& m : pairs) {
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
    return combine(t, DistillWeights{});
  }
};

TEST(Composite, GradCheckStudentAndAux) {
  Composite c;
  std::vector<std::string> names;
  std::vector<Tensor> inputs;
  const std::size_t ns = c.student.entries().size();
  for (const auto* p : {&c.student, &c.aux})
    for (const auto& [n, t] : p->entries()) {
      names.push_back(n);
      inputs.push_back(Tensor::from(t.shape(), t.values()));
    }
  WeightTape tape;
  c.loss(c.student, c.aux, &tape);
  ASSERT_EQ(tape.w.size(), 2u);
  // Several foreground cells, so the weights are not all one.
  ASSERT_GT(tape.w[0].size(), 1u);
  EXPECT_NE(tape.w[0][0], tape.w[0][1]);
  tape.replay = true;
  const auto r = ad::gradcheck(
      "composite",
      [&](const std::vector<Tensor>& in) {
        ParamStore s, a;
        for (std::size_t i = 0; i < in.size(); ++i) (i < ns ? s : a).add(names[i], in[i]);
        tape.next = 0;
        return c.loss(s, a, &tape);
      },
      inputs, {.max_elements_per_input = 4});
  EXPECT_TRUE(r.ok) << r.max_rel_error;
  EXPECT_GT(r.checked, 100u);
}

// Replaying the recorded weights at the base point is the same graph.
TEST(Composite, ReplayedWeightsGiveTheSameGradient) {
  Composite c;
  auto grads = [&](WeightTape* tape) {
    c.student.zero_grad();
    const auto l = c.loss(c.student, c.aux, tape);
    ad::backward(l);
    std::vector<double> g{l.item()};
    for (const auto& [n, t] : c.student.entries()) g.insert(g.end(), t.grad().begin(), t.grad().end());
    return g;
  };
  WeightTape tape;
  const auto live = grads(&tape);
  tape.replay = true;
  EXPECT_EQ(grads(&tape), live);
  EXPECT_EQ(grads(nullptr), live);
}

TEST(Composite, TeacherReceivesNoGradient) {
  Composite c;
  c.student.zero_grad();
  c.aux.zero_grad();
  const auto l = c.loss(c.student, c.aux);
  ad::backward(l);
  for (const auto& [n, t] : c.teacher.entries()) {
    EXPECT_FALSE(t.requires_grad()) << n;
    for (double g : t.grad()) EXPECT_EQ(g, 0.0) << n;
  }
  double student_grad = 0;
  for (const auto& [n, t] : c.student.entries())
    for (double g : t.grad()) student_grad += std::abs(g);
  EXPECT_GT(student_grad, 0.0);
}

}  // namespace
}  // namespace smf::distill
