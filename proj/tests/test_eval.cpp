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

#include "smf/eval.hpp"

namespace smf::eval {
namespace {

BoundingBox3D box_at(double x, double y, double yaw = 0, std::uint32_t cls = 0) {
  BoundingBox3D b;
  b.center = {x, y, 0.8};
  b.w = 1.8;
  b.l = 4.2;
  b.h = 1.6;
  b.yaw = yaw;
  b.class_id = cls;
  return b;
}

GroundTruth gt(const BoundingBox3D& b, std::size_t pts = 10) { return {b, pts}; }

Detection det(const BoundingBox3D& b, double score) { return {b, score}; }

const ReportRow& row(const EvalReport& r, std::uint32_t cls, int level, const std::string& band = "all") {
  for (const auto& x : r.rows)
    if (x.class_id == cls && x.level == level && x.band == band) return x;
  throw Error("row not found");
}

TEST(HeadingWeight, Values) {
  EXPECT_EQ(heading_weight(0.3, 0.3), 1.0);
  EXPECT_DOUBLE_EQ(heading_weight(kPi / 2, 0), 0.5);
  EXPECT_EQ(heading_weight(kPi, 0), 0.0);
  EXPECT_NEAR(heading_weight(3.1, -3.1), 1 - (2 * kPi - 6.2) / kPi, 1e-12);
}

TEST(Evaluate, PerfectDetectionsScoreOne) {
  std::vector<FrameResult> frames(2);
  frames[0].truths = {gt(box_at(3, 0, 0.2)), gt(box_at(-4, 5, 1.0, 1))};
  frames[1].truths = {gt(box_at(8, -2, -2.0))};
  for (auto& f : frames)
    for (const auto& g : f.truths) f.detections.push_back(det(g.box, 0.9));
  const auto r = evaluate(frames);
  EXPECT_EQ(r.map_l1, 1.0);
  EXPECT_EQ(r.maph_l1, 1.0);
  EXPECT_EQ(r.map_l2, 1.0);
  EXPECT_EQ(r.score(), 1.0);
}

TEST(Evaluate, FlippedHeadingKeepsApButZeroesAph) {
  std::vector<FrameResult> frames(1);
  frames[0].truths = {gt(box_at(3, 0, 0.2)), gt(box_at(-4, 5, 1.0))};
  for (const auto& g : frames[0].truths) {
    auto b = g.box;
    b.yaw = wrap_angle(b.yaw + kPi);
    frames[0].detections.push_back(det(b, 0.9));
  }
  const auto r = evaluate(frames);
  EXPECT_EQ(r.map_l2, 1.0);
  EXPECT_EQ(r.maph_l2, 0.0);
}

TEST(Evaluate, NoDetectionsScoreZero) {
  std::vector<FrameResult> frames(1);
  frames[0].truths = {gt(box_at(3, 0))};
  EXPECT_EQ(evaluate(frames).map_l2, 0.0);
  EXPECT_EQ(evaluate({}).map_l2, 0.0);
}

// Three ground truths, four ranked detections: TP (exact), FP (empty space),
// TP (heading off by a quarter turn), FP (duplicate of the first GT).
// Precision 1, 1/2, 2/3, 1/2 at recall 1/3, 1/3, 2/3, 2/3. The envelope is
// 1 for recall points 0.00..0.33 (34 points) and 2/3 for 0.34..0.66 (33
// points). Heading-weighted precision is 1, 1/2, 1/2, 3/8.
TEST(Evaluate, HandEnumeratedPrCurve) {
  std::vector<FrameResult> frames(1);
  auto& f = frames[0];
  f.truths = {gt(box_at(3, 0)), gt(box_at(-4, 5, 0.5)), gt(box_at(0, -7))};
  f.detections = {det(box_at(3, 0), 0.9), det(box_at(6, 6), 0.8), det(box_at(-4, 5, 0.5 + kPi / 2), 0.7),
                  det(box_at(3.1, 0), 0.6)};
  // Quarter-turned 4.2 x 1.8 footprints overlap 3.24 / 11.88, just above 0.25.
  const double iou_rot = box_iou(f.detections[2].box, f.truths[1].box, IouMode::k3d);
  ASSERT_GT(iou_rot, 0.25);
  EvalConfig cfg;
  cfg.iou_thresholds = {0.25, 0.25};
  const auto r = evaluate(frames, cfg);
  const auto& m = row(r, 0, 2).m;
  EXPECT_EQ(m.num_gt, 3u);
  EXPECT_EQ(m.num_det, 4u);
  // Hand-written envelopes over the 101 recall points, summed in order.
  double ap = 0, aph = 0;
  for (int i = 0; i <= 100; ++i) {
    ap += i <= 33 ? 1.0 : i <= 66 ? 2.0 / 3.0 : 0.0;
    aph += i <= 33 ? 1.0 : i <= 66 ? 0.5 : 0.0;
  }
  EXPECT_EQ(m.ap, ap / 101.0);
  EXPECT_EQ(m.aph, aph / 101.0);
  EXPECT_NEAR(m.ap, 56.0 / 101.0, 1e-14);
  // Class 1 has no ground truth and does not enter the mean.
  EXPECT_DOUBLE_EQ(r.map_l2, m.ap);
  EXPECT_DOUBLE_EQ(r.maph_l2, m.aph);
}

TEST(Evaluate, LevelOneIgnoresSparseTruths) {
  std::vector<FrameResult> frames(1);
  frames[0].truths = {gt(box_at(3, 0), 10), gt(box_at(-4, 5), 2)};
  frames[0].detections = {det(box_at(3, 0), 0.9), det(box_at(-4, 5), 0.8)};
  const auto r = evaluate(frames);
  // The sparse truth is "don't care" at level 1: its detection is not a false positive.
  EXPECT_EQ(row(r, 0, 1).m.num_gt, 1u);
  EXPECT_EQ(row(r, 0, 1).m.num_det, 1u);
  EXPECT_EQ(row(r, 0, 1).m.ap, 1.0);
  EXPECT_EQ(row(r, 0, 2).m.num_gt, 2u);
  EXPECT_EQ(row(r, 0, 2).m.ap, 1.0);
}

TEST(Evaluate, DistanceBandsPartitionTruths) {
  std::vector<FrameResult> frames(1);
  frames[0].truths = {gt(box_at(3, 0)), gt(box_at(7, 0)), gt(box_at(0, 11))};
  frames[0].detections = {det(box_at(3, 0), 0.9), det(box_at(0, 11), 0.5)};
  const auto r = evaluate(frames);
  EXPECT_EQ(row(r, 0, 2, "[0,6)").m.ap, 1.0);
  EXPECT_EQ(row(r, 0, 2, "[6,10)").m.num_gt, 1u);
  EXPECT_EQ(row(r, 0, 2, "[6,10)").m.ap, 0.0);
  EXPECT_EQ(row(r, 0, 2, "[10,inf)").m.ap, 1.0);
  std::size_t total = 0;
  for (const auto* b : {"[0,6)", "[6,10)", "[10,inf)"}) total += row(r, 0, 2, b).m.num_gt;
  EXPECT_EQ(total, row(r, 0, 2).m.num_gt);
}

TEST(Evaluate, ClassesDoNotMatchEachOther) {
  std::vector<FrameResult> frames(1);
  frames[0].truths = {gt(box_at(3, 0, 0, 1))};
  frames[0].detections = {det(box_at(3, 0, 0, 0), 0.9)};
  const auto r = evaluate(frames);
  EXPECT_EQ(row(r, 1, 2).m.ap, 0.0);
  EXPECT_EQ(row(r, 0, 2).m.num_det, 1u);
}

TEST(Report, CsvAndJsonAgree) {
  std::vector<FrameResult> frames(1);
  frames[0].truths = {gt(box_at(3, 0))};
  frames[0].detections = {det(box_at(3, 0), 0.9)};
  const auto r = evaluate(frames);
  const auto csv = r.to_csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "class,level,band,iou_threshold,ap,aph,num_gt,num_det");
  EXPECT_EQ(static_cast<std::size_t>(std::count(csv.begin(), csv.end(), '\n')), r.rows.size() + 1);
  const auto j = r.to_json();
  EXPECT_EQ(j["mAPH_L2"].get<double>(), r.score());
  EXPECT_EQ(j["rows"].size(), r.rows.size());
  EXPECT_THROW(evaluate(frames, EvalConfig{.iou_thresholds = {0.5}}), Error);
}

}  // namespace
}  // namespace smf::eval
