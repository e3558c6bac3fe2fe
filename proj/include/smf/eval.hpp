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

// Detection evaluation: greedy score-ordered matching per class, AP with
// 101-point interpolation, heading-weighted APH, difficulty levels and
// distance bands.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "smf/backbone.hpp"
#include "smf/common.hpp"
#include "smf/geom.hpp"

namespace smf::eval {

using model::Detection;

struct GroundTruth {
  BoundingBox3D box;
  std::size_t num_points = 0;  // points inside the box in this frame
};

struct FrameResult {
  std::vector<Detection> detections;
  std::vector<GroundTruth> truths;
};

struct DistanceBand {
  double lo = 0, hi = std::numeric_limits<double>::infinity();
  std::string label() const {
    std::ostringstream s;
    s << "[" << lo << "," << (std::isinf(hi) ? std::string("inf") : std::to_string(static_cast<int>(hi))) << ")";
    return s.str();
  }
  bool contains(double d) const { return d >= lo && d < hi; }
};

struct EvalConfig {
  std::size_t num_classes = 2;
  std::vector<double> iou_thresholds{0.5, 0.25};  // per class
  std::vector<DistanceBand> bands{{0, 6}, {6, 10}, {10, std::numeric_limits<double>::infinity()}};
  IouMode iou_mode = IouMode::k3d;
  std::size_t level1_min_points = 5;
  std::size_t level2_min_points = 1;
};

struct Metrics {
  double ap = 0, aph = 0;
  std::size_t num_gt = 0, num_det = 0;
};

/// Heading accuracy weight in [0, 1].
inline double heading_weight(double yaw_pred, double yaw_gt) {
  return std::max(0.0, 1.0 - std::abs(wrap_angle(yaw_pred - yaw_gt)) / kPi);
}

/// One scored detection after matching.
struct ScoredMatch {
  double score = 0;
  bool tp = false;
  double heading = 0;  // heading weight when tp
};

/// 101-point interpolated AP of a ranked list; `weighted` scales each TP's
/// precision credit by its heading weight.
inline double interpolated_ap(std::vector<ScoredMatch> m, std::size_t num_gt, bool weighted) {
  if (num_gt == 0) return 0.0;
  std::stable_sort(m.begin(), m.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  std::vector<double> prec, rec;
  double tp = 0, tp_w = 0;
  for (std::size_t k = 0; k < m.size(); ++k) {
    if (m[k].tp) {
      tp += 1;
      tp_w += m[k].heading;
    }
    prec.push_back((weighted ? tp_w : tp) / static_cast<double>(k + 1));
    rec.push_back(tp / static_cast<double>(num_gt));
  }
  // Precision envelope from the right.
  for (std::size_t k = prec.size(); k-- > 1;) prec[k - 1] = std::max(prec[k - 1], prec[k]);
  double total = 0;
  std::size_t k = 0;
  for (int i = 0; i <= 100; ++i) {
    const double r = i / 100.0;
    while (k < rec.size() && rec[k] < r - 1e-12) ++k;
    if (k < rec.size()) total += prec[k];
  }
  return total / 101.0;
}

/// Greedy matching of one frame and class. GTs failing `counted` are
/// "don't care": detections that match them are dropped. Unmatched
/// detections are kept as false positives only if `det_counted` holds.
template <typename GtPred, typename DetPred>
void match_frame(const FrameResult& f, std::uint32_t cls, double threshold, IouMode mode, GtPred counted,
                 DetPred det_counted, std::vector<ScoredMatch>& out, std::size_t& num_gt) {
  std::vector<std::size_t> dets, gts;
  for (std::size_t i = 0; i < f.detections.size(); ++i)
    if (f.detections[i].box.class_id == cls) dets.push_back(i);
  for (std::size_t i = 0; i < f.truths.size(); ++i)
    if (f.truths[i].box.class_id == cls) gts.push_back(i);
  std::stable_sort(dets.begin(), dets.end(),
                   [&](std::size_t a, std::size_t b) { return f.detections[a].score > f.detections[b].score; });
  for (std::size_t g : gts) num_gt += counted(f.truths[g]) ? 1 : 0;
  std::vector<char> used(gts.size(), 0);
  for (std::size_t d : dets) {
    const auto& det = f.detections[d];
    double best = threshold;
    std::ptrdiff_t arg = -1;
    for (std::size_t j = 0; j < gts.size(); ++j) {
      if (used[j]) continue;
      const double iou = box_iou(det.box, f.truths[gts[j]].box, mode);
      if (iou >= best) {
        best = iou;
        arg = static_cast<std::ptrdiff_t>(j);
      }
    }
    if (arg >= 0) {
      used[static_cast<std::size_t>(arg)] = 1;
      const auto& gt = f.truths[gts[static_cast<std::size_t>(arg)]];
      if (!counted(gt)) continue;
      out.push_back({det.score, true, heading_weight(det.box.yaw, gt.box.yaw)});
    } else if (det_counted(det)) {
      out.push_back({det.score, false, 0.0});
    }
  }
}

struct ReportRow {
  std::uint32_t class_id = 0;
  int level = 2;
  std::string band = "all";
  double iou_threshold = 0;
  Metrics m;
};

struct EvalReport {
  std::vector<ReportRow> rows;
  double map_l1 = 0, maph_l1 = 0, map_l2 = 0, maph_l2 = 0;

  /// Level-2 mAPH over all distances; the headline score.
  double score() const { return maph_l2; }

  std::string to_csv() const {
    std::ostringstream s;
    s.precision(17);
    s << "class,level,band,iou_threshold,ap,aph,num_gt,num_det\n";
    for (const auto& r : rows)
      s << r.class_id << "," << r.level << "," << r.band << "," << r.iou_threshold << "," << r.m.ap << "," << r.m.aph
        << "," << r.m.num_gt << "," << r.m.num_det << "\n";
    return s.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["mAP_L1"] = map_l1;
    j["mAPH_L1"] = maph_l1;
    j["mAP_L2"] = map_l2;
    j["mAPH_L2"] = maph_l2;
    for (const auto& r : rows)
      j["rows"].push_back({{"class", r.class_id},
                           {"level", r.level},
                           {"band", r.band},
                           {"iou_threshold", r.iou_threshold},
                           {"ap", r.m.ap},
                           {"aph", r.m.aph},
                           {"num_gt", r.m.num_gt},
                           {"num_det", r.m.num_det}});
    return j;
  }
};

inline Metrics evaluate_class(const std::vector<FrameResult>& frames, std::uint32_t cls, double threshold,
                              IouMode mode, std::size_t min_points, const DistanceBand& band) {
  std::vector<ScoredMatch> m;
  Metrics out;
  for (const auto& f : frames)
    match_frame(
        f, cls, threshold, mode,
        [&](const GroundTruth& g) { return g.num_points >= min_points && band.contains(g.box.bev_distance()); },
        [&](const Detection& d) { return band.contains(d.box.bev_distance()); }, m, out.num_gt);
  out.num_det = m.size();
  out.ap = interpolated_ap(m, out.num_gt, false);
  out.aph = interpolated_ap(m, out.num_gt, true);
  return out;
}

inline EvalReport evaluate(const std::vector<FrameResult>& frames, const EvalConfig& cfg = {}) {
  if (cfg.iou_thresholds.size() < cfg.num_classes) throw Error("evaluate: one IoU threshold per class required");
  EvalReport rep;
  const DistanceBand all{};
  for (int level : {1, 2}) {
    const std::size_t min_pts = level == 1 ? cfg.level1_min_points : cfg.level2_min_points;
    double ap_sum = 0, aph_sum = 0;
    std::size_t counted = 0;
    for (std::uint32_t c = 0; c < cfg.num_classes; ++c) {
      const double thr = cfg.iou_thresholds[c];
      const auto m = evaluate_class(frames, c, thr, cfg.iou_mode, min_pts, all);
      rep.rows.push_back({c, level, "all", thr, m});
      if (m.num_gt > 0) {
        ap_sum += m.ap;
        aph_sum += m.aph;
        ++counted;
      }
      for (const auto& b : cfg.bands)
        rep.rows.push_back({c, level, b.label(), thr, evaluate_class(frames, c, thr, cfg.iou_mode, min_pts, b)});
    }
    const double n = counted ? static_cast<double>(counted) : 1.0;
    (level == 1 ? rep.map_l1 : rep.map_l2) = ap_sum / n;
    (level == 1 ? rep.maph_l1 : rep.maph_l2) = aph_sum / n;
  }
  return rep;
}

}  // namespace smf::eval
