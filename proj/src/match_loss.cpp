// Copyright (c) 2026 The taskdet Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "taskdet/match_loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace taskdet {

MatchAssignment hungarian(const std::vector<std::vector<double>>& cost) {
    int rows = int(cost.size());
    if (rows < 1) throw UsageError("hungarian: empty cost matrix");
    int cols = int(cost[0].size());
    if (cols < 1) throw UsageError("hungarian: empty cost matrix");
    for (const auto& r : cost) {
        if (int(r.size()) != cols) throw UsageError("hungarian: ragged cost matrix");
        for (double v : r)
            if (!std::isfinite(v)) throw UsageError("hungarian: non-finite cost entry");
    }

    // Square-pad with zero cost; padded cells never affect the real total.
    // A tiny index-monotone perturbation resolves exact ties toward the
    // lowest (row, then column) pair; it is orders of magnitude below any
    // meaningful cost difference and the reported total uses the original
    // entries.
    int n = std::max(rows, cols);
    double scale = 1.0;
    for (const auto& r : cost)
        for (double v : r) scale = std::max(scale, std::fabs(v));
    double tie_eps = scale * 1e-13 / double(n * n + 1);
    auto at = [&](int i, int j) {
        if (i < rows && j < cols)
            return cost[std::size_t(i)][std::size_t(j)] +
                   tie_eps * double(i * cols + j);
        return 0.0;
    };

    const double INF = std::numeric_limits<double>::infinity();
    std::vector<double> u(std::size_t(n) + 1, 0.0), v(std::size_t(n) + 1, 0.0);
    std::vector<int> p(std::size_t(n) + 1, 0), way(std::size_t(n) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(std::size_t(n) + 1, INF);
        std::vector<char> used(std::size_t(n) + 1, 0);
        do {
            used[std::size_t(j0)] = 1;
            int i0 = p[std::size_t(j0)], j1 = -1;
            double delta = INF;
            for (int j = 1; j <= n; ++j) {
                if (used[std::size_t(j)]) continue;
                double cur = at(i0 - 1, j - 1) - u[std::size_t(i0)] - v[std::size_t(j)];
                if (cur < minv[std::size_t(j)]) {
                    minv[std::size_t(j)] = cur;
                    way[std::size_t(j)] = j0;
                }
                if (minv[std::size_t(j)] < delta) {
                    delta = minv[std::size_t(j)];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[std::size_t(j)]) {
                    u[std::size_t(p[std::size_t(j)])] += delta;
                    v[std::size_t(j)] -= delta;
                } else {
                    minv[std::size_t(j)] -= delta;
                }
            }
            j0 = j1;
        } while (p[std::size_t(j0)] != 0);
        do {
            int j1 = way[std::size_t(j0)];
            p[std::size_t(j0)] = p[std::size_t(j1)];
            j0 = j1;
        } while (j0);
    }

    MatchAssignment out;
    for (int j = 1; j <= n; ++j) {
        int i = p[std::size_t(j)];
        if (i >= 1 && i <= rows && j <= cols) {
            out.pairs.emplace_back(i - 1, j - 1);
            out.total_cost += cost[std::size_t(i - 1)][std::size_t(j - 1)];
        }
    }
    std::sort(out.pairs.begin(), out.pairs.end());
    return out;
}

void LossBreakdown::accumulate(const LossBreakdown& other) {
    total += other.total;
    cls += other.cls;
    l1 += other.l1;
    giou += other.giou;
    matched_pairs += other.matched_pairs;
    if (per_stage.size() < other.per_stage.size())
        per_stage.resize(other.per_stage.size(), {0.0, 0.0, 0.0});
    for (std::size_t s = 0; s < other.per_stage.size(); ++s)
        for (int t = 0; t < 3; ++t) per_stage[s][std::size_t(t)] += other.per_stage[s][std::size_t(t)];
}

Tensor focal_loss_sum(Tape& tp, const Tensor& logits,
                      const std::vector<double>& targets,
                      const std::vector<double>& mask, double alpha, double gamma) {
    std::size_t n = std::size_t(logits.numel());
    if (targets.size() != n || mask.size() != n)
        throw ShapeError("focal_loss: targets/mask size mismatch with logits " +
                         shape_str(logits.shape()));
    // -alpha (1-p)^g log p      = alpha sigmoid(-z)^g softplus(-z)
    // -(1-alpha) p^g log (1-p)  = (1-alpha) sigmoid(z)^g softplus(z)
    std::vector<double> wpos(n), wneg(n);
    for (std::size_t i = 0; i < n; ++i) {
        wpos[i] = mask[i] * alpha * targets[i];
        wneg[i] = mask[i] * (1.0 - alpha) * (1.0 - targets[i]);
    }
    Tensor z = logits;
    Tensor nz = tp.mul_scalar(z, -1.0);
    Tensor pos = tp.mul(tp.powc(tp.sigmoid(nz), gamma), tp.softplus(nz));
    Tensor neg = tp.mul(tp.powc(tp.sigmoid(z), gamma), tp.softplus(z));
    Tensor total =
        tp.add(tp.mul(pos, Tensor::from_data(logits.shape(), std::move(wpos))),
               tp.mul(neg, Tensor::from_data(logits.shape(), std::move(wneg))));
    return tp.sum(total);
}

namespace {

double focal_cost(double z, double alpha, double gamma) {
    auto softplus = [](double x) {
        return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
    };
    double p = 1.0 / (1.0 + std::exp(-z));
    double pos = alpha * std::pow(1.0 - p, gamma) * softplus(-z);
    double neg = (1.0 - alpha) * std::pow(p, gamma) * softplus(z);
    return pos - neg;
}

Box to_xyxy_unit(const BoxCxcywh& b) {
    Box r;
    r.x1 = b.cx - 0.5 * b.w;
    r.y1 = b.cy - 0.5 * b.h;
    r.x2 = b.cx + 0.5 * b.w;
    r.y2 = b.cy + 0.5 * b.h;
    return r;
}

// Differentiable per-row GIoU between predicted cxcywh boxes and constant
// ground-truth boxes, both in normalized coordinates.
Tensor giou_pairs(Tape& tp, const Tensor& pred, const std::vector<GroundTruth>& gts) {
    int m = pred.dim(0);
    auto gx1 = std::vector<double>(std::size_t(m));
    auto gy1 = gx1, gx2 = gx1, gy2 = gx1, garea = gx1;
    for (int j = 0; j < m; ++j) {
        Box g = to_xyxy_unit(gts[std::size_t(j)].box);
        gx1[std::size_t(j)] = g.x1;
        gy1[std::size_t(j)] = g.y1;
        gx2[std::size_t(j)] = g.x2;
        gy2[std::size_t(j)] = g.y2;
        garea[std::size_t(j)] = box_area(g);
    }
    auto col = [&](std::vector<double> v) {
        return Tensor::from_data({m, 1}, std::move(v));
    };
    Tensor cgx1 = col(gx1), cgy1 = col(gy1), cgx2 = col(gx2), cgy2 = col(gy2);
    Tensor cgarea = col(garea);
    Tensor tiny = Tensor::full({m, 1}, 1e-12);

    Tensor cx = tp.slice_cols(pred, 0, 1), cy = tp.slice_cols(pred, 1, 2);
    Tensor w2 = tp.mul_scalar(tp.slice_cols(pred, 2, 3), 0.5);
    Tensor h2 = tp.mul_scalar(tp.slice_cols(pred, 3, 4), 0.5);
    Tensor px1 = tp.sub(cx, w2), px2 = tp.add(cx, w2);
    Tensor py1 = tp.sub(cy, h2), py2 = tp.add(cy, h2);

    Tensor iw = tp.relu(tp.sub(tp.minimum(px2, cgx2), tp.maximum(px1, cgx1)));
    Tensor ih = tp.relu(tp.sub(tp.minimum(py2, cgy2), tp.maximum(py1, cgy1)));
    Tensor inter = tp.mul(iw, ih);

    Tensor parea = tp.mul(tp.relu(tp.sub(px2, px1)), tp.relu(tp.sub(py2, py1)));
    Tensor uni = tp.sub(tp.add(parea, cgarea), inter);
    Tensor iou = tp.div(inter, tp.maximum(uni, tiny));

    Tensor ew = tp.relu(tp.sub(tp.maximum(px2, cgx2), tp.minimum(px1, cgx1)));
    Tensor eh = tp.relu(tp.sub(tp.maximum(py2, cgy2), tp.minimum(py1, cgy1)));
    Tensor earea = tp.mul(ew, eh);
    Tensor hole = tp.div(tp.sub(earea, uni), tp.maximum(earea, tiny));
    return tp.sub(iou, hole);
}

} // namespace

std::vector<std::vector<double>> matching_cost(const StageOutput& stage,
                                               const std::vector<GroundTruth>& gts,
                                               const std::vector<bool>& pad_mask,
                                               const LossWeights& w) {
    if (gts.empty()) throw UsageError("matching_cost: no ground truths");
    int n = stage.logits.dim(0);
    int k = stage.logits.dim(1);
    for (const auto& g : gts) {
        if (g.class_index < 0 || g.class_index >= k ||
            pad_mask[std::size_t(g.class_index)])
            throw UsageError("matching_cost: gt class " + std::to_string(g.class_index) +
                             " outside the sampled task");
    }
    std::vector<std::vector<double>> cost(std::size_t(n),
                                          std::vector<double>(gts.size(), 0.0));
    for (int i = 0; i < n; ++i) {
        BoxCxcywh pb{stage.boxes.at({i, 0}), stage.boxes.at({i, 1}),
                     stage.boxes.at({i, 2}), stage.boxes.at({i, 3})};
        Box pxy = to_xyxy_unit(pb);
        for (std::size_t j = 0; j < gts.size(); ++j) {
            const GroundTruth& g = gts[j];
            double z = stage.logits.at({i, g.class_index});
            double c_cls = focal_cost(z, w.focal_alpha, w.focal_gamma);
            double c_l1 = std::fabs(pb.cx - g.box.cx) + std::fabs(pb.cy - g.box.cy) +
                          std::fabs(pb.w - g.box.w) + std::fabs(pb.h - g.box.h);
            double c_giou = 1.0 - giou(pxy, to_xyxy_unit(g.box));
            cost[std::size_t(i)][j] =
                w.lambda_cls * c_cls + w.lambda_l1 * c_l1 + w.lambda_giou * c_giou;
        }
    }
    return cost;
}

ImageLoss set_prediction_loss(Tape& tp, const std::vector<StageOutput>& stages,
                              const std::vector<GroundTruth>& gts,
                              const std::vector<bool>& pad_mask,
                              const LossWeights& w, double gt_normalizer) {
    if (stages.empty()) throw UsageError("set_prediction_loss: no stage outputs");
    double norm = std::max(gt_normalizer, 1.0);
    int n = stages[0].logits.dim(0);
    int k = stages[0].logits.dim(1);

    ImageLoss out;
    Tensor total;
    for (const StageOutput& st : stages) {
        std::vector<int> matched_rows;
        std::vector<GroundTruth> matched_gts;
        if (!gts.empty()) {
            auto cost = matching_cost(st, gts, pad_mask, w);
            MatchAssignment assign = hungarian(cost);
            matched_rows.reserve(assign.pairs.size());
            for (auto [r, c] : assign.pairs) {
                matched_rows.push_back(r);
                matched_gts.push_back(gts[std::size_t(c)]);
            }
        }

        std::vector<double> targets(std::size_t(n) * k, 0.0);
        std::vector<double> mask(std::size_t(n) * k, 0.0);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < k; ++j)
                if (!pad_mask[std::size_t(j)]) mask[std::size_t(i) * k + j] = 1.0;
        for (std::size_t t = 0; t < matched_rows.size(); ++t)
            targets[std::size_t(matched_rows[t]) * k + matched_gts[t].class_index] = 1.0;

        Tensor cls_sum = focal_loss_sum(tp, st.logits, targets, mask, w.focal_alpha,
                                        w.focal_gamma);
        Tensor stage_loss = tp.mul_scalar(cls_sum, w.lambda_cls / norm);
        double l1_val = 0.0, giou_val = 0.0;
        if (!matched_rows.empty()) {
            Tensor pred = tp.gather_rows(st.boxes, matched_rows);
            int m = int(matched_rows.size());
            std::vector<double> gt_data;
            gt_data.reserve(std::size_t(m) * 4);
            for (const auto& g : matched_gts)
                gt_data.insert(gt_data.end(), {g.box.cx, g.box.cy, g.box.w, g.box.h});
            Tensor gt_boxes = Tensor::from_data({m, 4}, std::move(gt_data));
            Tensor l1_sum = tp.sum(tp.abs(tp.sub(pred, gt_boxes)));
            Tensor giou_vec = giou_pairs(tp, pred, matched_gts);
            Tensor giou_sum = tp.sum(tp.sub(Tensor::full({m, 1}, 1.0), giou_vec));
            stage_loss = tp.add(stage_loss, tp.mul_scalar(l1_sum, w.lambda_l1 / norm));
            stage_loss = tp.add(stage_loss, tp.mul_scalar(giou_sum, w.lambda_giou / norm));
            l1_val = l1_sum.value() * w.lambda_l1 / norm;
            giou_val = giou_sum.value() * w.lambda_giou / norm;
        }
        double cls_val = cls_sum.value() * w.lambda_cls / norm;
        out.breakdown.per_stage.push_back({cls_val, l1_val, giou_val});
        out.breakdown.cls += cls_val;
        out.breakdown.l1 += l1_val;
        out.breakdown.giou += giou_val;
        total = total.defined() ? tp.add(total, stage_loss) : stage_loss;
    }
    out.breakdown.total = out.breakdown.cls + out.breakdown.l1 + out.breakdown.giou;
    out.breakdown.matched_pairs = int(gts.size());
    out.loss = total;
    return out;
}

} // namespace taskdet
