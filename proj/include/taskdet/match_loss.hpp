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

#pragma once

#include <array>
#include <utility>
#include <vector>

#include "taskdet/geometry.hpp"
#include "taskdet/mdn.hpp"

namespace taskdet {

// Injective pairing of cost-matrix rows to columns covering min(R,C) pairs.
struct MatchAssignment {
    std::vector<std::pair<int, int>> pairs;  // (row, column), row-sorted
    double total_cost = 0.0;
};

// Exact minimum-cost assignment (augmenting paths with potentials on the
// square-padded matrix). Deterministic for a fixed input.
MatchAssignment hungarian(const std::vector<std::vector<double>>& cost);

struct LossWeights {
    double lambda_cls = 2.0;
    double lambda_l1 = 5.0;
    double lambda_giou = 2.0;
    double focal_alpha = 0.25;
    double focal_gamma = 2.0;
};

// Annotation projected into the current task: class_index addresses a
// non-pad task slot; box is cxcywh normalized.
struct GroundTruth {
    BoxCxcywh box;
    int class_index = 0;
};

struct LossBreakdown {
    double total = 0, cls = 0, l1 = 0, giou = 0;  // weighted, normalized
    std::vector<std::array<double, 3>> per_stage; // cls/l1/giou per stage
    int matched_pairs = 0;

    void accumulate(const LossBreakdown& other);
};

// Binary focal loss summed over cells where mask != 0 (normalization is the
// caller's job). Stable formulation via softplus.
Tensor focal_loss_sum(Tape& tp, const Tensor& logits,
                      const std::vector<double>& targets,
                      const std::vector<double>& mask, double alpha, double gamma);

// N x M cost matrix combining the focal classification cost (positive minus
// negative term) with L1 and GIoU box costs.
std::vector<std::vector<double>> matching_cost(const StageOutput& stage,
                                               const std::vector<GroundTruth>& gts,
                                               const std::vector<bool>& pad_mask,
                                               const LossWeights& w);

struct ImageLoss {
    Tensor loss;  // scalar on the tape
    LossBreakdown breakdown;
};

// Per-image set prediction loss summed over stages; a fresh matching is
// computed per stage and treated as constant under differentiation.
// `gt_normalizer` is the total ground-truth count of the batch (min 1).
ImageLoss set_prediction_loss(Tape& tp, const std::vector<StageOutput>& stages,
                              const std::vector<GroundTruth>& gts,
                              const std::vector<bool>& pad_mask,
                              const LossWeights& w, double gt_normalizer);

} // namespace taskdet
