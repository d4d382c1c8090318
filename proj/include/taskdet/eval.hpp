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

#include <string>
#include <vector>

#include "taskdet/data.hpp"
#include "taskdet/mdn.hpp"

namespace taskdet {

struct EvalReport {
    double ap = 0.0;    // mean over IoU 0.50:0.05:0.95, classes with >=1 GT
    double ap50 = 0.0;
    double ap75 = 0.0;
    std::vector<std::string> class_names;
    std::vector<double> per_class_ap;        // -1 for classes without GTs
    std::vector<double> per_class_ap50;
    std::vector<double> per_class_recall50;  // recall at IoU 0.5
    std::vector<std::vector<double>> pr50;   // 101-point interpolated curve per class
    int num_images = 0;
    int num_gts = 0;
    int num_detections = 0;

    std::string to_json() const;
    static EvalReport from_json(const std::string& text);
};

// Class-indexed ground truth for one image.
struct EvalGroundTruth {
    int class_index = 0;
    Box box;  // xyxy absolute
};

// COCO-style evaluation: detections sorted by score (ties by image order,
// then insertion order), greedy matching to the unmatched GT of highest IoU,
// 101-point interpolated AP averaged over the IoU thresholds. At most
// `max_det` highest-scoring detections per image are considered.
EvalReport compute_ap(const std::vector<std::vector<Detection>>& detections,
                      const std::vector<std::vector<EvalGroundTruth>>& ground_truths,
                      int num_classes,
                      const std::vector<double>& iou_thresholds = {},
                      int max_det = 300);

// Runs detect() on every image with the dataset's own vocabulary (fixed
// alphabetical order) as the task, then scores with compute_ap.
EvalReport evaluate_dataset(const DetectionModel& model, const DetectionDataset& dataset,
                            Precision prec, double score_thresh = 0.05,
                            int max_det = 300);

void write_pr_csv(const EvalReport& report, const std::string& path);

} // namespace taskdet
