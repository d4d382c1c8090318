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

#include <vector>

#include "taskdet/tensor.hpp"

namespace taskdet {

// Absolute corner box, x1 <= x2 and y1 <= y2 for valid boxes.
struct Box {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

// Center/size box normalized to [0,1] against an image size.
struct BoxCxcywh {
    double cx = 0, cy = 0, w = 0, h = 0;
};

double box_area(const Box& b);
double iou(const Box& a, const Box& b);
double giou(const Box& a, const Box& b);

Box clamp_box(const Box& b, double img_w, double img_h);
Box cxcywh_to_xyxy(const BoxCxcywh& b, double img_w, double img_h);
BoxCxcywh xyxy_to_cxcywh(const Box& b, double img_w, double img_h);

// Multi-scale maps P2..P5 with strides 4..32. All levels share the channel
// count; spatial extents halve per level.
struct FeaturePyramid {
    std::vector<Tensor> levels;
    std::vector<int> strides;

    int channels() const { return levels.at(0).dim(0); }
    // Image extent implied by the finest level.
    double image_w() const { return double(levels.at(0).dim(2) * strides.at(0)); }
    double image_h() const { return double(levels.at(0).dim(1) * strides.at(0)); }
};

// Scale-based level pick: clamp(floor(4 + log2(sqrt(w*h)/224)), 2, 5).
int roi_level(double box_w, double box_h);

// Pools a P x P grid per box (2x2 samples per bin, averaged, aligned
// half-pixel offsets). Differentiable w.r.t. the feature maps and the box
// tensor. `boxes` is [N,4] absolute xyxy; callers clamp to image bounds
// before pooling.
Tensor roi_align(Tape& tp, const FeaturePyramid& fpn, const Tensor& boxes,
                 int pooled, int sampling = 2);
Tensor roi_align(Tape& tp, const FeaturePyramid& fpn, const std::vector<Box>& boxes,
                 int pooled, int sampling = 2);

} // namespace taskdet
