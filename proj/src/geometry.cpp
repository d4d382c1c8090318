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

#include "taskdet/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace taskdet {

double box_area(const Box& b) {
    return std::max(b.x2 - b.x1, 0.0) * std::max(b.y2 - b.y1, 0.0);
}

double iou(const Box& a, const Box& b) {
    double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    double inter = std::max(ix, 0.0) * std::max(iy, 0.0);
    double uni = box_area(a) + box_area(b) - inter;
    if (uni <= 0.0) return 0.0;
    return inter / uni;
}

double giou(const Box& a, const Box& b) {
    double cw = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
    double ch = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
    double carea = std::max(cw, 0.0) * std::max(ch, 0.0);
    if (carea <= 0.0) return 0.0;  // both boxes degenerate to the same point
    double ix = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    double iy = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    double inter = std::max(ix, 0.0) * std::max(iy, 0.0);
    double uni = box_area(a) + box_area(b) - inter;
    double i = uni <= 0.0 ? 0.0 : inter / uni;
    return i - (carea - uni) / carea;
}

Box clamp_box(const Box& b, double img_w, double img_h) {
    Box r;
    r.x1 = std::clamp(b.x1, 0.0, img_w);
    r.y1 = std::clamp(b.y1, 0.0, img_h);
    r.x2 = std::clamp(std::max(b.x2, b.x1), 0.0, img_w);
    r.y2 = std::clamp(std::max(b.y2, b.y1), 0.0, img_h);
    if (r.x2 < r.x1) r.x2 = r.x1;
    if (r.y2 < r.y1) r.y2 = r.y1;
    return r;
}

Box cxcywh_to_xyxy(const BoxCxcywh& b, double img_w, double img_h) {
    if (img_w <= 0.0 || img_h <= 0.0)
        throw ConfigError("box convert: image size must be positive");
    Box r;
    r.x1 = (b.cx - 0.5 * b.w) * img_w;
    r.y1 = (b.cy - 0.5 * b.h) * img_h;
    r.x2 = (b.cx + 0.5 * b.w) * img_w;
    r.y2 = (b.cy + 0.5 * b.h) * img_h;
    return r;
}

BoxCxcywh xyxy_to_cxcywh(const Box& b, double img_w, double img_h) {
    if (img_w <= 0.0 || img_h <= 0.0)
        throw ConfigError("box convert: image size must be positive");
    BoxCxcywh r;
    r.cx = 0.5 * (b.x1 + b.x2) / img_w;
    r.cy = 0.5 * (b.y1 + b.y2) / img_h;
    r.w = (b.x2 - b.x1) / img_w;
    r.h = (b.y2 - b.y1) / img_h;
    return r;
}

int roi_level(double box_w, double box_h) {
    double scale = std::sqrt(std::max(box_w * box_h, 1e-12));
    int lvl = 4 + int(std::floor(std::log2(scale / 224.0)));
    return std::min(std::max(lvl, 2), 5);
}

Tensor roi_align(Tape& tp, const FeaturePyramid& fpn, const Tensor& boxes,
                 int pooled, int sampling) {
    return tp.roi_align(fpn.levels, fpn.strides, boxes, pooled, sampling,
                        /*canonical_size=*/224.0, /*canonical_level=*/4,
                        /*min_level=*/2, /*max_level=*/5);
}

Tensor roi_align(Tape& tp, const FeaturePyramid& fpn, const std::vector<Box>& boxes,
                 int pooled, int sampling) {
    std::vector<double> v;
    v.reserve(boxes.size() * 4);
    for (const Box& raw : boxes) {
        Box b = clamp_box(raw, fpn.image_w(), fpn.image_h());
        v.insert(v.end(), {b.x1, b.y1, b.x2, b.y2});
    }
    Tensor t = Tensor::from_data({int(boxes.size()), 4}, std::move(v));
    return roi_align(tp, fpn, t, pooled, sampling);
}

} // namespace taskdet
