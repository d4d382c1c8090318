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

#include <cmath>
#include <vector>

#include "taskdet/geometry.hpp"
#include "taskdet/rng.hpp"
#include "taskdet/tensor.hpp"

namespace testutil {

inline taskdet::Tensor random_tensor(std::vector<int> shape, taskdet::Rng& rng,
                                     double lo = -1.0, double hi = 1.0,
                                     bool requires_grad = false) {
    std::vector<double> v(std::size_t(taskdet::shape_numel(shape)));
    for (double& x : v) x = rng.uniform(lo, hi);
    return taskdet::Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero, for primitives with kinks at the origin.
inline taskdet::Tensor random_tensor_away_from_zero(std::vector<int> shape,
                                                    taskdet::Rng& rng,
                                                    double min_abs = 0.1) {
    std::vector<double> v(std::size_t(taskdet::shape_numel(shape)));
    for (double& x : v) {
        double mag = rng.uniform(min_abs, 2.0);
        x = rng.uniform() < 0.5 ? -mag : mag;
    }
    return taskdet::Tensor::from_data(std::move(shape), std::move(v), false);
}

// Grid-rasterization oracle for IoU/GIoU: counts subpixel cells covered by
// each box over the joint extent. Independent of the closed-form arithmetic
// in geometry.cpp.
struct RasterOverlap {
    double inter = 0, area_a = 0, area_b = 0, enclosing = 0;
};

inline RasterOverlap raster_overlap(const taskdet::Box& a, const taskdet::Box& b,
                                    int resolution = 400) {
    double x_lo = std::min(a.x1, b.x1), x_hi = std::max(a.x2, b.x2);
    double y_lo = std::min(a.y1, b.y1), y_hi = std::max(a.y2, b.y2);
    double w = x_hi - x_lo, h = y_hi - y_lo;
    RasterOverlap out;
    out.enclosing = std::max(w, 0.0) * std::max(h, 0.0);
    if (w <= 0 || h <= 0) return out;
    double cell = (w / resolution) * (h / resolution);
    for (int iy = 0; iy < resolution; ++iy) {
        double y = y_lo + (iy + 0.5) * h / resolution;
        for (int ix = 0; ix < resolution; ++ix) {
            double x = x_lo + (ix + 0.5) * w / resolution;
            bool in_a = x >= a.x1 && x <= a.x2 && y >= a.y1 && y <= a.y2;
            bool in_b = x >= b.x1 && x <= b.x2 && y >= b.y1 && y <= b.y2;
            if (in_a) out.area_a += cell;
            if (in_b) out.area_b += cell;
            if (in_a && in_b) out.inter += cell;
        }
    }
    return out;
}

inline double raster_iou(const taskdet::Box& a, const taskdet::Box& b) {
    RasterOverlap o = raster_overlap(a, b);
    double uni = o.area_a + o.area_b - o.inter;
    return uni <= 0 ? 0.0 : o.inter / uni;
}

inline double raster_giou(const taskdet::Box& a, const taskdet::Box& b) {
    RasterOverlap o = raster_overlap(a, b);
    if (o.enclosing <= 0) return 0.0;
    double uni = o.area_a + o.area_b - o.inter;
    double i = uni <= 0 ? 0.0 : o.inter / uni;
    return i - (o.enclosing - uni) / o.enclosing;
}

// Upper regularized incomplete gamma Q(s, x), series + continued fraction.
// Chi-square p-value = Q(dof/2, stat/2).
inline double gammaq(double s, double x) {
    if (x < 0 || s <= 0) return 1.0;
    auto gammaln = [](double z) { return std::lgamma(z); };
    if (x < s + 1.0) {
        // lower series
        double sum = 1.0 / s, term = sum, ap = s;
        for (int i = 0; i < 500; ++i) {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if (std::fabs(term) < std::fabs(sum) * 1e-15) break;
        }
        double p = sum * std::exp(-x + s * std::log(x) - gammaln(s));
        return 1.0 - p;
    }
    // continued fraction
    double b = x + 1.0 - s, c = 1e300, d = 1.0 / b, h = d;
    for (int i = 1; i <= 500; ++i) {
        double an = -double(i) * (double(i) - s);
        b += 2.0;
        d = an * d + b;
        if (std::fabs(d) < 1e-300) d = 1e-300;
        c = b + an / c;
        if (std::fabs(c) < 1e-300) c = 1e-300;
        d = 1.0 / d;
        double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < 1e-15) break;
    }
    return std::exp(-x + s * std::log(x) - gammaln(s)) * h;
}

inline double chi_square_p_value(const std::vector<long>& counts, double expected_each) {
    double stat = 0.0;
    for (long c : counts) {
        double d = double(c) - expected_each;
        stat += d * d / expected_each;
    }
    return gammaq(double(counts.size() - 1) / 2.0, stat / 2.0);
}

} // namespace testutil
