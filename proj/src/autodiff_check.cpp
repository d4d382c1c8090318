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

#include "taskdet/autodiff_check.hpp"

#include <cmath>

namespace taskdet {

double gradient_check(const ScalarFn& f, const Tensor& point, double eps,
                      int coords) {
    if (eps <= 0.0) throw UsageError("gradient_check: eps must be positive");

    Tensor x = Tensor::from_data(point.shape(), point.data(), true);
    Tape tape(Precision::f64);
    Tensor out = f(tape, x);
    if (out.numel() != 1) throw UsageError("gradient_check: f must be scalar-valued");
    if (!std::isfinite(out.value()))
        throw NumericError("gradient_check: non-finite value at point");
    GradientMap gm = tape.backward(out);
    std::vector<double> analytic = gm.grad_or_zeros(x);

    auto eval = [&](const std::vector<double>& values) {
        Tensor p = Tensor::from_data(point.shape(), values, false);
        Tape t(Precision::f64);
        return f(t, p).value();
    };

    std::int64_t n = point.numel();
    std::int64_t step = 1;
    if (coords > 0 && n > coords) step = n / coords;

    double max_rel = 0.0;
    std::vector<double> values = point.data();
    for (std::int64_t i = 0; i < n; i += step) {
        double orig = values[std::size_t(i)];
        values[std::size_t(i)] = orig + eps;
        double fp = eval(values);
        values[std::size_t(i)] = orig - eps;
        double fm = eval(values);
        values[std::size_t(i)] = orig;
        double numeric = (fp - fm) / (2.0 * eps);
        double a = analytic[std::size_t(i)];
        double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
        max_rel = std::max(max_rel, std::fabs(a - numeric) / denom);
    }
    return max_rel;
}

} // namespace taskdet
