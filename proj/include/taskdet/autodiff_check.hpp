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

#include <functional>

#include "taskdet/tensor.hpp"

namespace taskdet {

// Scalar-valued tensor function under test: evaluates f at `x` on the given
// tape. The function must not capture state that changes between calls.
using ScalarFn = std::function<Tensor(Tape&, const Tensor&)>;

// Central-difference verification of reverse-mode gradients, run in 64-bit.
// Returns max over coordinates of
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// `coords` limits the check to that many evenly spread coordinates
// (0 = all of them).
double gradient_check(const ScalarFn& f, const Tensor& point, double eps,
                      int coords = 0);

} // namespace taskdet
