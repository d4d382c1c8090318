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
#include <unordered_map>
#include <utility>
#include <vector>

#include "taskdet/rng.hpp"
#include "taskdet/tensor.hpp"

namespace taskdet {

enum class Init { Zeros, Ones, XavierUniform, Gaussian };

// Ordered collection of named leaf parameters. Registration order is the
// canonical order for initialization, optimizer iteration and checkpoints,
// so model construction must be deterministic.
class ParamRegistry {
public:
    Tensor param(const std::string& name, std::vector<int> shape, Init init,
                 Rng& rng, double arg = 0.0);
    Tensor add(const std::string& name, Tensor t);

    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    Tensor find(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) > 0; }
    std::int64_t total_scalars() const;

private:
    std::vector<std::pair<std::string, Tensor>> items_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct LinearParams {
    Tensor w;  // [out, in]
    Tensor b;  // [out]
};

struct LayerNormParams {
    Tensor g, b;  // [d]
};

struct FfnParams {
    LinearParams l1, l2;
    LayerNormParams ln;
};

LinearParams make_linear(ParamRegistry& reg, const std::string& prefix, int in,
                         int out, Rng& rng);
LayerNormParams make_layer_norm(ParamRegistry& reg, const std::string& prefix, int d,
                                Rng& rng);
MhsaParams make_mhsa(ParamRegistry& reg, const std::string& prefix, int d, Rng& rng);
FfnParams make_ffn(ParamRegistry& reg, const std::string& prefix, int d, int hidden,
                   Rng& rng);

// x + Linear(gelu(Linear(x))), layer-normalized.
Tensor ffn_forward(Tape& tp, const Tensor& x, const FfnParams& p);

} // namespace taskdet
