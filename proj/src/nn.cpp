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

#include "taskdet/nn.hpp"

#include <cmath>

namespace taskdet {

namespace {

void fan_in_out(const std::vector<int>& shape, double& fan_in, double& fan_out) {
    if (shape.size() == 2) {
        fan_in = shape[1];
        fan_out = shape[0];
    } else if (shape.size() == 4) {
        double rf = double(shape[2]) * shape[3];
        fan_in = shape[1] * rf;
        fan_out = shape[0] * rf;
    } else {
        fan_in = fan_out = double(shape_numel(shape));
    }
}

} // namespace

Tensor ParamRegistry::param(const std::string& name, std::vector<int> shape,
                            Init init, Rng& rng, double arg) {
    std::vector<double> v(std::size_t(shape_numel(shape)), 0.0);
    switch (init) {
        case Init::Zeros:
            break;
        case Init::Ones:
            for (double& x : v) x = 1.0;
            break;
        case Init::XavierUniform: {
            double fi, fo;
            fan_in_out(shape, fi, fo);
            double lim = std::sqrt(6.0 / (fi + fo));
            for (double& x : v) x = rng.uniform(-lim, lim);
            break;
        }
        case Init::Gaussian: {
            double std = arg > 0.0 ? arg : 1.0;
            for (double& x : v) x = rng.gaussian() * std;
            break;
        }
    }
    return add(name, Tensor::from_data(std::move(shape), std::move(v), true));
}

Tensor ParamRegistry::add(const std::string& name, Tensor t) {
    if (index_.count(name))
        throw UsageError("ParamRegistry: duplicate parameter name '" + name + "'");
    index_[name] = items_.size();
    items_.emplace_back(name, t);
    return t;
}

Tensor ParamRegistry::find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? Tensor() : items_[it->second].second;
}

std::int64_t ParamRegistry::total_scalars() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : items_) n += t.numel();
    return n;
}

LinearParams make_linear(ParamRegistry& reg, const std::string& prefix, int in,
                         int out, Rng& rng) {
    LinearParams p;
    p.w = reg.param(prefix + ".w", {out, in}, Init::XavierUniform, rng);
    p.b = reg.param(prefix + ".b", {out}, Init::Zeros, rng);
    return p;
}

LayerNormParams make_layer_norm(ParamRegistry& reg, const std::string& prefix, int d,
                                Rng& rng) {
    LayerNormParams p;
    p.g = reg.param(prefix + ".g", {d}, Init::Ones, rng);
    p.b = reg.param(prefix + ".b", {d}, Init::Zeros, rng);
    return p;
}

MhsaParams make_mhsa(ParamRegistry& reg, const std::string& prefix, int d, Rng& rng) {
    MhsaParams p;
    p.wq = reg.param(prefix + ".wq", {d, d}, Init::XavierUniform, rng);
    p.bq = reg.param(prefix + ".bq", {d}, Init::Zeros, rng);
    p.wk = reg.param(prefix + ".wk", {d, d}, Init::XavierUniform, rng);
    p.bk = reg.param(prefix + ".bk", {d}, Init::Zeros, rng);
    p.wv = reg.param(prefix + ".wv", {d, d}, Init::XavierUniform, rng);
    p.bv = reg.param(prefix + ".bv", {d}, Init::Zeros, rng);
    p.wo = reg.param(prefix + ".wo", {d, d}, Init::XavierUniform, rng);
    p.bo = reg.param(prefix + ".bo", {d}, Init::Zeros, rng);
    p.ln_g = reg.param(prefix + ".ln.g", {d}, Init::Ones, rng);
    p.ln_b = reg.param(prefix + ".ln.b", {d}, Init::Zeros, rng);
    return p;
}

FfnParams make_ffn(ParamRegistry& reg, const std::string& prefix, int d, int hidden,
                   Rng& rng) {
    FfnParams p;
    p.l1 = make_linear(reg, prefix + ".l1", d, hidden, rng);
    p.l2 = make_linear(reg, prefix + ".l2", hidden, d, rng);
    p.ln = make_layer_norm(reg, prefix + ".ln", d, rng);
    return p;
}

Tensor ffn_forward(Tape& tp, const Tensor& x, const FfnParams& p) {
    Tensor h = tp.gelu(tp.linear(x, p.l1.w, p.l1.b));
    Tensor y = tp.linear(h, p.l2.w, p.l2.b);
    return tp.layer_norm(tp.add(x, y), p.ln.g, p.ln.b);
}

} // namespace taskdet
