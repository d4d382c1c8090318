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

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "taskdet/common.hpp"

namespace taskdet {

// Dense tensor handle. The underlying node (shape + contiguous values) is
// immutable once it has entered a tape; `leaf_assign` exists only so the
// optimizer can update parameters between steps.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<double> values,
                            bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return node_ != nullptr; }
    const std::vector<int>& shape() const { return node_->shape; }
    int ndim() const { return int(node_->shape.size()); }
    int dim(int i) const { return node_->shape[std::size_t(i)]; }
    std::int64_t numel() const { return std::int64_t(node_->values.size()); }
    const std::vector<double>& data() const { return node_->values; }
    double value() const;                        // scalar tensors only
    double at(const std::vector<int>& index) const;

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }
    std::int64_t id() const { return node_->id; }

    // Overwrites values in place. Only valid on leaves between training
    // steps; any tape recorded against the old values must be discarded.
    void leaf_assign(const std::vector<double>& values);
    std::vector<double>& mutable_data() { return node_->values; }

private:
    friend class Tape;
    struct Node {
        std::vector<int> shape;
        std::vector<double> values;
        bool requires_grad = false;
        std::int64_t id = 0;
    };
    static Tensor make(std::vector<int> shape, std::vector<double> values, bool rg);
    std::shared_ptr<Node> node_;
};

std::string shape_str(const std::vector<int>& s);
std::int64_t shape_numel(const std::vector<int>& s);

// Gradients produced by Tape::backward, keyed by tensor identity.
class GradientMap {
public:
    // nullptr when the tensor never received a gradient on the tape.
    const std::vector<double>* find(const Tensor& t) const;
    // Zeros of t's shape when absent; per the tape contract a participating
    // tensor that does not influence the root has an all-zero gradient.
    std::vector<double> grad_or_zeros(const Tensor& t) const;
    bool contains(const Tensor& t) const { return find(t) != nullptr; }

    std::vector<double>& slot(std::int64_t id, std::size_t n);  // accumulation
    std::unordered_map<std::int64_t, std::vector<double>> grads;
};

// Records primitive applications for reverse-mode differentiation. One tape
// per forward pass; single-writer. Ops executed through a tape are recorded
// only when some input requires a gradient, so inference on frozen inputs
// costs no tape memory.
class Tape {
public:
    explicit Tape(Precision p = Precision::f64) : precision_(p) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Precision precision() const { return precision_; }
    std::size_t size() const { return entries_.size(); }

    // -- elementwise -------------------------------------------------------
    Tensor add(const Tensor& a, const Tensor& b);
    Tensor sub(const Tensor& a, const Tensor& b);
    Tensor mul(const Tensor& a, const Tensor& b);
    Tensor div(const Tensor& a, const Tensor& b);
    Tensor add_scalar(const Tensor& a, double c);
    Tensor mul_scalar(const Tensor& a, double c);
    Tensor scale_st(const Tensor& a, const Tensor& s);  // s: scalar tensor
    Tensor relu(const Tensor& a);
    Tensor gelu(const Tensor& a);
    Tensor sigmoid(const Tensor& a);
    Tensor softplus(const Tensor& a);
    Tensor exp(const Tensor& a);
    Tensor log(const Tensor& a);
    Tensor abs(const Tensor& a);
    Tensor powc(const Tensor& a, double p);      // elementwise a^p, a >= 0
    Tensor minimum(const Tensor& a, const Tensor& b);
    Tensor maximum(const Tensor& a, const Tensor& b);
    Tensor clamp(const Tensor& a, double lo, double hi);

    // -- linear algebra ----------------------------------------------------
    Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
                  bool trans_b = false);
    Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x·wᵀ+b
    Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                  int pad);

    // -- normalization / shaping -------------------------------------------
    Tensor softmax_rows(const Tensor& a);
    Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta);
    Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      int groups);
    Tensor concat_rows(const std::vector<Tensor>& parts);
    Tensor slice_rows(const Tensor& a, int r0, int r1);
    Tensor concat_cols(const std::vector<Tensor>& parts);
    Tensor slice_cols(const Tensor& a, int c0, int c1);
    Tensor gather_rows(const Tensor& a, const std::vector<int>& rows);
    Tensor reshape(const Tensor& a, std::vector<int> shape);

    // -- reductions / similarity -------------------------------------------
    Tensor sum(const Tensor& a);
    Tensor mean(const Tensor& a);
    Tensor cosine_rows(const Tensor& x, const Tensor& y);  // [n,d]x[k,d]→[n,k]

    // -- spatial -----------------------------------------------------------
    Tensor upsample2x(const Tensor& x);  // nearest neighbor, [C,H,W]

    // Multi-level RoI pooling. `levels` are [C,H,W] maps with the given
    // strides (finest first); boxes are [N,4] absolute xyxy. Differentiable
    // w.r.t. both the feature maps and the box coordinates.
    Tensor roi_align(const std::vector<Tensor>& levels,
                     const std::vector<int>& strides, const Tensor& boxes,
                     int pooled, int sampling, double canonical_size,
                     int canonical_level, int min_level, int max_level);

    GradientMap backward(const Tensor& root);

private:
    struct Entry {
        const char* op;
        Tensor output;
        std::function<void(const std::vector<double>&, GradientMap&)> back;
    };

    Tensor finalize(const char* op, std::vector<int> shape,
                    std::vector<double> values, bool requires_grad,
                    std::function<void(const std::vector<double>&, GradientMap&)> back);
    Tensor unary_map(const char* op, const Tensor& a,
                     double (*f)(double), double (*df)(double, double));

    Precision precision_;
    std::vector<Entry> entries_;
    std::unordered_set<std::int64_t> produced_;
};

// Multi-head self-attention block: projections, scaled dot-product attention
// (no positional encoding of any kind), output projection, residual add and
// layer norm. `key_pad_mask[i] == true` removes row i from every softmax and
// zeroes its output row.
struct MhsaParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;  // w: [d,d], b: [d]
    Tensor ln_g, ln_b;                      // layer norm affine, [d]
};

Tensor mhsa(Tape& tp, const Tensor& seq, const MhsaParams& p, int heads,
            const std::vector<bool>* key_pad_mask = nullptr);

} // namespace taskdet
