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

#include "taskdet/tensor.hpp"

#include <Eigen/Dense>

#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>

namespace taskdet {

namespace {

std::atomic<std::int64_t> g_next_id{1};

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

inline double round_f32(double v) { return double(float(v)); }

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
    throw ShapeError(std::string(op) + ": " + detail);
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        shape_fail(op, "operand shapes " + shape_str(a.shape()) + " vs " +
                           shape_str(b.shape()));
}

void check_2d(const char* op, const Tensor& a) {
    if (a.ndim() != 2) shape_fail(op, "expected 2-d tensor, got " + shape_str(a.shape()));
}

constexpr double kInvSqrt2 = 0.7071067811865476;
constexpr double kInvSqrt2Pi = 0.3989422804014327;
constexpr double kLnEps = 1e-5;  // layer/group norm variance epsilon

} // namespace

std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

std::int64_t shape_numel(const std::vector<int>& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::make(std::vector<int> shape, std::vector<double> values, bool rg) {
    for (int d : shape)
        if (d < 0) throw ShapeError("tensor: negative dimension in " + shape_str(shape));
    if (shape_numel(shape) != std::int64_t(values.size()))
        throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->values = std::move(values);
    t.node_->requires_grad = rg;
    t.node_->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
    return t;
}

Tensor Tensor::zeros(std::vector<int> shape, bool rg) {
    std::vector<double> v(std::size_t(shape_numel(shape)), 0.0);
    return make(std::move(shape), std::move(v), rg);
}

Tensor Tensor::full(std::vector<int> shape, double value, bool rg) {
    std::vector<double> v(std::size_t(shape_numel(shape)), value);
    return make(std::move(shape), std::move(v), rg);
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> values, bool rg) {
    return make(std::move(shape), std::move(values), rg);
}

Tensor Tensor::scalar(double value) { return make({1}, {value}, false); }

double Tensor::value() const {
    if (numel() != 1) throw UsageError("Tensor::value: tensor is not scalar");
    return node_->values[0];
}

double Tensor::at(const std::vector<int>& index) const {
    if (index.size() != node_->shape.size())
        throw UsageError("Tensor::at: rank mismatch");
    std::int64_t off = 0;
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= node_->shape[i])
            throw UsageError("Tensor::at: index out of range");
        off = off * node_->shape[i] + index[i];
    }
    return node_->values[std::size_t(off)];
}

void Tensor::leaf_assign(const std::vector<double>& values) {
    if (values.size() != node_->values.size())
        throw UsageError("leaf_assign: size mismatch");
    node_->values = values;
}

// ---------------------------------------------------------------------------
// GradientMap

const std::vector<double>* GradientMap::find(const Tensor& t) const {
    auto it = grads.find(t.id());
    return it == grads.end() ? nullptr : &it->second;
}

std::vector<double> GradientMap::grad_or_zeros(const Tensor& t) const {
    if (const auto* g = find(t)) return *g;
    return std::vector<double>(std::size_t(t.numel()), 0.0);
}

std::vector<double>& GradientMap::slot(std::int64_t id, std::size_t n) {
    auto& v = grads[id];
    if (v.empty()) v.assign(n, 0.0);
    return v;
}

// ---------------------------------------------------------------------------
// Tape core

Tensor Tape::finalize(const char* op, std::vector<int> shape,
                      std::vector<double> values, bool requires_grad,
                      std::function<void(const std::vector<double>&, GradientMap&)> back) {
    if (precision_ == Precision::f32)
        for (double& v : values) v = round_f32(v);
    for (double v : values)
        if (!std::isfinite(v))
            throw NumericError(std::string(op) + ": non-finite output");
    Tensor out = Tensor::make(std::move(shape), std::move(values), requires_grad);
    if (requires_grad) {
        produced_.insert(out.id());
        entries_.push_back(Entry{op, out, std::move(back)});
    }
    return out;
}

GradientMap Tape::backward(const Tensor& root) {
    if (!root.defined() || root.numel() != 1)
        throw UsageError("backward: root must be a scalar tensor");
    if (!produced_.count(root.id()))
        throw UsageError("backward: root was not produced on this tape");
    GradientMap gm;
    gm.slot(root.id(), 1)[0] = 1.0;
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
        auto g = gm.grads.find(it->output.id());
        if (g == gm.grads.end()) continue;
        it->back(g->second, gm);
    }
    return gm;
}

// ---------------------------------------------------------------------------
// Elementwise helpers

Tensor Tape::unary_map(const char* op, const Tensor& a, double (*f)(double),
                       double (*df)(double, double)) {
    const auto& x = a.data();
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
    return finalize(op, a.shape(), std::move(y), a.requires_grad(),
                    [a, df](const std::vector<double>& gout, GradientMap& gm) {
                        auto& ga = gm.slot(a.id(), gout.size());
                        const auto& x = a.data();
                        for (std::size_t i = 0; i < gout.size(); ++i)
                            ga[i] += gout[i] * df(x[i], 0.0);
                    });
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
    check_same_shape("add", a, b);
    std::vector<double> y(a.data());
    const auto& xb = b.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += xb[i];
    bool rg = a.requires_grad() || b.requires_grad();
    return finalize("add", a.shape(), std::move(y), rg,
                    [a, b](const std::vector<double>& gout, GradientMap& gm) {
                        if (a.requires_grad()) {
                            auto& ga = gm.slot(a.id(), gout.size());
                            for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i];
                        }
                        if (b.requires_grad()) {
                            auto& gb = gm.slot(b.id(), gout.size());
                            for (std::size_t i = 0; i < gout.size(); ++i) gb[i] += gout[i];
                        }
                    });
}

Tensor Tape::sub(const Tensor& a, const Tensor& b) {
    check_same_shape("sub", a, b);
    std::vector<double> y(a.data());
    const auto& xb = b.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= xb[i];
    bool rg = a.requires_grad() || b.requires_grad();
    return finalize("sub", a.shape(), std::move(y), rg,
                    [a, b](const std::vector<double>& gout, GradientMap& gm) {
                        if (a.requires_grad()) {
                            auto& ga = gm.slot(a.id(), gout.size());
                            for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i];
                        }
                        if (b.requires_grad()) {
                            auto& gb = gm.slot(b.id(), gout.size());
                            for (std::size_t i = 0; i < gout.size(); ++i) gb[i] -= gout[i];
                        }
                    });
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
    check_same_shape("mul", a, b);
    std::vector<double> y(a.data());
    const auto& xb = b.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= xb[i];
    bool rg = a.requires_grad() || b.requires_grad();
    return finalize("mul", a.shape(), std::move(y), rg,
                    [a, b](const std::vector<double>& gout, GradientMap& gm) {
                        if (a.requires_grad()) {
                            auto& ga = gm.slot(a.id(), gout.size());
                            const auto& xb = b.data();
                            for (std::size_t i = 0; i < gout.size(); ++i)
                                ga[i] += gout[i] * xb[i];
                        }
                        if (b.requires_grad()) {
                            auto& gb = gm.slot(b.id(), gout.size());
                            const auto& xa = a.data();
                            for (std::size_t i = 0; i < gout.size(); ++i)
                                gb[i] += gout[i] * xa[i];
                        }
                    });
}

Tensor Tape::div(const Tensor& a, const Tensor& b) {
    check_same_shape("div", a, b);
    std::vector<double> y(a.data());
    const auto& xb = b.data();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] /= xb[i];
    bool rg = a.requires_grad() || b.requires_grad();
    return finalize("div", a.shape(), std::move(y), rg,
                    [a, b](const std::vector<double>& gout, GradientMap& gm) {
                        const auto& xa = a.data();
                        const auto& xb = b.data();
                        if (a.requires_grad()) {
                            auto& ga = gm.slot(a.id(), gout.size());
                            for (std::size_t i = 0; i < gout.size(); ++i)
                                ga[i] += gout[i] / xb[i];
                        }
                        if (b.requires_grad()) {
                            auto& gb = gm.slot(b.id(), gout.size());
                            for (std::size_t i = 0; i < gout.size(); ++i)
                                gb[i] -= gout[i] * xa[i] / (xb[i] * xb[i]);
                        }
                    });
}

Tensor Tape::add_scalar(const Tensor& a, double c) {
    std::vector<double> y(a.data());
    for (double& v : y) v += c;
    return finalize("add_scalar", a.shape(), std::move(y), a.requires_grad(),
                    [a](const std::vector<double>& gout, GradientMap& gm) {
                        auto& ga = gm.slot(a.id(), gout.size());
                        for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i];
                    });
}

Tensor Tape::mul_scalar(const Tensor& a, double c) {
    std::vector<double> y(a.data());
    for (double& v : y) v *= c;
    return finalize("mul_scalar", a.shape(), std::move(y), a.requires_grad(),
                    [a, c](const std::vector<double>& gout, GradientMap& gm) {
                        auto& ga = gm.slot(a.id(), gout.size());
                        for (std::size_t i = 0; i < gout.size(); ++i)
                            ga[i] += gout[i] * c;
                    });
}

Tensor Tape::scale_st(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) shape_fail("scale_st", "scale must be scalar");
    double c = s.data()[0];
    std::vector<double> y(a.data());
    for (double& v : y) v *= c;
    bool rg = a.requires_grad() || s.requires_grad();
    return finalize("scale_st", a.shape(), std::move(y), rg,
                    [a, s, c](const std::vector<double>& gout, GradientMap& gm) {
                        if (a.requires_grad()) {
                            auto& ga = gm.slot(a.id(), gout.size());
                            for (std::size_t i = 0; i < gout.size(); ++i)
                                ga[i] += gout[i] * c;
                        }
                        if (s.requires_grad()) {
                            auto& gs = gm.slot(s.id(), 1);
                            const auto& xa = a.data();
                            double acc = 0.0;
                            for (std::size_t i = 0; i < gout.size(); ++i)
                                acc += gout[i] * xa[i];
                            gs[0] += acc;
                        }
                    });
}

Tensor Tape::relu(const Tensor& a) {
    return unary_map(
        "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
        [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor Tape::gelu(const Tensor& a) {
    return unary_map(
        "gelu", a,
        [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
        [](double x, double) {
            double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            return cdf + x * pdf;
        });
}

Tensor Tape::sigmoid(const Tensor& a) {
    return unary_map(
        "sigmoid", a,
        [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](double x, double) {
            double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 - s);
        });
}

Tensor Tape::softplus(const Tensor& a) {
    return unary_map(
        "softplus", a,
        [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); },
        [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}

Tensor Tape::exp(const Tensor& a) {
    return unary_map(
        "exp", a, [](double x) { return std::exp(x); },
        [](double x, double) { return std::exp(x); });
}

Tensor Tape::log(const Tensor& a) {
    return unary_map(
        "log", a, [](double x) { return std::log(x); },
        [](double x, double) { return 1.0 / x; });
}

Tensor Tape::abs(const Tensor& a) {
    return unary_map(
        "abs", a, [](double x) { return std::fabs(x); },
        [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor Tape::powc(const Tensor& a, double p) {
    const auto& x = a.data();
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::pow(x[i], p);
    return finalize("powc", a.shape(), std::move(y), a.requires_grad(),
                    [a, p](const std::vector<double>& gout, GradientMap& gm) {
                        auto& ga = gm.slot(a.id(), gout.size());
                        const auto& x = a.data();
                        for (std::size_t i = 0; i < gout.size(); ++i)
                            ga[i] += gout[i] * p * std::pow(x[i], p - 1.0);
                    });
}

Tensor Tape::minimum(const Tensor& a, const Tensor& b) {
    check_same_shape("minimum", a, b);
    const auto& xa = a.data();
    const auto& xb = b.data();
    std::vector<double> y(xa.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::min(xa[i], xb[i]);
    bool rg = a.requires_grad() || b.requires_grad();
    // Ties route the gradient to the first operand.
    return finalize("minimum", a.shape(), std::move(y), rg,
                    [a, b](const std::vector<double>& gout, GradientMap& gm) {
                        const auto& xa = a.data();
                        const auto& xb = b.data();
                        if (a.requires_grad()) {
                            auto& ga = gm.slot(a.id(), gout.size());
                            for (std::size_t i = 0; i < gout.size(); ++i)
                                if (xa[i] <= xb[i]) ga[i] += gout[i];
                        }
                        if (b.requires_grad()) {
                            auto& gb = gm.slot(b.id(), gout.size());
                            for (std::size_t i = 0; i < gout.size(); ++i)
                                if (xa[i] > xb[i]) gb[i] += gout[i];
                        }
                    });
}

Tensor Tape::maximum(const Tensor& a, const Tensor& b) {
    check_same_shape("maximum", a, b);
    const auto& xa = a.data();
    const auto& xb = b.data();
    std::vector<double> y(xa.size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::max(xa[i], xb[i]);
    bool rg = a.requires_grad() || b.requires_grad();
    return finalize("maximum", a.shape(), std::move(y), rg,
                    [a, b](const std::vector<double>& gout, GradientMap& gm) {
                        const auto& xa = a.data();
                        const auto& xb = b.data();
                        if (a.requires_grad()) {
                            auto& ga = gm.slot(a.id(), gout.size());
                            for (std::size_t i = 0; i < gout.size(); ++i)
                                if (xa[i] >= xb[i]) ga[i] += gout[i];
                        }
                        if (b.requires_grad()) {
                            auto& gb = gm.slot(b.id(), gout.size());
                            for (std::size_t i = 0; i < gout.size(); ++i)
                                if (xa[i] < xb[i]) gb[i] += gout[i];
                        }
                    });
}

Tensor Tape::clamp(const Tensor& a, double lo, double hi) {
    if (lo > hi) shape_fail("clamp", "lo > hi");
    const auto& x = a.data();
    std::vector<double> y(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::min(std::max(x[i], lo), hi);
    return finalize("clamp", a.shape(), std::move(y), a.requires_grad(),
                    [a, lo, hi](const std::vector<double>& gout, GradientMap& gm) {
                        auto& ga = gm.slot(a.id(), gout.size());
                        const auto& x = a.data();
                        for (std::size_t i = 0; i < gout.size(); ++i)
                            if (x[i] >= lo && x[i] <= hi) ga[i] += gout[i];
                    });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor Tape::matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    check_2d("matmul", a);
    check_2d("matmul", b);
    int m = trans_a ? a.dim(1) : a.dim(0);
    int ka = trans_a ? a.dim(0) : a.dim(1);
    int kb = trans_b ? b.dim(1) : b.dim(0);
    int n = trans_b ? b.dim(0) : b.dim(1);
    if (ka != kb)
        shape_fail("matmul", "inner dims " + shape_str(a.shape()) + " x " +
                                 shape_str(b.shape()));
    std::vector<double> y(std::size_t(m) * n);
    {
        CMap ma(a.data().data(), a.dim(0), a.dim(1));
        CMap mb(b.data().data(), b.dim(0), b.dim(1));
        MMap my(y.data(), m, n);
        if (!trans_a && !trans_b) my.noalias() = ma * mb;
        else if (trans_a && !trans_b) my.noalias() = ma.transpose() * mb;
        else if (!trans_a && trans_b) my.noalias() = ma * mb.transpose();
        else my.noalias() = ma.transpose() * mb.transpose();
    }
    bool rg = a.requires_grad() || b.requires_grad();
    return finalize(
        "matmul", {m, n}, std::move(y), rg,
        [a, b, trans_a, trans_b, m, n](const std::vector<double>& gout, GradientMap& gm) {
            CMap mg(gout.data(), m, n);
            CMap ma(a.data().data(), a.dim(0), a.dim(1));
            CMap mb(b.data().data(), b.dim(0), b.dim(1));
            if (a.requires_grad()) {
                auto& ga = gm.slot(a.id(), a.data().size());
                MMap mga(ga.data(), a.dim(0), a.dim(1));
                if (!trans_a && !trans_b) mga.noalias() += mg * mb.transpose();
                else if (!trans_a && trans_b) mga.noalias() += mg * mb;
                else if (trans_a && !trans_b) mga.noalias() += mb * mg.transpose();
                else mga.noalias() += mb.transpose() * mg.transpose();
            }
            if (b.requires_grad()) {
                auto& gb = gm.slot(b.id(), b.data().size());
                MMap mgb(gb.data(), b.dim(0), b.dim(1));
                if (!trans_a && !trans_b) mgb.noalias() += ma.transpose() * mg;
                else if (trans_a && !trans_b) mgb.noalias() += ma * mg;
                else if (!trans_a && trans_b) mgb.noalias() += mg.transpose() * ma;
                else mgb.noalias() += mg.transpose() * ma.transpose();
            }
        });
}

Tensor Tape::linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    check_2d("linear", x);
    check_2d("linear", w);
    if (b.ndim() != 1 || b.dim(0) != w.dim(0) || x.dim(1) != w.dim(1))
        shape_fail("linear", "x " + shape_str(x.shape()) + ", w " +
                                 shape_str(w.shape()) + ", b " + shape_str(b.shape()));
    int m = x.dim(0), n = w.dim(0);
    std::vector<double> y(std::size_t(m) * n);
    {
        CMap mx(x.data().data(), x.dim(0), x.dim(1));
        CMap mw(w.data().data(), w.dim(0), w.dim(1));
        MMap my(y.data(), m, n);
        my.noalias() = mx * mw.transpose();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) y[std::size_t(i) * n + j] += b.data()[std::size_t(j)];
    }
    bool rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
    return finalize(
        "linear", {m, n}, std::move(y), rg,
        [x, w, b, m, n](const std::vector<double>& gout, GradientMap& gm) {
            CMap mg(gout.data(), m, n);
            CMap mx(x.data().data(), x.dim(0), x.dim(1));
            CMap mw(w.data().data(), w.dim(0), w.dim(1));
            if (x.requires_grad()) {
                auto& gx = gm.slot(x.id(), x.data().size());
                MMap mgx(gx.data(), x.dim(0), x.dim(1));
                mgx.noalias() += mg * mw;
            }
            if (w.requires_grad()) {
                auto& gw = gm.slot(w.id(), w.data().size());
                MMap mgw(gw.data(), w.dim(0), w.dim(1));
                mgw.noalias() += mg.transpose() * mx;
            }
            if (b.requires_grad()) {
                auto& gb = gm.slot(b.id(), b.data().size());
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) gb[std::size_t(j)] += gout[std::size_t(i) * n + j];
            }
        });
}

namespace {

// im2col for [C,H,W] -> [(C*kh*kw), Ho*Wo]
void im2col(const double* x, int C, int H, int W, int kh, int kw, int stride,
            int pad, int Ho, int Wo, double* cols) {
    for (int c = 0; c < C; ++c) {
        for (int dy = 0; dy < kh; ++dy) {
            for (int dx = 0; dx < kw; ++dx) {
                double* dst = cols + (std::size_t(c) * kh * kw + dy * kw + dx) *
                                         (std::size_t(Ho) * Wo);
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad + dy;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad + dx;
                        dst[std::size_t(oy) * Wo + ox] =
                            (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                ? x[(std::size_t(c) * H + iy) * W + ix]
                                : 0.0;
                    }
                }
            }
        }
    }
}

void col2im(const double* cols, int C, int H, int W, int kh, int kw, int stride,
            int pad, int Ho, int Wo, double* x) {
    for (int c = 0; c < C; ++c) {
        for (int dy = 0; dy < kh; ++dy) {
            for (int dx = 0; dx < kw; ++dx) {
                const double* src = cols + (std::size_t(c) * kh * kw + dy * kw + dx) *
                                               (std::size_t(Ho) * Wo);
                for (int oy = 0; oy < Ho; ++oy) {
                    int iy = oy * stride - pad + dy;
                    if (iy < 0 || iy >= H) continue;
                    for (int ox = 0; ox < Wo; ++ox) {
                        int ix = ox * stride - pad + dx;
                        if (ix < 0 || ix >= W) continue;
                        x[(std::size_t(c) * H + iy) * W + ix] += src[std::size_t(oy) * Wo + ox];
                    }
                }
            }
        }
    }
}

} // namespace

Tensor Tape::conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
                    int pad) {
    if (x.ndim() != 3) shape_fail("conv2d", "input must be [C,H,W], got " + shape_str(x.shape()));
    if (w.ndim() != 4) shape_fail("conv2d", "weight must be [O,C,kh,kw], got " + shape_str(w.shape()));
    if (stride < 1 || pad < 0) shape_fail("conv2d", "bad stride/pad");
    int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != C)
        shape_fail("conv2d", "input channels " + std::to_string(C) + " vs weight " +
                                 std::to_string(w.dim(1)));
    if (b.ndim() != 1 || b.dim(0) != O) shape_fail("conv2d", "bias must be [O]");
    int Ho = (H + 2 * pad - kh) / stride + 1;
    int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho < 1 || Wo < 1) shape_fail("conv2d", "kernel larger than padded input");

    int K = C * kh * kw, M = Ho * Wo;
    auto cols = std::make_shared<std::vector<double>>(std::size_t(K) * M);
    im2col(x.data().data(), C, H, W, kh, kw, stride, pad, Ho, Wo, cols->data());
    std::vector<double> y(std::size_t(O) * M);
    {
        CMap mw(w.data().data(), O, K);
        CMap mc(cols->data(), K, M);
        MMap my(y.data(), O, M);
        my.noalias() = mw * mc;
        for (int o = 0; o < O; ++o) {
            double bv = b.data()[std::size_t(o)];
            for (int i = 0; i < M; ++i) y[std::size_t(o) * M + i] += bv;
        }
    }
    bool rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
    return finalize(
        "conv2d", {O, Ho, Wo}, std::move(y), rg,
        [x, w, b, cols, C, H, W, O, kh, kw, stride, pad, Ho, Wo, K,
         M](const std::vector<double>& gout, GradientMap& gm) {
            CMap mg(gout.data(), O, M);
            if (w.requires_grad()) {
                auto& gw = gm.slot(w.id(), w.data().size());
                MMap mgw(gw.data(), O, K);
                CMap mc(cols->data(), K, M);
                mgw.noalias() += mg * mc.transpose();
            }
            if (b.requires_grad()) {
                auto& gb = gm.slot(b.id(), b.data().size());
                for (int o = 0; o < O; ++o) {
                    double s = 0.0;
                    for (int i = 0; i < M; ++i) s += gout[std::size_t(o) * M + i];
                    gb[std::size_t(o)] += s;
                }
            }
            if (x.requires_grad()) {
                std::vector<double> gcols(std::size_t(K) * M);
                {
                    CMap mw(w.data().data(), O, K);
                    MMap mgc(gcols.data(), K, M);
                    mgc.noalias() = mw.transpose() * mg;
                }
                auto& gx = gm.slot(x.id(), x.data().size());
                col2im(gcols.data(), C, H, W, kh, kw, stride, pad, Ho, Wo, gx.data());
            }
        });
}

// ---------------------------------------------------------------------------
// Normalization / shaping

Tensor Tape::softmax_rows(const Tensor& a) {
    check_2d("softmax", a);
    int n = a.dim(0), d = a.dim(1);
    if (d < 1) shape_fail("softmax", "empty rows");
    const auto& x = a.data();
    std::vector<double> y(x.size());
    for (int i = 0; i < n; ++i) {
        const double* xi = x.data() + std::size_t(i) * d;
        double* yi = y.data() + std::size_t(i) * d;
        double m = xi[0];
        for (int j = 1; j < d; ++j) m = std::max(m, xi[j]);
        double s = 0.0;
        for (int j = 0; j < d; ++j) {
            yi[j] = std::exp(xi[j] - m);
            s += yi[j];
        }
        for (int j = 0; j < d; ++j) yi[j] /= s;
    }
    return finalize("softmax", a.shape(), std::move(y), a.requires_grad(),
                    [a, n, d](const std::vector<double>& gout, GradientMap& gm) {
                        auto& ga = gm.slot(a.id(), gout.size());
                        const auto& x = a.data();
                        for (int i = 0; i < n; ++i) {
                            const double* xi = x.data() + std::size_t(i) * d;
                            const double* gi = gout.data() + std::size_t(i) * d;
                            double* gai = ga.data() + std::size_t(i) * d;
                            double m = xi[0];
                            for (int j = 1; j < d; ++j) m = std::max(m, xi[j]);
                            double s = 0.0;
                            auto e = std::vector<double>(std::size_t(d));
                            for (int j = 0; j < d; ++j) {
                                e[std::size_t(j)] = std::exp(xi[j] - m);
                                s += e[std::size_t(j)];
                            }
                            double dot = 0.0;
                            for (int j = 0; j < d; ++j) dot += gi[j] * e[std::size_t(j)] / s;
                            for (int j = 0; j < d; ++j) {
                                double yj = e[std::size_t(j)] / s;
                                gai[j] += yj * (gi[j] - dot);
                            }
                        }
                    });
}

Tensor Tape::layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
    check_2d("layer_norm", x);
    int n = x.dim(0), d = x.dim(1);
    if (gamma.ndim() != 1 || gamma.dim(0) != d || beta.ndim() != 1 || beta.dim(0) != d)
        shape_fail("layer_norm", "affine params must be [" + std::to_string(d) + "]");
    const auto& xv = x.data();
    std::vector<double> y(xv.size());
    for (int i = 0; i < n; ++i) {
        const double* xi = xv.data() + std::size_t(i) * d;
        double* yi = y.data() + std::size_t(i) * d;
        double mu = 0.0;
        for (int j = 0; j < d; ++j) mu += xi[j];
        mu /= d;
        double var = 0.0;
        for (int j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= d;
        double inv = 1.0 / std::sqrt(var + kLnEps);
        for (int j = 0; j < d; ++j)
            yi[j] = (xi[j] - mu) * inv * gamma.data()[std::size_t(j)] +
                    beta.data()[std::size_t(j)];
    }
    bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    return finalize(
        "layer_norm", x.shape(), std::move(y), rg,
        [x, gamma, beta, n, d](const std::vector<double>& gout, GradientMap& gm) {
            const auto& xv = x.data();
            for (int i = 0; i < n; ++i) {
                const double* xi = xv.data() + std::size_t(i) * d;
                const double* gi = gout.data() + std::size_t(i) * d;
                double mu = 0.0;
                for (int j = 0; j < d; ++j) mu += xi[j];
                mu /= d;
                double var = 0.0;
                for (int j = 0; j < d; ++j) var += (xi[j] - mu) * (xi[j] - mu);
                var /= d;
                double inv = 1.0 / std::sqrt(var + kLnEps);
                if (gamma.requires_grad()) {
                    auto& gg = gm.slot(gamma.id(), std::size_t(d));
                    for (int j = 0; j < d; ++j) gg[std::size_t(j)] += gi[j] * (xi[j] - mu) * inv;
                }
                if (beta.requires_grad()) {
                    auto& gb = gm.slot(beta.id(), std::size_t(d));
                    for (int j = 0; j < d; ++j) gb[std::size_t(j)] += gi[j];
                }
                if (x.requires_grad()) {
                    auto& gx = gm.slot(x.id(), xv.size());
                    double* gxi = gx.data() + std::size_t(i) * d;
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (int j = 0; j < d; ++j) {
                        double dxh = gi[j] * gamma.data()[std::size_t(j)];
                        double xh = (xi[j] - mu) * inv;
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    for (int j = 0; j < d; ++j) {
                        double dxh = gi[j] * gamma.data()[std::size_t(j)];
                        double xh = (xi[j] - mu) * inv;
                        gxi[j] += inv * (dxh - (sum_dxh + xh * sum_dxh_xh) / d);
                    }
                }
            }
        });
}

Tensor Tape::group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                        int groups) {
    if (x.ndim() != 3) shape_fail("group_norm", "input must be [C,H,W]");
    int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    if (groups < 1 || C % groups != 0)
        shape_fail("group_norm", "channels " + std::to_string(C) +
                                     " not divisible by groups " + std::to_string(groups));
    if (gamma.ndim() != 1 || gamma.dim(0) != C || beta.ndim() != 1 || beta.dim(0) != C)
        shape_fail("group_norm", "affine params must be [C]");
    int gc = C / groups;
    std::size_t gsz = std::size_t(gc) * H * W;
    const auto& xv = x.data();
    std::vector<double> y(xv.size());
    for (int g = 0; g < groups; ++g) {
        const double* xg = xv.data() + std::size_t(g) * gsz;
        double mu = 0.0;
        for (std::size_t i = 0; i < gsz; ++i) mu += xg[i];
        mu /= double(gsz);
        double var = 0.0;
        for (std::size_t i = 0; i < gsz; ++i) var += (xg[i] - mu) * (xg[i] - mu);
        var /= double(gsz);
        double inv = 1.0 / std::sqrt(var + kLnEps);
        for (int c = 0; c < gc; ++c) {
            int ch = g * gc + c;
            double gam = gamma.data()[std::size_t(ch)];
            double bet = beta.data()[std::size_t(ch)];
            const double* xc = xv.data() + std::size_t(ch) * H * W;
            double* yc = y.data() + std::size_t(ch) * H * W;
            for (int i = 0; i < H * W; ++i) yc[i] = (xc[i] - mu) * inv * gam + bet;
        }
    }
    bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    return finalize(
        "group_norm", x.shape(), std::move(y), rg,
        [x, gamma, beta, groups, C, H, W, gc, gsz](const std::vector<double>& gout,
                                                   GradientMap& gm) {
            const auto& xv = x.data();
            int hw = H * W;
            for (int g = 0; g < groups; ++g) {
                const double* xg = xv.data() + std::size_t(g) * gsz;
                double mu = 0.0;
                for (std::size_t i = 0; i < gsz; ++i) mu += xg[i];
                mu /= double(gsz);
                double var = 0.0;
                for (std::size_t i = 0; i < gsz; ++i) var += (xg[i] - mu) * (xg[i] - mu);
                var /= double(gsz);
                double inv = 1.0 / std::sqrt(var + kLnEps);
                if (gamma.requires_grad() || beta.requires_grad()) {
                    for (int c = 0; c < gc; ++c) {
                        int ch = g * gc + c;
                        const double* xc = xv.data() + std::size_t(ch) * hw;
                        const double* gi = gout.data() + std::size_t(ch) * hw;
                        if (gamma.requires_grad()) {
                            auto& gg = gm.slot(gamma.id(), std::size_t(C));
                            double s = 0.0;
                            for (int i = 0; i < hw; ++i) s += gi[i] * (xc[i] - mu) * inv;
                            gg[std::size_t(ch)] += s;
                        }
                        if (beta.requires_grad()) {
                            auto& gb = gm.slot(beta.id(), std::size_t(C));
                            double s = 0.0;
                            for (int i = 0; i < hw; ++i) s += gi[i];
                            gb[std::size_t(ch)] += s;
                        }
                    }
                }
                if (x.requires_grad()) {
                    auto& gx = gm.slot(x.id(), xv.size());
                    double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                    for (int c = 0; c < gc; ++c) {
                        int ch = g * gc + c;
                        double gam = gamma.data()[std::size_t(ch)];
                        const double* xc = xv.data() + std::size_t(ch) * hw;
                        const double* gi = gout.data() + std::size_t(ch) * hw;
                        for (int i = 0; i < hw; ++i) {
                            double dxh = gi[i] * gam;
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * (xc[i] - mu) * inv;
                        }
                    }
                    for (int c = 0; c < gc; ++c) {
                        int ch = g * gc + c;
                        double gam = gamma.data()[std::size_t(ch)];
                        const double* xc = xv.data() + std::size_t(ch) * hw;
                        const double* gi = gout.data() + std::size_t(ch) * hw;
                        double* gxc = gx.data() + std::size_t(ch) * hw;
                        for (int i = 0; i < hw; ++i) {
                            double dxh = gi[i] * gam;
                            double xh = (xc[i] - mu) * inv;
                            gxc[i] += inv * (dxh - (sum_dxh + xh * sum_dxh_xh) / double(gsz));
                        }
                    }
                }
            }
        });
}

Tensor Tape::concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) shape_fail("concat_rows", "no inputs");
    std::vector<int> shape = parts[0].shape();
    if (shape.empty()) shape_fail("concat_rows", "rank-0 input");
    int rows = 0;
    std::int64_t inner = shape_numel(shape) / std::max(shape[0], 1);
    for (const auto& p : parts) {
        if (p.ndim() != int(shape.size()))
            shape_fail("concat_rows", "rank mismatch");
        std::vector<int> tail_a(shape.begin() + 1, shape.end());
        std::vector<int> tail_b(p.shape().begin() + 1, p.shape().end());
        if (tail_a != tail_b)
            shape_fail("concat_rows", "trailing dims " + shape_str(p.shape()) + " vs " +
                                          shape_str(shape));
        rows += p.dim(0);
    }
    shape[0] = rows;
    std::vector<double> y;
    y.reserve(std::size_t(rows) * std::size_t(inner));
    for (const auto& p : parts) y.insert(y.end(), p.data().begin(), p.data().end());
    bool rg = false;
    for (const auto& p : parts) rg = rg || p.requires_grad();
    return finalize("concat_rows", std::move(shape), std::move(y), rg,
                    [parts](const std::vector<double>& gout, GradientMap& gm) {
                        std::size_t off = 0;
                        for (const auto& p : parts) {
                            std::size_t n = p.data().size();
                            if (p.requires_grad()) {
                                auto& gp = gm.slot(p.id(), n);
                                for (std::size_t i = 0; i < n; ++i) gp[i] += gout[off + i];
                            }
                            off += n;
                        }
                    });
}

Tensor Tape::slice_rows(const Tensor& a, int r0, int r1) {
    if (a.ndim() < 1) shape_fail("slice_rows", "rank-0 input");
    if (r0 < 0 || r1 < r0 || r1 > a.dim(0))
        shape_fail("slice_rows", "range [" + std::to_string(r0) + "," + std::to_string(r1) +
                                     ") of " + shape_str(a.shape()));
    std::vector<int> shape = a.shape();
    std::size_t inner = std::size_t(shape_numel(shape) / std::max(shape[0], 1));
    shape[0] = r1 - r0;
    std::vector<double> y(a.data().begin() + std::size_t(r0) * inner,
                          a.data().begin() + std::size_t(r1) * inner);
    return finalize("slice_rows", std::move(shape), std::move(y), a.requires_grad(),
                    [a, r0, inner](const std::vector<double>& gout, GradientMap& gm) {
                        auto& ga = gm.slot(a.id(), a.data().size());
                        std::size_t base = std::size_t(r0) * inner;
                        for (std::size_t i = 0; i < gout.size(); ++i) ga[base + i] += gout[i];
                    });
}

Tensor Tape::concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) shape_fail("concat_cols", "no inputs");
    int rows = parts[0].dim(0);
    int cols = 0;
    for (const auto& p : parts) {
        check_2d("concat_cols", p);
        if (p.dim(0) != rows) shape_fail("concat_cols", "row mismatch");
        cols += p.dim(1);
    }
    std::vector<double> y(std::size_t(rows) * cols);
    int c0 = 0;
    for (const auto& p : parts) {
        int pc = p.dim(1);
        for (int r = 0; r < rows; ++r)
            std::memcpy(y.data() + std::size_t(r) * cols + c0,
                        p.data().data() + std::size_t(r) * pc, std::size_t(pc) * sizeof(double));
        c0 += pc;
    }
    bool rg = false;
    for (const auto& p : parts) rg = rg || p.requires_grad();
    return finalize("concat_cols", {rows, cols}, std::move(y), rg,
                    [parts, rows, cols](const std::vector<double>& gout, GradientMap& gm) {
                        int c0 = 0;
                        for (const auto& p : parts) {
                            int pc = p.dim(1);
                            if (p.requires_grad()) {
                                auto& gp = gm.slot(p.id(), p.data().size());
                                for (int r = 0; r < rows; ++r)
                                    for (int c = 0; c < pc; ++c)
                                        gp[std::size_t(r) * pc + c] +=
                                            gout[std::size_t(r) * cols + c0 + c];
                            }
                            c0 += pc;
                        }
                    });
}

Tensor Tape::slice_cols(const Tensor& a, int c0, int c1) {
    check_2d("slice_cols", a);
    if (c0 < 0 || c1 < c0 || c1 > a.dim(1)) shape_fail("slice_cols", "bad range");
    int rows = a.dim(0), cols = a.dim(1), w = c1 - c0;
    std::vector<double> y(std::size_t(rows) * w);
    for (int r = 0; r < rows; ++r)
        std::memcpy(y.data() + std::size_t(r) * w,
                    a.data().data() + std::size_t(r) * cols + c0, std::size_t(w) * sizeof(double));
    return finalize("slice_cols", {rows, w}, std::move(y), a.requires_grad(),
                    [a, c0, rows, cols, w](const std::vector<double>& gout, GradientMap& gm) {
                        auto& ga = gm.slot(a.id(), a.data().size());
                        for (int r = 0; r < rows; ++r)
                            for (int c = 0; c < w; ++c)
                                ga[std::size_t(r) * cols + c0 + c] += gout[std::size_t(r) * w + c];
                    });
}

Tensor Tape::gather_rows(const Tensor& a, const std::vector<int>& rows) {
    if (a.ndim() < 1) shape_fail("gather_rows", "rank-0 input");
    std::vector<int> shape = a.shape();
    std::size_t inner = std::size_t(shape_numel(shape) / std::max(shape[0], 1));
    for (int r : rows)
        if (r < 0 || r >= a.dim(0)) shape_fail("gather_rows", "row index out of range");
    shape[0] = int(rows.size());
    std::vector<double> y(rows.size() * inner);
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::memcpy(y.data() + i * inner, a.data().data() + std::size_t(rows[i]) * inner,
                    inner * sizeof(double));
    return finalize("gather_rows", std::move(shape), std::move(y), a.requires_grad(),
                    [a, rows, inner](const std::vector<double>& gout, GradientMap& gm) {
                        auto& ga = gm.slot(a.id(), a.data().size());
                        for (std::size_t i = 0; i < rows.size(); ++i)
                            for (std::size_t j = 0; j < inner; ++j)
                                ga[std::size_t(rows[i]) * inner + j] += gout[i * inner + j];
                    });
}

Tensor Tape::reshape(const Tensor& a, std::vector<int> shape) {
    if (shape_numel(shape) != a.numel())
        shape_fail("reshape", shape_str(a.shape()) + " -> " + shape_str(shape));
    std::vector<double> y(a.data());
    return finalize("reshape", std::move(shape), std::move(y), a.requires_grad(),
                    [a](const std::vector<double>& gout, GradientMap& gm) {
                        auto& ga = gm.slot(a.id(), gout.size());
                        for (std::size_t i = 0; i < gout.size(); ++i) ga[i] += gout[i];
                    });
}

// ---------------------------------------------------------------------------
// Reductions / similarity

Tensor Tape::sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return finalize("sum", {1}, {s}, a.requires_grad(),
                    [a](const std::vector<double>& gout, GradientMap& gm) {
                        auto& ga = gm.slot(a.id(), a.data().size());
                        for (double& v : ga) v += gout[0];
                    });
}

Tensor Tape::mean(const Tensor& a) {
    if (a.numel() == 0) shape_fail("mean", "empty tensor");
    double s = 0.0;
    for (double v : a.data()) s += v;
    double inv = 1.0 / double(a.numel());
    return finalize("mean", {1}, {s * inv}, a.requires_grad(),
                    [a, inv](const std::vector<double>& gout, GradientMap& gm) {
                        auto& ga = gm.slot(a.id(), a.data().size());
                        for (double& v : ga) v += gout[0] * inv;
                    });
}

Tensor Tape::cosine_rows(const Tensor& x, const Tensor& y) {
    check_2d("cosine", x);
    check_2d("cosine", y);
    if (x.dim(1) != y.dim(1))
        shape_fail("cosine", shape_str(x.shape()) + " vs " + shape_str(y.shape()));
    int n = x.dim(0), k = y.dim(0), d = x.dim(1);
    constexpr double eps = 1e-12;
    auto nx = std::vector<double>(std::size_t(n));
    auto ny = std::vector<double>(std::size_t(k));
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        const double* xi = x.data().data() + std::size_t(i) * d;
        for (int j = 0; j < d; ++j) s += xi[j] * xi[j];
        nx[std::size_t(i)] = std::max(std::sqrt(s), eps);
    }
    for (int i = 0; i < k; ++i) {
        double s = 0.0;
        const double* yi = y.data().data() + std::size_t(i) * d;
        for (int j = 0; j < d; ++j) s += yi[j] * yi[j];
        ny[std::size_t(i)] = std::max(std::sqrt(s), eps);
    }
    std::vector<double> out(std::size_t(n) * k);
    {
        CMap mx(x.data().data(), n, d);
        CMap my(y.data().data(), k, d);
        MMap mo(out.data(), n, k);
        mo.noalias() = mx * my.transpose();
    }
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j)
            out[std::size_t(i) * k + j] /= nx[std::size_t(i)] * ny[std::size_t(j)];
    bool rg = x.requires_grad() || y.requires_grad();
    return finalize(
        "cosine", {n, k}, std::move(out), rg,
        [x, y, n, k, d, nx, ny](const std::vector<double>& gout, GradientMap& gm) {
            // c_ij = <x_i,y_j> / (nx_i * ny_j)
            for (int i = 0; i < n; ++i) {
                const double* xi = x.data().data() + std::size_t(i) * d;
                for (int j = 0; j < k; ++j) {
                    double g = gout[std::size_t(i) * k + j];
                    if (g == 0.0) continue;
                    const double* yj = y.data().data() + std::size_t(j) * d;
                    double dot = 0.0;
                    for (int t = 0; t < d; ++t) dot += xi[t] * yj[t];
                    double inv = 1.0 / (nx[std::size_t(i)] * ny[std::size_t(j)]);
                    double c = dot * inv;
                    if (x.requires_grad()) {
                        auto& gx = gm.slot(x.id(), x.data().size());
                        double* gxi = gx.data() + std::size_t(i) * d;
                        double inx2 = 1.0 / (nx[std::size_t(i)] * nx[std::size_t(i)]);
                        for (int t = 0; t < d; ++t)
                            gxi[t] += g * (yj[t] * inv - c * xi[t] * inx2);
                    }
                    if (y.requires_grad()) {
                        auto& gy = gm.slot(y.id(), y.data().size());
                        double* gyj = gy.data() + std::size_t(j) * d;
                        double iny2 = 1.0 / (ny[std::size_t(j)] * ny[std::size_t(j)]);
                        for (int t = 0; t < d; ++t)
                            gyj[t] += g * (xi[t] * inv - c * yj[t] * iny2);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Spatial

Tensor Tape::upsample2x(const Tensor& x) {
    if (x.ndim() != 3) shape_fail("upsample2x", "input must be [C,H,W]");
    int C = x.dim(0), H = x.dim(1), W = x.dim(2);
    std::vector<double> y(std::size_t(C) * 4 * H * W);
    for (int c = 0; c < C; ++c)
        for (int i = 0; i < 2 * H; ++i)
            for (int j = 0; j < 2 * W; ++j)
                y[(std::size_t(c) * 2 * H + i) * 2 * W + j] =
                    x.data()[(std::size_t(c) * H + i / 2) * W + j / 2];
    return finalize("upsample2x", {C, 2 * H, 2 * W}, std::move(y), x.requires_grad(),
                    [x, C, H, W](const std::vector<double>& gout, GradientMap& gm) {
                        auto& gx = gm.slot(x.id(), x.data().size());
                        for (int c = 0; c < C; ++c)
                            for (int i = 0; i < 2 * H; ++i)
                                for (int j = 0; j < 2 * W; ++j)
                                    gx[(std::size_t(c) * H + i / 2) * W + j / 2] +=
                                        gout[(std::size_t(c) * 2 * H + i) * 2 * W + j];
                    });
}

namespace {

// Bilinear sample with border clamping; also returns spatial derivatives and
// the integer taps so the backward pass can scatter.
struct BilinearTap {
    int y0 = 0, x0 = 0, y1 = 0, x1 = 0;
    double w00 = 0, w01 = 0, w10 = 0, w11 = 0;
    double dvdx = 0, dvdy = 0;
    bool valid = false;
};

BilinearTap bilinear_tap(const double* f, int H, int W, double y, double x) {
    BilinearTap t;
    if (y < -1.0 || y > double(H) || x < -1.0 || x > double(W)) return t;
    t.valid = true;
    if (y <= 0) y = 0;
    if (x <= 0) x = 0;
    int y0 = int(y), x0 = int(x);
    if (y0 >= H - 1) { y0 = H - 1; y = double(y0); }
    if (x0 >= W - 1) { x0 = W - 1; x = double(x0); }
    int y1 = std::min(y0 + 1, H - 1);
    int x1 = std::min(x0 + 1, W - 1);
    double ly = y - y0, lx = x - x0;
    double hy = 1.0 - ly, hx = 1.0 - lx;
    t.y0 = y0; t.x0 = x0; t.y1 = y1; t.x1 = x1;
    t.w00 = hy * hx; t.w01 = hy * lx; t.w10 = ly * hx; t.w11 = ly * lx;
    double f00 = f[y0 * W + x0], f01 = f[y0 * W + x1];
    double f10 = f[y1 * W + x0], f11 = f[y1 * W + x1];
    t.dvdx = hy * (f01 - f00) + ly * (f11 - f10);
    t.dvdy = hx * (f10 - f00) + lx * (f11 - f01);
    return t;
}

inline double bilinear_value(const double* f, int W, const BilinearTap& t) {
    return t.w00 * f[t.y0 * W + t.x0] + t.w01 * f[t.y0 * W + t.x1] +
           t.w10 * f[t.y1 * W + t.x0] + t.w11 * f[t.y1 * W + t.x1];
}

} // namespace

Tensor Tape::roi_align(const std::vector<Tensor>& levels,
                       const std::vector<int>& strides, const Tensor& boxes,
                       int pooled, int sampling, double canonical_size,
                       int canonical_level, int min_level, int max_level) {
    if (levels.empty() || levels.size() != strides.size())
        shape_fail("roi_align", "levels/strides mismatch");
    int C = levels[0].dim(0);
    for (const auto& l : levels) {
        if (l.ndim() != 3 || l.dim(0) != C)
            shape_fail("roi_align", "levels must be [C,H,W] with equal C");
    }
    if (boxes.ndim() != 2 || boxes.dim(1) != 4)
        shape_fail("roi_align", "boxes must be [N,4], got " + shape_str(boxes.shape()));
    if (pooled < 1 || sampling < 1) shape_fail("roi_align", "bad pooled/sampling");
    int N = boxes.dim(0);
    int P = pooled, S = sampling;
    double inv_count = 1.0 / double(S * S);

    // Per-box level pick from box scale; a discrete choice, constant w.r.t.
    // differentiation.
    std::vector<int> pick(std::size_t(std::max(N, 0)));
    for (int i = 0; i < N; ++i) {
        const double* b = boxes.data().data() + std::size_t(i) * 4;
        double w = std::max(b[2] - b[0], 0.0);
        double h = std::max(b[3] - b[1], 0.0);
        double scale = std::sqrt(std::max(w * h, 1e-12));
        int lvl = canonical_level + int(std::floor(std::log2(scale / canonical_size)));
        lvl = std::min(std::max(lvl, min_level), max_level);
        pick[std::size_t(i)] = lvl - min_level;
    }

    std::vector<double> out(std::size_t(std::max(N, 0)) * C * P * P, 0.0);
    for (int i = 0; i < N; ++i) {
        const double* b = boxes.data().data() + std::size_t(i) * 4;
        const Tensor& lv = levels[std::size_t(pick[std::size_t(i)])];
        int H = lv.dim(1), W = lv.dim(2);
        double s = double(strides[std::size_t(pick[std::size_t(i)])]);
        double fx1 = b[0] / s - 0.5, fy1 = b[1] / s - 0.5;
        double bw = (b[2] - b[0]) / s / P, bh = (b[3] - b[1]) / s / P;
        for (int py = 0; py < P; ++py) {
            for (int px = 0; px < P; ++px) {
                for (int sy = 0; sy < S; ++sy) {
                    double yy = fy1 + (py + (sy + 0.5) / S) * bh;
                    for (int sx = 0; sx < S; ++sx) {
                        double xx = fx1 + (px + (sx + 0.5) / S) * bw;
                        for (int c = 0; c < C; ++c) {
                            const double* f = lv.data().data() + std::size_t(c) * H * W;
                            BilinearTap t = bilinear_tap(f, H, W, yy, xx);
                            if (!t.valid) continue;
                            out[((std::size_t(i) * C + c) * P + py) * P + px] +=
                                bilinear_value(f, W, t) * inv_count;
                        }
                    }
                }
            }
        }
    }

    bool rg = boxes.requires_grad();
    for (const auto& l : levels) rg = rg || l.requires_grad();
    return finalize(
        "roi_align", {N, C, P, P}, std::move(out), rg,
        [levels, strides, boxes, pick, C, N, P, S, inv_count](
            const std::vector<double>& gout, GradientMap& gm) {
            for (int i = 0; i < N; ++i) {
                const double* b = boxes.data().data() + std::size_t(i) * 4;
                const Tensor& lv = levels[std::size_t(pick[std::size_t(i)])];
                int H = lv.dim(1), W = lv.dim(2);
                double s = double(strides[std::size_t(pick[std::size_t(i)])]);
                double fx1 = b[0] / s - 0.5, fy1 = b[1] / s - 0.5;
                double bw = (b[2] - b[0]) / s / P, bh = (b[3] - b[1]) / s / P;
                std::vector<double>* glv = nullptr;
                if (lv.requires_grad()) glv = &gm.slot(lv.id(), lv.data().size());
                double* gbox = nullptr;
                if (boxes.requires_grad())
                    gbox = gm.slot(boxes.id(), boxes.data().size()).data() + std::size_t(i) * 4;
                for (int py = 0; py < P; ++py) {
                    for (int px = 0; px < P; ++px) {
                        for (int sy = 0; sy < S; ++sy) {
                            double fy = py + (sy + 0.5) / S;  // in bins
                            double yy = fy1 + fy * bh;
                            for (int sx = 0; sx < S; ++sx) {
                                double fx = px + (sx + 0.5) / S;
                                double xx = fx1 + fx * bw;
                                for (int c = 0; c < C; ++c) {
                                    double g =
                                        gout[((std::size_t(i) * C + c) * P + py) * P + px] *
                                        inv_count;
                                    if (g == 0.0) continue;
                                    const double* f =
                                        lv.data().data() + std::size_t(c) * H * W;
                                    BilinearTap t = bilinear_tap(f, H, W, yy, xx);
                                    if (!t.valid) continue;
                                    if (glv) {
                                        double* gf = glv->data() + std::size_t(c) * H * W;
                                        gf[t.y0 * W + t.x0] += g * t.w00;
                                        gf[t.y0 * W + t.x1] += g * t.w01;
                                        gf[t.y1 * W + t.x0] += g * t.w10;
                                        gf[t.y1 * W + t.x1] += g * t.w11;
                                    }
                                    if (gbox) {
                                        // xx = (x1 + dx)*inv_s - 0.5 + fx*(x2-x1)/(s*P)
                                        double dxx_dx1 = (1.0 - fx / P) / s;
                                        double dxx_dx2 = (fx / P) / s;
                                        double dyy_dy1 = (1.0 - fy / P) / s;
                                        double dyy_dy2 = (fy / P) / s;
                                        gbox[0] += g * t.dvdx * dxx_dx1;
                                        gbox[2] += g * t.dvdx * dxx_dx2;
                                        gbox[1] += g * t.dvdy * dyy_dy1;
                                        gbox[3] += g * t.dvdy * dyy_dy2;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Multi-head self-attention

Tensor mhsa(Tape& tp, const Tensor& seq, const MhsaParams& p, int heads,
            const std::vector<bool>* key_pad_mask) {
    check_2d("mhsa", seq);
    int L = seq.dim(0), d = seq.dim(1);
    if (L < 1) throw ShapeError("mhsa: empty sequence");
    if (heads < 1 || d % heads != 0)
        throw ConfigError("mhsa: model dim " + std::to_string(d) +
                          " not divisible by heads " + std::to_string(heads));
    if (key_pad_mask && int(key_pad_mask->size()) != L)
        throw ShapeError("mhsa: mask length mismatch");
    int dh = d / heads;

    Tensor q = tp.linear(seq, p.wq, p.bq);
    Tensor k = tp.linear(seq, p.wk, p.bk);
    Tensor v = tp.linear(seq, p.wv, p.bv);

    Tensor mask_bias;
    if (key_pad_mask) {
        std::vector<double> mb(std::size_t(L) * L, 0.0);
        for (int j = 0; j < L; ++j)
            if ((*key_pad_mask)[std::size_t(j)])
                for (int i = 0; i < L; ++i) mb[std::size_t(i) * L + j] = -1e9;
        mask_bias = Tensor::from_data({L, L}, std::move(mb));
    }

    std::vector<Tensor> head_outs;
    head_outs.reserve(std::size_t(heads));
    double scale = 1.0 / std::sqrt(double(dh));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = tp.slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = tp.slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = tp.slice_cols(v, h * dh, (h + 1) * dh);
        Tensor scores = tp.mul_scalar(tp.matmul(qh, kh, false, true), scale);
        if (mask_bias.defined()) scores = tp.add(scores, mask_bias);
        Tensor att = tp.softmax_rows(scores);
        head_outs.push_back(tp.matmul(att, vh));
    }
    Tensor o = heads == 1 ? head_outs[0] : tp.concat_cols(head_outs);
    Tensor proj = tp.linear(o, p.wo, p.bo);
    Tensor res = tp.add(seq, proj);
    Tensor out = tp.layer_norm(res, p.ln_g, p.ln_b);

    if (key_pad_mask) {
        // Masked rows are inert: zero their outputs so padding never carries
        // signal downstream.
        std::vector<double> rowmask(std::size_t(L) * d, 1.0);
        for (int i = 0; i < L; ++i)
            if ((*key_pad_mask)[std::size_t(i)])
                for (int j = 0; j < d; ++j) rowmask[std::size_t(i) * d + j] = 0.0;
        out = tp.mul(out, Tensor::from_data({L, d}, std::move(rowmask)));
    }
    return out;
}

} // namespace taskdet
