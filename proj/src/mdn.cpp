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

#include "taskdet/mdn.hpp"

#include <algorithm>
#include <cmath>

namespace taskdet {

namespace {
constexpr double kPadLogitBias = -1e9;
}

std::string DetectionModel::word_param_name(const std::string& word) {
    return "embed.word." + word;
}

bool DetectionModel::has_word_param(const std::string& word) const {
    return reg_.contains(word_param_name(word));
}

DetectionModel::DetectionModel(const ModelConfig& cfg, std::uint64_t seed,
                               std::shared_ptr<const EmbeddingProvider> provider)
    : cfg_(cfg), provider_(std::move(provider)) {
    if (!provider_) throw ConfigError("model: embedding provider required");
    if (provider_->dim() != cfg_.d_text)
        throw ConfigError("model: provider dim " + std::to_string(provider_->dim()) +
                          " != d_text " + std::to_string(cfg_.d_text));
    if (cfg_.d != cfg_.backbone.fpn_channels)
        throw ConfigError("model: d must equal fpn_channels");
    if (cfg_.d % 4 != 0) throw ConfigError("model: d must be divisible by 4");
    if (cfg_.d % cfg_.heads != 0)
        throw ConfigError("model: d not divisible by heads");
    if (cfg_.n_proposals < 1) throw ConfigError("model: need at least one proposal");
    if (cfg_.stages < 1) throw ConfigError("model: need at least one stage");

    Rng rng(seed);
    backbone_ = std::make_unique<VisionBackbone>(reg_, "backbone", cfg_.backbone, rng);
    fpn_ = std::make_unique<Fpn>(reg_, "fpn", cfg_.backbone.stage_channels,
                                 cfg_.backbone.fpn_channels, rng);
    task_encoder_ = std::make_unique<SetEncoder>(reg_, "task_enc", cfg_.d_text, cfg_.d,
                                                 cfg_.encoder_layers, cfg_.encoder_heads,
                                                 rng);
    label_encoder_ = std::make_unique<SetEncoder>(reg_, "label_enc", cfg_.d_text, cfg_.d,
                                                  cfg_.encoder_layers, cfg_.encoder_heads,
                                                  rng);

    int d = cfg_.d, mid = cfg_.d / 4, pp = cfg_.pooled * cfg_.pooled;
    for (int s = 0; s < cfg_.stages; ++s) {
        std::string p = "mdn.stage" + std::to_string(s);
        Stage st;
        st.attn = make_mhsa(reg_, p + ".attn", d, rng);
        st.kernel_gen = make_linear(reg_, p + ".dyn.gen", d, 2 * d * mid, rng);
        st.dn_mid = make_layer_norm(reg_, p + ".dyn.ln_mid", mid, rng);
        st.dn_out = make_layer_norm(reg_, p + ".dyn.ln_out", d, rng);
        st.dyn_out = make_linear(reg_, p + ".dyn.out", pp * d, d, rng);
        st.dn_post = make_layer_norm(reg_, p + ".dyn.ln_post", d, rng);
        st.ffn = make_ffn(reg_, p + ".ffn", d, 2 * d, rng);
        st.reg1 = make_linear(reg_, p + ".reg1", d, d, rng);
        st.reg2 = make_linear(reg_, p + ".reg2", d, d, rng);
        st.reg3 = make_linear(reg_, p + ".reg3", d, 4, rng);
        // Zero-init final delta layer: stage boxes start at the incoming
        // boxes, matching whole-image initialization downstream.
        st.reg3.w.leaf_assign(std::vector<double>(std::size_t(4) * d, 0.0));
        st.cls1 = make_linear(reg_, p + ".cls1", d, d, rng);
        st.cls2 = make_linear(reg_, p + ".cls2", d, d, rng);
        stages_.push_back(st);
    }

    q0_ = reg_.param("mdn.q0", {cfg_.n_proposals, d}, Init::Gaussian, rng, 0.1);
    {
        std::vector<double> b0(std::size_t(cfg_.n_proposals) * 4);
        for (int i = 0; i < cfg_.n_proposals; ++i) {
            b0[std::size_t(i) * 4 + 0] = 0.5;
            b0[std::size_t(i) * 4 + 1] = 0.5;
            b0[std::size_t(i) * 4 + 2] = 1.0;
            b0[std::size_t(i) * 4 + 3] = 1.0;
        }
        b0_ = reg_.add("mdn.b0", Tensor::from_data({cfg_.n_proposals, 4}, std::move(b0), true));
    }
    if (cfg_.gamma_learnable)
        gamma_ = reg_.add("mdn.gamma",
                          Tensor::from_data({1}, {cfg_.gamma_logit}, true));
}

void DetectionModel::ensure_word_params(const std::vector<std::string>& vocabulary) {
    std::vector<std::string> sorted(vocabulary);
    std::sort(sorted.begin(), sorted.end());
    sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
    for (const auto& w : sorted) {
        if (w == kPadWord || has_word_param(w)) continue;
        auto v = provider_->lookup(w);
        reg_.add(word_param_name(w), Tensor::from_data({1, cfg_.d_text}, std::move(v), true));
    }
}

Tensor DetectionModel::dynamic_conv(Tape& tp, const Stage& st, const Tensor& q1,
                                    const Tensor& pooled) const {
    int n = cfg_.n_proposals, d = cfg_.d, mid = d / 4;
    int pp = cfg_.pooled * cfg_.pooled;
    Tensor kernels = tp.linear(q1, st.kernel_gen.w, st.kernel_gen.b);  // [N, 2*d*mid]
    std::vector<Tensor> feats;
    feats.reserve(std::size_t(n));
    for (int i = 0; i < n; ++i) {
        Tensor krow = tp.slice_rows(kernels, i, i + 1);
        Tensor k1 = tp.reshape(tp.slice_cols(krow, 0, d * mid), {d, mid});
        Tensor k2 = tp.reshape(tp.slice_cols(krow, d * mid, 2 * d * mid), {mid, d});
        // pooled is [N,C,P,P]; per-proposal block as [C, P*P], transposed in
        // the product so each sample point is a row.
        Tensor vi = tp.reshape(tp.slice_rows(pooled, i, i + 1), {d, pp});
        Tensor h = tp.matmul(vi, k1, /*trans_a=*/true, /*trans_b=*/false);  // [pp, mid]
        h = tp.relu(tp.layer_norm(h, st.dn_mid.g, st.dn_mid.b));
        h = tp.matmul(h, k2);  // [pp, d]
        h = tp.relu(tp.layer_norm(h, st.dn_out.g, st.dn_out.b));
        feats.push_back(tp.reshape(h, {1, pp * d}));
    }
    Tensor flat = n == 1 ? feats[0] : tp.concat_rows(feats);   // [N, pp*d]
    Tensor obj = tp.linear(flat, st.dyn_out.w, st.dyn_out.b);  // [N, d]
    Tensor fused = tp.layer_norm(tp.add(q1, obj), st.dn_post.g, st.dn_post.b);
    return ffn_forward(tp, fused, st.ffn);
}

StageOutput DetectionModel::run_stage(Tape& tp, const Stage& st, const Tensor& q,
                                      const Tensor& b, const Tensor& t,
                                      const Tensor& labels,
                                      const std::vector<bool>& pad_mask,
                                      const FeaturePyramid& fpn) const {
    int n = cfg_.n_proposals;
    int k = t.dim(0);
    double img_w = fpn.image_w(), img_h = fpn.image_h();

    // Decode current boxes to absolute corners for pooling.
    Tensor cx = tp.slice_cols(b, 0, 1), cy = tp.slice_cols(b, 1, 2);
    Tensor w2 = tp.mul_scalar(tp.slice_cols(b, 2, 3), 0.5);
    Tensor h2 = tp.mul_scalar(tp.slice_cols(b, 3, 4), 0.5);
    Tensor x1 = tp.clamp(tp.mul_scalar(tp.sub(cx, w2), img_w), 0.0, img_w);
    Tensor y1 = tp.clamp(tp.mul_scalar(tp.sub(cy, h2), img_h), 0.0, img_h);
    Tensor x2 = tp.clamp(tp.mul_scalar(tp.add(cx, w2), img_w), 0.0, img_w);
    Tensor y2 = tp.clamp(tp.mul_scalar(tp.add(cy, h2), img_h), 0.0, img_h);
    Tensor abs_boxes = tp.concat_cols({x1, y1, x2, y2});

    Tensor pooled = roi_align(tp, fpn, abs_boxes, cfg_.pooled);  // [N,C,P,P]

    Tensor q1, t1;
    if (cfg_.shallow) {
        // Ablation: proposals never see the task; attention runs over Q only
        // and T passes through unchanged.
        q1 = mhsa(tp, q, st.attn, cfg_.heads, nullptr);
        t1 = t;
    } else {
        std::vector<bool> mask(std::size_t(n), false);
        mask.insert(mask.end(), pad_mask.begin(), pad_mask.end());
        Tensor seq = mhsa(tp, tp.concat_rows({q, t}), st.attn, cfg_.heads, &mask);
        q1 = tp.slice_rows(seq, 0, n);
        t1 = tp.slice_rows(seq, n, n + k);
    }

    Tensor q2 = dynamic_conv(tp, st, q1, pooled);

    Tensor h = tp.gelu(tp.linear(q2, st.reg1.w, st.reg1.b));
    h = tp.gelu(tp.linear(h, st.reg2.w, st.reg2.b));
    Tensor delta = tp.linear(h, st.reg3.w, st.reg3.b);
    Tensor boxes = tp.clamp(tp.add(b, delta), 0.0, 1.0);

    Tensor e = tp.gelu(tp.linear(q2, st.cls1.w, st.cls1.b));
    e = tp.linear(e, st.cls2.w, st.cls2.b);
    Tensor cos = tp.cosine_rows(e, labels);  // [N,k]
    Tensor logits = cfg_.gamma_learnable ? tp.scale_st(cos, gamma_)
                                         : tp.mul_scalar(cos, cfg_.gamma_logit);

    bool any_pad = false;
    for (bool p : pad_mask) any_pad = any_pad || p;
    if (any_pad) {
        std::vector<double> bias(std::size_t(n) * k, 0.0);
        for (int j = 0; j < k; ++j)
            if (pad_mask[std::size_t(j)])
                for (int i = 0; i < n; ++i) bias[std::size_t(i) * k + j] = kPadLogitBias;
        logits = tp.add(logits, Tensor::from_data({n, k}, std::move(bias)));
    }

    StageOutput out;
    out.logits = logits;
    out.boxes = boxes;
    out.q = q2;
    out.t = t1;
    return out;
}

std::vector<StageOutput> DetectionModel::forward(
    Tape& tp, const Tensor& image, const std::vector<std::string>& task_words) const {
    int k = int(task_words.size());
    if (k == 0) throw UsageError("forward: task must contain at least one word");
    if (k > cfg_.k_max)
        throw UsageError("forward: task size " + std::to_string(k) + " exceeds K=" +
                         std::to_string(cfg_.k_max));

    // Raw word rows: trainable table rows when present, provider otherwise.
    std::vector<Tensor> rows;
    rows.reserve(std::size_t(k));
    for (const auto& w : task_words) {
        if (w == kPadWord) {
            rows.push_back(Tensor::zeros({1, cfg_.d_text}));
        } else if (Tensor t = reg_.find(word_param_name(w)); t.defined()) {
            rows.push_back(t);
        } else {
            rows.push_back(Tensor::from_data({1, cfg_.d_text}, provider_->lookup(w)));
        }
    }
    Tensor raw = rows.size() == 1 ? tp.reshape(rows[0], {1, cfg_.d_text})
                                  : tp.concat_rows(rows);
    std::vector<bool> pad_mask = pad_mask_of(task_words);

    Tensor t_tokens = task_encoder_->forward(tp, raw, pad_mask);
    Tensor labels = label_encoder_->forward(tp, raw, pad_mask);

    std::vector<Tensor> stages = backbone_->forward(tp, image);
    FeaturePyramid fpn = fpn_->forward(tp, stages);

    Tensor q = q0_, b = b0_, t = t_tokens;
    std::vector<StageOutput> outs;
    outs.reserve(std::size_t(cfg_.stages));
    for (int s = 0; s < cfg_.stages; ++s) {
        StageOutput so = run_stage(tp, stages_[std::size_t(s)], q, b, t, labels,
                                   pad_mask, fpn);
        q = so.q;
        b = so.boxes;
        t = so.t;
        outs.push_back(std::move(so));
    }
    return outs;
}

DetectionSet DetectionModel::detect(const Tensor& image,
                                    const std::vector<std::string>& task_words,
                                    double score_thresh, int max_det, Precision prec,
                                    bool want_trace) const {
    Tape tp(prec);
    std::vector<StageOutput> outs = forward(tp, image, task_words);
    const StageOutput& last = outs.back();
    int n = cfg_.n_proposals, k = int(task_words.size());
    double img_w = image.dim(2), img_h = image.dim(1);
    std::vector<bool> pad_mask = pad_mask_of(task_words);

    auto decode = [&](const Tensor& b, int i) {
        BoxCxcywh bc{b.at({i, 0}), b.at({i, 1}), b.at({i, 2}), b.at({i, 3})};
        return clamp_box(cxcywh_to_xyxy(bc, img_w, img_h), img_w, img_h);
    };

    struct Cand {
        double score;
        int prop, cls;
    };
    std::vector<Cand> cands;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < k; ++j) {
            if (pad_mask[std::size_t(j)]) continue;
            double s = 1.0 / (1.0 + std::exp(-last.logits.at({i, j})));
            if (s >= score_thresh) cands.push_back({s, i, j});
        }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.prop != b.prop) return a.prop < b.prop;
        return a.cls < b.cls;
    });
    if (int(cands.size()) > max_det) cands.resize(std::size_t(max_det));

    DetectionSet ds;
    for (const Cand& c : cands)
        ds.detections.push_back({decode(last.boxes, c.prop), c.cls, c.score});

    if (want_trace) {
        for (const StageOutput& so : outs) {
            StageTrace tr;
            for (int i = 0; i < n; ++i) {
                tr.boxes.push_back(decode(so.boxes, i));
                double best = -1.0;
                int best_c = 0;
                for (int j = 0; j < k; ++j) {
                    if (pad_mask[std::size_t(j)]) continue;
                    double s = 1.0 / (1.0 + std::exp(-so.logits.at({i, j})));
                    if (s > best) {
                        best = s;
                        best_c = j;
                    }
                }
                tr.scores.push_back(best);
                tr.classes.push_back(best_c);
            }
            ds.trace.push_back(std::move(tr));
        }
    }
    return ds;
}

} // namespace taskdet
