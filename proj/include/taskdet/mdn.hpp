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

#include <memory>
#include <string>
#include <vector>

#include "taskdet/backbone.hpp"
#include "taskdet/geometry.hpp"
#include "taskdet/text_embed.hpp"

namespace taskdet {

struct ModelConfig {
    int d = 64;        // proposal/content width; must match fpn_channels
    int d_text = 32;
    int n_proposals = 30;
    int stages = 6;
    int heads = 4;
    int k_max = 8;     // max task size K
    int pooled = 7;
    int encoder_layers = 2;
    int encoder_heads = 4;
    double gamma_logit = 20.0;
    bool gamma_learnable = false;
    bool shallow = false;  // ablation: language enters classification only
    BackboneConfig backbone;
};

// Per-stage heads output. Logits over task slots; pad columns carry a large
// negative bias and are excluded from losses and detection.
struct StageOutput {
    Tensor logits;  // [N,k]
    Tensor boxes;   // [N,4] cxcywh, clamped to [0,1]
    Tensor q;       // [N,d]
    Tensor t;       // [k,d]
};

struct Detection {
    Box box;  // xyxy absolute, inside the image
    int class_index = 0;
    double score = 0.0;
};

struct StageTrace {
    std::vector<Box> boxes;
    std::vector<double> scores;
    std::vector<int> classes;
};

struct DetectionSet {
    std::vector<Detection> detections;
    std::vector<StageTrace> trace;  // filled when requested
};

// The full task-conditioned detector: backbone + FPN + task/label set
// encoders + stacked fusion stages over learnable proposals.
class DetectionModel {
public:
    DetectionModel(const ModelConfig& cfg, std::uint64_t seed,
                   std::shared_ptr<const EmbeddingProvider> provider);

    // Materializes per-word embedding rows as named parameters (initialized
    // from the provider). Needed before training so tuning modes can address
    // them; detection on unseen words falls back to the provider.
    void ensure_word_params(const std::vector<std::string>& vocabulary);

    ParamRegistry& params() { return reg_; }
    const ParamRegistry& params() const { return reg_; }
    const ModelConfig& config() const { return cfg_; }
    const EmbeddingProvider& provider() const { return *provider_; }

    // Runs all stages; stage s consumes (Q,B,T) from s-1 and the label
    // embedding L is computed once. `task_words` may contain pad markers.
    std::vector<StageOutput> forward(Tape& tp, const Tensor& image,
                                     const std::vector<std::string>& task_words) const;

    DetectionSet detect(const Tensor& image, const std::vector<std::string>& task_words,
                        double score_thresh, int max_det, Precision prec,
                        bool want_trace = false) const;

    // Word-embedding rows (for the prompt tuning mode).
    bool has_word_param(const std::string& word) const;
    static std::string word_param_name(const std::string& word);

private:
    struct Stage {
        MhsaParams attn;
        LinearParams kernel_gen;        // d -> 2*d*mid
        LayerNormParams dn_mid, dn_out, dn_post;
        LinearParams dyn_out;           // P*P*d -> d
        FfnParams ffn;
        LinearParams reg1, reg2, reg3;  // box delta MLP
        LinearParams cls1, cls2;        // classification embedding MLP
    };

    Tensor dynamic_conv(Tape& tp, const Stage& st, const Tensor& q1,
                        const Tensor& pooled) const;
    StageOutput run_stage(Tape& tp, const Stage& st, const Tensor& q, const Tensor& b,
                          const Tensor& t, const Tensor& labels,
                          const std::vector<bool>& pad_mask,
                          const FeaturePyramid& fpn) const;

    ModelConfig cfg_;
    std::shared_ptr<const EmbeddingProvider> provider_;
    ParamRegistry reg_;
    std::unique_ptr<VisionBackbone> backbone_;
    std::unique_ptr<Fpn> fpn_;
    std::unique_ptr<SetEncoder> task_encoder_;
    std::unique_ptr<SetEncoder> label_encoder_;
    std::vector<Stage> stages_;
    Tensor q0_;      // [N,d]
    Tensor b0_;      // [N,4] cxcywh; init = whole image
    Tensor gamma_;   // [1] when learnable
};

} // namespace taskdet
