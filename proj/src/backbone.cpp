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

#include "taskdet/backbone.hpp"

namespace taskdet {

namespace {

int pick_groups(int channels) {
    for (int g : {8, 4, 2})
        if (channels % g == 0) return g;
    return 1;
}

} // namespace

VisionBackbone::ConvBlock VisionBackbone::make_block(ParamRegistry& reg,
                                                     const std::string& prefix,
                                                     int in, int out, int stride,
                                                     Rng& rng) {
    ConvBlock blk;
    blk.w = reg.param(prefix + ".w", {out, in, 3, 3}, Init::XavierUniform, rng);
    blk.b = reg.param(prefix + ".b", {out}, Init::Zeros, rng);
    blk.gn_g = reg.param(prefix + ".gn.g", {out}, Init::Ones, rng);
    blk.gn_b = reg.param(prefix + ".gn.b", {out}, Init::Zeros, rng);
    blk.groups = pick_groups(out);
    blk.stride = stride;
    return blk;
}

Tensor VisionBackbone::run_block(Tape& tp, const Tensor& x, const ConvBlock& blk) const {
    Tensor y = tp.conv2d(x, blk.w, blk.b, blk.stride, 1);
    y = tp.group_norm(y, blk.gn_g, blk.gn_b, blk.groups);
    return tp.gelu(y);
}

VisionBackbone::VisionBackbone(ParamRegistry& reg, const std::string& prefix,
                               const BackboneConfig& cfg, Rng& rng)
    : cfg_(cfg) {
    stem_ = make_block(reg, prefix + ".stem", 3, cfg.stem_channels, 2, rng);
    int in = cfg.stem_channels;
    for (int s = 0; s < 4; ++s) {
        int out = cfg.stage_channels[std::size_t(s)];
        blocks_.push_back(
            make_block(reg, prefix + ".s" + std::to_string(s) + ".a", in, out, 2, rng));
        blocks_.push_back(
            make_block(reg, prefix + ".s" + std::to_string(s) + ".b", out, out, 1, rng));
        in = out;
    }
}

std::vector<Tensor> VisionBackbone::forward(Tape& tp, const Tensor& image) const {
    if (image.ndim() != 3 || image.dim(0) != 3)
        throw ShapeError("backbone: image must be [3,H,W], got " +
                         shape_str(image.shape()));
    if (image.dim(1) % 32 != 0 || image.dim(2) % 32 != 0)
        throw ConfigError("backbone: image height and width must be divisible by 32, got " +
                          std::to_string(image.dim(1)) + "x" + std::to_string(image.dim(2)));
    Tensor x = run_block(tp, image, stem_);
    std::vector<Tensor> stages;
    for (int s = 0; s < 4; ++s) {
        x = run_block(tp, x, blocks_[std::size_t(2 * s)]);
        x = run_block(tp, x, blocks_[std::size_t(2 * s + 1)]);
        stages.push_back(x);
    }
    return stages;
}

Fpn::Fpn(ParamRegistry& reg, const std::string& prefix,
         const std::array<int, 4>& in_channels, int out_channels, Rng& rng)
    : out_channels_(out_channels), in_channels_(in_channels) {
    for (int l = 0; l < 4; ++l) {
        std::string p = prefix + ".lat" + std::to_string(l + 2);
        lat_w_.push_back(reg.param(p + ".w", {out_channels, in_channels[std::size_t(l)], 1, 1},
                                   Init::XavierUniform, rng));
        lat_b_.push_back(reg.param(p + ".b", {out_channels}, Init::Zeros, rng));
        std::string q = prefix + ".out" + std::to_string(l + 2);
        smooth_w_.push_back(reg.param(q + ".w", {out_channels, out_channels, 3, 3},
                                      Init::XavierUniform, rng));
        smooth_b_.push_back(reg.param(q + ".b", {out_channels}, Init::Zeros, rng));
    }
}

FeaturePyramid Fpn::forward(Tape& tp, const std::vector<Tensor>& stages) const {
    if (stages.size() != 4) throw ShapeError("fpn: expected 4 stage maps");
    for (int l = 0; l < 4; ++l)
        if (stages[std::size_t(l)].dim(0) != in_channels_[std::size_t(l)])
            throw ShapeError("fpn: stage C" + std::to_string(l + 2) + " has " +
                             std::to_string(stages[std::size_t(l)].dim(0)) +
                             " channels, config says " +
                             std::to_string(in_channels_[std::size_t(l)]));
    std::vector<Tensor> merged(4);
    merged[3] = tp.conv2d(stages[3], lat_w_[3], lat_b_[3], 1, 0);
    for (int l = 2; l >= 0; --l) {
        Tensor lat = tp.conv2d(stages[std::size_t(l)], lat_w_[std::size_t(l)],
                               lat_b_[std::size_t(l)], 1, 0);
        merged[std::size_t(l)] = tp.add(lat, tp.upsample2x(merged[std::size_t(l + 1)]));
    }
    FeaturePyramid fpn;
    fpn.strides = {4, 8, 16, 32};
    for (int l = 0; l < 4; ++l)
        fpn.levels.push_back(tp.conv2d(merged[std::size_t(l)], smooth_w_[std::size_t(l)],
                                       smooth_b_[std::size_t(l)], 1, 1));
    return fpn;
}

} // namespace taskdet
