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

#include <array>
#include <string>

#include "taskdet/geometry.hpp"
#include "taskdet/nn.hpp"

namespace taskdet {

struct BackboneConfig {
    int stem_channels = 16;
    std::array<int, 4> stage_channels{32, 64, 128, 256};
    int fpn_channels = 64;
};

// Small CNN: a stride-2 stem followed by four stride-2 stages, each
// (conv -> group norm -> gelu) x2. Strides of the stage outputs C2..C5 are
// 4, 8, 16, 32.
class VisionBackbone {
public:
    VisionBackbone(ParamRegistry& reg, const std::string& prefix,
                   const BackboneConfig& cfg, Rng& rng);

    // image is [3,H,W], H and W divisible by 32.
    std::vector<Tensor> forward(Tape& tp, const Tensor& image) const;

private:
    struct ConvBlock {
        Tensor w, b;       // conv
        Tensor gn_g, gn_b; // group norm affine
        int groups = 1;
        int stride = 1;
    };
    ConvBlock make_block(ParamRegistry& reg, const std::string& prefix, int in,
                         int out, int stride, Rng& rng);
    Tensor run_block(Tape& tp, const Tensor& x, const ConvBlock& blk) const;

    BackboneConfig cfg_;
    ConvBlock stem_;
    std::vector<ConvBlock> blocks_;  // two per stage
};

// Standard top-down pyramid: 1x1 laterals, nearest x2 upsampling with
// addition, 3x3 output smoothing.
class Fpn {
public:
    Fpn(ParamRegistry& reg, const std::string& prefix,
        const std::array<int, 4>& in_channels, int out_channels, Rng& rng);

    FeaturePyramid forward(Tape& tp, const std::vector<Tensor>& stages) const;
    int out_channels() const { return out_channels_; }

private:
    int out_channels_;
    std::array<int, 4> in_channels_;
    std::vector<Tensor> lat_w_, lat_b_;
    std::vector<Tensor> smooth_w_, smooth_b_;
};

} // namespace taskdet
