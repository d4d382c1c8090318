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
#include <vector>

#include "taskdet/match_loss.hpp"
#include "taskdet/rng.hpp"

namespace taskdet {

// One raw annotation in image coordinates.
struct LabeledBox {
    std::string label;
    Box box;  // xyxy absolute
};

// Output of per-image task sampling. `words` holds the real (shuffled) task
// words; the model-facing task appends `pad_count` mask slots.
struct SampledTask {
    std::vector<std::string> words;
    std::vector<std::string> positives;  // subset of words present in the image
    std::vector<std::string> negatives;  // subset of words absent from it
    int pad_count = 0;
    std::vector<GroundTruth> filtered_gts;  // classes indexed into `words`

    std::vector<std::string> words_with_pads() const;
};

// Draws k ~ Uniform{1..K}; keeps a random k-subset of the image's labels
// when it has more than k (dropping the other annotations for this step),
// fills with negatives from vocab \ labels when it has fewer, and pads when
// the vocabulary itself runs out.
SampledTask sample_task(const std::vector<LabeledBox>& annotations,
                        const std::vector<std::string>& dataset_vocab, int k_max,
                        double img_w, double img_h, Rng& rng);

} // namespace taskdet
