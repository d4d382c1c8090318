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

#include "taskdet/task_sampler.hpp"

#include <algorithm>
#include <unordered_map>

#include "taskdet/text_embed.hpp"

namespace taskdet {

std::vector<std::string> SampledTask::words_with_pads() const {
    std::vector<std::string> full = words;
    for (int i = 0; i < pad_count; ++i) full.push_back(kPadWord);
    return full;
}

SampledTask sample_task(const std::vector<LabeledBox>& annotations,
                        const std::vector<std::string>& dataset_vocab, int k_max,
                        double img_w, double img_h, Rng& rng) {
    if (k_max < 1) throw UsageError("sample_task: K must be >= 1");

    // Unique image labels in first-appearance order.
    std::vector<std::string> labels;
    for (const auto& a : annotations)
        if (std::find(labels.begin(), labels.end(), a.label) == labels.end())
            labels.push_back(a.label);
    if (labels.empty() && dataset_vocab.empty())
        throw UsageError("sample_task: image has no labels and the vocabulary is empty");

    int k = int(rng.uniform_int(std::uint64_t(k_max))) + 1;
    int m = int(labels.size());

    SampledTask out;
    if (m > k) {
        // Keep a uniform random k-subset; the other annotations are dropped
        // for this step only.
        std::vector<std::string> pool = labels;
        rng.shuffle(pool);
        pool.resize(std::size_t(k));
        out.positives = pool;
    } else {
        out.positives = labels;
        int need = k - m;
        std::vector<std::string> candidates;
        for (const auto& w : dataset_vocab)
            if (std::find(labels.begin(), labels.end(), w) == labels.end())
                candidates.push_back(w);
        rng.shuffle(candidates);
        int take = std::min<int>(need, int(candidates.size()));
        out.negatives.assign(candidates.begin(), candidates.begin() + take);
        out.pad_count = need - take;
    }

    out.words = out.positives;
    out.words.insert(out.words.end(), out.negatives.begin(), out.negatives.end());
    rng.shuffle(out.words);

    std::unordered_map<std::string, int> slot;
    for (std::size_t i = 0; i < out.words.size(); ++i) slot[out.words[i]] = int(i);
    for (const auto& a : annotations) {
        auto it = slot.find(a.label);
        if (it == slot.end()) continue;  // dropped positive
        GroundTruth g;
        g.class_index = it->second;
        g.box = xyxy_to_cxcywh(clamp_box(a.box, img_w, img_h), img_w, img_h);
        out.filtered_gts.push_back(g);
    }
    return out;
}

} // namespace taskdet
