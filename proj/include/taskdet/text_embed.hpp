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

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "taskdet/nn.hpp"

namespace taskdet {

// Mask slot in a task word list ("filled with masking 0").
inline const std::string kPadWord = "\xE2\x88\x85";  // U+2205

// Maps words to fixed unit-norm vectors. Same word, same vector, always.
class EmbeddingProvider {
public:
    virtual ~EmbeddingProvider() = default;
    virtual int dim() const = 0;
    virtual std::vector<double> lookup(const std::string& word) const = 0;
};

// Seeds a splitmix64 stream from FNV-1a(word), draws `dim` gaussians and
// normalizes. Reproducible stand-in for exported text-encoder vectors.
class HashEmbedding : public EmbeddingProvider {
public:
    explicit HashEmbedding(int dim);
    int dim() const override { return dim_; }
    std::vector<double> lookup(const std::string& word) const override;

private:
    int dim_;
};

// Vectors loaded from an OMEV file; re-normalized on load. Lookups of words
// absent from the file fail.
class FileEmbedding : public EmbeddingProvider {
public:
    int dim() const override { return dim_; }
    std::vector<double> lookup(const std::string& word) const override;
    std::size_t size() const { return entries_.size(); }

    friend std::unique_ptr<FileEmbedding> load_embedding_file(const std::string& path);

private:
    int dim_ = 0;
    std::map<std::string, std::vector<double>> entries_;
};

// OMEV (binary, little-endian): magic "OMEV", version u32=1, count u32,
// dim u32, then per entry: name_len u16, UTF-8 name, dim x f32.
std::unique_ptr<FileEmbedding> load_embedding_file(const std::string& path);
void write_embedding_file(const std::string& path, int dim,
                          const std::vector<std::pair<std::string, std::vector<double>>>& entries);

// One row per word; pad slots become zero rows. All real words come from the
// provider (unit vectors). Plain data, no gradient.
Tensor embed_labels(const EmbeddingProvider& provider,
                    const std::vector<std::string>& words);

std::vector<bool> pad_mask_of(const std::vector<std::string>& words);

// Position-free set encoder: linear projection d_text -> d followed by
// `layers` blocks of (mhsa + ffn) with pad rows masked out of attention and
// zeroed on output. Two instances with separate weights realize the task and
// label encoders.
class SetEncoder {
public:
    SetEncoder(ParamRegistry& reg, const std::string& prefix, int d_text, int d,
               int layers, int heads, Rng& rng);

    Tensor forward(Tape& tp, const Tensor& raw,
                   const std::vector<bool>& pad_mask) const;

private:
    int heads_;
    LinearParams proj_;
    std::vector<MhsaParams> attn_;
    std::vector<FfnParams> ffn_;
};

} // namespace taskdet
