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

#include "taskdet/text_embed.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "taskdet/rng.hpp"

namespace taskdet {

namespace {

void normalize(std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    s = std::sqrt(s);
    if (s > 0.0)
        for (double& x : v) x /= s;
}

template <typename T>
bool read_le(std::istream& in, T& out) {
    unsigned char buf[sizeof(T)];
    if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) return false;
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= std::uint64_t(buf[i]) << (8 * i);
    std::memcpy(&out, &v, sizeof(T));
    return true;
}

template <typename T>
void write_le(std::ostream& out, T v) {
    std::uint64_t bits = 0;
    std::memcpy(&bits, &v, sizeof(T));
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i) buf[i] = (bits >> (8 * i)) & 0xFF;
    out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

[[noreturn]] void omev_fail(std::istream& in, const std::string& what) {
    auto off = in.tellg();
    throw FormatError("OMEV: " + what + " at byte offset " +
                      std::to_string(long(off < 0 ? -1 : long(off))));
}

} // namespace

HashEmbedding::HashEmbedding(int dim) : dim_(dim) {
    if (dim < 1) throw ConfigError("HashEmbedding: dim must be >= 1");
}

std::vector<double> HashEmbedding::lookup(const std::string& word) const {
    Rng rng(fnv1a(word));
    auto v = std::vector<double>(std::size_t(dim_));
    for (double& x : v) x = rng.gaussian();
    normalize(v);
    return v;
}

std::vector<double> FileEmbedding::lookup(const std::string& word) const {
    auto it = entries_.find(word);
    if (it == entries_.end())
        throw FormatError("embedding provider: no vector for word '" + word + "'");
    return it->second;
}

std::unique_ptr<FileEmbedding> load_embedding_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("OMEV: cannot open '" + path + "'");
    char magic[4];
    if (!in.read(magic, 4)) omev_fail(in, "truncated magic");
    if (std::memcmp(magic, "OMEV", 4) != 0) omev_fail(in, "bad magic");
    std::uint32_t version = 0, count = 0, dim = 0;
    if (!read_le(in, version)) omev_fail(in, "truncated version");
    if (version != 1) omev_fail(in, "unsupported version " + std::to_string(version));
    if (!read_le(in, count)) omev_fail(in, "truncated count");
    if (!read_le(in, dim)) omev_fail(in, "truncated dim");
    if (dim == 0) omev_fail(in, "zero dim");

    auto prov = std::unique_ptr<FileEmbedding>(new FileEmbedding());
    prov->dim_ = int(dim);
    for (std::uint32_t e = 0; e < count; ++e) {
        std::uint16_t name_len = 0;
        if (!read_le(in, name_len)) omev_fail(in, "truncated name length");
        std::string name(name_len, '\0');
        if (!in.read(name.data(), name_len)) omev_fail(in, "truncated name");
        std::vector<double> v(dim);
        for (std::uint32_t i = 0; i < dim; ++i) {
            float f = 0.0f;
            if (!read_le(in, f)) omev_fail(in, "truncated vector for '" + name + "'");
            v[i] = double(f);
        }
        normalize(v);
        if (!prov->entries_.emplace(name, std::move(v)).second)
            omev_fail(in, "duplicate name '" + name + "'");
    }
    return prov;
}

void write_embedding_file(const std::string& path, int dim,
                          const std::vector<std::pair<std::string, std::vector<double>>>& entries) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("OMEV: cannot write '" + path + "'");
    out.write("OMEV", 4);
    write_le(out, std::uint32_t(1));
    write_le(out, std::uint32_t(entries.size()));
    write_le(out, std::uint32_t(dim));
    for (const auto& [name, vec] : entries) {
        if (int(vec.size()) != dim)
            throw UsageError("OMEV write: vector size mismatch for '" + name + "'");
        if (name.size() > 0xFFFF) throw UsageError("OMEV write: name too long");
        write_le(out, std::uint16_t(name.size()));
        out.write(name.data(), std::streamsize(name.size()));
        for (double v : vec) write_le(out, float(v));
    }
}

Tensor embed_labels(const EmbeddingProvider& provider,
                    const std::vector<std::string>& words) {
    if (words.empty()) throw UsageError("embed_labels: empty word list");
    int d = provider.dim();
    std::vector<double> data;
    data.reserve(words.size() * std::size_t(d));
    for (const auto& w : words) {
        if (w == kPadWord) {
            data.insert(data.end(), std::size_t(d), 0.0);
        } else {
            auto v = provider.lookup(w);
            data.insert(data.end(), v.begin(), v.end());
        }
    }
    return Tensor::from_data({int(words.size()), d}, std::move(data));
}

std::vector<bool> pad_mask_of(const std::vector<std::string>& words) {
    std::vector<bool> m(words.size());
    for (std::size_t i = 0; i < words.size(); ++i) m[i] = (words[i] == kPadWord);
    return m;
}

SetEncoder::SetEncoder(ParamRegistry& reg, const std::string& prefix, int d_text,
                       int d, int layers, int heads, Rng& rng)
    : heads_(heads) {
    proj_ = make_linear(reg, prefix + ".proj", d_text, d, rng);
    for (int l = 0; l < layers; ++l) {
        std::string lp = prefix + ".layer" + std::to_string(l);
        attn_.push_back(make_mhsa(reg, lp + ".attn", d, rng));
        ffn_.push_back(make_ffn(reg, lp + ".ffn", d, 4 * d, rng));
    }
}

Tensor SetEncoder::forward(Tape& tp, const Tensor& raw,
                           const std::vector<bool>& pad_mask) const {
    if (raw.ndim() != 2) throw ShapeError("set encoder: raw must be [k,d_text]");
    int k = raw.dim(0);
    if (int(pad_mask.size()) != k) throw ShapeError("set encoder: mask length mismatch");
    Tensor x = tp.linear(raw, proj_.w, proj_.b);
    for (std::size_t l = 0; l < attn_.size(); ++l) {
        x = mhsa(tp, x, attn_[l], heads_, &pad_mask);
        x = ffn_forward(tp, x, ffn_[l]);
    }
    // FFN bias re-populates pad rows; keep them hard zero.
    bool any_pad = false;
    for (bool b : pad_mask) any_pad = any_pad || b;
    if (any_pad) {
        int d = x.dim(1);
        std::vector<double> m(std::size_t(k) * d, 1.0);
        for (int i = 0; i < k; ++i)
            if (pad_mask[std::size_t(i)])
                for (int j = 0; j < d; ++j) m[std::size_t(i) * d + j] = 0.0;
        x = tp.mul(x, Tensor::from_data({k, d}, std::move(m)));
    }
    return x;
}

} // namespace taskdet
