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

#include "taskdet/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace taskdet {

using nlohmann::json;

Tensor DatasetImage::as_tensor() const {
    return Tensor::from_data({3, height, width}, pixels);
}

const std::vector<Annotation>& DetectionDataset::annotations_of(int image_id) const {
    static const std::vector<Annotation> empty;
    auto it = annotations.find(image_id);
    return it == annotations.end() ? empty : it->second;
}

std::vector<LabeledBox> DetectionDataset::labeled_boxes(int image_id) const {
    std::vector<LabeledBox> out;
    for (const auto& a : annotations_of(image_id)) out.push_back({a.label, a.box});
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic generation

namespace {
const std::vector<std::string> kShapeNames = {"circle", "square", "triangle", "cross",
                                              "ring"};
}

ShapeType shape_from_name(const std::string& name) {
    for (std::size_t i = 0; i < kShapeNames.size(); ++i)
        if (kShapeNames[i] == name) return ShapeType(i);
    throw ConfigError("synthetic: unknown shape '" + name + "'");
}

const std::string& shape_name(ShapeType t) { return kShapeNames[std::size_t(t)]; }

ConflictSpec ConflictSpec::default_spec() {
    ConflictSpec s;
    s.datasets = {{"A", {"circle", "square", "triangle", "cross"}, 300, 0},
                  {"B", {"circle"}, 300, 1},
                  {"C", {"square"}, 300, 2}};
    return s;
}

bool shape_covers(ShapeType t, double cx, double cy, double r, double px, double py) {
    double dx = px - cx, dy = py - cy;
    switch (t) {
        case ShapeType::circle:
            return dx * dx + dy * dy <= r * r;
        case ShapeType::square:
            return std::max(std::fabs(dx), std::fabs(dy)) <= 0.9 * r;
        case ShapeType::triangle: {
            // Upward triangle: apex (cx, cy-r), base y = cy + 0.8r, half
            // width 0.95r at the base.
            if (dy < -r || dy > 0.8 * r) return false;
            double frac = (dy + r) / (1.8 * r);  // 0 at apex, 1 at base
            return std::fabs(dx) <= 0.95 * r * frac;
        }
        case ShapeType::cross:
            return (std::fabs(dx) <= 0.35 * r && std::fabs(dy) <= r) ||
                   (std::fabs(dy) <= 0.35 * r && std::fabs(dx) <= r);
        case ShapeType::ring: {
            double d2 = dx * dx + dy * dy;
            return d2 <= r * r && d2 >= 0.55 * r * 0.55 * r;
        }
    }
    return false;
}

namespace {

// Conservative bound of a shape's extent, used for placement only.
double shape_radius_bound(ShapeType, double r) { return r; }

std::vector<std::string> union_vocab(const ConflictSpec& spec) {
    std::vector<std::string> u;
    for (const auto& d : spec.datasets)
        for (const auto& w : d.vocab) {
            shape_from_name(w);  // validate
            if (std::find(u.begin(), u.end(), w) == u.end()) u.push_back(w);
        }
    if (u.empty()) throw ConfigError("synthetic: no shapes configured");
    return u;
}

} // namespace

std::vector<PlacedShape> synthetic_placements(const ConflictSpec& spec,
                                              std::uint64_t dataset_seed, int index) {
    std::vector<std::string> shapes = union_vocab(spec);
    Rng rng(dataset_seed + 0x517CC1B727220A95ULL * std::uint64_t(index + 1));
    int size = spec.image_size;
    int count = spec.min_shapes +
                int(rng.uniform_int(std::uint64_t(spec.max_shapes - spec.min_shapes + 1)));
    std::vector<PlacedShape> placed;
    for (int si = 0; si < count; ++si) {
        PlacedShape s;
        s.type = shape_from_name(shapes[rng.uniform_int(shapes.size())]);
        double rmax = std::min(16.0, size / 6.0);
        double rmin = std::min(7.0, rmax);
        bool ok = false;
        for (int attempt = 0; attempt < 40 && !ok; ++attempt) {
            s.r = rng.uniform(rmin, rmax);
            double margin = shape_radius_bound(s.type, s.r) + 2.0;
            s.cx = rng.uniform(margin, size - margin);
            s.cy = rng.uniform(margin, size - margin);
            ok = true;
            for (const auto& o : placed) {
                double need = shape_radius_bound(s.type, s.r) +
                              shape_radius_bound(o.type, o.r) + 2.0;
                if (std::fabs(s.cx - o.cx) < need && std::fabs(s.cy - o.cy) < need) {
                    ok = false;
                    break;
                }
            }
        }
        if (!ok) continue;  // image simply gets fewer shapes
        // Saturated color away from the noisy gray background.
        for (int c = 0; c < 3; ++c)
            s.color[c] = rng.uniform() < 0.5 ? rng.uniform(0.0, 0.2) : rng.uniform(0.8, 1.0);
        placed.push_back(s);
    }
    return placed;
}

std::vector<DetectionDataset> generate_synthetic(const ConflictSpec& spec,
                                                 std::uint64_t seed) {
    if (spec.image_size < 32) throw ConfigError("synthetic: image_size too small");
    if (spec.min_shapes < 0 || spec.max_shapes < spec.min_shapes)
        throw ConfigError("synthetic: bad shape counts");
    union_vocab(spec);  // validates shape names

    std::vector<DetectionDataset> out;
    for (std::size_t di = 0; di < spec.datasets.size(); ++di) {
        const SyntheticDatasetSpec& dspec = spec.datasets[di];
        std::uint64_t dseed = seed ^ (0x9E3779B97F4A7C15ULL * (dspec.seed_offset + di + 1));
        DetectionDataset ds;
        ds.name = dspec.name;
        ds.vocabulary = dspec.vocab;
        int size = spec.image_size;
        for (int ii = 0; ii < dspec.image_count; ++ii) {
            std::vector<PlacedShape> placed = synthetic_placements(spec, dseed, ii);
            Rng noise_rng(dseed ^ (0xD1B54A32D192ED03ULL * std::uint64_t(ii + 1)));
            DatasetImage img;
            img.id = ii;
            img.width = size;
            img.height = size;
            img.pixels.resize(std::size_t(3) * size * size);
            for (int c = 0; c < 3; ++c)
                for (int p = 0; p < size * size; ++p)
                    img.pixels[std::size_t(c) * size * size + p] =
                        std::clamp(0.5 + 0.05 * noise_rng.gaussian(), 0.0, 1.0);

            std::vector<Annotation> anns;
            for (const auto& s : placed) {
                int min_x = size, min_y = size, max_x = -1, max_y = -1;
                for (int py = 0; py < size; ++py) {
                    for (int px = 0; px < size; ++px) {
                        if (!shape_covers(s.type, s.cx, s.cy, s.r, px + 0.5, py + 0.5))
                            continue;
                        for (int c = 0; c < 3; ++c)
                            img.pixels[(std::size_t(c) * size + py) * size + px] = s.color[c];
                        min_x = std::min(min_x, px);
                        min_y = std::min(min_y, py);
                        max_x = std::max(max_x, px);
                        max_y = std::max(max_y, py);
                    }
                }
                if (max_x < 0) continue;  // nothing rasterized
                const std::string& label = shape_name(s.type);
                bool annotated = std::find(ds.vocabulary.begin(), ds.vocabulary.end(),
                                           label) != ds.vocabulary.end();
                if (annotated) {
                    Annotation a;
                    a.label = label;
                    a.box = Box{double(min_x), double(min_y), double(max_x + 1),
                                double(max_y + 1)};
                    anns.push_back(a);
                }
            }
            ds.annotations[img.id] = std::move(anns);
            ds.images.push_back(std::move(img));
        }
        out.push_back(std::move(ds));
    }
    return out;
}

// ---------------------------------------------------------------------------
// COCO-style JSON

DetectionDataset load_coco_json(const std::string& path, const std::string& image_root) {
    std::ifstream in(path);
    if (!in) throw FormatError("coco: cannot open '" + path + "'");
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw FormatError("coco: parse error in '" + path + "': " + e.what());
    }
    for (const char* key : {"images", "annotations", "categories"})
        if (!j.contains(key) || !j[key].is_array())
            throw FormatError("coco: missing '" + std::string(key) + "' array");

    DetectionDataset ds;
    ds.name = path;

    std::map<int, std::string> cat_names;  // ordered by category id
    for (const auto& c : j["categories"]) {
        if (!c.contains("id") || !c.contains("name"))
            throw FormatError("coco: category missing id/name");
        cat_names[c["id"].get<int>()] = c["name"].get<std::string>();
    }
    std::map<int, int> cat_to_index;
    for (const auto& [id, name] : cat_names) {
        cat_to_index[id] = int(ds.vocabulary.size());
        ds.vocabulary.push_back(name);
    }

    std::map<int, std::size_t> image_index;
    for (const auto& im : j["images"]) {
        for (const char* key : {"id", "file_name", "width", "height"})
            if (!im.contains(key)) throw FormatError("coco: image missing '" + std::string(key) + "'");
        DatasetImage img;
        img.id = im["id"].get<int>();
        img.width = im["width"].get<int>();
        img.height = im["height"].get<int>();
        if (image_index.count(img.id))
            throw FormatError("coco: duplicate image id " + std::to_string(img.id));
        if (!image_root.empty()) {
            DatasetImage decoded = read_ppm(image_root + "/" + im["file_name"].get<std::string>());
            if (decoded.width != img.width || decoded.height != img.height)
                throw FormatError("coco: image " + std::to_string(img.id) +
                                  " size mismatch with file");
            img.pixels = std::move(decoded.pixels);
        } else {
            img.pixels.assign(std::size_t(3) * img.width * img.height, 0.0);
        }
        image_index[img.id] = ds.images.size();
        ds.images.push_back(std::move(img));
        ds.annotations[ds.images.back().id];  // ensure entry
    }

    for (const auto& a : j["annotations"]) {
        for (const char* key : {"image_id", "category_id", "bbox"})
            if (!a.contains(key)) throw FormatError("coco: annotation missing '" + std::string(key) + "'");
        int image_id = a["image_id"].get<int>();
        auto it = image_index.find(image_id);
        if (it == image_index.end())
            throw FormatError("coco: annotation references unknown image id " +
                              std::to_string(image_id));
        int cat = a["category_id"].get<int>();
        auto ct = cat_to_index.find(cat);
        if (ct == cat_to_index.end())
            throw FormatError("coco: annotation references unknown category id " +
                              std::to_string(cat));
        const auto& bb = a["bbox"];
        if (!bb.is_array() || bb.size() != 4)
            throw FormatError("coco: bbox must be [x,y,w,h] for image " +
                              std::to_string(image_id));
        const DatasetImage& img = ds.images[it->second];
        Annotation ann;
        ann.label = ds.vocabulary[std::size_t(ct->second)];
        double x = bb[0].get<double>(), y = bb[1].get<double>();
        double w = bb[2].get<double>(), h = bb[3].get<double>();
        ann.box = clamp_box(Box{x, y, x + w, y + h}, img.width, img.height);
        ds.annotations[image_id].push_back(std::move(ann));
    }
    return ds;
}

PseudoIngestReport ingest_pseudo_labels(DetectionDataset& dataset,
                                        const std::string& path,
                                        double min_confidence) {
    std::ifstream in(path);
    if (!in) throw FormatError("pseudo: cannot open '" + path + "'");
    std::map<int, std::size_t> image_index;
    for (std::size_t i = 0; i < dataset.images.size(); ++i)
        image_index[dataset.images[i].id] = i;

    PseudoIngestReport rep;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw FormatError("pseudo: line " + std::to_string(line_no) + ": " + e.what());
        }
        for (const char* key : {"image_id", "label", "bbox", "confidence"})
            if (!j.contains(key))
                throw FormatError("pseudo: line " + std::to_string(line_no) +
                                  " missing '" + std::string(key) + "'");
        double conf = j["confidence"].get<double>();
        if (conf < min_confidence) {
            ++rep.dropped_low_confidence;
            continue;
        }
        int image_id = j["image_id"].get<int>();
        auto it = image_index.find(image_id);
        if (it == image_index.end()) {
            ++rep.skipped_unknown_image;
            continue;
        }
        const auto& bb = j["bbox"];
        if (!bb.is_array() || bb.size() != 4)
            throw FormatError("pseudo: line " + std::to_string(line_no) + ": bad bbox");
        const DatasetImage& img = dataset.images[it->second];
        Annotation a;
        a.label = j["label"].get<std::string>();
        a.box = clamp_box(Box{bb[0].get<double>(), bb[1].get<double>(),
                              bb[2].get<double>(), bb[3].get<double>()},
                          img.width, img.height);
        a.source = AnnotationSource::pseudo;
        a.confidence = conf;
        if (std::find(dataset.vocabulary.begin(), dataset.vocabulary.end(), a.label) ==
            dataset.vocabulary.end()) {
            dataset.vocabulary.push_back(a.label);
            rep.new_labels.push_back(a.label);
        }
        dataset.annotations[image_id].push_back(std::move(a));
        ++rep.added;
    }
    return rep;
}

// ---------------------------------------------------------------------------
// Registry

void FederatedRegistry::add(DetectionDataset dataset, double weight) {
    if (dataset.images.empty())
        throw UsageError("registry: dataset '" + dataset.name + "' has no images");
    datasets_.push_back(std::move(dataset));
    weights_.push_back(weight);
    cursors_.push_back(0);
}

std::vector<double> FederatedRegistry::normalized_weights() const {
    std::vector<double> w(weights_);
    double total = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        if (w[i] <= 0.0) w[i] = double(datasets_[i].images.size());
        total += w[i];
    }
    for (double& x : w) x /= total;
    return w;
}

int FederatedRegistry::total_images() const {
    int n = 0;
    for (const auto& d : datasets_) n += int(d.images.size());
    return n;
}

FederatedRegistry::Draw FederatedRegistry::next() {
    if (datasets_.empty()) throw UsageError("registry: no datasets");
    std::vector<double> w = normalized_weights();
    double u = rng_.uniform();
    int pick = int(w.size()) - 1;
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        acc += w[i];
        if (u < acc) {
            pick = int(i);
            break;
        }
    }
    Draw d;
    d.dataset = pick;
    d.image = cursors_[std::size_t(pick)];
    cursors_[std::size_t(pick)] =
        (cursors_[std::size_t(pick)] + 1) % int(datasets_[std::size_t(pick)].images.size());
    return d;
}

void FederatedRegistry::restore(std::uint64_t rng_state, const std::vector<int>& cursors) {
    if (cursors.size() != cursors_.size())
        throw UsageError("registry: cursor count mismatch on restore");
    rng_.set_state(rng_state);
    cursors_ = cursors;
}

// ---------------------------------------------------------------------------
// PPM

void write_ppm(const std::string& path, int width, int height,
               const std::vector<double>& pixels) {
    if (int(pixels.size()) != 3 * width * height)
        throw UsageError("ppm: pixel buffer size mismatch");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("ppm: cannot write '" + path + "'");
    out << "P6\n" << width << " " << height << "\n255\n";
    std::vector<unsigned char> row(std::size_t(width) * 3);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = pixels[(std::size_t(c) * height + y) * width + x];
                row[std::size_t(x) * 3 + c] =
                    (unsigned char)std::clamp(int(std::lround(v * 255.0)), 0, 255);
            }
        out.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
    }
}

DatasetImage read_ppm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("ppm: cannot open '" + path + "'");
    std::string magic;
    in >> magic;
    if (magic != "P6") throw FormatError("ppm: '" + path + "' is not binary P6");
    auto next_int = [&]() {
        // skip whitespace and # comments
        while (true) {
            int c = in.peek();
            if (c == '#') {
                std::string line;
                std::getline(in, line);
            } else if (std::isspace(c)) {
                in.get();
            } else {
                break;
            }
        }
        int v;
        if (!(in >> v)) throw FormatError("ppm: bad header in '" + path + "'");
        return v;
    };
    int width = next_int(), height = next_int(), maxval = next_int();
    if (maxval != 255) throw FormatError("ppm: only maxval 255 supported");
    in.get();  // single whitespace after header
    std::vector<unsigned char> buf(std::size_t(width) * height * 3);
    if (!in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size())))
        throw FormatError("ppm: truncated pixel data in '" + path + "'");
    DatasetImage img;
    img.width = width;
    img.height = height;
    img.pixels.resize(std::size_t(3) * width * height);
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            for (int c = 0; c < 3; ++c)
                img.pixels[(std::size_t(c) * height + y) * width + x] =
                    buf[(std::size_t(y) * width + x) * 3 + c] / 255.0;
    return img;
}

} // namespace taskdet
