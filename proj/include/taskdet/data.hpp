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
#include <string>
#include <vector>

#include "taskdet/task_sampler.hpp"
#include "taskdet/tensor.hpp"

namespace taskdet {

enum class AnnotationSource { human, pseudo };

struct Annotation {
    std::string label;
    Box box;  // xyxy absolute, clamped to the image
    AnnotationSource source = AnnotationSource::human;
    double confidence = 1.0;
};

struct DatasetImage {
    int id = 0;
    int width = 0, height = 0;
    std::vector<double> pixels;  // [3*H*W], values in [0,1]

    Tensor as_tensor() const;
};

// One detection dataset: its own vocabulary, images and annotations.
// Vocabularies are never merged across datasets; federation happens through
// per-image task sampling against the source dataset's vocabulary.
struct DetectionDataset {
    std::string name;
    std::vector<std::string> vocabulary;  // ordered
    std::vector<DatasetImage> images;
    std::map<int, std::vector<Annotation>> annotations;  // image id -> boxes

    const std::vector<Annotation>& annotations_of(int image_id) const;
    std::vector<LabeledBox> labeled_boxes(int image_id) const;
};

// ---------------------------------------------------------------------------
// Synthetic conflict datasets

enum class ShapeType { circle, square, triangle, cross, ring };

ShapeType shape_from_name(const std::string& name);
const std::string& shape_name(ShapeType t);

struct SyntheticDatasetSpec {
    std::string name;
    std::vector<std::string> vocab;  // shape names this dataset annotates
    int image_count = 300;
    std::uint64_t seed_offset = 0;
};

// Every image draws shapes from the union of all dataset vocabularies, but
// each dataset annotates only its own vocabulary. Unlabeled shapes are
// implicit background, which is the cross-dataset inconsistency under study.
struct ConflictSpec {
    std::vector<SyntheticDatasetSpec> datasets;
    int image_size = 96;
    int min_shapes = 1;
    int max_shapes = 4;

    static ConflictSpec default_spec();
};

std::vector<DetectionDataset> generate_synthetic(const ConflictSpec& spec,
                                                 std::uint64_t seed);

// Exposed for oracle-style verification of the generator: membership test of
// a pixel center in a shape placed at (cx, cy) with scale r.
bool shape_covers(ShapeType t, double cx, double cy, double r, double px, double py);

struct PlacedShape {
    ShapeType type;
    double cx = 0, cy = 0, r = 0;
    double color[3] = {0, 0, 0};
};

// Shape placements for image `index` of a dataset stream; the generator
// derives images and annotations from exactly these.
std::vector<PlacedShape> synthetic_placements(const ConflictSpec& spec,
                                              std::uint64_t dataset_seed, int index);

// ---------------------------------------------------------------------------
// COCO-style JSON / pseudo labels

// Subset schema: images(id, file_name, width, height),
// annotations(image_id, category_id, bbox [x,y,w,h]), categories(id, name).
// Categories become the vocabulary in category-id order. When image_root is
// empty, pixel data is left zero (annotation-only use).
DetectionDataset load_coco_json(const std::string& path, const std::string& image_root);

struct PseudoIngestReport {
    int added = 0;
    int dropped_low_confidence = 0;
    int skipped_unknown_image = 0;
    std::vector<std::string> new_labels;
};

// JSON lines: {"image_id":int, "label":str, "bbox":[x1,y1,x2,y2],
// "confidence":float}. Appends annotations with source=pseudo; entries below
// min_confidence are dropped; unknown labels extend the vocabulary.
PseudoIngestReport ingest_pseudo_labels(DetectionDataset& dataset,
                                        const std::string& path,
                                        double min_confidence);

// ---------------------------------------------------------------------------
// Multi-dataset registry

// Weighted interleave over datasets; deterministic function of (seed,
// weights). Weights default to image-count proportion.
class FederatedRegistry {
public:
    explicit FederatedRegistry(std::uint64_t seed) : rng_(seed) {}

    void add(DetectionDataset dataset, double weight = 0.0);

    struct Draw {
        int dataset = 0;
        int image = 0;  // index into dataset.images
    };
    Draw next();

    const std::vector<DetectionDataset>& datasets() const { return datasets_; }
    std::vector<double> normalized_weights() const;
    int total_images() const;

    // Resume support.
    std::uint64_t rng_state() const { return rng_.state(); }
    const std::vector<int>& cursors() const { return cursors_; }
    void restore(std::uint64_t rng_state, const std::vector<int>& cursors);

private:
    Rng rng_;
    std::vector<DetectionDataset> datasets_;
    std::vector<double> weights_;
    std::vector<int> cursors_;
};

// ---------------------------------------------------------------------------
// PPM image IO (backing store for synthetic datasets on disk)

void write_ppm(const std::string& path, int width, int height,
               const std::vector<double>& pixels);
DatasetImage read_ppm(const std::string& path);

} // namespace taskdet
