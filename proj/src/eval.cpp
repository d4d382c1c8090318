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

#include "taskdet/eval.hpp"

#include <algorithm>
#include <fstream>

#include <json.hpp>

namespace taskdet {

using nlohmann::json;

namespace {

struct FlatDet {
    double score;
    int image;
    int order;  // insertion order within its image
    Box box;
};

// Greedy matching of one class at one threshold; returns per-detection TP
// flags and the matched-GT count.
struct ClassEval {
    std::vector<char> tp;
    int num_gt = 0;
    int matched = 0;
};

ClassEval match_class(const std::vector<FlatDet>& dets,
                      const std::vector<std::vector<Box>>& gts_per_image,
                      double thresh) {
    ClassEval ce;
    ce.tp.assign(dets.size(), 0);
    std::vector<std::vector<char>> used(gts_per_image.size());
    for (std::size_t i = 0; i < gts_per_image.size(); ++i) {
        used[i].assign(gts_per_image[i].size(), 0);
        ce.num_gt += int(gts_per_image[i].size());
    }
    for (std::size_t d = 0; d < dets.size(); ++d) {
        const FlatDet& det = dets[d];
        const auto& gts = gts_per_image[std::size_t(det.image)];
        double best = 0.0;
        int best_j = -1;
        for (std::size_t j = 0; j < gts.size(); ++j) {
            if (used[std::size_t(det.image)][j]) continue;
            double i = iou(det.box, gts[j]);
            if (i >= thresh && i > best) {
                best = i;
                best_j = int(j);
            }
        }
        if (best_j >= 0) {
            used[std::size_t(det.image)][std::size_t(best_j)] = 1;
            ce.tp[d] = 1;
            ++ce.matched;
        }
    }
    return ce;
}

// 101-point interpolated AP from ordered TP flags.
double ap101(const std::vector<char>& tp, int num_gt, std::vector<double>* curve) {
    if (num_gt == 0) return 0.0;
    std::vector<double> prec, rec;
    int cum_tp = 0;
    for (std::size_t i = 0; i < tp.size(); ++i) {
        cum_tp += tp[i];
        prec.push_back(double(cum_tp) / double(i + 1));
        rec.push_back(double(cum_tp) / double(num_gt));
    }
    // Max precision among points with recall >= r, via suffix max.
    std::vector<double> suffix(prec.size());
    double run = 0.0;
    for (std::size_t i = prec.size(); i-- > 0;) {
        run = std::max(run, prec[i]);
        suffix[i] = run;
    }
    double total = 0.0;
    if (curve) curve->assign(101, 0.0);
    for (int ri = 0; ri <= 100; ++ri) {
        double r = ri / 100.0;
        // first point with recall >= r
        auto it = std::lower_bound(rec.begin(), rec.end(), r - 1e-12);
        double p = it == rec.end() ? 0.0 : suffix[std::size_t(it - rec.begin())];
        if (ri == 0 && !prec.empty()) p = suffix[0];
        total += p;
        if (curve) (*curve)[std::size_t(ri)] = p;
    }
    return total / 101.0;
}

} // namespace

EvalReport compute_ap(const std::vector<std::vector<Detection>>& detections,
                      const std::vector<std::vector<EvalGroundTruth>>& ground_truths,
                      int num_classes, const std::vector<double>& iou_thresholds,
                      int max_det) {
    if (detections.size() != ground_truths.size())
        throw UsageError("compute_ap: detections/ground truths image count mismatch");
    std::vector<double> thresholds = iou_thresholds;
    if (thresholds.empty())
        for (int t = 0; t < 10; ++t) thresholds.push_back(0.5 + 0.05 * t);

    int images = int(detections.size());

    // Cap detections per image, preserving the caller's (score-ordered)
    // ranking; then bucket by class.
    auto by_class = std::vector<std::vector<FlatDet>>(std::size_t(num_classes));
    int total_dets = 0;
    for (int im = 0; im < images; ++im) {
        std::vector<Detection> dets = detections[std::size_t(im)];
        std::stable_sort(dets.begin(), dets.end(),
                         [](const Detection& a, const Detection& b) {
                             return a.score > b.score;
                         });
        if (int(dets.size()) > max_det) dets.resize(std::size_t(max_det));
        total_dets += int(dets.size());
        for (std::size_t k = 0; k < dets.size(); ++k) {
            const Detection& d = dets[k];
            if (d.class_index < 0 || d.class_index >= num_classes)
                throw UsageError("compute_ap: detection class " +
                                 std::to_string(d.class_index) + " outside class space");
            by_class[std::size_t(d.class_index)].push_back(
                {d.score, im, int(k), d.box});
        }
    }

    auto gt_by_class = std::vector<std::vector<std::vector<Box>>>(
        std::size_t(num_classes),
        std::vector<std::vector<Box>>(std::size_t(images)));
    int total_gts = 0;
    for (int im = 0; im < images; ++im) {
        for (const auto& g : ground_truths[std::size_t(im)]) {
            if (g.class_index < 0 || g.class_index >= num_classes)
                throw UsageError("compute_ap: gt class outside class space");
            gt_by_class[std::size_t(g.class_index)][std::size_t(im)].push_back(g.box);
            ++total_gts;
        }
    }

    EvalReport rep;
    rep.num_images = images;
    rep.num_gts = total_gts;
    rep.num_detections = total_dets;
    rep.per_class_ap.assign(std::size_t(num_classes), -1.0);
    rep.per_class_ap50.assign(std::size_t(num_classes), -1.0);
    rep.per_class_recall50.assign(std::size_t(num_classes), -1.0);
    rep.pr50.assign(std::size_t(num_classes), {});

    double sum_ap = 0.0, sum_ap50 = 0.0, sum_ap75 = 0.0;
    int valid_classes = 0;
    for (int c = 0; c < num_classes; ++c) {
        auto& dets = by_class[std::size_t(c)];
        std::sort(dets.begin(), dets.end(), [](const FlatDet& a, const FlatDet& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.image != b.image) return a.image < b.image;
            return a.order < b.order;
        });
        int class_gts = 0;
        for (const auto& v : gt_by_class[std::size_t(c)]) class_gts += int(v.size());
        if (class_gts == 0) continue;
        ++valid_classes;

        double class_ap = 0.0, class_ap50 = 0.0, class_ap75 = 0.0;
        for (double t : thresholds) {
            ClassEval ce = match_class(dets, gt_by_class[std::size_t(c)], t);
            bool is50 = std::fabs(t - 0.5) < 1e-9;
            bool is75 = std::fabs(t - 0.75) < 1e-9;
            double a = ap101(ce.tp, ce.num_gt, is50 ? &rep.pr50[std::size_t(c)] : nullptr);
            class_ap += a;
            if (is50) {
                class_ap50 = a;
                rep.per_class_recall50[std::size_t(c)] =
                    double(ce.matched) / double(ce.num_gt);
            }
            if (is75) class_ap75 = a;
        }
        class_ap /= double(thresholds.size());
        rep.per_class_ap[std::size_t(c)] = class_ap;
        rep.per_class_ap50[std::size_t(c)] = class_ap50;
        sum_ap += class_ap;
        sum_ap50 += class_ap50;
        sum_ap75 += class_ap75;
    }
    if (valid_classes > 0) {
        rep.ap = sum_ap / valid_classes;
        rep.ap50 = sum_ap50 / valid_classes;
        rep.ap75 = sum_ap75 / valid_classes;
    }
    return rep;
}

EvalReport evaluate_dataset(const DetectionModel& model, const DetectionDataset& dataset,
                            Precision prec, double score_thresh, int max_det) {
    std::vector<std::string> task = dataset.vocabulary;
    std::sort(task.begin(), task.end());
    if (int(task.size()) > model.config().k_max)
        throw UsageError("evaluate_dataset: vocabulary size " +
                         std::to_string(task.size()) + " exceeds K=" +
                         std::to_string(model.config().k_max) +
                         "; chunked evaluation is not supported");

    std::vector<std::vector<Detection>> dets;
    std::vector<std::vector<EvalGroundTruth>> gts;
    for (const auto& img : dataset.images) {
        DetectionSet ds = model.detect(img.as_tensor(), task, score_thresh, max_det, prec);
        dets.push_back(std::move(ds.detections));
        std::vector<EvalGroundTruth> g;
        for (const auto& a : dataset.annotations_of(img.id)) {
            auto it = std::find(task.begin(), task.end(), a.label);
            if (it == task.end()) continue;
            g.push_back({int(it - task.begin()), a.box});
        }
        gts.push_back(std::move(g));
    }
    EvalReport rep = compute_ap(dets, gts, int(task.size()), {}, max_det);
    rep.class_names = task;
    return rep;
}

std::string EvalReport::to_json() const {
    json j;
    j["ap"] = ap;
    j["ap50"] = ap50;
    j["ap75"] = ap75;
    j["class_names"] = class_names;
    j["per_class_ap"] = per_class_ap;
    j["per_class_ap50"] = per_class_ap50;
    j["per_class_recall50"] = per_class_recall50;
    j["pr50"] = pr50;
    j["num_images"] = num_images;
    j["num_gts"] = num_gts;
    j["num_detections"] = num_detections;
    return j.dump(2);
}

EvalReport EvalReport::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("eval report: ") + e.what());
    }
    EvalReport r;
    r.ap = j.at("ap").get<double>();
    r.ap50 = j.at("ap50").get<double>();
    r.ap75 = j.at("ap75").get<double>();
    r.class_names = j.at("class_names").get<std::vector<std::string>>();
    r.per_class_ap = j.at("per_class_ap").get<std::vector<double>>();
    r.per_class_ap50 = j.at("per_class_ap50").get<std::vector<double>>();
    r.per_class_recall50 = j.at("per_class_recall50").get<std::vector<double>>();
    r.pr50 = j.at("pr50").get<std::vector<std::vector<double>>>();
    r.num_images = j.at("num_images").get<int>();
    r.num_gts = j.at("num_gts").get<int>();
    r.num_detections = j.at("num_detections").get<int>();
    return r;
}

void write_pr_csv(const EvalReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw FormatError("pr csv: cannot write '" + path + "'");
    out << "class,recall,precision\n";
    for (std::size_t c = 0; c < report.pr50.size(); ++c) {
        if (report.pr50[c].empty()) continue;
        std::string name = c < report.class_names.size() ? report.class_names[c]
                                                         : std::to_string(c);
        for (std::size_t r = 0; r < report.pr50[c].size(); ++r)
            out << name << "," << (double(r) / 100.0) << "," << report.pr50[c][r] << "\n";
    }
}

} // namespace taskdet
