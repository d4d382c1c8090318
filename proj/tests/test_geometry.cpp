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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "taskdet/autodiff_check.hpp"
#include "taskdet/geometry.hpp"
#include "testutil.hpp"

using namespace taskdet;
using testutil::random_tensor;

namespace {

Box random_box(Rng& rng, double extent = 10.0) {
    double x1 = rng.uniform(0, extent), x2 = rng.uniform(0, extent);
    double y1 = rng.uniform(0, extent), y2 = rng.uniform(0, extent);
    if (x2 < x1) std::swap(x1, x2);
    if (y2 < y1) std::swap(y1, y2);
    return {x1, y1, x2, y2};
}

} // namespace

TEST_CASE("iou hand cases") {
    Box a{0, 0, 2, 2}, b{1, 0, 3, 2};
    CHECK(iou(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(iou(a, Box{5, 5, 6, 6}) == 0.0);
    CHECK(iou(a, b) == doctest::Approx(1.0 / 3.0).epsilon(1e-9));
    // rasterization oracle agrees
    CHECK(testutil::raster_iou(a, b) == doctest::Approx(1.0 / 3.0).epsilon(1e-2));
}

TEST_CASE("giou hand cases") {
    Box a{0, 0, 1, 1}, b{2, 2, 3, 3};
    CHECK(giou(a, a) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(giou(a, b) == doctest::Approx(-7.0 / 9.0).epsilon(1e-9));
    CHECK(testutil::raster_giou(a, b) == doctest::Approx(-7.0 / 9.0).epsilon(1e-2));
    // overlapping pair whose enclosure has no empty area
    Box c{0, 0, 2, 2}, d{1, 0, 3, 2};
    CHECK(giou(c, d) == doctest::Approx(1.0 / 3.0).epsilon(1e-9));
    CHECK(giou(c, d) == doctest::Approx(iou(c, d)).epsilon(1e-12));
    // both degenerate at the same point
    Box p{1, 1, 1, 1};
    CHECK(giou(p, p) == 0.0);
    CHECK(iou(p, p) == 0.0);
}

TEST_CASE("giou <= iou, range, symmetry over random boxes") {
    Rng rng(101);
    for (int i = 0; i < 10000; ++i) {
        Box a = random_box(rng), b = random_box(rng);
        double g = giou(a, b), io = iou(a, b);
        CHECK(g <= io + 1e-12);
        CHECK(g > -1.0);
        CHECK(g <= 1.0);
        CHECK(io >= 0.0);
        CHECK(io <= 1.0);
        CHECK(giou(b, a) == doctest::Approx(g).epsilon(1e-12));
        CHECK(iou(b, a) == doctest::Approx(io).epsilon(1e-12));
    }
}

TEST_CASE("giou equals iou exactly when the enclosure has no empty area") {
    // stacked boxes that tile their enclosure
    Box a{0, 0, 4, 2}, b{0, 2, 4, 5};
    double uni = box_area(a) + box_area(b);
    Box enc{0, 0, 4, 5};
    CHECK(box_area(enc) == doctest::Approx(uni));
    CHECK(giou(a, b) == doctest::Approx(iou(a, b)).epsilon(1e-12));
    // and differs when it does not
    Box c{0, 0, 1, 1}, d{3, 0, 4, 1};
    CHECK(giou(c, d) < iou(c, d));
}

TEST_CASE("box conversion") {
    Box full{0, 0, 64, 48};
    BoxCxcywh n = xyxy_to_cxcywh(full, 64, 48);
    CHECK(n.cx == doctest::Approx(0.5));
    CHECK(n.cy == doctest::Approx(0.5));
    CHECK(n.w == doctest::Approx(1.0));
    CHECK(n.h == doctest::Approx(1.0));

    BoxCxcywh point{0.5, 0.5, 0.0, 0.0};
    Box p = cxcywh_to_xyxy(point, 10, 10);
    CHECK(p.x1 == doctest::Approx(5.0));
    CHECK(p.x2 == doctest::Approx(5.0));

    CHECK_THROWS_AS(xyxy_to_cxcywh(full, 0, 48), ConfigError);
    CHECK_THROWS_AS(cxcywh_to_xyxy(point, 10, -1), ConfigError);

    Rng rng(7);
    for (int i = 0; i < 1000; ++i) {
        Box b = random_box(rng, 30.0);
        Box round = cxcywh_to_xyxy(xyxy_to_cxcywh(b, 32, 24), 32, 24);
        CHECK(std::fabs(round.x1 - b.x1) < 1e-6);
        CHECK(std::fabs(round.y1 - b.y1) < 1e-6);
        CHECK(std::fabs(round.x2 - b.x2) < 1e-6);
        CHECK(std::fabs(round.y2 - b.y2) < 1e-6);
    }
}

namespace {

// Tiny single-level pyramid for RoI tests (stride-4 P2 only carries content;
// other levels are zero and never picked for small boxes).
FeaturePyramid tiny_pyramid(const Tensor& p2) {
    FeaturePyramid fpn;
    int c = p2.dim(0), h = p2.dim(1), w = p2.dim(2);
    fpn.levels = {p2, Tensor::zeros({c, h / 2, w / 2}), Tensor::zeros({c, h / 4, w / 4}),
                  Tensor::zeros({c, h / 8, w / 8})};
    fpn.strides = {4, 8, 16, 32};
    return fpn;
}

} // namespace

TEST_CASE("roi_align of a constant map is that constant") {
    Tape tp;
    Tensor p2 = Tensor::full({2, 16, 16}, 3.25);
    FeaturePyramid fpn = tiny_pyramid(p2);
    std::vector<Box> boxes = {{4, 4, 28, 20}, {0, 0, 64, 64}, {10, 10, 11, 11}};
    Tensor out = roi_align(tp, fpn, boxes, 7);
    REQUIRE(out.shape() == std::vector<int>{3, 2, 7, 7});
    for (double v : out.data()) CHECK(v == doctest::Approx(3.25).epsilon(1e-12));
}

TEST_CASE("degenerate box pools the single sample point under it") {
    Tape tp;
    Rng rng(5);
    Tensor p2 = random_tensor({1, 16, 16}, rng);
    FeaturePyramid fpn = tiny_pyramid(p2);
    // zero-area box at the center of feature cell (3,2): image coords of that
    // cell center are ((2+0.5)*4, (3+0.5)*4)
    double cx = (2 + 0.5) * 4, cy = (3 + 0.5) * 4;
    std::vector<Box> boxes = {{cx, cy, cx, cy}};
    Tensor out = roi_align(tp, fpn, boxes, 1);
    CHECK(out.data()[0] == doctest::Approx(p2.at({0, 3, 2})).epsilon(1e-12));
}

TEST_CASE("empty box list yields an empty tensor") {
    Tape tp;
    Tensor p2 = Tensor::full({2, 8, 8}, 1.0);
    FeaturePyramid fpn = tiny_pyramid(p2);
    Tensor out = roi_align(tp, fpn, std::vector<Box>{}, 7);
    CHECK(out.shape() == std::vector<int>{0, 2, 7, 7});
    CHECK(out.numel() == 0);
}

TEST_CASE("roi level pick follows the scale rule") {
    CHECK(roi_level(224, 224) == 4);
    CHECK(roi_level(448, 448) == 5);
    CHECK(roi_level(112, 112) == 3);
    CHECK(roi_level(1000, 1000) == 5);  // clamped
    CHECK(roi_level(4, 4) == 2);        // clamped
}

TEST_CASE("roi_align gradient w.r.t. box coords matches finite differences") {
    Rng rng(11);
    Tensor p2 = random_tensor({2, 16, 16}, rng);
    FeaturePyramid fpn = tiny_pyramid(p2);
    Tensor boxes = Tensor::from_data({2, 4}, {5.3, 6.1, 27.8, 22.4,
                                              10.7, 3.9, 40.2, 50.6});
    double err = gradient_check(
        [&](Tape& t, const Tensor& b) {
            Rng rr(12);
            Tensor pooled = roi_align(t, fpn, b, 3);
            std::vector<double> w(std::size_t(pooled.numel()));
            for (double& v : w) v = rr.uniform(-1, 1);
            return t.sum(t.mul(pooled, Tensor::from_data(pooled.shape(), std::move(w))));
        },
        boxes, 1e-5);
    CHECK(err < 1e-4);
}

TEST_CASE("roi_align gradient w.r.t. features matches finite differences") {
    Rng rng(13);
    Tensor p2 = random_tensor({1, 8, 8}, rng);
    Tensor boxes = Tensor::from_data({1, 4}, {3.0, 2.0, 21.0, 17.0});
    double err = gradient_check(
        [&](Tape& t, const Tensor& f) {
            FeaturePyramid fpn = tiny_pyramid(f);
            return t.sum(roi_align(t, fpn, boxes, 3));
        },
        p2, 1e-5);
    CHECK(err < 1e-6);
}

TEST_CASE("roi_align is consistent under whole-cell translation") {
    Rng rng(17);
    // Content and box both shift by one stride-4 cell; pooled values must
    // be unchanged (away from borders).
    int H = 16, W = 16;
    std::vector<double> base(std::size_t(H) * W);
    for (double& v : base) v = rng.uniform(0, 1);
    std::vector<double> shifted(std::size_t(H) * W, 0.0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W - 1; ++x)
            shifted[std::size_t(y) * W + x + 1] = base[std::size_t(y) * W + x];

    Tape tp;
    FeaturePyramid f1 = tiny_pyramid(Tensor::from_data({1, H, W}, base));
    FeaturePyramid f2 = tiny_pyramid(Tensor::from_data({1, H, W}, shifted));
    std::vector<Box> b1 = {{12, 12, 36, 36}};
    std::vector<Box> b2 = {{16, 12, 40, 36}};  // +4px = one cell at stride 4
    Tensor o1 = roi_align(tp, f1, b1, 5);
    Tensor o2 = roi_align(tp, f2, b2, 5);
    for (std::int64_t i = 0; i < o1.numel(); ++i)
        CHECK(o2.data()[std::size_t(i)] ==
              doctest::Approx(o1.data()[std::size_t(i)]).epsilon(1e-5));
}
