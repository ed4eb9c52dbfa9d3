#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "milslice/eval.hpp"
#include "test_support.hpp"

using namespace milslice;

namespace {

double pair_count_auc(const std::vector<double>& s, const std::vector<int>& y) {
    double wins = 0;
    long pairs = 0;
    for (size_t i = 0; i < s.size(); ++i)
        for (size_t j = 0; j < s.size(); ++j)
            if (y[i] == 1 && y[j] == 0) {
                ++pairs;
                wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
            }
    return wins / static_cast<double>(pairs);
}

// Union-find connected components over thresholded pixels, as tight boxes.
std::set<std::array<int, 4>> component_oracle(const Grid& g, double cut) {
    const int rows = g.rows(), cols = g.cols();
    std::vector<int> parent(g.size());
    for (size_t i = 0; i < parent.size(); ++i) parent[i] = static_cast<int>(i);
    auto find = [&](int i) {
        while (parent[static_cast<size_t>(i)] != i) i = parent[static_cast<size_t>(i)];
        return i;
    };
    auto on = [&](int r, int c) { return g(r, c) >= cut; };
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            if (!on(r, c)) continue;
            if (r + 1 < rows && on(r + 1, c)) parent[static_cast<size_t>(find(r * cols + c))] = find((r + 1) * cols + c);
            if (c + 1 < cols && on(r, c + 1)) parent[static_cast<size_t>(find(r * cols + c))] = find(r * cols + c + 1);
        }
    std::map<int, std::array<int, 4>> boxes;
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            if (!on(r, c)) continue;
            auto [it, fresh] = boxes.try_emplace(find(r * cols + c), std::array<int, 4>{c, r, c + 1, r + 1});
            auto& b = it->second;
            b = {std::min(b[0], c), std::min(b[1], r), std::max(b[2], c + 1), std::max(b[3], r + 1)};
        }
    std::set<std::array<int, 4>> out;
    for (const auto& [root, b] : boxes) out.insert(b);
    return out;
}

std::set<std::array<int, 4>> as_set(const std::vector<LesionBox>& boxes) {
    std::set<std::array<int, 4>> out;
    for (const auto& b : boxes) out.insert({b.box.x0, b.box.y0, b.box.x1, b.box.y1});
    return out;
}

}  // namespace

TEST_CASE("metrics from a known confusion matrix") {
    // TP=3, FP=1, TN=4, FN=2
    const std::vector<double> pred{0.9, 0.8, 0.7, 0.6, 0.1, 0.2, 0.3, 0.4, 0.2, 0.1};
    const std::vector<int> label{1, 1, 1, 0, 0, 0, 0, 0, 1, 1};
    const auto m = compute_metrics(pred, label);
    CHECK(m.counts.tp == 3);
    CHECK(m.counts.fp == 1);
    CHECK(m.counts.tn == 4);
    CHECK(m.counts.fn == 2);
    CHECK(*m.accuracy == doctest::Approx(0.7));
    CHECK(*m.precision == doctest::Approx(0.75));
    CHECK(*m.sensitivity == doctest::Approx(0.6));
    CHECK(*m.specificity == doctest::Approx(0.8));
    CHECK(*m.f1 == doctest::Approx(0.6667).epsilon(1e-4));

    const auto perfect = compute_metrics(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0});
    for (const auto& v : {perfect.accuracy, perfect.precision, perfect.sensitivity, perfect.specificity, perfect.f1, perfect.auc})
        CHECK(*v == 1.0);

    const auto negatives = compute_metrics(std::vector<double>{0.2, 0.7}, std::vector<int>{0, 0});
    CHECK_FALSE(negatives.sensitivity.has_value());
    CHECK_FALSE(negatives.auc.has_value());
    CHECK(*negatives.specificity == 0.5);

    CHECK_THROWS_AS(compute_metrics(std::vector<double>{0.1}, std::vector<int>{}), ValidationError);
    CHECK_THROWS_AS(compute_metrics(std::vector<double>{0.1}, std::vector<int>{2}), ValidationError);
}

TEST_CASE("metrics agree with a confusion-matrix oracle on random sets") {
    Random rng(1);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = rng.uniform_int(1, 60);
        const double threshold = rng.uniform(0.2, 0.8);
        std::vector<double> p;
        std::vector<int> y;
        long tp = 0, fp = 0, tn = 0, fn = 0;
        for (int i = 0; i < n; ++i) {
            p.push_back(rng.uniform_int(0, 10) / 10.0);
            y.push_back(rng.bernoulli(0.4) ? 1 : 0);
            const bool hit = p.back() >= threshold;
            (y.back() ? (hit ? tp : fn) : (hit ? fp : tn))++;
        }
        const auto m = compute_metrics(p, y, threshold);
        REQUIRE(m.counts.tp == tp);
        REQUIRE(m.counts.fp == fp);
        REQUIRE(m.counts.tn == tn);
        REQUIRE(m.counts.fn == fn);
        REQUIRE(*m.accuracy == static_cast<double>(tp + tn) / n);
        if (tp + fp) REQUIRE(*m.precision == static_cast<double>(tp) / (tp + fp));
        if (tp + fn) REQUIRE(*m.sensitivity == static_cast<double>(tp) / (tp + fn));
        if (tn + fp) REQUIRE(*m.specificity == static_cast<double>(tn) / (tn + fp));
        if (m.precision && m.sensitivity && *m.precision + *m.sensitivity > 0)
            REQUIRE(*m.f1 == doctest::Approx(2 * *m.precision * *m.sensitivity / (*m.precision + *m.sensitivity)));
        for (const auto& r : {m.accuracy, m.precision, m.sensitivity, m.specificity, m.f1})
            if (r) REQUIRE((*r >= 0.0 && *r <= 1.0));
    }
}

TEST_CASE("AUC examples") {
    CHECK(roc_auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}).auc == doctest::Approx(0.75));
    CHECK(roc_auc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}).auc == 1.0);
    CHECK(roc_auc(std::vector<double>{0.3, 0.3, 0.3, 0.3}, std::vector<int>{1, 0, 0, 1}).auc == 0.5);
    CHECK_THROWS_AS(roc_auc(std::vector<double>{0.3, 0.4}, std::vector<int>{1, 1}), ValidationError);
    const auto curve = roc_auc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1});
    CHECK(curve.points.front().fpr == 0.0);
    CHECK(curve.points.back().tpr == 1.0);
    CHECK(curve.points.back().fpr == 1.0);
}

TEST_CASE("AUC equals pair counting and ignores monotone transforms") {
    Random rng(2);
    for (int n = 2; n <= 200; ++n) {
        std::vector<double> s;
        std::vector<int> y;
        for (int i = 0; i < n; ++i) {
            s.push_back(rng.uniform_int(0, 20) / 4.0);
            y.push_back(i < 1 ? 0 : i < 2 ? 1 : rng.bernoulli(0.5));
        }
        const double auc = roc_auc(s, y).auc;
        REQUIRE(auc == pair_count_auc(s, y));
        std::vector<double> t;
        for (double v : s) t.push_back(std::exp(3 * v) - 7);
        REQUIRE(roc_auc(t, y).auc == doctest::Approx(auc).epsilon(1e-12));
    }
}

TEST_CASE("box IoU examples") {
    const Box a{0, 0, 4, 4};
    CHECK(box_iou(a, a) == 1.0);
    CHECK(box_iou(a, Box{5, 5, 8, 8}) == 0.0);
    CHECK(box_iou(a, Box{2, 0, 6, 4}) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("CAM boxes on simple maps") {
    ActivationMap map{1, Grid(10, 12)};
    CHECK(cam_to_boxes(map).empty());
    for (int r = 2; r < 5; ++r)
        for (int c = 3; c < 9; ++c) map.map(r, c) = 1.0;
    auto boxes = cam_to_boxes(map);
    REQUIRE(boxes.size() == 1);
    CHECK(boxes[0].box == Box{3, 2, 9, 5});

    map.map(8, 0) = 2.0;
    map.map(8, 1) = 1.5;
    boxes = cam_to_boxes(map);
    REQUIRE(boxes.size() == 2);
    CHECK(boxes[0].box == Box{0, 8, 2, 9});
    CHECK(boxes[0].peak == 2.0);

    ActivationMap negative{1, Grid(4, 4, -1.0)};
    CHECK(cam_to_boxes(negative).empty());
}

TEST_CASE("CAM boxes match a union-find oracle and ignore positive rescaling") {
    Random rng(3);
    for (int trial = 0; trial < 300; ++trial) {
        ActivationMap map{1, Grid(rng.uniform_int(1, 20), rng.uniform_int(1, 20))};
        for (double& v : map.map.values()) v = rng.uniform(-0.5, 1.0);
        const double rel = rng.uniform(0.2, 0.9);
        const auto boxes = cam_to_boxes(map, rel);
        if (map.map.max() > 0) {
            REQUIRE(as_set(boxes) == component_oracle(map.map, rel * map.map.max()));
            REQUIRE(boxes.size() == as_set(boxes).size());
        }
        for (size_t i = 1; i < boxes.size(); ++i) REQUIRE(boxes[i - 1].peak >= boxes[i].peak);
        for (const auto& b : boxes) {
            REQUIRE(b.box.x0 < b.box.x1);
            REQUIRE(b.box.y0 < b.box.y1);
            REQUIRE(b.box.x1 <= map.map.cols());
            REQUIRE(b.box.y1 <= map.map.rows());
        }
        ActivationMap scaled = map;
        const double alpha = rng.uniform(0.01, 100.0);
        for (double& v : scaled.map.values()) v *= alpha;
        REQUIRE(as_set(cam_to_boxes(scaled, rel)) == as_set(boxes));
    }
}

TEST_CASE("upsampling keeps a centred blob centred") {
    ActivationMap map{1, Grid(8, 8)};
    map.map(3, 3) = map.map(3, 4) = map.map(4, 3) = map.map(4, 4) = 1.0;
    const auto up = upsample_map(map, 40, 40);
    CHECK(up.map.rows() == 40);
    const auto boxes = cam_to_boxes(up, 0.5);
    REQUIRE(boxes.size() == 1);
    CHECK(boxes[0].box.x0 + boxes[0].box.x1 == 40);
    CHECK(boxes[0].box.y0 + boxes[0].box.y1 == 40);
}

TEST_CASE("backbone-aligned upsampling puts each cell on its receptive-field centre") {
    const Backbone tiny(BackboneSpec{"tiny", 0});
    CHECK(tiny.map_geometry().offset == 0.5);
    CHECK(tiny.map_geometry().stride == 32.0);

    const Backbone x4(BackboneSpec{"tiny-x4", 32});
    CHECK(x4.map_geometry().offset == 0.0);
    CHECK(x4.map_geometry().stride == 4.0);
    ActivationMap map{1, Grid(8, 8)};
    map.map(2, 5) = 1.0;
    // Cell (2, 5) is centred on input pixel (8, 20); the 3x3 stride-2 convs
    // centre output j on input 2j, not on the middle of its 2x2 footprint.
    const auto up = upsample_map(map, 32, 32, x4);
    CHECK(up.map(8, 20) == doctest::Approx(1.0));
    CHECK(up.map(8, 19) == doctest::Approx(0.75));
    CHECK(up.map(10, 20) == doctest::Approx(0.5));
    // At another slice size the peak follows the input-to-slice rescaling:
    // input pixel 20 lies on slice coordinate 20.5 * 40 / 32 - 0.5 = 25.125.
    const auto wide = upsample_map(map, 40, 40, x4);
    int best = 0;
    for (int c = 1; c < 40; ++c)
        if (wide.map(10, c) > wide.map(10, best)) best = c;
    CHECK(best == 25);
}

TEST_CASE("localization scoring") {
    const std::vector<LesionBox> pred{{1, Box{0, 0, 4, 4}, 1.0}, {1, Box{10, 10, 12, 12}, 0.5}};
    const std::vector<Box> gt{{0, 0, 4, 4}, {2, 0, 6, 4}, {20, 20, 22, 22}};
    const auto s = localization_score(pred, gt, 0.3);
    CHECK(s.matched == 3);
    CHECK(s.mean_iou == doctest::Approx((1.0 + 1.0 / 3.0 + 0.0) / 3.0));
    CHECK(s.hit_rate == doctest::Approx(2.0 / 3.0));
    CHECK(localization_score(pred, {}, 0.3).matched == 0);
}

TEST_CASE("boxes are only produced for slices predicted positive") {
    FeatureMaps fm(1, 4, 4);
    fm.plane(0)[5] = 1.0;
    ClassifierHead head{Eigen::MatrixXd::Zero(1, kNumClasses)};
    head.weights(0, 1) = 1.0;
    SliceClassScores low, high;
    low[1] = -1.0;
    high[1] = 1.0;
    CHECK(slice_boxes(fm, head, low, 16, 16, 0.5, 0.5).empty());
    CHECK(slice_boxes(fm, head, high, 16, 16, 0.5, 0.5).size() == 1);
}

TEST_CASE("section profile follows the aggregation path and section reordering") {
    register_test_backbones();
    Model model(BackboneSpec{"test-micro", 0});
    model.initialize(3);
    const auto slices = random_slices(12, model.backbone.input_size(), 4);
    const auto inf = infer(model, slices, 4, 2);
    const auto profile = section_profile(slices, model, 4, 2);
    REQUIRE(profile.size() == 3);
    for (size_t i = 0; i < profile.size(); ++i) {
        CHECK(profile[i].positive == inf.sections[i].probability[1]);
        CHECK(profile[i].negative == inf.sections[i].probability[0]);
    }
    // Swap the first and last blocks of four slices.
    std::vector<Grid> swapped(slices.begin() + 8, slices.end());
    swapped.insert(swapped.end(), slices.begin() + 4, slices.begin() + 8);
    swapped.insert(swapped.end(), slices.begin(), slices.begin() + 4);
    const auto moved = section_profile(swapped, model, 4, 2);
    CHECK(moved[0].positive == doctest::Approx(profile[2].positive).epsilon(1e-12));
    CHECK(moved[1].positive == doctest::Approx(profile[1].positive).epsilon(1e-12));
    CHECK(moved[2].positive == doctest::Approx(profile[0].positive).epsilon(1e-12));
}
