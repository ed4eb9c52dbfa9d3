#include "milslice/core_model.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace milslice {

FeatureMaps::FeatureMaps(int planes, int height, int width, int slice_index)
    : slice_index(slice_index), planes_(planes), height_(height), width_(width),
      data_(static_cast<size_t>(planes) * height * width, 0.0) {
    if (planes < 1 || height < 1 || width < 1)
        throw ShapeError("feature maps need K >= 1 and non-empty planes");
}

std::span<double> FeatureMaps::plane(int k) {
    return std::span<double>(data_).subspan(static_cast<size_t>(k) * plane_size(), plane_size());
}

std::span<const double> FeatureMaps::plane(int k) const {
    return std::span<const double>(data_).subspan(static_cast<size_t>(k) * plane_size(),
                                                  plane_size());
}

double FeatureMaps::plane_mean(int k) const {
    const auto p = plane(k);
    return std::accumulate(p.begin(), p.end(), 0.0) / static_cast<double>(p.size());
}

namespace {

void check_head(const FeatureMaps& fm, const Eigen::MatrixXd& w) {
    if (w.rows() != fm.planes())
        throw ShapeError("head expects " + std::to_string(w.rows()) + " planes, got " +
                         std::to_string(fm.planes()));
    if (w.cols() != kNumClasses) throw ShapeError("head must have exactly 2 class columns");
}

}  // namespace

SliceClassScores class_scores(const FeatureMaps& fm, const ClassifierHead& head) {
    check_head(fm, head.weights);
    // 1x1 conv at every location, then the spatial mean.
    SliceClassScores out;
    const int hw = fm.plane_size();
    for (int c = 0; c < kNumClasses; ++c) {
        double total = 0.0;
        for (int p = 0; p < hw; ++p) {
            double a = 0.0;
            for (int k = 0; k < fm.planes(); ++k) a += head.weights(k, c) * fm.plane(k)[p];
            total += a;
        }
        out[c] = total / hw;
    }
    return out;
}

SliceClassScores fc_class_scores(const FeatureMaps& fm, const Eigen::MatrixXd& fc_weights) {
    check_head(fm, fc_weights);
    SliceClassScores out;
    for (int k = 0; k < fm.planes(); ++k) {
        const double m = fm.plane_mean(k);
        for (int c = 0; c < kNumClasses; ++c) out[c] += fc_weights(k, c) * m;
    }
    return out;
}

ActivationMap activation_map(const FeatureMaps& fm, const ClassifierHead& head, int class_index) {
    check_head(fm, head.weights);
    if (class_index < 0 || class_index >= kNumClasses)
        throw std::out_of_range("class index " + std::to_string(class_index) + " out of range");
    ActivationMap out{class_index, Grid(fm.height(), fm.width())};
    auto values = out.map.values();
    for (int k = 0; k < fm.planes(); ++k) {
        const double w = head.weights(k, class_index);
        const auto plane = fm.plane(k);
        for (size_t p = 0; p < values.size(); ++p) values[p] += w * plane[p];
    }
    return out;
}

Embedding embed(const FeatureMaps& fm, double dropout_rate, bool training, std::uint64_t seed) {
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
        throw ValidationError("dropout rate must be in [0, 1)");
    Embedding e;
    e.values.resize(fm.planes());
    e.scale = Eigen::VectorXd::Ones(fm.planes());
    for (int k = 0; k < fm.planes(); ++k) e.values[k] = fm.plane_mean(k);
    if (training && dropout_rate > 0.0) {
        Random rng(seed);
        const double keep_scale = 1.0 / (1.0 - dropout_rate);
        for (int k = 0; k < fm.planes(); ++k) e.scale[k] = rng.bernoulli(dropout_rate) ? 0.0 : keep_scale;
        e.values = e.values.cwiseProduct(e.scale);
    }
    return e;
}

HeadGradients class_scores_backward(const FeatureMaps& fm, const ClassifierHead& head,
                                    const SliceClassScores& d_scores) {
    check_head(fm, head.weights);
    HeadGradients g{FeatureMaps(fm.planes(), fm.height(), fm.width(), fm.slice_index),
                    Eigen::MatrixXd::Zero(fm.planes(), kNumClasses)};
    const double inv_hw = 1.0 / fm.plane_size();
    for (int k = 0; k < fm.planes(); ++k) {
        const double m = fm.plane_mean(k);
        double d_plane = 0.0;
        for (int c = 0; c < kNumClasses; ++c) {
            g.d_weights(k, c) = m * d_scores[c];
            d_plane += head.weights(k, c) * d_scores[c];
        }
        for (double& v : g.d_features.plane(k)) v = d_plane * inv_hw;
    }
    return g;
}

}  // namespace milslice
