#pragma once
// Explainable classification head: a bias-free 1x1 convolution applied to the
// backbone's last feature maps, followed by global average pooling. The same
// weights give the per-class activation map, so the CAM falls out of the
// forward pass instead of a separate post-processing step.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "milslice/common.hpp"

namespace milslice {

/// K spatial planes of size H x W produced by the backbone for one slice.
class FeatureMaps {
public:
    FeatureMaps() = default;
    FeatureMaps(int planes, int height, int width, int slice_index = 0);

    int planes() const noexcept { return planes_; }
    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    int plane_size() const noexcept { return height_ * width_; }

    std::span<double> plane(int k);
    std::span<const double> plane(int k) const;
    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    double plane_mean(int k) const;

    int slice_index = 0;

    friend bool operator==(const FeatureMaps&, const FeatureMaps&) = default;

private:
    int planes_ = 0;
    int height_ = 0;
    int width_ = 0;
    std::vector<double> data_;
};

/// W^conv, K x C. No bias, so the spatial mean of each CAM is exactly s_c.
struct ClassifierHead {
    Eigen::MatrixXd weights;  // K x kNumClasses

    int planes() const { return static_cast<int>(weights.rows()); }
};

struct SliceClassScores {
    std::array<double, kNumClasses> scores{};

    double operator[](int c) const { return scores[static_cast<size_t>(c)]; }
    double& operator[](int c) { return scores[static_cast<size_t>(c)]; }
};

struct ActivationMap {
    int class_index = 0;
    Grid map;
};

/// phi(I): dropout applied to the global-average-pooled features.
/// `scale` holds the per-feature dropout multiplier (0 or 1/(1-p) while
/// training, 1 at evaluation) and is kept for the backward pass.
struct Embedding {
    Eigen::VectorXd values;
    Eigen::VectorXd scale;
};

/// s_c = (1/HW) sum_ij sum_k W_kc F^k_ij  (1x1 conv, then GAP).
SliceClassScores class_scores(const FeatureMaps& fm, const ClassifierHead& head);

/// s_c = sum_k W_kc mean(F^k)  (GAP, then fully connected). Equivalence oracle
/// for class_scores.
SliceClassScores fc_class_scores(const FeatureMaps& fm, const Eigen::MatrixXd& fc_weights);

/// A_c = sum_k W_kc F^k. Throws std::out_of_range for a bad class index.
ActivationMap activation_map(const FeatureMaps& fm, const ClassifierHead& head, int class_index);

/// Global average pooling followed by inverted dropout. At evaluation
/// (training == false) the embedding is the plain per-plane mean: dropout
/// rescales kept activations by 1/(1-p) during training so no rescaling is
/// needed afterwards.
Embedding embed(const FeatureMaps& fm, double dropout_rate, bool training, std::uint64_t seed);

struct HeadGradients {
    FeatureMaps d_features;
    Eigen::MatrixXd d_weights;
};

/// Backward of class_scores given dL/ds.
HeadGradients class_scores_backward(const FeatureMaps& fm, const ClassifierHead& head,
                                    const SliceClassScores& d_scores);

}  // namespace milslice
