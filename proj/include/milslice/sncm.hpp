#pragma once
// Slice noise correction: an instance-dependent 2x2 transition per class from
// the true slice label y_c to the noisy (patient-propagated) label z_c,
// Q^c_ij = P(z_c = i | y_c = j, I), normalised over i for each column j.

#include <array>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "milslice/common.hpp"
#include "milslice/core_model.hpp"

namespace milslice {

/// Affine transition-score parameters T^c_ij = w^c_ij . phi + b^c_ij.
/// Row r = c*4 + i*2 + j of `weights` holds w^c_ij.
struct NoiseParams {
    RowMatrix weights;        // (kNumClasses * 4) x K
    Eigen::VectorXd biases;   // kNumClasses * 4

    static int row(int c, int i, int j) { return c * 4 + i * 2 + j; }

    /// Zero weights, b_ii = diagonal_bias, b_ij = 0 (Q close to identity).
    static NoiseParams identity_init(int embedding_size, double diagonal_bias = 2.0);

    int embedding_size() const { return static_cast<int>(weights.cols()); }
};

struct TransitionMatrix {
    Eigen::Matrix2d q;       // q(i, j) = P(z = i | y = j)
    Eigen::Matrix2d scores;  // T_ij before the column softmax
};

/// P(y_c = 1 | I) = sigma(s_c) per class.
struct TruePosterior {
    std::array<double, kNumClasses> positive{};

    static TruePosterior from_scores(const SliceClassScores& s);
};

/// P(z_c = i | I) for i in {0, 1}, per class.
using NoisyPosterior = std::array<std::array<double, 2>, kNumClasses>;

TransitionMatrix transition_matrix(const Embedding& e, const NoiseParams& params, int class_index);

/// P(z = i) = sum_j Q_ij P(y = j) for one class.
std::array<double, 2> noisy_posterior(const TransitionMatrix& q, const TruePosterior& p,
                                      int class_index);

/// -(1/N) sum_slices sum_c [y_c log P(z_c=1) + (1-y_c) log P(z_c=0)], with
/// posteriors clamped to [eps, 1 - eps]. Throws ValidationError when empty.
double noisy_loss(std::span<const NoisyPosterior> slices, const OneHotLabel& label);

/// dL/dP(z_c = i) per slice; zero where the clamp is active.
std::vector<NoisyPosterior> noisy_loss_backward(std::span<const NoisyPosterior> slices,
                                                const OneHotLabel& label);

/// Gradients of one slice's noisy posterior w.r.t. its inputs.
struct TransitionGradients {
    SliceClassScores d_scores;   // through P(y) = sigma(s)
    Eigen::VectorXd d_embedding;
    RowMatrix d_weights;         // same shape as NoiseParams::weights
    Eigen::VectorXd d_biases;
};

/// Back-propagates dL/dP(z_c = i) of one slice through the noisy posterior,
/// the transition softmax and P(y) = sigma(s).
TransitionGradients noisy_posterior_backward(const Embedding& e, const NoiseParams& params,
                                             const SliceClassScores& scores,
                                             const NoisyPosterior& d_posterior);

}  // namespace milslice
