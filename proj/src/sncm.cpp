#include "milslice/sncm.hpp"

#include <algorithm>
#include <cmath>

namespace milslice {

NoiseParams NoiseParams::identity_init(int embedding_size, double diagonal_bias) {
    NoiseParams p;
    p.weights = RowMatrix::Zero(kNumClasses * 4, embedding_size);
    p.biases = Eigen::VectorXd::Zero(kNumClasses * 4);
    for (int c = 0; c < kNumClasses; ++c)
        for (int i = 0; i < 2; ++i) p.biases[row(c, i, i)] = diagonal_bias;
    return p;
}

TruePosterior TruePosterior::from_scores(const SliceClassScores& s) {
    TruePosterior p;
    for (int c = 0; c < kNumClasses; ++c) p.positive[c] = sigmoid(s[c]);
    return p;
}

TransitionMatrix transition_matrix(const Embedding& e, const NoiseParams& params, int class_index) {
    if (e.values.size() != params.weights.cols())
        throw ShapeError("embedding length " + std::to_string(e.values.size()) +
                         " does not match transition parameters (" +
                         std::to_string(params.weights.cols()) + ")");
    if (class_index < 0 || class_index >= kNumClasses)
        throw std::out_of_range("class index out of range");
    TransitionMatrix t;
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j) {
            const int r = NoiseParams::row(class_index, i, j);
            t.scores(i, j) = params.weights.row(r).dot(e.values) + params.biases[r];
        }
    // Softmax over i for each true-label column j.
    for (int j = 0; j < 2; ++j) {
        const double m = std::max(t.scores(0, j), t.scores(1, j));
        const double e0 = std::exp(t.scores(0, j) - m);
        const double e1 = std::exp(t.scores(1, j) - m);
        t.q(0, j) = e0 / (e0 + e1);
        t.q(1, j) = e1 / (e0 + e1);
    }
    return t;
}

std::array<double, 2> noisy_posterior(const TransitionMatrix& q, const TruePosterior& p,
                                      int class_index) {
    const double py1 = p.positive[static_cast<size_t>(class_index)];
    const double py0 = 1.0 - py1;
    return {q.q(0, 0) * py0 + q.q(0, 1) * py1, q.q(1, 0) * py0 + q.q(1, 1) * py1};
}

namespace {

double clamp_prob(double p) { return std::clamp(p, kProbEpsilon, 1.0 - kProbEpsilon); }
bool clamped(double p) { return p < kProbEpsilon || p > 1.0 - kProbEpsilon; }

}  // namespace

double noisy_loss(std::span<const NoisyPosterior> slices, const OneHotLabel& label) {
    label.validate();
    if (slices.empty()) throw ValidationError("noisy loss needs at least one slice");
    double total = 0.0;
    for (const auto& s : slices)
        for (int c = 0; c < kNumClasses; ++c) {
            const double y = label.y[c];
            total += y * std::log(clamp_prob(s[c][1])) + (1.0 - y) * std::log(clamp_prob(s[c][0]));
        }
    return -total / static_cast<double>(slices.size());
}

std::vector<NoisyPosterior> noisy_loss_backward(std::span<const NoisyPosterior> slices,
                                                const OneHotLabel& label) {
    label.validate();
    if (slices.empty()) throw ValidationError("noisy loss needs at least one slice");
    const double inv_n = 1.0 / static_cast<double>(slices.size());
    std::vector<NoisyPosterior> d(slices.size());
    for (size_t t = 0; t < slices.size(); ++t)
        for (int c = 0; c < kNumClasses; ++c) {
            const double y = label.y[c];
            const auto& s = slices[t][c];
            d[t][c][1] = clamped(s[1]) ? 0.0 : -y * inv_n / s[1];
            d[t][c][0] = clamped(s[0]) ? 0.0 : -(1.0 - y) * inv_n / s[0];
        }
    return d;
}

TransitionGradients noisy_posterior_backward(const Embedding& e, const NoiseParams& params,
                                             const SliceClassScores& scores,
                                             const NoisyPosterior& d_posterior) {
    TransitionGradients g;
    g.d_embedding = Eigen::VectorXd::Zero(e.values.size());
    g.d_weights = RowMatrix::Zero(params.weights.rows(), params.weights.cols());
    g.d_biases = Eigen::VectorXd::Zero(params.biases.size());
    for (int c = 0; c < kNumClasses; ++c) {
        const TransitionMatrix t = transition_matrix(e, params, c);
        const double py1 = sigmoid(scores[c]);
        const double py[2] = {1.0 - py1, py1};
        const auto& dz = d_posterior[c];

        double d_py[2] = {0.0, 0.0};
        Eigen::Matrix2d d_q;
        for (int i = 0; i < 2; ++i)
            for (int j = 0; j < 2; ++j) {
                d_q(i, j) = dz[i] * py[j];
                d_py[j] += dz[i] * t.q(i, j);
            }
        g.d_scores[c] = (d_py[1] - d_py[0]) * py1 * (1.0 - py1);

        for (int j = 0; j < 2; ++j) {
            const double inner = t.q(0, j) * d_q(0, j) + t.q(1, j) * d_q(1, j);
            for (int i = 0; i < 2; ++i) {
                const double d_t = t.q(i, j) * (d_q(i, j) - inner);
                const int r = NoiseParams::row(c, i, j);
                g.d_weights.row(r) += d_t * e.values.transpose();
                g.d_biases[r] += d_t;
                g.d_embedding += d_t * params.weights.row(r).transpose();
            }
        }
    }
    return g;
}

}  // namespace milslice
