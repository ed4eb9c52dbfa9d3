#include "milslice/model.hpp"

#include <cmath>
#include <stdexcept>

namespace milslice {

void ModelGradients::add(const ModelGradients& other) {
    for (size_t i = 0; i < backbone.d_weights.size(); ++i) {
        backbone.d_weights[i] += other.backbone.d_weights[i];
        backbone.d_bias[i] += other.backbone.d_bias[i];
    }
    head += other.head;
    noise_weights += other.noise_weights;
    noise_biases += other.noise_biases;
}

void ModelGradients::scale(double factor) {
    for (size_t i = 0; i < backbone.d_weights.size(); ++i) {
        backbone.d_weights[i] *= factor;
        backbone.d_bias[i] *= factor;
    }
    head *= factor;
    noise_weights *= factor;
    noise_biases *= factor;
}

Model::Model(BackboneSpec spec) : backbone(std::move(spec)) {
    head.weights = Eigen::MatrixXd::Zero(backbone.feature_planes(), kNumClasses);
    noise = NoiseParams::identity_init(backbone.feature_planes());
}

void Model::initialize(std::uint64_t seed) {
    Random rng(seed);
    backbone.initialize_xavier(rng);
    const double bound = std::sqrt(6.0 / (backbone.feature_planes() + kNumClasses));
    for (Eigen::Index i = 0; i < head.weights.size(); ++i)
        head.weights.data()[i] = rng.uniform(-bound, bound);
    noise = NoiseParams::identity_init(backbone.feature_planes());
}

namespace {

template <typename M>
std::span<double> span_of(M& m) {
    return {m.data(), static_cast<size_t>(m.size())};
}

}  // namespace

// The head is stored column-major (K x C), so its flat buffer reads as C x K.
std::vector<ParamRef> Model::parameters() {
    std::vector<ParamRef> out;
    auto& layers = backbone.layers();
    for (size_t i = 0; i < layers.size(); ++i) {
        auto& l = layers[i];
        out.push_back({"backbone.conv" + std::to_string(i) + ".weight",
                       {l.out_channels, l.in_channels, l.kernel, l.kernel}, span_of(l.weights)});
        out.push_back({"backbone.conv" + std::to_string(i) + ".bias", {l.out_channels}, span_of(l.bias)});
    }
    out.push_back({"head.weight", {kNumClasses, feature_planes()}, span_of(head.weights)});
    out.push_back({"noise.weight", {kNumClasses * 4, feature_planes()}, span_of(noise.weights)});
    out.push_back({"noise.bias", {kNumClasses * 4}, span_of(noise.biases)});
    return out;
}

std::vector<ParamRef> Model::gradient_refs(ModelGradients& g) const {
    std::vector<ParamRef> out;
    const auto& layers = backbone.layers();
    for (size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        out.push_back({"backbone.conv" + std::to_string(i) + ".weight",
                       {l.out_channels, l.in_channels, l.kernel, l.kernel}, span_of(g.backbone.d_weights[i])});
        out.push_back({"backbone.conv" + std::to_string(i) + ".bias", {l.out_channels},
                       span_of(g.backbone.d_bias[i])});
    }
    out.push_back({"head.weight", {kNumClasses, feature_planes()}, span_of(g.head)});
    out.push_back({"noise.weight", {kNumClasses * 4, feature_planes()}, span_of(g.noise_weights)});
    out.push_back({"noise.bias", {kNumClasses * 4}, span_of(g.noise_biases)});
    return out;
}

ModelGradients Model::zero_gradients() const {
    ModelGradients g;
    g.backbone = backbone.zero_gradients();
    g.head = Eigen::MatrixXd::Zero(head.weights.rows(), head.weights.cols());
    g.noise_weights = RowMatrix::Zero(noise.weights.rows(), noise.weights.cols());
    g.noise_biases = Eigen::VectorXd::Zero(noise.biases.size());
    return g;
}

double total_loss(double cls, double noisy, double lambda, bool enable_cls, bool enable_noisy) {
    double total = 0.0;
    if (enable_cls) {
        if (!std::isfinite(cls)) throw std::runtime_error("non-finite classification loss");
        total += cls;
    }
    if (enable_noisy) {
        if (!std::isfinite(noisy)) throw std::runtime_error("non-finite noisy loss");
        total += lambda * noisy;
    }
    return total;
}

LossBreakdown volume_loss(const Model& model, std::span<const Grid> slices,
                          const OneHotLabel& label, const LossOptions& options,
                          ModelGradients* grads) {
    label.validate();
    const int n = static_cast<int>(slices.size());
    if (n == 0) throw ValidationError("empty volume");
    const auto& bb = model.backbone;
    Backbone::Trace trace;
    const RowMatrix features = bb.forward(slices, grads ? &trace : nullptr);
    const auto maps = bb.split(features, n);

    std::vector<SliceClassScores> scores;
    scores.reserve(static_cast<size_t>(n));
    for (const auto& fm : maps) scores.push_back(class_scores(fm, model.head));

    LossBreakdown out;
    std::vector<SliceClassScores> d_scores(static_cast<size_t>(n));
    std::vector<Eigen::VectorXd> d_embed;  // dL/d(plane means) via the embedding, per slice
    std::vector<Embedding> embeddings;

    if (options.mode == TrainMode::kSliceLabels) {
        // Patient label broadcast to every slice: per-slice cross-entropy, i.e.
        // the noisy loss with an identity transition.
        std::vector<NoisyPosterior> posteriors(static_cast<size_t>(n));
        for (int t = 0; t < n; ++t)
            for (int c = 0; c < kNumClasses; ++c) {
                const double p = sigmoid(scores[t][c]);
                posteriors[t][c] = {1.0 - p, p};
            }
        out.cls = noisy_loss(posteriors, label);
        out.total = total_loss(out.cls, 0.0, 0.0, true, false);
        if (grads) {
            const auto d = noisy_loss_backward(posteriors, label);
            for (int t = 0; t < n; ++t)
                for (int c = 0; c < kNumClasses; ++c) {
                    const double p = posteriors[t][c][1];
                    d_scores[t][c] = (d[t][c][1] - d[t][c][0]) * p * (1.0 - p);
                }
        }
    } else {
        if (options.enable_cls_loss) {
            const auto partition = partition_sections(n, options.section_length);
            std::vector<SectionProbability> sections;
            for (const auto& r : partition.sections)
                sections.push_back(section_probability(
                    std::span<const SliceClassScores>(scores).subspan(r.begin, r.size()), options.top_k));
            const auto patient = patient_probability(sections);
            out.cls = classification_loss(patient, label);
            if (grads) {
                const auto d_patient = classification_loss_backward(patient, label);
                const auto d_sections = patient_probability_backward(sections, d_patient);
                for (size_t s = 0; s < sections.size(); ++s) {
                    const auto& r = partition.sections[s];
                    const auto d = section_probability_backward(sections[s], r.size(), d_sections[s]);
                    for (int t = 0; t < r.size(); ++t)
                        for (int c = 0; c < kNumClasses; ++c) d_scores[r.begin + t][c] += d[t][c];
                }
            }
        }
        if (options.enable_noisy_loss) {
            std::vector<NoisyPosterior> posteriors(static_cast<size_t>(n));
            embeddings.reserve(static_cast<size_t>(n));
            for (int t = 0; t < n; ++t) {
                embeddings.push_back(embed(maps[t], options.dropout_rate, options.training,
                                           mix_seed(options.dropout_seed, static_cast<std::uint64_t>(t))));
                const auto truth = TruePosterior::from_scores(scores[t]);
                for (int c = 0; c < kNumClasses; ++c)
                    posteriors[t][c] = noisy_posterior(transition_matrix(embeddings[t], model.noise, c), truth, c);
            }
            out.noisy = noisy_loss(posteriors, label);
            if (grads && options.lambda != 0.0) {
                auto d = noisy_loss_backward(posteriors, label);
                d_embed.resize(static_cast<size_t>(n));
                for (int t = 0; t < n; ++t) {
                    for (auto& cls : d[t])
                        for (double& v : cls) v *= options.lambda;
                    const auto g = noisy_posterior_backward(embeddings[t], model.noise, scores[t], d[t]);
                    for (int c = 0; c < kNumClasses; ++c) d_scores[t][c] += g.d_scores[c];
                    grads->noise_weights += g.d_weights;
                    grads->noise_biases += g.d_biases;
                    d_embed[t] = g.d_embedding.cwiseProduct(embeddings[t].scale);
                }
            }
        }
        out.total = total_loss(out.cls, out.noisy, options.lambda, options.enable_cls_loss,
                               options.enable_noisy_loss);
    }

    if (!grads) return out;

    // Head and feature gradients. Both the class scores and the embedding are
    // linear in the plane means, so dL/dF is constant over each plane.
    const int k = bb.feature_planes();
    const int plane = bb.output_size() * bb.output_size();
    RowMatrix d_features(k, static_cast<Eigen::Index>(n) * plane);
    for (int t = 0; t < n; ++t) {
        const auto hg = class_scores_backward(maps[t], model.head, d_scores[t]);
        grads->head += hg.d_weights;
        for (int c = 0; c < k; ++c) {
            double d_plane = hg.d_features.plane(c)[0];
            if (!d_embed.empty()) d_plane += d_embed[t][c] / plane;
            d_features.row(c).segment(static_cast<Eigen::Index>(t) * plane, plane).setConstant(d_plane);
        }
    }
    bb.backward(trace, d_features, grads->backbone);
    return out;
}

std::vector<double> VolumeInference::slice_positive_probability() const {
    std::vector<double> out;
    out.reserve(scores.size());
    for (const auto& s : scores) out.push_back(sigmoid(s[1]));
    return out;
}

VolumeInference infer(const Model& model, std::span<const Grid> slices, int section_length,
                      int top_k, bool keep_features) {
    const int n = static_cast<int>(slices.size());
    if (n == 0) throw ValidationError("empty volume");
    VolumeInference out;
    const RowMatrix features = model.backbone.forward(slices);
    auto maps = model.backbone.split(features, n);
    for (const auto& fm : maps) {
        out.scores.push_back(class_scores(fm, model.head));
        const auto e = embed(fm, 0.0, false, 0);
        const auto truth = TruePosterior::from_scores(out.scores.back());
        std::array<TransitionMatrix, kNumClasses> q;
        NoisyPosterior z;
        for (int c = 0; c < kNumClasses; ++c) {
            q[c] = transition_matrix(e, model.noise, c);
            z[c] = noisy_posterior(q[c], truth, c);
        }
        out.transitions.push_back(q);
        out.noisy.push_back(z);
    }
    out.partition = partition_sections(n, section_length);
    for (const auto& r : out.partition.sections)
        out.sections.push_back(section_probability(
            std::span<const SliceClassScores>(out.scores).subspan(r.begin, r.size()), top_k));
    out.patient = patient_probability(out.sections);
    if (keep_features) out.features = std::move(maps);
    return out;
}

}  // namespace milslice
