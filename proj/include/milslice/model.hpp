#pragma once
// Full network: shared backbone, 1x1 classifier head and transition
// parameters, with a per-volume forward/backward that wires the section
// aggregation and noise-correction losses together.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "milslice/backbone.hpp"
#include "milslice/core_model.hpp"
#include "milslice/sam.hpp"
#include "milslice/sncm.hpp"

namespace milslice {

struct ParamRef {
    std::string name;
    std::vector<int> shape;
    std::span<double> values;
};

struct ModelGradients {
    BackboneGradients backbone;
    Eigen::MatrixXd head;
    RowMatrix noise_weights;
    Eigen::VectorXd noise_biases;

    void add(const ModelGradients& other);
    void scale(double factor);
};

class Model {
public:
    explicit Model(BackboneSpec spec);

    /// Xavier-uniform backbone and head weights; transition parameters start
    /// near the identity transition.
    void initialize(std::uint64_t seed);

    Backbone backbone;
    ClassifierHead head;
    NoiseParams noise;

    int feature_planes() const { return backbone.feature_planes(); }

    /// Trainable arrays in a fixed order (also the checkpoint order).
    std::vector<ParamRef> parameters();
    std::vector<ParamRef> gradient_refs(ModelGradients& grads) const;
    ModelGradients zero_gradients() const;
};

enum class TrainMode {
    kWeak,          // patient labels through section aggregation (+ noise correction)
    kSliceLabels,   // plain backbone: patient label broadcast to every slice
};

struct LossOptions {
    int section_length = 16;
    int top_k = 8;
    double lambda = 1e-3;
    bool enable_cls_loss = true;
    bool enable_noisy_loss = true;
    TrainMode mode = TrainMode::kWeak;
    double dropout_rate = 0.7;
    bool training = true;
    std::uint64_t dropout_seed = 0;
};

struct LossBreakdown {
    double total = 0.0;
    double cls = 0.0;
    double noisy = 0.0;
};

/// L = L_cls + lambda * L_noisy with disabled terms contributing exactly 0.
/// Throws std::runtime_error on a non-finite enabled component.
double total_loss(double cls, double noisy, double lambda, bool enable_cls = true,
                  bool enable_noisy = true);

/// Forward + backward for one patient volume. `grads` may be null for a
/// loss-only evaluation; otherwise gradients are accumulated into it.
LossBreakdown volume_loss(const Model& model, std::span<const Grid> slices,
                          const OneHotLabel& label, const LossOptions& options,
                          ModelGradients* grads);

/// Everything the model says about one volume at evaluation time.
struct VolumeInference {
    std::vector<FeatureMaps> features;          // only when requested
    std::vector<SliceClassScores> scores;
    std::vector<NoisyPosterior> noisy;           // SNCM posteriors, diagnostics
    std::vector<std::array<TransitionMatrix, kNumClasses>> transitions;
    SectionPartition partition;
    std::vector<SectionProbability> sections;
    PatientProbability patient;

    /// sigma(s_1) per slice.
    std::vector<double> slice_positive_probability() const;
};

VolumeInference infer(const Model& model, std::span<const Grid> slices, int section_length,
                      int top_k, bool keep_features = false);

}  // namespace milslice
