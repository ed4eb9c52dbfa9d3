#pragma once
// End-to-end optimisation of backbone, head and transition parameters under
// L = L_cls + lambda * L_noisy, plus the ablation and sweep drivers.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "milslice/data.hpp"
#include "milslice/eval.hpp"
#include "milslice/model.hpp"

namespace milslice {

struct TrainerConfig {
    double lambda = 1e-3;
    double learning_rate = 1e-3;
    int section_length = 16;
    int top_k = 8;
    double dropout_rate = 0.7;
    double weight_decay = 1e-5;
    int batch_size = 10;
    int max_iterations = 4000;
    std::uint64_t seed = 0;
    bool enable_cls_loss = true;
    bool enable_noisy_loss = true;
    TrainMode mode = TrainMode::kWeak;
    BackboneSpec backbone;
    AugmentationConfig augmentation;

    int checkpoint_every = 0;                // 0 disables periodic checkpoints
    std::filesystem::path checkpoint_path;   // written at the cadence and at the end
    std::filesystem::path log_path;          // JSON lines, one record per iteration

    bool early_stop = false;                 // stop on a validation patient-accuracy plateau
                                             // (needs validation volumes)
    int eval_every = 50;
    int patience = 10;

    /// Throws ValidationError when an invariant is violated.
    void validate() const;
    /// Input size actually used by the backbone.
    int input_size() const;

    std::string to_json() const;
    static TrainerConfig from_json(const std::string& text);
};

/// Adam moments, one vector per parameter array (model order).
struct AdamState {
    std::vector<Eigen::VectorXd> first;
    std::vector<Eigen::VectorXd> second;
    long step = 0;
};

struct TrainState {
    Model model;
    AdamState optimizer;
    int iteration = 0;
    double running_loss = 0.0;  // exponential moving average, factor 0.9
};

struct IterationRecord {
    int iteration = 0;
    double loss = 0.0;
    double cls = 0.0;
    double noisy = 0.0;
    double wall_time = 0.0;
};

struct TrainResult {
    TrainState state;
    std::vector<IterationRecord> history;
    bool early_stopped = false;
};

struct TrainingDiverged : std::runtime_error {
    TrainingDiverged(const std::string& what, TrainState last_good)
        : std::runtime_error(what), last_good(std::move(last_good)) {}
    TrainState last_good;
};

/// One decoupled-weight-decay Adam step (betas 0.9/0.999, eps 1e-8):
/// theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta).
void adam_step(Model& model, AdamState& state, ModelGradients& grads, double learning_rate,
               double weight_decay);

struct TrainOptions {
    std::optional<TrainState> resume_from;
    std::span<const Volume> validation;  // for early stopping
    std::function<void(const IterationRecord&)> on_iteration;
    SegmentationHook hook = identity_segmentation();
};

/// Deterministic given config.seed: batch order, augmentation and dropout
/// streams are all derived from the seed and the iteration number, so a run
/// resumed from a checkpoint continues bit-identically. Throws
/// TrainingDiverged (carrying the last finite state) on a non-finite loss.
TrainResult train(std::span<const Volume> dataset, const TrainerConfig& config,
                  const TrainOptions& options = {});

/// Loss and gradient averaged over a list of patients with the given
/// iteration's augmentation seeds (exposed for tests).
LossBreakdown batch_gradients(const Model& model, std::span<const Volume* const> batch,
                              const TrainerConfig& config, int iteration,
                              ModelGradients& grads, const SegmentationHook& hook);

/// Patients used by `iteration`: consecutive slices of per-epoch seeded
/// permutations of the dataset indices.
std::vector<int> batch_indices(int dataset_size, int batch_size, int iteration,
                               std::uint64_t seed);

void save_checkpoint(const std::filesystem::path& path, const TrainState& state,
                     const TrainerConfig& config);

struct Checkpoint {
    TrainerConfig config;
    TrainState state;
};

Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Ablation and sweeps

struct ExperimentRow {
    std::string name;
    std::string description;
    TrainerConfig config;
    EvaluationReport report;
    double final_loss = 0.0;

    double patient_accuracy() const;
    double image_accuracy() const;
};

/// The four loss configurations: 1 plain backbone on broadcast slice labels,
/// 2 L_cls only, 3 L_noisy only, 4 both.
std::vector<TrainerConfig> ablation_configs(const TrainerConfig& base);

std::vector<ExperimentRow> ablation_suite(std::span<const Volume> train_set,
                                          std::span<const Volume> test_set,
                                          const GroundTruth* truth, const TrainerConfig& base,
                                          const EvalOptions& eval_options);

enum class SweepParameter { kLambda, kTopK };

/// Values are deduplicated (first occurrence kept); `duplicates` receives how
/// many were dropped.
std::vector<ExperimentRow> sweep(std::span<const Volume> train_set,
                                 std::span<const Volume> test_set, const GroundTruth* truth,
                                 const TrainerConfig& base, const EvalOptions& eval_options,
                                 SweepParameter parameter, std::vector<double> values,
                                 int* duplicates = nullptr);

std::string experiments_to_json(std::span<const ExperimentRow> rows);
std::string experiments_to_table(std::span<const ExperimentRow> rows);

EvalOptions eval_options_for(const TrainerConfig& config);

}  // namespace milslice
