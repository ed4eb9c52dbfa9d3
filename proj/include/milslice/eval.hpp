#pragma once
// Classification metrics, ROC analysis, section probability profiles and
// CAM-derived lesion boxes with localisation scoring.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "milslice/core_model.hpp"
#include "milslice/data.hpp"
#include "milslice/model.hpp"

namespace milslice {

struct ConfusionCounts {
    long tp = 0, fp = 0, tn = 0, fn = 0;
    long total() const { return tp + fp + tn + fn; }
};

/// Rates are std::nullopt when their denominator is zero.
struct MetricsReport {
    ConfusionCounts counts;
    std::optional<double> accuracy;
    std::optional<double> precision;
    std::optional<double> sensitivity;
    std::optional<double> specificity;
    std::optional<double> f1;
    std::optional<double> auc;  // nullopt when only one class is present
};

/// Predicted positive iff probability >= threshold. Throws ValidationError
/// for mismatched lengths or non-binary labels.
MetricsReport compute_metrics(std::span<const double> predictions, std::span<const int> labels,
                              double threshold = 0.5);

struct RocPoint {
    double fpr = 0.0;
    double tpr = 0.0;
};

struct RocCurve {
    double auc = 0.0;
    std::vector<RocPoint> points;  // from (0,0) to (1,1), one point per distinct threshold
};

/// Trapezoidal ROC area; ties between a positive and a negative count 0.5.
/// Throws ValidationError when either class is missing.
RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels);

struct SectionProfileEntry {
    int section = 0;
    double positive = 0.0;  // P(1 | S_i)
    double negative = 0.0;  // P(0 | S_i)
};

using SectionProfile = std::vector<SectionProfileEntry>;

/// Section probabilities of an already preprocessed volume, taken from the
/// same aggregation path used to form the patient probability.
SectionProfile section_profile(std::span<const Grid> slices, const Model& model,
                               int section_length, int top_k);
SectionProfile section_profile(const VolumeInference& inference);

struct LesionBox {
    int class_index = 1;
    Box box;
    double peak = 0.0;
};

/// Threshold at rel_threshold * max(map) (only when max > 0), 4-connected
/// components, one tight box per component, sorted by peak descending.
/// Boxes are in the map's own pixel grid.
std::vector<LesionBox> cam_to_boxes(const ActivationMap& map, double rel_threshold = 0.5);

/// Bilinear upsampling of an activation map to slice resolution with
/// pixel-centre alignment.
ActivationMap upsample_map(const ActivationMap& map, int rows, int cols);

/// Same, but each map cell is placed at its receptive-field centre on the
/// backbone input, which undoes the shift of strided padded convolutions.
ActivationMap upsample_map(const ActivationMap& map, int rows, int cols, const Backbone& backbone);

double box_iou(const Box& a, const Box& b);

struct LocalizationScore {
    double mean_iou = 0.0;
    double hit_rate = 0.0;
    int matched = 0;  // number of ground-truth boxes scored
};

/// For every ground-truth box, IoU with the best predicted box; a hit is
/// IoU >= hit_iou. Empty ground truth yields zero counts.
LocalizationScore localization_score(std::span<const LesionBox> boxes,
                                     std::span<const Box> ground_truth, double hit_iou = 0.3);

// ---------------------------------------------------------------------------
// Dataset evaluation

struct EvalOptions {
    int section_length = 16;
    int top_k = 8;
    double threshold = 0.5;
    double box_rel_threshold = 0.8;  // CAM cut relative to its peak when boxes are scored
    double hit_iou = 0.3;
    bool localization = true;
};

struct PatientResult {
    std::string patient_id;
    std::string domain_tag;
    int label = 0;
    double positive_probability = 0.0;   // P(1 | P)
    std::vector<double> slice_probability;       // sigma(s_1)
    std::vector<double> slice_noisy_probability; // SNCM P(z_1 = 1 | I)
    SectionProfile profile;
};

struct EvaluationReport {
    MetricsReport patient;
    MetricsReport image;            // sigma(s_1) vs ground-truth lesion flags
    MetricsReport image_noisy;      // SNCM posterior vs ground-truth lesion flags
    MetricsReport image_patient_label;  // sigma(s_1) vs broadcast patient label
    std::optional<LocalizationScore> localization;  // on true-positive lesioned slices
    std::optional<double> false_boxes_per_negative_slice;
    std::vector<PatientResult> patients;

    std::string to_json() const;
    std::string to_table() const;
};

/// Runs inference over `volumes`. Image-level metrics against lesion flags
/// and localisation need `truth`; without it those blocks fall back to the
/// broadcast patient label and are left empty respectively.
EvaluationReport evaluate(const Model& model, std::span<const Volume> volumes,
                          const GroundTruth* truth, const EvalOptions& options,
                          const SegmentationHook& hook = identity_segmentation());

/// Boxes for one slice: extracted from the upsampled class-1 map only when
/// the slice is predicted positive (sigma(s_1) >= threshold). Without a
/// backbone the map is upsampled with pixel-centre alignment.
std::vector<LesionBox> slice_boxes(const FeatureMaps& features, const ClassifierHead& head,
                                   const SliceClassScores& scores, int rows, int cols,
                                   double threshold, double rel_threshold,
                                   const Backbone* backbone = nullptr);

}  // namespace milslice
