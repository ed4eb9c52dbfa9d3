#pragma once
// Patient manifests, slice image I/O, preprocessing/augmentation and the
// synthetic multi-domain volume generator.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "milslice/common.hpp"

namespace milslice {

inline constexpr int kManifestVersion = 1;
inline constexpr int kGroundTruthVersion = 1;
/// Stored 16-bit pixel = round(intensity * kIntensityScale), clamped to [0, 65535].
inline constexpr double kIntensityScale = 16384.0;

// ---------------------------------------------------------------------------
// Records and manifests

struct PatientRecord {
    std::string patient_id;
    int label = 0;
    std::vector<std::filesystem::path> slice_paths;  // absolute after loading
    std::string domain_tag;
};

/// JSON-lines manifest: a header line {"format": "milslice-manifest",
/// "version": 1} followed by one patient object per line with keys
/// patient_id, label, domain, slices (paths relative to the manifest).
/// Throws ParseError with the offending line for malformed input and
/// ValidationError for bad labels or missing slice files.
std::vector<PatientRecord> load_dataset(const std::filesystem::path& manifest_path);

void write_manifest(const std::filesystem::path& manifest_path,
                    std::span<const PatientRecord> records);

// ---------------------------------------------------------------------------
// Images

/// Binary 16-bit PGM (P5, maxval 65535). Values are intensities scaled by
/// kIntensityScale.
void write_pgm16(const std::filesystem::path& path, const Grid& intensities);
Grid read_pgm16(const std::filesystem::path& path);

/// Binary RGB PPM (P6) with 8-bit channels; channels in [0,1].
void write_ppm(const std::filesystem::path& path, const Grid& red, const Grid& green,
               const Grid& blue);

struct Volume {
    PatientRecord record;
    std::vector<Grid> slices;
};

Volume load_volume(const PatientRecord& record);
std::vector<Volume> load_volumes(std::span<const PatientRecord> records);

// ---------------------------------------------------------------------------
// Ground-truth sidecar

/// Half-open pixel box [x0, x1) x [y0, y1).
struct Box {
    int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
    int area() const { return (x1 - x0) * (y1 - y0); }
    friend bool operator==(const Box&, const Box&) = default;
};

struct SliceTruth {
    bool lesion = false;
    std::vector<Box> boxes;
};

struct PatientTruth {
    std::string patient_id;
    int label = 0;
    std::string domain_tag;
    std::vector<SliceTruth> slices;
};

struct GroundTruth {
    int version = kGroundTruthVersion;
    std::vector<PatientTruth> patients;

    /// Nullptr when unknown.
    const PatientTruth* find(const std::string& patient_id) const;

    void save(const std::filesystem::path& path) const;
    static GroundTruth load(const std::filesystem::path& path);
};

// ---------------------------------------------------------------------------
// Synthetic generator

/// Acquisition characteristics of one synthetic "hospital".
struct DomainSpec {
    std::string name = "A";
    int patients = 16;
    double intensity_offset = 0.0;
    double contrast_gain = 1.0;
    double noise_level = 0.03;
    double gamma = 1.0;  // histogram shape: v -> v^gamma before gain/offset
};

struct SyntheticSpec {
    int min_slices = 24;
    int max_slices = 48;
    int slice_size = 40;
    int min_lesions = 1;
    int max_lesions = 2;
    double min_lesion_radius = 3.0;
    double max_lesion_radius = 6.0;
    double min_lesion_intensity = 0.30;
    double max_lesion_intensity = 0.50;
    /// Each lesion occupies one contiguous run of slices with a length drawn
    /// from [min_run_length, max_run_length], placed uniformly in the volume.
    int min_run_length = 8;
    int max_run_length = 16;
    double positive_fraction = 0.5;
    std::vector<DomainSpec> domains{DomainSpec{}};
    std::uint64_t seed = 0;

    /// Throws ValidationError for an unsatisfiable spec.
    void validate() const;
};

struct RenderedPatient {
    PatientTruth truth;
    std::vector<Grid> slices;  // raw intensities
    std::vector<Grid> masks;   // 1 inside a lesion, 0 elsewhere
};

/// Deterministic render of patient `index` (domain-major order). Depends only
/// on the spec and the index.
RenderedPatient render_patient(const SyntheticSpec& spec, int index);

int total_patients(const SyntheticSpec& spec);

/// Built-in acquisition presets named A, B, C, ... Each has a distinct
/// intensity offset, contrast gain, noise level and histogram shape.
/// `patients` are spread as evenly as possible (earlier domains take the
/// remainder).
std::vector<DomainSpec> preset_domains(int count, int patients);

struct GeneratedDataset {
    std::filesystem::path manifest;
    std::filesystem::path ground_truth;
    std::vector<PatientRecord> records;
    GroundTruth truth;
};

/// Writes <dir>/manifest.jsonl, <dir>/ground_truth.json, <dir>/synthetic_spec.json
/// and one PGM per slice under <dir>/<patient_id>/. Creates `dir` if needed.
GeneratedDataset generate_synthetic(const SyntheticSpec& spec, const std::filesystem::path& dir);

std::string synthetic_spec_to_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json(const std::string& text);

// ---------------------------------------------------------------------------
// Preprocessing and augmentation

struct AugmentationConfig {
    bool enabled = true;
    double flip_probability = 0.5;
    double min_aspect = 3.0 / 4.0;
    double max_aspect = 4.0 / 3.0;
    double min_area = 0.90;
    double max_area = 1.00;
    int output_size = 224;
    double min_brightness = 0.9;
    double max_brightness = 1.1;
    double min_contrast = 0.9;
    double max_contrast = 1.1;
};

/// Augmentation draws shared by every slice of a volume (crop window and
/// flip) plus per-slice brightness/contrast factors.
struct VolumeAugmentation {
    double crop_x = 0, crop_y = 0, crop_w = 0, crop_h = 0;
    bool flip = false;
    std::vector<double> brightness;
    std::vector<double> contrast;
};

VolumeAugmentation sample_augmentation(int rows, int cols, int slice_count,
                                       const AugmentationConfig& config, std::uint64_t seed);

/// Crop, resize to output_size, optional horizontal flip, then brightness
/// (multiplicative) and contrast (around the slice mean). No normalisation.
Grid augment_slice(const Grid& slice, const AugmentationConfig& config,
                   const VolumeAugmentation& params, int slice_index);

/// Single-slice convenience wrapper around sample_augmentation + augment_slice.
Grid augment(const Grid& slice, const AugmentationConfig& config, std::uint64_t seed);

/// Bilinear resampling of the window (x, y, w, h) onto rows x cols, using
/// pixel-centre alignment (an identity window at the same size is exact).
Grid resample(const Grid& src, double x, double y, double w, double h, int rows, int cols);
Grid resize(const Grid& src, int rows, int cols);

/// Subtract the volume mean and divide by the volume standard deviation.
/// A constant volume is only centred (its std is zero).
void zscore_volume(std::span<Grid> slices);

/// Lung-segmentation seam. The default is the identity; an external mask
/// directory can be plugged in with mask_directory_hook.
using SegmentationHook = std::function<void(const PatientRecord&, std::vector<Grid>&)>;
SegmentationHook identity_segmentation();
/// Multiplies each slice by <dir>/<patient_id>/<slice file name> (a PGM mask,
/// nonzero = keep). Slices without a mask file are left untouched.
SegmentationHook mask_directory_hook(std::filesystem::path dir);

/// Training-time pipeline: segmentation hook, augmentation with volume-shared
/// crop/flip, then per-volume z-score.
std::vector<Grid> preprocess_train(const Volume& volume, const AugmentationConfig& config,
                                   std::uint64_t seed,
                                   const SegmentationHook& hook = identity_segmentation());

/// Evaluation pipeline: segmentation hook, resize to output_size, z-score.
std::vector<Grid> preprocess_eval(const Volume& volume, int output_size,
                                  const SegmentationHook& hook = identity_segmentation());

/// Records whose domain tag is (not) in `domains`.
std::vector<PatientRecord> filter_domains(std::span<const PatientRecord> records,
                                          std::span<const std::string> domains, bool keep);

}  // namespace milslice
