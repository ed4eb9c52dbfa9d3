#pragma once
// Slice aggregation: contiguous sections, k-max section probabilities, noisy-OR
// patient probability and the patient-level classification loss. Each forward
// function has a matching backward that maps an upstream gradient to its inputs.

#include <array>
#include <span>
#include <vector>

#include "milslice/common.hpp"
#include "milslice/core_model.hpp"

namespace milslice {

struct SectionRange {
    int begin = 0;  // inclusive
    int end = 0;    // exclusive
    int size() const { return end - begin; }
    friend bool operator==(const SectionRange&, const SectionRange&) = default;
};

struct SectionPartition {
    std::vector<SectionRange> sections;
    int count() const { return static_cast<int>(sections.size()); }
};

struct SectionProbability {
    std::array<double, kNumClasses> probability{};
    /// Indices (within the section) of the slices selected per class, in
    /// descending score order.
    std::array<std::vector<int>, kNumClasses> selected;
};

struct PatientProbability {
    std::array<double, kNumClasses> probability{};
};

/// max(1, floor(n / l_s)) contiguous sections whose sizes differ by at most
/// one; the first n mod count sections take the extra slice.
SectionPartition partition_sections(int slice_count, int section_length);

/// sigma(mean of the top-k' scores) per class, k' = min(k, section size).
/// Ties are broken towards the lower slice index.
SectionProbability section_probability(std::span<const SliceClassScores> scores, int k);

/// dL/ds for every slice of the section; zero for unselected slices.
std::vector<SliceClassScores> section_probability_backward(
    const SectionProbability& section, int section_size,
    const std::array<double, kNumClasses>& d_probability);

/// Noisy-OR: P(c|P) = 1 - prod_i (1 - P(c|S_i)).
PatientProbability patient_probability(std::span<const SectionProbability> sections);

std::vector<std::array<double, kNumClasses>> patient_probability_backward(
    std::span<const SectionProbability> sections, const std::array<double, kNumClasses>& d_patient);

/// -sum_c [y_c log P(c|P) + (1 - y_c) log(1 - P(c|P))], with P clamped to
/// [eps, 1 - eps].
double classification_loss(const PatientProbability& p, const OneHotLabel& label);

/// dL/dP(c|P). Zero where the clamp is active.
std::array<double, kNumClasses> classification_loss_backward(const PatientProbability& p,
                                                            const OneHotLabel& label);

}  // namespace milslice
