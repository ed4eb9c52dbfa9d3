#include "milslice/sam.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace milslice {

SectionPartition partition_sections(int slice_count, int section_length) {
    if (slice_count < 1) throw ValidationError("empty volume: cannot partition 0 slices");
    if (section_length < 1) throw ValidationError("section length must be >= 1");
    const int count = std::max(1, slice_count / section_length);
    const int base = slice_count / count;
    const int extra = slice_count % count;
    SectionPartition out;
    out.sections.reserve(static_cast<size_t>(count));
    int begin = 0;
    for (int i = 0; i < count; ++i) {
        const int size = base + (i < extra ? 1 : 0);
        out.sections.push_back({begin, begin + size});
        begin += size;
    }
    return out;
}

SectionProbability section_probability(std::span<const SliceClassScores> scores, int k) {
    if (scores.empty()) throw ValidationError("section has no slices");
    if (k < 1) throw ValidationError("k must be >= 1");
    const int n = static_cast<int>(scores.size());
    const int kk = std::min(k, n);
    SectionProbability out;
    std::vector<int> order(static_cast<size_t>(n));
    for (int c = 0; c < kNumClasses; ++c) {
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return scores[a][c] > scores[b][c]; });
        double total = 0.0;
        for (int j = 0; j < kk; ++j) total += scores[order[j]][c];
        out.probability[c] = sigmoid(total / kk);
        out.selected[c].assign(order.begin(), order.begin() + kk);
    }
    return out;
}

std::vector<SliceClassScores> section_probability_backward(
    const SectionProbability& section, int section_size,
    const std::array<double, kNumClasses>& d_probability) {
    std::vector<SliceClassScores> grads(static_cast<size_t>(section_size));
    for (int c = 0; c < kNumClasses; ++c) {
        const double p = section.probability[c];
        const auto& sel = section.selected[c];
        const double d = d_probability[c] * p * (1.0 - p) / static_cast<double>(sel.size());
        for (int idx : sel) grads[static_cast<size_t>(idx)][c] = d;
    }
    return grads;
}

PatientProbability patient_probability(std::span<const SectionProbability> sections) {
    if (sections.empty()) throw ValidationError("patient has no sections");
    PatientProbability out;
    for (int c = 0; c < kNumClasses; ++c) {
        double none = 1.0;
        for (const auto& s : sections) none *= 1.0 - s.probability[c];
        out.probability[c] = 1.0 - none;
    }
    return out;
}

std::vector<std::array<double, kNumClasses>> patient_probability_backward(
    std::span<const SectionProbability> sections, const std::array<double, kNumClasses>& d_patient) {
    std::vector<std::array<double, kNumClasses>> grads(sections.size());
    for (int c = 0; c < kNumClasses; ++c) {
        for (size_t i = 0; i < sections.size(); ++i) {
            double others = 1.0;
            for (size_t j = 0; j < sections.size(); ++j)
                if (j != i) others *= 1.0 - sections[j].probability[c];
            grads[i][c] = d_patient[c] * others;
        }
    }
    return grads;
}

namespace {

double clamp_prob(double p) { return std::clamp(p, kProbEpsilon, 1.0 - kProbEpsilon); }
bool clamped(double p) { return p < kProbEpsilon || p > 1.0 - kProbEpsilon; }

}  // namespace

double classification_loss(const PatientProbability& p, const OneHotLabel& label) {
    label.validate();
    double loss = 0.0;
    for (int c = 0; c < kNumClasses; ++c) {
        const double q = clamp_prob(p.probability[c]);
        const double y = label.y[c];
        loss -= y * std::log(q) + (1.0 - y) * std::log(1.0 - q);
    }
    return loss;
}

std::array<double, kNumClasses> classification_loss_backward(const PatientProbability& p,
                                                            const OneHotLabel& label) {
    label.validate();
    std::array<double, kNumClasses> d{};
    for (int c = 0; c < kNumClasses; ++c) {
        const double q = p.probability[c];
        if (clamped(q)) continue;
        const double y = label.y[c];
        d[c] = -y / q + (1.0 - y) / (1.0 - q);
    }
    return d;
}

}  // namespace milslice
