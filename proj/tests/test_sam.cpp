#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "milslice/sam.hpp"

using namespace milslice;

namespace {

std::vector<SliceClassScores> one_class(const std::vector<double>& s, int c = 1) {
    std::vector<SliceClassScores> out(s.size());
    for (size_t i = 0; i < s.size(); ++i) out[i][c] = s[i];
    return out;
}

SectionProbability section_of(double p0, double p1) {
    SectionProbability s;
    s.probability = {p0, p1};
    return s;
}

// Full sort, first k, mean, sigmoid.
double kmax_oracle(std::vector<double> s, int k) {
    std::sort(s.begin(), s.end(), std::greater<>());
    const int kk = std::min<int>(k, static_cast<int>(s.size()));
    return sigmoid(std::accumulate(s.begin(), s.begin() + kk, 0.0) / kk);
}

}  // namespace

TEST_CASE("partition examples") {
    auto sizes = [](int n, int l) {
        std::vector<int> out;
        for (const auto& r : partition_sections(n, l).sections) out.push_back(r.size());
        return out;
    };
    CHECK(sizes(40, 16) == std::vector<int>{20, 20});
    CHECK(sizes(10, 16) == std::vector<int>{10});
    CHECK(sizes(35, 16) == std::vector<int>{18, 17});
    CHECK_THROWS_AS(partition_sections(0, 16), ValidationError);
    CHECK_THROWS_AS(partition_sections(5, 0), ValidationError);
}

TEST_CASE("partition count, coverage and balance over the full grid") {
    for (int n = 1; n <= 200; ++n)
        for (int l = 1; l <= 64; ++l) {
            const auto p = partition_sections(n, l);
            REQUIRE(p.count() == std::max(1, n / l));
            int next = 0, lo = n, hi = 0;
            for (const auto& r : p.sections) {
                REQUIRE(r.begin == next);
                REQUIRE(r.size() >= 1);
                next = r.end;
                lo = std::min(lo, r.size());
                hi = std::max(hi, r.size());
            }
            REQUIRE(next == n);
            REQUIRE(hi - lo <= 1);
        }
}

TEST_CASE("k-max section probability examples") {
    const auto s = one_class({3, 1, 2, 5, 4});
    const auto p2 = section_probability(s, 2);
    CHECK(p2.probability[1] == doctest::Approx(0.989013).epsilon(1e-6));
    CHECK(p2.selected[1] == std::vector<int>{3, 4});
    CHECK(section_probability(s, 1).probability[1] == doctest::Approx(0.993307).epsilon(1e-6));
    // k beyond the section size clamps to the whole section.
    CHECK(section_probability(s, 50).probability[1] == doctest::Approx(sigmoid(3.0)));
    for (int k : {1, 3, 7}) CHECK(section_probability(one_class({0, 0, 0}), k).probability[0] == 0.5);
    CHECK_THROWS_AS(section_probability(s, 0), ValidationError);
    CHECK_THROWS_AS(section_probability({}, 1), ValidationError);
}

TEST_CASE("k-max ties go to the lower slice index") {
    const auto p = section_probability(one_class({1, 2, 2, 0, 2}), 2);
    CHECK(p.selected[1] == std::vector<int>{1, 2});
}

TEST_CASE("k-max matches the sort-based oracle on random sections") {
    Random rng(7);
    for (int trial = 0; trial < 10000; ++trial) {
        const int n = rng.uniform_int(1, 40);
        const int k = rng.uniform_int(1, 12);
        std::vector<SliceClassScores> scores(static_cast<size_t>(n));
        std::array<std::vector<double>, kNumClasses> raw;
        for (auto& s : scores)
            for (int c = 0; c < kNumClasses; ++c) {
                // Coarse values so ties are common.
                s[c] = rng.uniform_int(-6, 6) * 0.5;
                raw[static_cast<size_t>(c)].push_back(s[c]);
            }
        const auto p = section_probability(scores, k);
        for (int c = 0; c < kNumClasses; ++c)
            REQUIRE(p.probability[static_cast<size_t>(c)] == kmax_oracle(raw[static_cast<size_t>(c)], k));
    }
}

TEST_CASE("noisy-OR examples") {
    const std::vector<SectionProbability> half{section_of(0.5, 0.5), section_of(0.5, 0.5)};
    CHECK(patient_probability(half).probability[1] == doctest::Approx(0.75));
    const std::vector<SectionProbability> zero(3, section_of(0.0, 0.0));
    CHECK(patient_probability(zero).probability[0] == 0.0);
    const std::vector<SectionProbability> mixed{section_of(0.2, 0.2), section_of(0.3, 0.3)};
    CHECK(patient_probability(mixed).probability[1] == doctest::Approx(0.44));
    CHECK_THROWS_AS(patient_probability({}), ValidationError);
}

TEST_CASE("noisy-OR agrees with the log-space form and is permutation invariant") {
    Random rng(11);
    for (int trial = 0; trial < 2000; ++trial) {
        std::vector<SectionProbability> sections(static_cast<size_t>(rng.uniform_int(1, 12)));
        for (auto& s : sections) s = section_of(rng.uniform(0, 0.999), rng.uniform(0, 0.999));
        const auto p = patient_probability(sections);
        for (int c = 0; c < kNumClasses; ++c) {
            double log_sum = 0, max_p = 0;
            for (const auto& s : sections) {
                log_sum += std::log1p(-s.probability[static_cast<size_t>(c)]);
                max_p = std::max(max_p, s.probability[static_cast<size_t>(c)]);
            }
            const double pc = p.probability[static_cast<size_t>(c)];
            CHECK(std::abs(pc - (1.0 - std::exp(log_sum))) < 1e-9);
            CHECK(pc >= max_p - 1e-12);
            CHECK(pc < 1.0);
        }
        auto shuffled = sections;
        std::reverse(shuffled.begin(), shuffled.end());
        std::rotate(shuffled.begin(), shuffled.begin() + static_cast<long>(shuffled.size() / 2), shuffled.end());
        const auto q = patient_probability(shuffled);
        for (int c = 0; c < kNumClasses; ++c)
            CHECK(q.probability[static_cast<size_t>(c)] ==
                  doctest::Approx(p.probability[static_cast<size_t>(c)]).epsilon(1e-14));
    }
}

TEST_CASE("raising one slice score never lowers the patient probability") {
    Random rng(13);
    for (int trial = 0; trial < 500; ++trial) {
        const int n = rng.uniform_int(1, 40);
        const int l = rng.uniform_int(1, 16);
        const int k = rng.uniform_int(1, 8);
        std::vector<SliceClassScores> scores(static_cast<size_t>(n));
        for (auto& s : scores) s[1] = rng.normal() * 3;
        auto patient = [&](const std::vector<SliceClassScores>& sc) {
            std::vector<SectionProbability> sections;
            for (const auto& r : partition_sections(n, l).sections)
                sections.push_back(section_probability(
                    std::span(sc).subspan(static_cast<size_t>(r.begin), static_cast<size_t>(r.size())), k));
            return patient_probability(sections).probability[1];
        };
        const double before = patient(scores);
        scores[static_cast<size_t>(rng.uniform_int(0, n - 1))][1] += rng.uniform(0, 2);
        CHECK(patient(scores) >= before);
    }
}

TEST_CASE("classification loss examples") {
    PatientProbability perfect;
    perfect.probability = {0.0, 1.0};
    CHECK(classification_loss(perfect, OneHotLabel::from_binary(1)) < 1e-6);
    PatientProbability half;
    half.probability = {0.5, 0.5};
    CHECK(classification_loss(half, OneHotLabel::from_binary(0)) == doctest::Approx(2 * std::log(2.0)));
    CHECK(classification_loss(half, OneHotLabel::from_binary(1)) == doctest::Approx(1.386294).epsilon(1e-6));
    PatientProbability wrong;
    wrong.probability = {0.9, 0.1};
    CHECK(classification_loss(wrong, OneHotLabel::from_binary(1)) == doctest::Approx(4.60517).epsilon(1e-6));
    CHECK_THROWS_AS(OneHotLabel::from_binary(2), ValidationError);
    OneHotLabel bad;
    bad.y = {0.5, 0.5};
    CHECK_THROWS_AS(classification_loss(half, bad), ValidationError);
}

TEST_CASE("loss gradient is zero where the probability clamp is active") {
    PatientProbability p;
    p.probability = {1e-9, 1.0};
    const auto d = classification_loss_backward(p, OneHotLabel::from_binary(1));
    CHECK(d[0] == 0.0);
    CHECK(d[1] == 0.0);
}

TEST_CASE("slice-score gradients of the aggregation loss match central differences") {
    Random rng(21);
    for (int trial = 0; trial < 50; ++trial) {
        const int n = rng.uniform_int(1, 30);
        const int l = rng.uniform_int(2, 8);
        const int k = rng.uniform_int(1, 4);
        const auto label = OneHotLabel::from_binary(trial % 2);
        std::vector<SliceClassScores> scores(static_cast<size_t>(n));
        for (auto& s : scores)
            for (int c = 0; c < kNumClasses; ++c) s[c] = rng.normal();
        const auto partition = partition_sections(n, l);

        auto forward = [&](const std::vector<SliceClassScores>& sc, std::vector<SectionProbability>* out) {
            std::vector<SectionProbability> sections;
            for (const auto& r : partition.sections)
                sections.push_back(section_probability(
                    std::span(sc).subspan(static_cast<size_t>(r.begin), static_cast<size_t>(r.size())), k));
            if (out) *out = sections;
            return classification_loss(patient_probability(sections), label);
        };

        std::vector<SectionProbability> sections;
        forward(scores, &sections);
        const auto d_patient = classification_loss_backward(patient_probability(sections), label);
        const auto d_sections = patient_probability_backward(sections, d_patient);
        std::vector<SliceClassScores> analytic(static_cast<size_t>(n));
        std::vector<std::array<bool, kNumClasses>> chosen(static_cast<size_t>(n), {false, false});
        for (size_t si = 0; si < sections.size(); ++si) {
            const auto& r = partition.sections[si];
            const auto d = section_probability_backward(sections[si], r.size(), d_sections[si]);
            for (int j = 0; j < r.size(); ++j) analytic[static_cast<size_t>(r.begin + j)] = d[static_cast<size_t>(j)];
            for (int c = 0; c < kNumClasses; ++c)
                for (int j : sections[si].selected[static_cast<size_t>(c)])
                    chosen[static_cast<size_t>(r.begin + j)][static_cast<size_t>(c)] = true;
        }

        const double h = 1e-6;
        double diff = 0, norm = 0;
        for (int i = 0; i < n; ++i)
            for (int c = 0; c < kNumClasses; ++c) {
                auto up = scores, down = scores;
                up[static_cast<size_t>(i)][c] += h;
                down[static_cast<size_t>(i)][c] -= h;
                const double num = (forward(up, nullptr) - forward(down, nullptr)) / (2 * h);
                const double a = analytic[static_cast<size_t>(i)][c];
                if (!chosen[static_cast<size_t>(i)][static_cast<size_t>(c)]) CHECK(a == 0.0);
                diff += (a - num) * (a - num);
                norm += num * num;
            }
        if (norm > 0) CHECK(std::sqrt(diff / norm) < 1e-4);
    }
}
