#include "milslice/common.hpp"

#include <algorithm>
#include <atomic>
#include <iostream>
#include <limits>
#include <numbers>
#include <numeric>

namespace milslice {

namespace {
std::atomic<long> g_warnings{0};
}

void warn(const std::string& message) {
    ++g_warnings;
    std::cerr << "warning: " << message << '\n';
}

long warning_count() { return g_warnings.load(); }

double Grid::mean() const {
    if (values_.empty()) return 0.0;
    return std::accumulate(values_.begin(), values_.end(), 0.0) / static_cast<double>(values_.size());
}

double Grid::max() const {
    if (values_.empty()) return -std::numeric_limits<double>::infinity();
    return *std::max_element(values_.begin(), values_.end());
}

OneHotLabel OneHotLabel::from_binary(int label) {
    if (label != 0 && label != 1)
        throw ValidationError("label must be 0 or 1, got " + std::to_string(label));
    OneHotLabel out;
    out.y = label == 1 ? std::array<double, kNumClasses>{0.0, 1.0}
                       : std::array<double, kNumClasses>{1.0, 0.0};
    return out;
}

void OneHotLabel::validate() const {
    for (double v : y)
        if (v != 0.0 && v != 1.0) throw ValidationError("label components must be 0 or 1");
    if (y[0] + y[1] != 1.0) throw ValidationError("label must be one-hot");
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    auto splitmix = [](std::uint64_t x) {
        x += 0x9e3779b97f4a7c15ULL;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
        return x ^ (x >> 31);
    };
    return splitmix(splitmix(splitmix(seed) ^ a) ^ (b * 0xd6e8feb86659fd93ULL));
}

std::uint64_t Random::next_u64() {
    // splitmix64 stream
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

double Random::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

int Random::uniform_int(int lo, int hi) {
    if (hi <= lo) return lo;
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
}

double Random::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
}

}  // namespace milslice
