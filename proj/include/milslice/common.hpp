#pragma once
// Shared types for the slice-stack MIL toolkit: error classes, the 2D
// image grid and a small portable random stream.

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace milslice {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Number of classes handled by every head (0 = negative, 1 = positive).
inline constexpr int kNumClasses = 2;

/// Clamp applied to probabilities before taking logarithms.
inline constexpr double kProbEpsilon = 1e-7;

struct ShapeError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ValidationError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct ParseError : std::runtime_error {
    ParseError(const std::string& what, int line)
        : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line(line) {}
    int line;
};

/// Prints "warning: <message>" to stderr and bumps a process-wide counter.
void warn(const std::string& message);
/// Number of warnings emitted so far.
long warning_count();

/// Row-major 2D grid of real values, used for slices and activation maps.
class Grid {
public:
    Grid() = default;
    Grid(int rows, int cols, double fill = 0.0)
        : rows_(rows), cols_(cols), values_(static_cast<size_t>(rows) * cols, fill) {
        if (rows < 0 || cols < 0) throw ShapeError("negative grid dimensions");
    }

    int rows() const noexcept { return rows_; }
    int cols() const noexcept { return cols_; }
    size_t size() const noexcept { return values_.size(); }
    bool empty() const noexcept { return values_.empty(); }

    double& operator()(int r, int c) { return values_[static_cast<size_t>(r) * cols_ + c]; }
    double operator()(int r, int c) const { return values_[static_cast<size_t>(r) * cols_ + c]; }

    std::span<double> values() noexcept { return values_; }
    std::span<const double> values() const noexcept { return values_; }

    double mean() const;
    double max() const;

    friend bool operator==(const Grid&, const Grid&) = default;

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<double> values_;
};

/// One-hot patient label y = (y_0, y_1).
struct OneHotLabel {
    std::array<double, kNumClasses> y{1.0, 0.0};

    /// Y = 1 means positive; throws ValidationError for anything but 0/1.
    static OneHotLabel from_binary(int label);
    /// Throws ValidationError unless y is a binary one-hot vector.
    void validate() const;
    int binary() const { return y[1] > 0.5 ? 1 : 0; }
};

inline double sigmoid(double x) {
    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// SplitMix64 mixer used to derive independent per-item seeds from a master seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

/// Deterministic random stream. Distributions are implemented locally so the
/// same seed gives the same draws on every standard library.
class Random {
public:
    explicit Random(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64();
    /// Uniform in [0, 1).
    double uniform();
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [lo, hi].
    int uniform_int(int lo, int hi);
    double normal();
    bool bernoulli(double p) { return uniform() < p; }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace milslice
