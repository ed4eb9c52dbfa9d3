#include <algorithm>
#include <cmath>

#include "milslice/data.hpp"

namespace milslice {

namespace fs = std::filesystem;

Grid resample(const Grid& src, double x, double y, double w, double h, int rows, int cols) {
    if (src.empty()) throw ShapeError("cannot resample an empty slice");
    if (rows < 1 || cols < 1) throw ShapeError("resample target must be at least 1x1");
    if (w <= 0 || h <= 0) throw ShapeError("resample window must have positive size");
    Grid out(rows, cols);
    const double sx = w / cols, sy = h / rows;
    const int max_r = src.rows() - 1, max_c = src.cols() - 1;
    for (int r = 0; r < rows; ++r) {
        // Pixel centres map onto pixel centres.
        const double fy = std::clamp(y + (r + 0.5) * sy - 0.5, 0.0, static_cast<double>(max_r));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, max_r);
        const double ty = fy - y0;
        for (int c = 0; c < cols; ++c) {
            const double fx = std::clamp(x + (c + 0.5) * sx - 0.5, 0.0, static_cast<double>(max_c));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, max_c);
            const double tx = fx - x0;
            const double top = src(y0, x0) * (1 - tx) + src(y0, x1) * tx;
            const double bottom = src(y1, x0) * (1 - tx) + src(y1, x1) * tx;
            out(r, c) = top * (1 - ty) + bottom * ty;
        }
    }
    return out;
}

Grid resize(const Grid& src, int rows, int cols) {
    if (src.rows() == rows && src.cols() == cols) return src;
    return resample(src, 0, 0, src.cols(), src.rows(), rows, cols);
}

VolumeAugmentation sample_augmentation(int rows, int cols, int slice_count,
                                       const AugmentationConfig& config, std::uint64_t seed) {
    if (rows < 1 || cols < 1) throw ShapeError("cannot augment an empty slice");
    VolumeAugmentation a;
    a.crop_w = cols;
    a.crop_h = rows;
    a.brightness.assign(static_cast<size_t>(std::max(slice_count, 0)), 1.0);
    a.contrast.assign(a.brightness.size(), 1.0);
    if (!config.enabled) return a;

    Random rng(seed);
    const double area = rng.uniform(config.min_area, config.max_area) * rows * cols;
    const double log_aspect = rng.uniform(std::log(config.min_aspect), std::log(config.max_aspect));
    const double aspect = std::exp(log_aspect);  // width / height
    a.crop_w = std::sqrt(area * aspect);
    a.crop_h = std::sqrt(area / aspect);
    // A side that overflows the slice hands its excess to the other side, so
    // the sampled area is kept.
    if (a.crop_w > cols) {
        a.crop_w = cols;
        a.crop_h = std::min<double>(rows, area / cols);
    } else if (a.crop_h > rows) {
        a.crop_h = rows;
        a.crop_w = std::min<double>(cols, area / rows);
    }
    a.crop_x = rng.uniform(0.0, cols - a.crop_w);
    a.crop_y = rng.uniform(0.0, rows - a.crop_h);
    a.flip = rng.bernoulli(config.flip_probability);
    for (size_t i = 0; i < a.brightness.size(); ++i) {
        a.brightness[i] = rng.uniform(config.min_brightness, config.max_brightness);
        a.contrast[i] = rng.uniform(config.min_contrast, config.max_contrast);
    }
    return a;
}

Grid augment_slice(const Grid& slice, const AugmentationConfig& config,
                   const VolumeAugmentation& params, int slice_index) {
    if (slice.empty()) throw ShapeError("cannot augment an empty slice");
    if (slice_index < 0 || static_cast<size_t>(slice_index) >= params.brightness.size())
        throw std::out_of_range("slice index outside the sampled augmentation");
    const int size = config.output_size;
    Grid out = resample(slice, params.crop_x, params.crop_y, params.crop_w, params.crop_h, size, size);
    if (params.flip)
        for (int r = 0; r < size; ++r) {
            auto row = out.values().subspan(static_cast<size_t>(r) * size, static_cast<size_t>(size));
            std::reverse(row.begin(), row.end());
        }
    const double b = params.brightness[static_cast<size_t>(slice_index)];
    const double c = params.contrast[static_cast<size_t>(slice_index)];
    if (b != 1.0 || c != 1.0) {
        const double mean = out.mean() * b;
        for (double& v : out.values()) v = (v * b - mean) * c + mean;
    }
    return out;
}

Grid augment(const Grid& slice, const AugmentationConfig& config, std::uint64_t seed) {
    const auto params = sample_augmentation(slice.rows(), slice.cols(), 1, config, seed);
    return augment_slice(slice, config, params, 0);
}

void zscore_volume(std::span<Grid> slices) {
    double sum = 0, count = 0;
    for (const auto& s : slices) {
        for (double v : s.values()) sum += v;
        count += static_cast<double>(s.size());
    }
    if (count == 0) return;
    const double mean = sum / count;
    double ss = 0;
    for (const auto& s : slices)
        for (double v : s.values()) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / count);
    const double inv = sd > 1e-12 ? 1.0 / sd : 1.0;
    for (auto& s : slices)
        for (double& v : s.values()) v = (v - mean) * inv;
}

SegmentationHook identity_segmentation() {
    return [](const PatientRecord&, std::vector<Grid>&) {};
}

SegmentationHook mask_directory_hook(fs::path dir) {
    return [dir = std::move(dir)](const PatientRecord& record, std::vector<Grid>& slices) {
        for (size_t i = 0; i < slices.size() && i < record.slice_paths.size(); ++i) {
            const fs::path mask_path = dir / record.patient_id / record.slice_paths[i].filename();
            if (!fs::exists(mask_path)) continue;
            const Grid mask = read_pgm16(mask_path);
            if (mask.rows() != slices[i].rows() || mask.cols() != slices[i].cols())
                throw ShapeError("mask " + mask_path.string() + " does not match its slice");
            auto v = slices[i].values();
            auto m = mask.values();
            for (size_t j = 0; j < v.size(); ++j)
                if (m[j] == 0.0) v[j] = 0.0;
        }
    };
}

namespace {

void check_volume(const Volume& volume, int output_size) {
    if (output_size < 1) throw ShapeError("output size must be positive");
    for (const auto& s : volume.slices)
        if (s.empty()) throw ShapeError("patient " + volume.record.patient_id + " has an empty slice");
    if (!volume.slices.empty()) {
        const auto& s = volume.slices.front();
        if (s.rows() < 2 || s.cols() < 2)
            warn("patient " + volume.record.patient_id + ": upscaling a " + std::to_string(s.rows()) + "x" +
                 std::to_string(s.cols()) + " slice to " + std::to_string(output_size));
    }
}

}  // namespace

std::vector<Grid> preprocess_train(const Volume& volume, const AugmentationConfig& config,
                                   std::uint64_t seed, const SegmentationHook& hook) {
    check_volume(volume, config.output_size);
    std::vector<Grid> slices = volume.slices;
    if (hook) hook(volume.record, slices);
    if (slices.empty()) return slices;
    const auto params = sample_augmentation(slices.front().rows(), slices.front().cols(),
                                            static_cast<int>(slices.size()), config, seed);
    for (size_t i = 0; i < slices.size(); ++i)
        slices[i] = augment_slice(slices[i], config, params, static_cast<int>(i));
    zscore_volume(slices);
    return slices;
}

std::vector<Grid> preprocess_eval(const Volume& volume, int output_size, const SegmentationHook& hook) {
    check_volume(volume, output_size);
    std::vector<Grid> slices = volume.slices;
    if (hook) hook(volume.record, slices);
    for (auto& s : slices) s = resize(s, output_size, output_size);
    zscore_volume(slices);
    return slices;
}

}  // namespace milslice
