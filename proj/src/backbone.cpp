#include "milslice/backbone.hpp"

#include <cmath>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace milslice {

namespace {

#if defined(__GLIBC__)
// The im2col and activation buffers are reallocated for every batch. Served
// by mmap, each free hands the pages back to the kernel and the next batch
// faults them in again, which costs as much as the GEMMs themselves.
const bool g_heap_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
}();
#endif

}  // namespace

BackboneRegistry::BackboneRegistry() {
    add({.id = "tiny",
         .stem_pool = 2,
         .widths = {8, 16, 32, 64},
         .strides = {2, 2, 2, 2},
         .kernels = {},
         .use_bias = true,
         .default_input_size = 224});
    // Same four-block design with x4 downsampling for small slices, where the
    // x32 variant would leave a 1x1 activation map.
    add({.id = "tiny-x4",
         .stem_pool = 1,
         .widths = {8, 16, 16, 32},
         .strides = {2, 2, 1, 1},
         .kernels = {},
         .use_bias = true,
         .default_input_size = 32});
    // x2 downsampling: a 16x16 activation map on 32x32 inputs, for finer CAMs.
    add({.id = "tiny-x2",
         .stem_pool = 1,
         .widths = {8, 16, 16, 32},
         .strides = {2, 1, 1, 1},
         .kernels = {},
         .use_bias = true,
         .default_input_size = 32});
}

BackboneRegistry& BackboneRegistry::instance() {
    static BackboneRegistry registry;
    return registry;
}

void BackboneRegistry::add(BackboneArch arch) {
    if (arch.widths.empty() || arch.widths.size() != arch.strides.size())
        throw ValidationError("backbone '" + arch.id + "' needs matching widths/strides");
    if (!arch.kernels.empty() && arch.kernels.size() != arch.widths.size())
        throw ValidationError("backbone '" + arch.id + "' needs one kernel size per block");
    for (int k : arch.kernels)
        if (k < 1 || k % 2 == 0) throw ValidationError("kernel sizes must be odd");
    if (arch.stem_pool < 1) throw ValidationError("stem pool must be >= 1");
    archs_[arch.id] = std::move(arch);
}

const BackboneArch& BackboneRegistry::find(const std::string& id) const {
    auto it = archs_.find(id);
    if (it == archs_.end()) throw ValidationError("unknown backbone '" + id + "'");
    return it->second;
}

std::vector<std::string> BackboneRegistry::ids() const {
    std::vector<std::string> out;
    for (const auto& [id, arch] : archs_) out.push_back(id);
    return out;
}

namespace {

int conv_output(int in, int stride) { return (in - 1) / stride + 1; }

// Gather k x k patches (pad k/2) of a C x (N*H*W) activation into (C*k*k) x (N*Ho*Wo).
RowMatrix im2col(const RowMatrix& x, int batch, int size, int stride, int kernel) {
    const int taps = kernel * kernel, pad = kernel / 2;
    const int channels = static_cast<int>(x.rows());
    const int out = conv_output(size, stride);
    const int in_plane = size * size;
    const int out_plane = out * out;
    RowMatrix cols = RowMatrix::Zero(static_cast<Eigen::Index>(channels) * taps,
                                     static_cast<Eigen::Index>(batch) * out_plane);
    for (int c = 0; c < channels; ++c) {
        const double* src = x.row(c).data();
        for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
                double* dst = cols.row(c * taps + ky * kernel + kx).data();
                for (int n = 0; n < batch; ++n) {
                    const double* plane = src + static_cast<size_t>(n) * in_plane;
                    double* row = dst + static_cast<size_t>(n) * out_plane;
                    for (int oy = 0; oy < out; ++oy) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= size) continue;
                        for (int ox = 0; ox < out; ++ox) {
                            const int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= size) continue;
                            row[oy * out + ox] = plane[iy * size + ix];
                        }
                    }
                }
            }
        }
    }
    return cols;
}

RowMatrix col2im(const RowMatrix& cols, int channels, int batch, int size, int stride, int kernel) {
    const int taps = kernel * kernel, pad = kernel / 2;
    const int out = conv_output(size, stride);
    const int in_plane = size * size;
    const int out_plane = out * out;
    RowMatrix x = RowMatrix::Zero(channels, static_cast<Eigen::Index>(batch) * in_plane);
    for (int c = 0; c < channels; ++c) {
        double* dst = x.row(c).data();
        for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
                const double* src = cols.row(c * taps + ky * kernel + kx).data();
                for (int n = 0; n < batch; ++n) {
                    double* plane = dst + static_cast<size_t>(n) * in_plane;
                    const double* row = src + static_cast<size_t>(n) * out_plane;
                    for (int oy = 0; oy < out; ++oy) {
                        const int iy = oy * stride + ky - pad;
                        if (iy < 0 || iy >= size) continue;
                        for (int ox = 0; ox < out; ++ox) {
                            const int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= size) continue;
                            plane[iy * size + ix] += row[oy * out + ox];
                        }
                    }
                }
            }
        }
    }
    return x;
}

}  // namespace

Backbone::Backbone(BackboneSpec spec)
    : spec_(std::move(spec)), arch_(BackboneRegistry::instance().find(spec_.id)) {
    if (spec_.input_size == 0) spec_.input_size = arch_.default_input_size;
    if (spec_.input_size < 1 || spec_.input_size % arch_.stem_pool != 0)
        throw ShapeError("input size " + std::to_string(spec_.input_size) +
                         " is not divisible by the stem pool");
    int size = spec_.input_size / arch_.stem_pool;
    int in_channels = 1;
    for (size_t i = 0; i < arch_.widths.size(); ++i) {
        ConvLayer layer;
        layer.in_channels = in_channels;
        layer.out_channels = arch_.widths[i];
        layer.stride = arch_.strides[i];
        layer.kernel = arch_.kernels.empty() ? 3 : arch_.kernels[i];
        layer.weights = RowMatrix::Zero(layer.out_channels, layer.in_channels * layer.kernel * layer.kernel);
        layer.bias = Eigen::VectorXd::Zero(layer.out_channels);
        layers_.push_back(std::move(layer));
        in_channels = arch_.widths[i];
        size = conv_output(size, arch_.strides[i]);
    }
    output_size_ = size;
}

void Backbone::initialize_xavier(Random& rng) {
    for (auto& layer : layers_) {
        const double taps = layer.kernel * layer.kernel;
        const double fan_in = layer.in_channels * taps;
        const double fan_out = layer.out_channels * taps;
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        for (Eigen::Index i = 0; i < layer.weights.size(); ++i)
            layer.weights.data()[i] = rng.uniform(-bound, bound);
        layer.bias.setZero();
    }
}

FeatureMaps Backbone::forward_features(const Grid& slice, int slice_index) const {
    const RowMatrix f = forward(std::span<const Grid>(&slice, 1));
    auto maps = split(f, 1);
    maps.front().slice_index = slice_index;
    return std::move(maps.front());
}

RowMatrix Backbone::forward(std::span<const Grid> slices, Trace* trace) const {
    const int batch = static_cast<int>(slices.size());
    if (batch == 0) throw ShapeError("backbone forward needs at least one slice");
    const int in = spec_.input_size;
    for (const auto& s : slices)
        if (s.rows() != in || s.cols() != in)
            throw ShapeError("slice is " + std::to_string(s.rows()) + "x" + std::to_string(s.cols()) +
                             ", backbone expects " + std::to_string(in) + "x" + std::to_string(in));

    // Average-pool stem.
    const int pool = arch_.stem_pool;
    int size = in / pool;
    RowMatrix x(1, static_cast<Eigen::Index>(batch) * size * size);
    const double inv_area = 1.0 / (pool * pool);
    for (int n = 0; n < batch; ++n) {
        const Grid& s = slices[n];
        for (int y = 0; y < size; ++y) {
            for (int xx = 0; xx < size; ++xx) {
                double acc = 0.0;
                for (int dy = 0; dy < pool; ++dy)
                    for (int dx = 0; dx < pool; ++dx) acc += s(y * pool + dy, xx * pool + dx);
                x(0, static_cast<Eigen::Index>(n) * size * size + y * size + xx) = acc * inv_area;
            }
        }
    }

    if (trace) {
        trace->batch = batch;
        trace->sizes.clear();
        trace->columns.clear();
        trace->outputs.clear();
    }
    for (const auto& layer : layers_) {
        RowMatrix cols = im2col(x, batch, size, layer.stride, layer.kernel);
        RowMatrix y = layer.weights * cols;
        if (arch_.use_bias) y.colwise() += layer.bias;
        y = y.cwiseMax(0.0);
        if (trace) {
            trace->sizes.push_back(size);
            trace->columns.push_back(std::move(cols));
            trace->outputs.push_back(y);
        }
        size = conv_output(size, layer.stride);
        x = std::move(y);
    }
    if (trace) trace->sizes.push_back(size);
    return x;
}

void Backbone::backward(const Trace& trace, const RowMatrix& d_features,
                        BackboneGradients& grads) const {
    RowMatrix d = d_features;
    for (int li = static_cast<int>(layers_.size()) - 1; li >= 0; --li) {
        const auto& layer = layers_[static_cast<size_t>(li)];
        const RowMatrix& out = trace.outputs[static_cast<size_t>(li)];
        d = (out.array() > 0.0).select(d, 0.0);
        grads.d_weights[static_cast<size_t>(li)].noalias() += d * trace.columns[static_cast<size_t>(li)].transpose();
        if (arch_.use_bias) grads.d_bias[static_cast<size_t>(li)] += d.rowwise().sum();
        if (li == 0) break;
        const RowMatrix d_cols = layer.weights.transpose() * d;
        d = col2im(d_cols, layer.in_channels, trace.batch, trace.sizes[static_cast<size_t>(li)],
                   layer.stride, layer.kernel);
    }
}

BackboneGradients Backbone::zero_gradients() const {
    BackboneGradients g;
    for (const auto& layer : layers_) {
        g.d_weights.push_back(RowMatrix::Zero(layer.weights.rows(), layer.weights.cols()));
        g.d_bias.push_back(Eigen::VectorXd::Zero(layer.bias.size()));
    }
    return g;
}

std::vector<FeatureMaps> Backbone::split(const RowMatrix& features, int batch) const {
    const int k = static_cast<int>(features.rows());
    const int plane = output_size_ * output_size_;
    if (features.cols() != static_cast<Eigen::Index>(batch) * plane)
        throw ShapeError("feature matrix does not match batch size");
    std::vector<FeatureMaps> out;
    out.reserve(static_cast<size_t>(batch));
    for (int n = 0; n < batch; ++n) {
        FeatureMaps fm(k, output_size_, output_size_, n);
        for (int c = 0; c < k; ++c) {
            const double* src = features.row(c).data() + static_cast<size_t>(n) * plane;
            std::copy(src, src + plane, fm.plane(c).begin());
        }
        out.push_back(std::move(fm));
    }
    return out;
}

MapGeometry Backbone::map_geometry() const {
    // The pool covers [p*j, p*j + p); a padded conv centres output j on input s*j.
    const int pool = arch_.stem_pool;
    MapGeometry g{(pool - 1) / 2.0, static_cast<double>(pool)};
    for (const auto& layer : layers_) g.stride *= layer.stride;
    return g;
}

}  // namespace milslice
