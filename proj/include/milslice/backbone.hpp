#pragma once
// Slice feature extractor. Backbones are registered by string id; the default
// "tiny" network is a parameter-free 2x2 average-pool stem followed by four
// stride-2 3x3 conv + ReLU blocks (x32 downsampling, 64 output planes).
//
// Activations for a whole volume are kept channel-major, as a C x (N*H*W)
// matrix, so every convolution is a single im2col GEMM over all slices.

#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "milslice/common.hpp"
#include "milslice/core_model.hpp"

namespace milslice {

struct BackboneArch {
    std::string id;
    int stem_pool = 1;            // average-pool factor applied before the first conv
    std::vector<int> widths;      // output channels per conv block
    std::vector<int> strides;     // stride per conv block
    std::vector<int> kernels;     // odd kernel size per block; empty means all 3x3
    bool use_bias = true;
    int default_input_size = 224;
};

/// Registry entry id plus the square input size the backbone is run at
/// (0 selects the architecture default).
struct BackboneSpec {
    std::string id = "tiny";
    int input_size = 0;
};

class BackboneRegistry {
public:
    static BackboneRegistry& instance();

    void add(BackboneArch arch);
    /// Throws ValidationError for an unknown id.
    const BackboneArch& find(const std::string& id) const;
    std::vector<std::string> ids() const;

private:
    BackboneRegistry();
    std::map<std::string, BackboneArch> archs_;
};

struct ConvLayer {
    int in_channels = 0;
    int out_channels = 0;
    int stride = 1;
    int kernel = 3;        // square, odd, padded to keep "same" alignment
    RowMatrix weights;     // out x (in * kernel^2), columns ordered (in, ky, kx)
    Eigen::VectorXd bias;  // out; stays zero when the arch has no bias
};

/// Receptive-field centre of output cell j along either axis, in input pixel
/// indices: offset + stride * j.
struct MapGeometry {
    double offset = 0.0;
    double stride = 1.0;
};

struct BackboneGradients {
    std::vector<RowMatrix> d_weights;
    std::vector<Eigen::VectorXd> d_bias;
};

class Backbone {
public:
    /// Intermediate values kept by forward() for the backward pass.
    struct Trace {
        int batch = 0;
        std::vector<int> sizes;         // spatial size entering each conv, then the output size
        std::vector<RowMatrix> columns; // im2col matrix per conv
        std::vector<RowMatrix> outputs; // post-ReLU output per conv
    };

    explicit Backbone(BackboneSpec spec);

    const BackboneSpec& spec() const noexcept { return spec_; }
    const BackboneArch& arch() const noexcept { return arch_; }
    int input_size() const noexcept { return spec_.input_size; }
    int output_size() const noexcept { return output_size_; }
    int feature_planes() const noexcept { return layers_.back().out_channels; }
    MapGeometry map_geometry() const;

    std::vector<ConvLayer>& layers() noexcept { return layers_; }
    const std::vector<ConvLayer>& layers() const noexcept { return layers_; }

    /// Xavier-uniform weights, zero biases.
    void initialize_xavier(Random& rng);

    /// Feature maps of a single slice. Throws ShapeError when the slice is
    /// not input_size x input_size.
    FeatureMaps forward_features(const Grid& slice, int slice_index = 0) const;

    /// Batched forward over a volume; returns K x (N * h * w).
    RowMatrix forward(std::span<const Grid> slices, Trace* trace = nullptr) const;

    /// Accumulates parameter gradients given dL/d(features) in forward()'s layout.
    void backward(const Trace& trace, const RowMatrix& d_features, BackboneGradients& grads) const;

    BackboneGradients zero_gradients() const;

    /// Split a K x (N*h*w) matrix into per-slice FeatureMaps.
    std::vector<FeatureMaps> split(const RowMatrix& features, int batch) const;

private:
    BackboneSpec spec_;
    BackboneArch arch_;
    int output_size_ = 0;
    std::vector<ConvLayer> layers_;
};

}  // namespace milslice
