// Finite-difference checks of every analytic backward pass, from the
// section/noisy-OR kernels up to full-model parameter gradients.

#include <doctest.h>

#include <cmath>

#include "milslice/model.hpp"
#include "test_support.hpp"

using namespace milslice;

namespace {

constexpr double kStep = 1e-5;

// Relative error between two gradient vectors, by norm.
double rel_error(const std::vector<double>& a, const std::vector<double>& b) {
    double diff = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        diff += (a[i] - b[i]) * (a[i] - b[i]);
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    const double denom = std::max(std::sqrt(na), std::sqrt(nb));
    return denom == 0 ? 0 : std::sqrt(diff) / denom;
}

struct FdResult {
    std::vector<double> analytic, numeric;
};

FdResult check_model(Model& model, const std::vector<Grid>& slices, const OneHotLabel& label,
                     const LossOptions& opts, const std::string& param) {
    auto grads = model.zero_gradients();
    volume_loss(model, slices, label, opts, &grads);
    FdResult r;
    auto params = model.parameters();
    auto grefs = model.gradient_refs(grads);
    for (size_t p = 0; p < params.size(); ++p) {
        if (params[p].name != param) continue;
        for (size_t i = 0; i < params[p].values.size(); ++i) {
            double& v = params[p].values[i];
            const double saved = v;
            v = saved + kStep;
            const double up = volume_loss(model, slices, label, opts, nullptr).total;
            v = saved - kStep;
            const double down = volume_loss(model, slices, label, opts, nullptr).total;
            v = saved;
            r.numeric.push_back((up - down) / (2 * kStep));
            r.analytic.push_back(grefs[p].values[i]);
        }
    }
    return r;
}

}  // namespace

TEST_CASE("full model gradients match central differences for every parameter array") {
    register_test_backbones();
    for (auto mode : {TrainMode::kWeak, TrainMode::kSliceLabels}) {
        for (int label : {0, 1}) {
            Model model(BackboneSpec{"test-micro", 0});
            model.initialize(11 + label);
            // Move the transition weights off zero so their gradients are exercised.
            Random rng(5);
            for (Eigen::Index i = 0; i < model.noise.weights.size(); ++i)
                model.noise.weights.data()[i] = rng.uniform(-0.5, 0.5);
            // Zero biases put pre-activations of fully dead patches exactly on
            // the ReLU kink, where central differences see half a slope.
            for (auto& layer : model.backbone.layers())
                for (Eigen::Index i = 0; i < layer.bias.size(); ++i) layer.bias[i] = rng.uniform(-0.1, 0.1);
            const auto slices = random_slices(20, model.backbone.input_size(), 3);
            LossOptions opts;
            opts.mode = mode;
            opts.section_length = 6;
            opts.top_k = 3;
            opts.lambda = 0.5;  // large enough that the noisy path dominates some entries
            opts.dropout_seed = 9;
            for (const auto& p : model.parameters()) {
                CAPTURE(p.name);
                CAPTURE(label);
                const auto r = check_model(model, slices, OneHotLabel::from_binary(label), opts, p.name);
                CHECK(rel_error(r.analytic, r.numeric) < 1e-4);
            }
        }
    }
}
