#include "milslice/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "milslice/archive.hpp"

namespace milslice {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

void TrainerConfig::validate() const {
    auto fail = [](const std::string& m) { throw ValidationError(m); };
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) fail("lambda must be a finite value >= 0");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) fail("learning rate must be > 0");
    if (section_length < 1) fail("section length must be >= 1");
    if (top_k < 1) fail("top k must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout rate must be in [0, 1)");
    if (weight_decay < 0.0) fail("weight decay must be >= 0");
    if (batch_size < 1) fail("batch size must be >= 1");
    if (max_iterations < 0) fail("iterations must be >= 0");
    if (mode == TrainMode::kWeak && !enable_cls_loss && !enable_noisy_loss)
        fail("at least one loss term must be enabled");
    if (checkpoint_every < 0) fail("checkpoint cadence must be >= 0");
    if (early_stop && (eval_every < 1 || patience < 1)) fail("early stopping needs eval_every and patience >= 1");
    const auto& a = augmentation;
    if (a.min_area <= 0 || a.max_area > 1.0 || a.min_area > a.max_area) fail("crop area range must lie in (0, 1]");
    if (a.min_aspect <= 0 || a.min_aspect > a.max_aspect) fail("bad crop aspect range");
    if (a.flip_probability < 0 || a.flip_probability > 1) fail("flip probability must be in [0, 1]");
    BackboneRegistry::instance().find(backbone.id);
}

int TrainerConfig::input_size() const {
    if (backbone.input_size > 0) return backbone.input_size;
    return BackboneRegistry::instance().find(backbone.id).default_input_size;
}

namespace {

const char* mode_name(TrainMode m) { return m == TrainMode::kWeak ? "weak" : "slice_labels"; }

TrainMode parse_mode(const std::string& s) {
    if (s == "weak") return TrainMode::kWeak;
    if (s == "slice_labels") return TrainMode::kSliceLabels;
    throw ValidationError("unknown training mode '" + s + "'");
}

}  // namespace

std::string TrainerConfig::to_json() const {
    const auto& a = augmentation;
    json j{{"lambda", lambda},
           {"learning_rate", learning_rate},
           {"section_length", section_length},
           {"top_k", top_k},
           {"dropout_rate", dropout_rate},
           {"weight_decay", weight_decay},
           {"batch_size", batch_size},
           {"max_iterations", max_iterations},
           {"seed", seed},
           {"enable_cls_loss", enable_cls_loss},
           {"enable_noisy_loss", enable_noisy_loss},
           {"mode", mode_name(mode)},
           {"backbone", {{"id", backbone.id}, {"input_size", backbone.input_size}}},
           {"augmentation",
            {{"enabled", a.enabled},
             {"flip_probability", a.flip_probability},
             {"min_aspect", a.min_aspect},
             {"max_aspect", a.max_aspect},
             {"min_area", a.min_area},
             {"max_area", a.max_area},
             {"output_size", a.output_size},
             {"min_brightness", a.min_brightness},
             {"max_brightness", a.max_brightness},
             {"min_contrast", a.min_contrast},
             {"max_contrast", a.max_contrast}}},
           {"checkpoint_every", checkpoint_every},
           {"checkpoint_path", checkpoint_path.string()},
           {"log_path", log_path.string()},
           {"early_stop", early_stop},
           {"eval_every", eval_every},
           {"patience", patience}};
    return j.dump(1);
}

TrainerConfig TrainerConfig::from_json(const std::string& text) {
    const json j = json::parse(text);
    TrainerConfig c;
    c.lambda = j.value("lambda", c.lambda);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.section_length = j.value("section_length", c.section_length);
    c.top_k = j.value("top_k", c.top_k);
    c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_iterations = j.value("max_iterations", c.max_iterations);
    c.seed = j.value("seed", c.seed);
    c.enable_cls_loss = j.value("enable_cls_loss", c.enable_cls_loss);
    c.enable_noisy_loss = j.value("enable_noisy_loss", c.enable_noisy_loss);
    c.mode = parse_mode(j.value("mode", std::string("weak")));
    if (j.contains("backbone")) {
        c.backbone.id = j["backbone"].value("id", c.backbone.id);
        c.backbone.input_size = j["backbone"].value("input_size", c.backbone.input_size);
    }
    if (j.contains("augmentation")) {
        const auto& aj = j["augmentation"];
        auto& a = c.augmentation;
        a.enabled = aj.value("enabled", a.enabled);
        a.flip_probability = aj.value("flip_probability", a.flip_probability);
        a.min_aspect = aj.value("min_aspect", a.min_aspect);
        a.max_aspect = aj.value("max_aspect", a.max_aspect);
        a.min_area = aj.value("min_area", a.min_area);
        a.max_area = aj.value("max_area", a.max_area);
        a.output_size = aj.value("output_size", a.output_size);
        a.min_brightness = aj.value("min_brightness", a.min_brightness);
        a.max_brightness = aj.value("max_brightness", a.max_brightness);
        a.min_contrast = aj.value("min_contrast", a.min_contrast);
        a.max_contrast = aj.value("max_contrast", a.max_contrast);
    }
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.checkpoint_path = j.value("checkpoint_path", std::string());
    c.log_path = j.value("log_path", std::string());
    c.early_stop = j.value("early_stop", c.early_stop);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.patience = j.value("patience", c.patience);
    return c;
}

EvalOptions eval_options_for(const TrainerConfig& config) {
    EvalOptions o;
    o.section_length = config.section_length;
    o.top_k = config.top_k;
    return o;
}

// ---------------------------------------------------------------------------
// Optimiser

void adam_step(Model& model, AdamState& state, ModelGradients& grads, double learning_rate,
               double weight_decay) {
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    auto params = model.parameters();
    const auto g = model.gradient_refs(grads);
    if (state.first.empty()) {
        for (const auto& p : params) {
            state.first.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.values.size())));
            state.second.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.values.size())));
        }
    }
    if (state.first.size() != params.size()) throw ShapeError("optimizer state does not match the model");
    ++state.step;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        auto theta = params[i].values;
        const auto grad = g[i].values;
        auto& m = state.first[i];
        auto& v = state.second[i];
        if (static_cast<size_t>(m.size()) != theta.size()) throw ShapeError("optimizer state size mismatch");
        for (size_t j = 0; j < theta.size(); ++j) {
            const auto jj = static_cast<Eigen::Index>(j);
            m[jj] = b1 * m[jj] + (1 - b1) * grad[j];
            v[jj] = b2 * v[jj] + (1 - b2) * grad[j] * grad[j];
            const double update = (m[jj] / c1) / (std::sqrt(v[jj] / c2) + eps);
            theta[j] -= learning_rate * (update + weight_decay * theta[j]);
        }
    }
}

// ---------------------------------------------------------------------------
// Batching

std::vector<int> batch_indices(int dataset_size, int batch_size, int iteration, std::uint64_t seed) {
    if (dataset_size < 1) throw ValidationError("empty dataset");
    if (batch_size < 1) throw ValidationError("batch size must be >= 1");
    std::vector<int> out;
    out.reserve(static_cast<size_t>(batch_size));
    long cached_epoch = -1;
    std::vector<int> perm(static_cast<size_t>(dataset_size));
    for (int j = 0; j < batch_size; ++j) {
        const long pos = static_cast<long>(iteration) * batch_size + j;
        const long epoch = pos / dataset_size;
        if (epoch != cached_epoch) {
            std::iota(perm.begin(), perm.end(), 0);
            Random rng(mix_seed(seed, 0x62617463ULL, static_cast<std::uint64_t>(epoch)));
            for (int i = dataset_size - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);
            cached_epoch = epoch;
        }
        out.push_back(perm[static_cast<size_t>(pos % dataset_size)]);
    }
    return out;
}

namespace {

constexpr std::uint64_t kAugmentStream = 0x617567ULL;
constexpr std::uint64_t kDropoutStream = 0x64726f70ULL;

LossOptions loss_options(const TrainerConfig& c) {
    LossOptions o;
    o.section_length = c.section_length;
    o.top_k = c.top_k;
    o.lambda = c.lambda;
    o.enable_cls_loss = c.enable_cls_loss;
    o.enable_noisy_loss = c.enable_noisy_loss;
    o.mode = c.mode;
    o.dropout_rate = c.dropout_rate;
    return o;
}

AugmentationConfig augmentation_for(const TrainerConfig& c) {
    auto a = c.augmentation;
    a.output_size = c.input_size();
    return a;
}

bool all_finite(Model& model, ModelGradients& g) {
    for (const auto& r : model.gradient_refs(g))
        for (double v : r.values)
            if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace

LossBreakdown batch_gradients(const Model& model, std::span<const Volume* const> batch,
                              const TrainerConfig& config, int iteration, ModelGradients& grads,
                              const SegmentationHook& hook) {
    if (batch.empty()) throw ValidationError("empty batch");
    const auto aug = augmentation_for(config);
    auto opts = loss_options(config);
    opts.training = true;
    LossBreakdown sum;
    for (size_t j = 0; j < batch.size(); ++j) {
        const auto it = static_cast<std::uint64_t>(iteration);
        const auto slices =
            preprocess_train(*batch[j], aug, mix_seed(config.seed ^ kAugmentStream, it, j), hook);
        opts.dropout_seed = mix_seed(config.seed ^ kDropoutStream, it, j);
        const auto l = volume_loss(model, slices, OneHotLabel::from_binary(batch[j]->record.label), opts, &grads);
        sum.total += l.total;
        sum.cls += l.cls;
        sum.noisy += l.noisy;
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    grads.scale(inv);
    sum.total *= inv;
    sum.cls *= inv;
    sum.noisy *= inv;
    return sum;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

std::vector<std::int64_t> shape64(const std::vector<int>& s) { return {s.begin(), s.end()}; }

}  // namespace

void save_checkpoint(const fs::path& path, const TrainState& state, const TrainerConfig& config) {
    ArrayArchive ar;
    ar.attributes["kind"] = "milslice-checkpoint";
    ar.attributes["config"] = config.to_json();
    ar.attributes["iteration"] = std::to_string(state.iteration);
    ar.attributes["adam_step"] = std::to_string(state.optimizer.step);
    {
        std::ostringstream os;
        os << std::setprecision(17) << state.running_loss;
        ar.attributes["running_loss"] = os.str();
    }
    Model& model = const_cast<Model&>(state.model);  // parameters() hands out mutable views
    const auto params = model.parameters();
    for (size_t i = 0; i < params.size(); ++i) {
        const auto& p = params[i];
        ar.add(p.name, shape64(p.shape), {p.values.begin(), p.values.end()});
        if (i < state.optimizer.first.size()) {
            const auto& m = state.optimizer.first[i];
            const auto& v = state.optimizer.second[i];
            ar.add("adam.m." + p.name, shape64(p.shape), {m.data(), m.data() + m.size()});
            ar.add("adam.v." + p.name, shape64(p.shape), {v.data(), v.data() + v.size()});
        }
    }
    ar.save(path);
}

Checkpoint load_checkpoint(const fs::path& path) {
    const auto ar = ArrayArchive::load(path);
    if (!ar.attributes.contains("kind") || ar.attribute("kind") != "milslice-checkpoint")
        throw ValidationError(path.string() + " is not a checkpoint");
    auto config = TrainerConfig::from_json(ar.attribute("config"));
    Checkpoint ck{config, TrainState{Model(config.backbone), {}, 0, 0.0}};
    auto& st = ck.state;
    st.iteration = std::stoi(ar.attribute("iteration"));
    st.optimizer.step = std::stol(ar.attribute("adam_step"));
    st.running_loss = std::stod(ar.attribute("running_loss"));
    const bool has_moments = st.optimizer.step > 0;
    for (auto& p : st.model.parameters()) {
        const auto& a = ar.get(p.name);
        if (a.shape != shape64(p.shape))
            throw ShapeError("checkpoint array " + p.name + " has the wrong shape");
        std::copy(a.data.begin(), a.data.end(), p.values.begin());
        if (has_moments) {
            const auto& m = ar.get("adam.m." + p.name);
            const auto& v = ar.get("adam.v." + p.name);
            st.optimizer.first.push_back(Eigen::Map<const Eigen::VectorXd>(m.data.data(), static_cast<Eigen::Index>(m.data.size())));
            st.optimizer.second.push_back(Eigen::Map<const Eigen::VectorXd>(v.data.data(), static_cast<Eigen::Index>(v.data.size())));
        }
    }
    return ck;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

// Fraction of validation patients classified correctly at P(1) >= 0.5.
double validation_accuracy(const Model& model, std::span<const Volume> volumes, const TrainerConfig& config,
                           const SegmentationHook& hook) {
    int correct = 0, n = 0;
    for (const auto& v : volumes) {
        if (v.slices.empty()) continue;
        const auto slices = preprocess_eval(v, config.input_size(), hook);
        const auto inf = infer(model, slices, config.section_length, config.top_k);
        correct += (inf.patient.probability[1] >= 0.5 ? 1 : 0) == v.record.label;
        ++n;
    }
    return n ? static_cast<double>(correct) / n : 0.0;
}

}  // namespace

TrainResult train(std::span<const Volume> dataset, const TrainerConfig& config, const TrainOptions& options) {
    config.validate();
    std::vector<const Volume*> usable;
    for (const auto& v : dataset) {
        if (v.slices.empty())
            warn("patient " + v.record.patient_id + " has no slices; skipped");
        else
            usable.push_back(&v);
    }
    if (usable.empty()) throw ValidationError("no usable training volumes");
    if (config.batch_size > static_cast<int>(usable.size()))
        warn("batch size exceeds the number of training patients; batches will repeat patients");
    if (config.early_stop && options.validation.empty())
        throw ValidationError("early stopping needs validation volumes");

    TrainResult result{options.resume_from ? *options.resume_from
                                           : TrainState{Model(config.backbone), {}, 0, 0.0},
                       {}, false};
    TrainState& state = result.state;
    if (!options.resume_from) state.model.initialize(config.seed);
    if (state.model.backbone.spec().id != config.backbone.id ||
        state.model.backbone.input_size() != config.input_size())
        throw ValidationError("resumed model does not match the configured backbone");

    std::ofstream log;
    if (!config.log_path.empty()) {
        if (config.log_path.has_parent_path()) fs::create_directories(config.log_path.parent_path());
        log.open(config.log_path, options.resume_from ? std::ios::app : std::ios::trunc);
        if (!log) throw std::runtime_error("cannot write " + config.log_path.string());
    }

    const auto start = std::chrono::steady_clock::now();
    double best_accuracy = -1.0;
    std::optional<Model> best_model;
    int stale = 0;

    while (state.iteration < config.max_iterations) {
        const int it = state.iteration;
        const auto idx = batch_indices(static_cast<int>(usable.size()), config.batch_size, it, config.seed);
        std::vector<const Volume*> batch;
        for (int i : idx) batch.push_back(usable[static_cast<size_t>(i)]);

        auto grads = state.model.zero_gradients();
        LossBreakdown loss;
        try {
            loss = batch_gradients(state.model, batch, config, it, grads, options.hook);
        } catch (const ValidationError&) {
            throw;
        } catch (const std::runtime_error& e) {
            throw TrainingDiverged("iteration " + std::to_string(it) + ": " + e.what(), std::move(state));
        }
        if (!std::isfinite(loss.total) || !all_finite(state.model, grads))
            throw TrainingDiverged("iteration " + std::to_string(it) + ": non-finite loss or gradient",
                                   std::move(state));

        adam_step(state.model, state.optimizer, grads, config.learning_rate, config.weight_decay);
        state.iteration = it + 1;
        state.running_loss = state.optimizer.step == 1 ? loss.total : 0.9 * state.running_loss + 0.1 * loss.total;

        IterationRecord rec{state.iteration, loss.total, loss.cls, loss.noisy,
                            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()};
        result.history.push_back(rec);
        if (log)
            log << json{{"iteration", rec.iteration}, {"loss", rec.loss}, {"cls", rec.cls},
                        {"noisy", rec.noisy}, {"running_loss", state.running_loss}, {"wall_time", rec.wall_time}}
                       .dump()
                << '\n'
                << std::flush;
        if (options.on_iteration) options.on_iteration(rec);

        if (config.checkpoint_every > 0 && !config.checkpoint_path.empty() &&
            state.iteration % config.checkpoint_every == 0)
            save_checkpoint(config.checkpoint_path, state, config);

        if (config.early_stop && state.iteration % config.eval_every == 0) {
            // Stop once accuracy has not improved for `patience` evaluations and
            // keep the parameters of the first evaluation at the best accuracy.
            const double acc = validation_accuracy(state.model, options.validation, config, options.hook);
            if (acc > best_accuracy) {
                best_accuracy = acc;
                best_model = state.model;
                stale = 0;
            } else if (++stale >= config.patience) {
                result.early_stopped = true;
                state.model = *best_model;
                break;
            }
        }
    }
    if (!config.checkpoint_path.empty()) save_checkpoint(config.checkpoint_path, state, config);
    return result;
}

// ---------------------------------------------------------------------------
// Ablation and sweeps

double ExperimentRow::patient_accuracy() const { return report.patient.accuracy.value_or(0.0); }
double ExperimentRow::image_accuracy() const { return report.image.accuracy.value_or(0.0); }

std::vector<TrainerConfig> ablation_configs(const TrainerConfig& base) {
    std::vector<TrainerConfig> out(4, base);
    out[0].mode = TrainMode::kSliceLabels;
    out[0].enable_cls_loss = true;
    out[0].enable_noisy_loss = false;
    for (int i = 1; i < 4; ++i) out[i].mode = TrainMode::kWeak;
    out[1].enable_cls_loss = true;
    out[1].enable_noisy_loss = false;
    out[2].enable_cls_loss = false;
    out[2].enable_noisy_loss = true;
    out[3].enable_cls_loss = true;
    out[3].enable_noisy_loss = true;
    return out;
}

namespace {

ExperimentRow run_experiment(std::string name, std::string description, const TrainerConfig& config,
                             std::span<const Volume> train_set, std::span<const Volume> test_set,
                             const GroundTruth* truth, EvalOptions eval_options) {
    ExperimentRow row;
    row.name = std::move(name);
    row.description = std::move(description);
    row.config = config;
    const auto result = train(train_set, config);
    row.final_loss = result.state.running_loss;
    eval_options.section_length = config.section_length;
    eval_options.top_k = config.top_k;
    row.report = evaluate(result.state.model, test_set, truth, eval_options);
    return row;
}

std::string with_suffix(const fs::path& p, const std::string& suffix) {
    if (p.empty()) return {};
    return (p.parent_path() / (p.stem().string() + "_" + suffix + p.extension().string())).string();
}

}  // namespace

std::vector<ExperimentRow> ablation_suite(std::span<const Volume> train_set, std::span<const Volume> test_set,
                                          const GroundTruth* truth, const TrainerConfig& base,
                                          const EvalOptions& eval_options) {
    static const char* names[4] = {"exp1", "exp2", "exp3", "exp4"};
    static const char* descriptions[4] = {"backbone on broadcast slice labels", "classification loss only",
                                          "noisy loss only", "classification + noisy loss"};
    std::vector<ExperimentRow> rows;
    auto configs = ablation_configs(base);
    for (size_t i = 0; i < configs.size(); ++i) {
        configs[i].checkpoint_path = with_suffix(base.checkpoint_path, names[i]);
        configs[i].log_path = with_suffix(base.log_path, names[i]);
        rows.push_back(run_experiment(names[i], descriptions[i], configs[i], train_set, test_set, truth, eval_options));
    }
    return rows;
}

std::vector<ExperimentRow> sweep(std::span<const Volume> train_set, std::span<const Volume> test_set,
                                 const GroundTruth* truth, const TrainerConfig& base,
                                 const EvalOptions& eval_options, SweepParameter parameter,
                                 std::vector<double> values, int* duplicates) {
    std::vector<double> unique;
    for (double v : values)
        if (std::find(unique.begin(), unique.end(), v) == unique.end()) unique.push_back(v);
    if (duplicates) *duplicates = static_cast<int>(values.size() - unique.size());
    if (unique.size() != values.size())
        warn(std::to_string(values.size() - unique.size()) + " duplicate sweep value(s) dropped");

    std::vector<ExperimentRow> rows;
    for (double v : unique) {
        TrainerConfig c = base;
        std::ostringstream name;
        if (parameter == SweepParameter::kLambda) {
            c.lambda = v;
            name << "lambda=" << v;
        } else {
            if (v < 1 || v != std::floor(v)) throw ValidationError("top k values must be positive integers");
            c.top_k = static_cast<int>(v);
            name << "k=" << c.top_k;
        }
        c.validate();
        const std::string tag = name.str();
        std::string suffix = tag;
        std::replace(suffix.begin(), suffix.end(), '=', '_');
        c.checkpoint_path = with_suffix(base.checkpoint_path, suffix);
        c.log_path = with_suffix(base.log_path, suffix);
        rows.push_back(run_experiment(tag, "sweep", c, train_set, test_set, truth, eval_options));
    }
    return rows;
}

std::string experiments_to_json(std::span<const ExperimentRow> rows) {
    json out = json::array();
    for (const auto& r : rows)
        out.push_back({{"name", r.name},
                       {"description", r.description},
                       {"config", json::parse(r.config.to_json())},
                       {"final_loss", r.final_loss},
                       {"report", json::parse(r.report.to_json())}});
    return out.dump(1);
}

std::string experiments_to_table(std::span<const ExperimentRow> rows) {
    std::ostringstream os;
    os << std::left << std::setw(14) << "experiment" << std::setw(38) << "description" << std::setw(12)
       << "patient acc" << std::setw(12) << "image acc" << std::setw(12) << "patient auc" << "final loss\n";
    for (const auto& r : rows) {
        os << std::left << std::setw(14) << r.name << std::setw(38) << r.description << std::fixed
           << std::setprecision(4) << std::setw(12) << r.patient_accuracy() << std::setw(12) << r.image_accuracy()
           << std::setw(12) << r.report.patient.auc.value_or(std::nan("")) << r.final_loss << '\n';
    }
    return os.str();
}

}  // namespace milslice
