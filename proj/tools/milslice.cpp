// milslice: command-line front end for dataset generation, training,
// evaluation, ablation, sweeps and CAM export.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "milslice/data.hpp"
#include "milslice/eval.hpp"
#include "milslice/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace milslice;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitFailure = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

std::string default_output_root() {
    if (const char* env = std::getenv("MILSLICE_OUTPUT_ROOT"); env && *env) return env;
    return "milslice_runs";
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

struct DataSelection {
    std::string manifest;
    std::vector<std::string> domains;
    std::vector<std::string> exclude;
    std::string mask_dir;

    std::vector<PatientRecord> records() const {
        auto r = load_dataset(manifest);
        if (!domains.empty()) r = filter_domains(r, domains, true);
        if (!exclude.empty()) r = filter_domains(r, exclude, false);
        return r;
    }
    SegmentationHook hook() const { return mask_dir.empty() ? identity_segmentation() : mask_directory_hook(mask_dir); }
};

void add_selection(CLI::App* cmd, DataSelection& sel, bool manifest_required = true) {
    auto* m = cmd->add_option("--manifest", sel.manifest, "Dataset manifest (manifest.jsonl)");
    if (manifest_required) m->required();
    cmd->add_option("--domains", sel.domains, "Keep only these domain tags");
    cmd->add_option("--exclude-domains", sel.exclude, "Drop these domain tags");
    cmd->add_option("--mask-dir", sel.mask_dir, "Lung mask directory applied before preprocessing");
}

// Training flags plus the negative switches, which are kept as plain bools so
// a dumped config reads back with the same meaning.
struct TrainFlags {
    TrainerConfig config;
    bool no_cls_loss = false;
    bool no_noisy_loss = false;
    bool no_augment = false;

    TrainerConfig resolved() const {
        TrainerConfig c = config;
        c.enable_cls_loss = !no_cls_loss;
        c.enable_noisy_loss = !no_noisy_loss;
        c.augmentation.enabled = !no_augment;
        return c;
    }
};

void add_train_flags(CLI::App* cmd, TrainFlags& flags) {
    TrainerConfig& c = flags.config;
    const std::map<std::string, TrainMode> modes{{"weak", TrainMode::kWeak},
                                                 {"slice_labels", TrainMode::kSliceLabels}};
    cmd->add_option("--backbone", c.backbone.id, "Backbone id")
        ->check(CLI::IsMember(BackboneRegistry::instance().ids()))
        ->capture_default_str();
    cmd->add_option("--input-size", c.backbone.input_size, "Backbone input size (0 = architecture default)")
        ->capture_default_str();
    cmd->add_option("--lambda", c.lambda, "Weight of the noisy loss")->capture_default_str();
    cmd->add_option("--lr", c.learning_rate, "Adam learning rate")->capture_default_str();
    cmd->add_option("--section-length", c.section_length, "Slices per section (l_s)")->capture_default_str();
    cmd->add_option("--top-k", c.top_k, "Slices averaged per section (k)")->capture_default_str();
    cmd->add_option("--dropout", c.dropout_rate, "Dropout rate on the embedding")->capture_default_str();
    cmd->add_option("--weight-decay", c.weight_decay, "Decoupled weight decay")->capture_default_str();
    cmd->add_option("--batch-size", c.batch_size, "Patients per batch")->capture_default_str();
    cmd->add_option("--iterations", c.max_iterations, "Training iterations")->capture_default_str();
    cmd->add_option("--seed", c.seed, "Random seed")->capture_default_str();
    cmd->add_option("--mode", c.mode, "weak | slice_labels")
        ->transform(CLI::CheckedTransformer(modes, CLI::ignore_case))
        ->default_str("weak");
    cmd->add_flag("--no-cls-loss", flags.no_cls_loss, "Disable the classification loss");
    cmd->add_flag("--no-noisy-loss", flags.no_noisy_loss, "Disable the noisy loss");
    cmd->add_flag("--no-augment", flags.no_augment, "Disable training augmentation");
    cmd->add_option("--checkpoint-every", c.checkpoint_every, "Checkpoint cadence in iterations (0 = end only)")
        ->capture_default_str();
}

EvalOptions eval_flags_defaults() { return {}; }

void add_eval_flags(CLI::App* cmd, EvalOptions& o) {
    cmd->add_option("--threshold", o.threshold, "Decision threshold")->capture_default_str();
    cmd->add_option("--box-threshold", o.box_rel_threshold, "CAM threshold relative to its peak")
        ->capture_default_str();
    cmd->add_option("--hit-iou", o.hit_iou, "IoU counted as a localization hit")->capture_default_str();
}

fs::path default_truth(const std::string& manifest) {
    const fs::path p = fs::path(manifest).parent_path() / "ground_truth.json";
    return fs::exists(p) ? p : fs::path();
}

std::optional<GroundTruth> load_truth(const std::string& explicit_path, const std::string& manifest) {
    const fs::path p = explicit_path.empty() ? default_truth(manifest) : fs::path(explicit_path);
    if (p.empty()) return std::nullopt;
    return GroundTruth::load(p);
}

void write_roc(const fs::path& path, std::span<const double> scores, std::span<const int> labels) {
    std::ostringstream os;
    os << "# fpr tpr\n";
    for (const auto& p : roc_auc(scores, labels).points) os << p.fpr << ' ' << p.tpr << '\n';
    write_text(path, os.str());
}

// Gray slice with the CAM blended into the red channel and boxes drawn in green.
void write_overlay(const fs::path& path, const Grid& slice, const Grid& cam, std::span<const LesionBox> boxes) {
    double lo = slice.values()[0], hi = lo;
    for (double v : slice.values()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const double range = hi > lo ? hi - lo : 1.0;
    const double peak = cam.max() > 0 ? cam.max() : 1.0;
    Grid r(slice.rows(), slice.cols()), g(slice.rows(), slice.cols()), b(slice.rows(), slice.cols());
    for (int y = 0; y < slice.rows(); ++y)
        for (int x = 0; x < slice.cols(); ++x) {
            const double gray = (slice(y, x) - lo) / range;
            const double heat = std::max(0.0, cam(y, x) / peak);
            r(y, x) = 0.6 * gray + 0.4 * heat;
            g(y, x) = 0.6 * gray;
            b(y, x) = 0.6 * gray;
        }
    for (const auto& lb : boxes) {
        const auto& bx = lb.box;
        for (int x = bx.x0; x < bx.x1; ++x)
            for (int y : {bx.y0, bx.y1 - 1}) {
                r(y, x) = 0;
                g(y, x) = 1;
                b(y, x) = 0;
            }
        for (int y = bx.y0; y < bx.y1; ++y)
            for (int x : {bx.x0, bx.x1 - 1}) {
                r(y, x) = 0;
                g(y, x) = 1;
                b(y, x) = 0;
            }
    }
    write_ppm(path, r, g, b);
}

// Global options plus those of the active subcommand, in a form --config reads back.
void dump_resolved(const CLI::App& app, const CLI::App& command, const fs::path& dir) {
    std::istringstream all(app.config_to_str(true, false));
    const std::string prefix = command.get_name() + ".";
    std::string out, line;
    while (std::getline(all, line)) {
        const auto eq = line.find('=');
        const std::string key = line.substr(0, eq);
        // An empty value means "unset"; written out, a list option would read
        // it back as one empty element.
        if (eq != std::string::npos && line.substr(eq + 1) == "\"\"") continue;
        if (key.find('.') == std::string::npos || key.rfind(prefix, 0) == 0) out += line + '\n';
    }
    write_text(dir / "resolved_config.ini", out);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Weakly supervised slice-stack classification toolkit"};
    app.require_subcommand(1);
    std::string output_root = default_output_root();
    app.add_option("--output-root", output_root, "Default parent of output directories (env MILSLICE_OUTPUT_ROOT)")
        ->capture_default_str();
    app.set_config("--config", "", "Key-value config file; command-line flags take precedence");

    // generate
    auto* gen = app.add_subcommand("generate", "Write a synthetic multi-domain dataset");
    SyntheticSpec spec;
    int gen_patients = 64, gen_domains = 4;
    std::string gen_out, gen_spec_file;
    gen->add_option("--out", gen_out, "Dataset directory (default <output-root>/dataset)");
    gen->add_option("--patients", gen_patients, "Total patients across domains")->capture_default_str();
    gen->add_option("--domains", gen_domains, "Number of built-in acquisition domains")->capture_default_str();
    gen->add_option("--spec", gen_spec_file, "Synthetic spec JSON (overrides the domain presets)");
    gen->add_option("--seed", spec.seed, "Random seed")->capture_default_str();
    gen->add_option("--slice-size", spec.slice_size, "Slice width and height")->capture_default_str();
    gen->add_option("--min-slices", spec.min_slices, "Minimum slices per volume")->capture_default_str();
    gen->add_option("--max-slices", spec.max_slices, "Maximum slices per volume")->capture_default_str();
    gen->add_option("--positive-fraction", spec.positive_fraction, "Fraction of positive patients")
        ->capture_default_str();
    gen->add_option("--min-lesion-radius", spec.min_lesion_radius)->capture_default_str();
    gen->add_option("--max-lesion-radius", spec.max_lesion_radius)->capture_default_str();
    gen->add_option("--min-lesion-intensity", spec.min_lesion_intensity)->capture_default_str();
    gen->add_option("--max-lesion-intensity", spec.max_lesion_intensity)->capture_default_str();
    gen->add_option("--min-lesions", spec.min_lesions)->capture_default_str();
    gen->add_option("--max-lesions", spec.max_lesions)->capture_default_str();

    // train
    auto* trn = app.add_subcommand("train", "Train a model from patient labels");
    TrainFlags train_flags;
    DataSelection train_sel, val_sel;
    std::string train_out, resume;
    add_selection(trn, train_sel);
    add_train_flags(trn, train_flags);
    trn->add_option("--out", train_out, "Run directory (default <output-root>/train)");
    trn->add_option("--resume", resume, "Checkpoint to resume from");
    trn->add_option("--val-manifest", val_sel.manifest, "Validation manifest for early stopping");
    trn->add_flag("--early-stop", train_flags.config.early_stop, "Stop when validation patient accuracy stalls");
    trn->add_option("--eval-every", train_flags.config.eval_every)->capture_default_str();
    trn->add_option("--patience", train_flags.config.patience)->capture_default_str();

    // eval
    auto* evl = app.add_subcommand("eval", "Evaluate a checkpoint");
    DataSelection eval_sel;
    EvalOptions eval_opts = eval_flags_defaults();
    std::string eval_ckpt, eval_truth, eval_out;
    evl->add_option("--checkpoint", eval_ckpt, "Model checkpoint")->required();
    add_selection(evl, eval_sel);
    add_eval_flags(evl, eval_opts);
    evl->add_option("--ground-truth", eval_truth, "Slice-level sidecar (default: next to the manifest)");
    evl->add_option("--out", eval_out, "Report directory (default <output-root>/eval)");

    // ablate and sweep share the training flags
    auto* abl = app.add_subcommand("ablate", "Run the four loss configurations");
    auto* swp = app.add_subcommand("sweep", "Sweep lambda or k");
    TrainFlags exp_flags;
    std::string exp_manifest, exp_truth, exp_out, sweep_param = "k";
    std::vector<std::string> train_domains, test_domains;
    std::vector<double> sweep_values;
    EvalOptions exp_eval = eval_flags_defaults();
    for (auto* cmd : {abl, swp}) {
        cmd->add_option("--manifest", exp_manifest, "Dataset manifest")->required();
        cmd->add_option("--train-domains", train_domains, "Training domain tags")->required();
        cmd->add_option("--test-domains", test_domains, "Held-out domain tags")->required();
        cmd->add_option("--ground-truth", exp_truth, "Slice-level sidecar (default: next to the manifest)");
        cmd->add_option("--out", exp_out, "Report directory");
        add_train_flags(cmd, exp_flags);
        add_eval_flags(cmd, exp_eval);
    }
    swp->add_option("--param", sweep_param, "lambda | k")->check(CLI::IsMember({"lambda", "k"}))->capture_default_str();
    swp->add_option("--values", sweep_values, "Values to try")->required();

    // explain
    auto* exp = app.add_subcommand("explain", "Export CAM overlays, boxes and section profiles");
    DataSelection explain_sel;
    std::string explain_ckpt, explain_out, explain_patient;
    double explain_threshold = 0.5, explain_box = 0.8;
    exp->add_option("--checkpoint", explain_ckpt, "Model checkpoint")->required();
    add_selection(exp, explain_sel);
    exp->add_option("--patient", explain_patient, "Patient id (default: every selected patient)");
    exp->add_option("--out", explain_out, "Output directory (default <output-root>/explain)");
    exp->add_option("--threshold", explain_threshold)->capture_default_str();
    exp->add_option("--box-threshold", explain_box)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitUsage;
    }

    const fs::path root = output_root;
    try {
        if (*gen) {
            const fs::path out = gen_out.empty() ? root / "dataset" : fs::path(gen_out);
            if (!gen_spec_file.empty()) {
                std::ifstream in(gen_spec_file);
                if (!in) throw UsageError("cannot open " + gen_spec_file);
                std::stringstream ss;
                ss << in.rdbuf();
                spec = synthetic_spec_from_json(ss.str());
            } else {
                spec.domains = preset_domains(gen_domains, gen_patients);
            }
            const auto ds = generate_synthetic(spec, out);
            dump_resolved(app, *gen, out);
            std::cout << "wrote " << ds.records.size() << " patients to " << out.string() << '\n';
        } else if (*trn) {
            const fs::path out = train_out.empty() ? root / "train" : fs::path(train_out);
            TrainerConfig train_cfg = train_flags.resolved();
            train_cfg.checkpoint_path = out / "model.ckpt";
            train_cfg.log_path = out / "train_log.jsonl";
            train_cfg.validate();
            fs::create_directories(out);
            dump_resolved(app, *trn, out);
            write_text(out / "trainer_config.json", train_cfg.to_json() + "\n");
            const auto volumes = load_volumes(train_sel.records());
            std::vector<Volume> validation;
            if (!val_sel.manifest.empty()) validation = load_volumes(val_sel.records());
            TrainOptions opts;
            opts.hook = train_sel.hook();
            opts.validation = validation;
            if (!resume.empty()) {
                auto ck = load_checkpoint(resume);
                opts.resume_from = std::move(ck.state);
            }
            opts.on_iteration = [&](const IterationRecord& r) {
                if (r.iteration % 50 == 0 || r.iteration == train_cfg.max_iterations)
                    std::cout << "iteration " << r.iteration << " loss " << r.loss << " (cls " << r.cls
                              << ", noisy " << r.noisy << ")\n";
            };
            try {
                const auto result = train(volumes, train_cfg, opts);
                std::cout << "finished at iteration " << result.state.iteration
                          << (result.early_stopped ? " (early stop)" : "") << "; checkpoint "
                          << train_cfg.checkpoint_path.string() << '\n';
            } catch (const TrainingDiverged& e) {
                save_checkpoint(out / "last_good.ckpt", e.last_good, train_cfg);
                throw;
            }
        } else if (*evl) {
            const fs::path out = eval_out.empty() ? root / "eval" : fs::path(eval_out);
            if (!fs::exists(eval_ckpt)) throw std::runtime_error("checkpoint not found: " + eval_ckpt);
            const auto ck = load_checkpoint(eval_ckpt);
            eval_opts.section_length = ck.config.section_length;
            eval_opts.top_k = ck.config.top_k;
            const auto truth = load_truth(eval_truth, eval_sel.manifest);
            const auto volumes = load_volumes(eval_sel.records());
            const auto report =
                evaluate(ck.state.model, volumes, truth ? &*truth : nullptr, eval_opts, eval_sel.hook());
            fs::create_directories(out);
            dump_resolved(app, *evl, out);
            write_text(out / "report.json", report.to_json() + "\n");
            write_text(out / "report.txt", report.to_table());
            std::vector<double> ps, ss;
            std::vector<int> pl, sl;
            for (const auto& p : report.patients) {
                ps.push_back(p.positive_probability);
                pl.push_back(p.label);
                if (const auto* pt = truth ? truth->find(p.patient_id) : nullptr)
                    for (size_t t = 0; t < pt->slices.size(); ++t) {
                        ss.push_back(p.slice_probability[t]);
                        sl.push_back(pt->slices[t].lesion ? 1 : 0);
                    }
            }
            if (report.patient.auc) write_roc(out / "roc_patient.txt", ps, pl);
            if (report.image.auc && !ss.empty()) write_roc(out / "roc_image.txt", ss, sl);
            std::cout << report.to_table();
        } else if (*abl || *swp) {
            const bool is_sweep = swp->parsed();
            const fs::path out = exp_out.empty() ? root / (is_sweep ? "sweep" : "ablate") : fs::path(exp_out);
            TrainerConfig exp_cfg = exp_flags.resolved();
            exp_cfg.checkpoint_path = out / "model.ckpt";
            exp_cfg.log_path = out / "train_log.jsonl";
            exp_cfg.validate();
            fs::create_directories(out);
            dump_resolved(app, is_sweep ? *swp : *abl, out);
            const auto records = load_dataset(exp_manifest);
            const auto train_set = load_volumes(filter_domains(records, train_domains, true));
            const auto test_set = load_volumes(filter_domains(records, test_domains, true));
            if (train_set.empty() || test_set.empty()) throw UsageError("empty train or test split");
            const auto truth = load_truth(exp_truth, exp_manifest);
            const GroundTruth* t = truth ? &*truth : nullptr;
            std::vector<ExperimentRow> rows;
            if (is_sweep) {
                const auto param = sweep_param == "lambda" ? SweepParameter::kLambda : SweepParameter::kTopK;
                rows = sweep(train_set, test_set, t, exp_cfg, exp_eval, param, sweep_values);
            } else {
                rows = ablation_suite(train_set, test_set, t, exp_cfg, exp_eval);
            }
            const std::string name = is_sweep ? "sweep" : "ablation";
            write_text(out / (name + ".json"), experiments_to_json(rows) + "\n");
            write_text(out / (name + ".txt"), experiments_to_table(rows));
            std::cout << experiments_to_table(rows);
        } else if (*exp) {
            const fs::path out = explain_out.empty() ? root / "explain" : fs::path(explain_out);
            if (!fs::exists(explain_ckpt)) throw std::runtime_error("checkpoint not found: " + explain_ckpt);
            const auto ck = load_checkpoint(explain_ckpt);
            const Model& model = ck.state.model;
            auto records = explain_sel.records();
            if (!explain_patient.empty()) {
                std::erase_if(records, [&](const PatientRecord& r) { return r.patient_id != explain_patient; });
                if (records.empty()) throw UsageError("unknown patient " + explain_patient);
            }
            fs::create_directories(out);
            dump_resolved(app, *exp, out);
            const auto hook = explain_sel.hook();
            for (const auto& rec : records) {
                const auto volume = load_volume(rec);
                const auto slices = preprocess_eval(volume, model.backbone.input_size(), hook);
                const auto inf = infer(model, slices, ck.config.section_length, ck.config.top_k, true);
                const fs::path pdir = out / rec.patient_id;
                fs::create_directories(pdir);
                const int rows = volume.slices.front().rows(), cols = volume.slices.front().cols();
                json boxes_json = json::array();
                for (size_t t = 0; t < slices.size(); ++t) {
                    const auto boxes = slice_boxes(inf.features[t], model.head, inf.scores[t], rows, cols,
                                                   explain_threshold, explain_box, &model.backbone);
                    json bj = json::array();
                    for (const auto& b : boxes) bj.push_back({b.box.x0, b.box.y0, b.box.x1, b.box.y1});
                    boxes_json.push_back({{"slice", t}, {"probability", sigmoid(inf.scores[t][1])}, {"boxes", bj}});
                    for (int c = 0; c < kNumClasses; ++c) {
                        const auto cam =
                            upsample_map(activation_map(inf.features[t], model.head, c), rows, cols, model.backbone);
                        std::ostringstream name;
                        name << "overlay_" << std::setw(3) << std::setfill('0') << t << "_c" << c << ".ppm";
                        const std::span<const LesionBox> drawn =
                            c == 1 ? std::span<const LesionBox>(boxes) : std::span<const LesionBox>();
                        write_overlay(pdir / name.str(), volume.slices[t], cam.map, drawn);
                    }
                }
                std::ostringstream prof;
                prof << "# section positive negative\n";
                for (const auto& e : section_profile(inf)) prof << e.section << ' ' << e.positive << ' ' << e.negative << '\n';
                write_text(pdir / "profile.txt", prof.str());
                write_text(pdir / "boxes.json",
                           json{{"patient_id", rec.patient_id},
                                {"positive_probability", inf.patient.probability[1]},
                                {"slices", boxes_json}}
                                   .dump(1) +
                               "\n");
                std::cout << rec.patient_id << ": P(positive) = " << inf.patient.probability[1] << ", "
                          << inf.sections.size() << " sections\n";
            }
        }
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return 0;
}
