#include "milslice/eval.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace milslice {

using json = nlohmann::json;

MetricsReport compute_metrics(std::span<const double> predictions, std::span<const int> labels,
                              double threshold) {
    if (predictions.size() != labels.size())
        throw ValidationError("predictions and labels differ in length");
    MetricsReport r;
    for (size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] != 0 && labels[i] != 1) throw ValidationError("labels must be 0 or 1");
        const bool pred = predictions[i] >= threshold;
        if (labels[i] == 1)
            (pred ? r.counts.tp : r.counts.fn)++;
        else
            (pred ? r.counts.fp : r.counts.tn)++;
    }
    const auto& c = r.counts;
    auto ratio = [](long num, long den) -> std::optional<double> {
        if (den == 0) return std::nullopt;
        return static_cast<double>(num) / static_cast<double>(den);
    };
    r.accuracy = ratio(c.tp + c.tn, c.total());
    r.precision = ratio(c.tp, c.tp + c.fp);
    r.sensitivity = ratio(c.tp, c.tp + c.fn);
    r.specificity = ratio(c.tn, c.tn + c.fp);
    r.f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn);
    if (c.tp + c.fn > 0 && c.tn + c.fp > 0) r.auc = roc_auc(predictions, labels).auc;
    return r;
}

RocCurve roc_auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw ValidationError("scores and labels differ in length");
    long pos = 0, neg = 0;
    for (int l : labels) {
        if (l != 0 && l != 1) throw ValidationError("labels must be 0 or 1");
        (l == 1 ? pos : neg)++;
    }
    if (pos == 0 || neg == 0) throw ValidationError("ROC needs both classes");

    std::vector<size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] > scores[b]; });

    RocCurve roc;
    roc.points.push_back({0.0, 0.0});
    long tp = 0, fp = 0;
    // Trapezoids counted in units of 1 / (2 * pos * neg) stay integral, so the
    // area is a single rounding away from the exact pair-counting value.
    long long area = 0;
    for (size_t i = 0; i < order.size();) {
        size_t j = i;
        long dtp = 0, dfp = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] == 1 ? dtp : dfp)++;
            ++j;
        }
        area += static_cast<long long>(dfp) * (2 * tp + dtp);
        tp += dtp;
        fp += dfp;
        roc.points.push_back({static_cast<double>(fp) / neg, static_cast<double>(tp) / pos});
        i = j;
    }
    roc.auc = static_cast<double>(area) / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
    return roc;
}

SectionProfile section_profile(const VolumeInference& inference) {
    SectionProfile out;
    for (size_t i = 0; i < inference.sections.size(); ++i)
        out.push_back({static_cast<int>(i), inference.sections[i].probability[1],
                       inference.sections[i].probability[0]});
    return out;
}

SectionProfile section_profile(std::span<const Grid> slices, const Model& model, int section_length,
                               int top_k) {
    return section_profile(infer(model, slices, section_length, top_k));
}

std::vector<LesionBox> cam_to_boxes(const ActivationMap& map, double rel_threshold) {
    std::vector<LesionBox> out;
    const Grid& g = map.map;
    if (g.empty()) return out;
    const double peak = g.max();
    if (!(peak > 0.0)) return out;
    const double cut = rel_threshold * peak;
    const int rows = g.rows(), cols = g.cols();
    std::vector<int> label(g.size(), -1);
    std::vector<std::pair<int, int>> stack;
    for (int r0 = 0; r0 < rows; ++r0)
        for (int c0 = 0; c0 < cols; ++c0) {
            const size_t idx0 = static_cast<size_t>(r0) * cols + c0;
            if (label[idx0] >= 0 || g(r0, c0) < cut) continue;
            LesionBox box{map.class_index, {c0, r0, c0 + 1, r0 + 1}, g(r0, c0)};
            label[idx0] = static_cast<int>(out.size());
            stack.assign(1, {r0, c0});
            while (!stack.empty()) {
                const auto [r, c] = stack.back();
                stack.pop_back();
                box.box.x0 = std::min(box.box.x0, c);
                box.box.y0 = std::min(box.box.y0, r);
                box.box.x1 = std::max(box.box.x1, c + 1);
                box.box.y1 = std::max(box.box.y1, r + 1);
                box.peak = std::max(box.peak, g(r, c));
                const int dr[4] = {-1, 1, 0, 0}, dc[4] = {0, 0, -1, 1};
                for (int d = 0; d < 4; ++d) {
                    const int nr = r + dr[d], nc = c + dc[d];
                    if (nr < 0 || nc < 0 || nr >= rows || nc >= cols) continue;
                    const size_t idx = static_cast<size_t>(nr) * cols + nc;
                    if (label[idx] >= 0 || g(nr, nc) < cut) continue;
                    label[idx] = static_cast<int>(out.size());
                    stack.push_back({nr, nc});
                }
            }
            out.push_back(box);
        }
    std::stable_sort(out.begin(), out.end(), [](const LesionBox& a, const LesionBox& b) { return a.peak > b.peak; });
    return out;
}

ActivationMap upsample_map(const ActivationMap& map, int rows, int cols) {
    return {map.class_index, resize(map.map, rows, cols)};
}

ActivationMap upsample_map(const ActivationMap& map, int rows, int cols, const Backbone& backbone) {
    // Input pixel x sits on map coordinate (x - offset) / stride; the window
    // below expresses that in resample's pixel-centre convention.
    const auto g = backbone.map_geometry();
    const double origin = 0.5 - (0.5 + g.offset) / g.stride;
    const double extent = backbone.input_size() / g.stride;
    return {map.class_index, resample(map.map, origin, origin, extent, extent, rows, cols)};
}

double box_iou(const Box& a, const Box& b) {
    const int ix = std::max(0, std::min(a.x1, b.x1) - std::max(a.x0, b.x0));
    const int iy = std::max(0, std::min(a.y1, b.y1) - std::max(a.y0, b.y0));
    const double inter = static_cast<double>(ix) * iy;
    const double uni = static_cast<double>(a.area()) + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

LocalizationScore localization_score(std::span<const LesionBox> boxes, std::span<const Box> ground_truth,
                                     double hit_iou) {
    LocalizationScore s;
    if (ground_truth.empty()) return s;
    double iou_sum = 0;
    int hits = 0;
    for (const auto& gt : ground_truth) {
        double best = 0;
        for (const auto& b : boxes) best = std::max(best, box_iou(b.box, gt));
        iou_sum += best;
        if (best >= hit_iou) ++hits;
    }
    s.matched = static_cast<int>(ground_truth.size());
    s.mean_iou = iou_sum / s.matched;
    s.hit_rate = static_cast<double>(hits) / s.matched;
    return s;
}

std::vector<LesionBox> slice_boxes(const FeatureMaps& features, const ClassifierHead& head,
                                   const SliceClassScores& scores, int rows, int cols, double threshold,
                                   double rel_threshold, const Backbone* backbone) {
    if (sigmoid(scores[1]) < threshold) return {};
    const auto map = activation_map(features, head, 1);
    const auto cam = backbone ? upsample_map(map, rows, cols, *backbone) : upsample_map(map, rows, cols);
    return cam_to_boxes(cam, rel_threshold);
}

EvaluationReport evaluate(const Model& model, std::span<const Volume> volumes, const GroundTruth* truth,
                          const EvalOptions& options, const SegmentationHook& hook) {
    EvaluationReport report;
    std::vector<double> patient_pred, image_pred, image_noisy_pred, broadcast_pred;
    std::vector<int> patient_label, image_label, broadcast_label;
    bool all_truth = truth != nullptr;
    double iou_sum = 0, hit_sum = 0;
    int gt_boxes = 0;
    long false_boxes = 0, negative_slices = 0;

    for (const auto& volume : volumes) {
        if (volume.slices.empty()) {
            warn("patient " + volume.record.patient_id + " has no slices; skipped");
            continue;
        }
        const auto slices = preprocess_eval(volume, model.backbone.input_size(), hook);
        const bool want_boxes = options.localization && truth != nullptr;
        const auto inf = infer(model, slices, options.section_length, options.top_k, want_boxes);

        PatientResult pr;
        pr.patient_id = volume.record.patient_id;
        pr.domain_tag = volume.record.domain_tag;
        pr.label = volume.record.label;
        pr.positive_probability = inf.patient.probability[1];
        pr.slice_probability = inf.slice_positive_probability();
        for (const auto& z : inf.noisy) pr.slice_noisy_probability.push_back(z[1][1]);
        pr.profile = section_profile(inf);

        patient_pred.push_back(pr.positive_probability);
        patient_label.push_back(pr.label);
        for (double p : pr.slice_probability) {
            broadcast_pred.push_back(p);
            broadcast_label.push_back(pr.label);
        }

        const PatientTruth* pt = truth ? truth->find(pr.patient_id) : nullptr;
        if (pt && pt->slices.size() != volume.slices.size())
            throw ValidationError("ground truth for " + pr.patient_id + " lists " +
                                  std::to_string(pt->slices.size()) + " slices, volume has " +
                                  std::to_string(volume.slices.size()));
        if (!pt) all_truth = false;
        if (pt) {
            const int rows = volume.slices.front().rows(), cols = volume.slices.front().cols();
            for (size_t t = 0; t < pt->slices.size(); ++t) {
                const auto& st = pt->slices[t];
                image_pred.push_back(pr.slice_probability[t]);
                image_noisy_pred.push_back(pr.slice_noisy_probability[t]);
                image_label.push_back(st.lesion ? 1 : 0);
                if (!want_boxes) continue;
                const auto boxes = slice_boxes(inf.features[t], model.head, inf.scores[t], rows, cols,
                                               options.threshold, options.box_rel_threshold, &model.backbone);
                if (!st.lesion && pt->label == 0) {
                    ++negative_slices;
                    false_boxes += static_cast<long>(boxes.size());
                } else if (st.lesion && pr.slice_probability[t] >= options.threshold) {
                    const auto s = localization_score(boxes, st.boxes, options.hit_iou);
                    iou_sum += s.mean_iou * s.matched;
                    hit_sum += s.hit_rate * s.matched;
                    gt_boxes += s.matched;
                }
            }
        }
        report.patients.push_back(std::move(pr));
    }

    report.patient = compute_metrics(patient_pred, patient_label, options.threshold);
    report.image_patient_label = compute_metrics(broadcast_pred, broadcast_label, options.threshold);
    if (truth && !all_truth) warn("ground truth does not cover every evaluated patient");
    if (!image_label.empty()) {
        report.image = compute_metrics(image_pred, image_label, options.threshold);
        report.image_noisy = compute_metrics(image_noisy_pred, image_label, options.threshold);
    } else {
        report.image = report.image_patient_label;
    }
    if (options.localization && truth) {
        if (gt_boxes > 0) report.localization = LocalizationScore{iou_sum / gt_boxes, hit_sum / gt_boxes, gt_boxes};
        if (negative_slices > 0)
            report.false_boxes_per_negative_slice = static_cast<double>(false_boxes) / negative_slices;
    }
    return report;
}

namespace {

json opt(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json metrics_json(const MetricsReport& m) {
    return {{"tp", m.counts.tp},           {"fp", m.counts.fp},
            {"tn", m.counts.tn},           {"fn", m.counts.fn},
            {"accuracy", opt(m.accuracy)}, {"precision", opt(m.precision)},
            {"sensitivity", opt(m.sensitivity)}, {"specificity", opt(m.specificity)},
            {"f1", opt(m.f1)},             {"auc", opt(m.auc)}};
}

std::string fmt(const std::optional<double>& v) {
    if (!v) return "n/a";
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << *v;
    return os.str();
}

}  // namespace

std::string EvaluationReport::to_json() const {
    json j;
    j["patient"] = metrics_json(patient);
    j["image"] = metrics_json(image);
    j["image_noisy"] = metrics_json(image_noisy);
    j["image_patient_label"] = metrics_json(image_patient_label);
    j["localization"] = localization ? json{{"mean_iou", localization->mean_iou},
                                            {"hit_rate", localization->hit_rate},
                                            {"boxes", localization->matched}}
                                     : json(nullptr);
    j["false_boxes_per_negative_slice"] = opt(false_boxes_per_negative_slice);
    json ps = json::array();
    for (const auto& p : patients) {
        json prof = json::array();
        for (const auto& e : p.profile) prof.push_back({{"section", e.section}, {"positive", e.positive}, {"negative", e.negative}});
        ps.push_back({{"patient_id", p.patient_id},
                      {"domain", p.domain_tag},
                      {"label", p.label},
                      {"positive_probability", p.positive_probability},
                      {"slice_probability", p.slice_probability},
                      {"slice_noisy_probability", p.slice_noisy_probability},
                      {"sections", prof}});
    }
    j["patients"] = ps;
    return j.dump(1);
}

std::string EvaluationReport::to_table() const {
    std::ostringstream os;
    os << std::left << std::setw(22) << "level" << std::setw(10) << "accuracy" << std::setw(10) << "precision"
       << std::setw(12) << "sensitivity" << std::setw(12) << "specificity" << std::setw(10) << "f1"
       << std::setw(10) << "auc" << '\n';
    auto row = [&](const char* name, const MetricsReport& m) {
        os << std::left << std::setw(22) << name << std::setw(10) << fmt(m.accuracy) << std::setw(10)
           << fmt(m.precision) << std::setw(12) << fmt(m.sensitivity) << std::setw(12) << fmt(m.specificity)
           << std::setw(10) << fmt(m.f1) << std::setw(10) << fmt(m.auc) << '\n';
    };
    row("patient", patient);
    row("image", image);
    row("image (noisy channel)", image_noisy);
    row("image (patient label)", image_patient_label);
    if (localization)
        os << "localization: mean IoU " << fmt(localization->mean_iou) << ", hit rate "
           << fmt(localization->hit_rate) << " over " << localization->matched << " boxes\n";
    if (false_boxes_per_negative_slice)
        os << "false boxes per negative-patient slice: " << fmt(false_boxes_per_negative_slice) << '\n';
    return os.str();
}

}  // namespace milslice
