#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "milslice/data.hpp"

namespace milslice {

namespace fs = std::filesystem;
using json = nlohmann::json;

void SyntheticSpec::validate() const {
    auto fail = [](const std::string& m) { throw ValidationError("synthetic spec: " + m); };
    if (domains.empty()) fail("at least one domain is required");
    if (min_slices < 1 || max_slices < min_slices) fail("bad volume length range");
    if (slice_size < 8) fail("slice size must be >= 8");
    if (min_lesions < 1 || max_lesions < min_lesions) fail("bad lesion count range");
    if (min_lesion_radius <= 0 || max_lesion_radius < min_lesion_radius) fail("bad lesion radius range");
    if (2.0 * max_lesion_radius + 1.0 > slice_size * 0.5)
        fail("lesion diameter does not fit inside the lung field of a " + std::to_string(slice_size) +
             " pixel slice");
    if (min_lesion_intensity <= 0 || max_lesion_intensity < min_lesion_intensity)
        fail("bad lesion intensity range");
    if (min_run_length < 1 || max_run_length < min_run_length) fail("bad lesion run length range");
    if (positive_fraction < 0.0 || positive_fraction > 1.0) fail("positive fraction must be in [0, 1]");
    for (const auto& d : domains) {
        if (d.name.empty()) fail("domain name must be non-empty");
        if (d.patients < 0) fail("domain " + d.name + " has a negative patient count");
        if (d.contrast_gain <= 0 || d.gamma <= 0 || d.noise_level < 0)
            fail("domain " + d.name + " has invalid acquisition parameters");
    }
    std::vector<std::string> names;
    for (const auto& d : domains) names.push_back(d.name);
    std::sort(names.begin(), names.end());
    if (std::adjacent_find(names.begin(), names.end()) != names.end()) fail("duplicate domain names");
}

int total_patients(const SyntheticSpec& spec) {
    int n = 0;
    for (const auto& d : spec.domains) n += d.patients;
    return n;
}

std::vector<DomainSpec> preset_domains(int count, int patients) {
    if (count < 1) throw ValidationError("at least one domain is required");
    if (patients < 0) throw ValidationError("patient count must be >= 0");
    struct Preset {
        double offset, gain, noise, gamma;
    };
    static constexpr Preset table[] = {
        {0.00, 1.0, 0.02, 1.0},
        {0.25, 0.8, 0.03, 1.2},
        {0.10, 1.3, 0.02, 0.8},
        {0.40, 1.6, 0.04, 0.9},
    };
    std::vector<DomainSpec> out;
    for (int i = 0; i < count; ++i) {
        DomainSpec d;
        d.name = i < 26 ? std::string(1, static_cast<char>('A' + i)) : "D" + std::to_string(i);
        if (i < 4) {
            const auto& p = table[i];
            d.intensity_offset = p.offset;
            d.contrast_gain = p.gain;
            d.noise_level = p.noise;
            d.gamma = p.gamma;
        } else {
            Random rng(mix_seed(0x646f6dULL, static_cast<std::uint64_t>(i)));
            d.intensity_offset = rng.uniform(0.0, 0.4);
            d.contrast_gain = rng.uniform(0.8, 1.6);
            d.noise_level = rng.uniform(0.02, 0.04);
            d.gamma = rng.uniform(0.8, 1.2);
        }
        d.patients = patients / count + (i < patients % count ? 1 : 0);
        out.push_back(d);
    }
    return out;
}

namespace {

struct Ellipse {
    double cx, cy, rx, ry;
    double radius2(double x, double y) const {
        const double dx = (x - cx) / rx, dy = (y - cy) / ry;
        return dx * dx + dy * dy;
    }
};

struct Lesion {
    int lung = 0;        // 0 left, 1 right
    double u = 0, v = 0; // position inside the lung, in units of its semi-axes
    double radius = 0;
    double intensity = 0;
    int first = 0;
    int length = 0;
};

constexpr double kAir = 0.08;
constexpr double kBody = 0.60;
constexpr double kLung = 0.15;

}  // namespace

RenderedPatient render_patient(const SyntheticSpec& spec, int index) {
    spec.validate();
    if (index < 0 || index >= total_patients(spec)) throw std::out_of_range("patient index out of range");

    int local = index;
    const DomainSpec* domain = nullptr;
    for (const auto& d : spec.domains) {
        if (local < d.patients) {
            domain = &d;
            break;
        }
        local -= d.patients;
    }

    Random rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));
    const int n = rng.uniform_int(spec.min_slices, spec.max_slices);
    // Exact per-domain class balance, interleaved.
    const double f = spec.positive_fraction;
    const int label = std::floor((local + 1) * f + 1e-9) > std::floor(local * f + 1e-9) ? 1 : 0;

    const double size = spec.slice_size;
    const double jitter = rng.uniform(0.92, 1.08);
    const Ellipse body{size / 2, size / 2, 0.46 * size, 0.40 * size * jitter};
    const double tex_phase_x = rng.uniform(0, 2 * std::numbers::pi);
    const double tex_phase_y = rng.uniform(0, 2 * std::numbers::pi);
    const double tex_freq = rng.uniform(0.35, 0.6);

    std::vector<Lesion> lesions;
    if (label == 1) {
        const int count = rng.uniform_int(spec.min_lesions, spec.max_lesions);
        for (int l = 0; l < count; ++l) {
            Lesion les;
            les.lung = rng.uniform_int(0, 1);
            const double angle = rng.uniform(0, 2 * std::numbers::pi);
            const double rad = std::sqrt(rng.uniform()) * 0.45;
            les.u = rad * std::cos(angle);
            les.v = rad * std::sin(angle);
            les.radius = rng.uniform(spec.min_lesion_radius, spec.max_lesion_radius);
            les.intensity = rng.uniform(spec.min_lesion_intensity, spec.max_lesion_intensity);
            les.length = std::min(n, rng.uniform_int(spec.min_run_length, spec.max_run_length));
            les.first = rng.uniform_int(0, n - les.length);
            lesions.push_back(les);
        }
    }

    RenderedPatient out;
    out.truth.patient_id = domain->name + "_" + [&] {
        std::ostringstream os;
        os << std::setw(3) << std::setfill('0') << local;
        return os.str();
    }();
    out.truth.label = label;
    out.truth.domain_tag = domain->name;

    for (int z = 0; z < n; ++z) {
        // Lungs grow towards the middle of the stack.
        const double profile = 0.65 + 0.35 * std::sin(std::numbers::pi * (z + 0.5) / n);
        const Ellipse lungs[2] = {
            {size * 0.31, size / 2, 0.13 * size * profile, 0.27 * size * profile * jitter},
            {size * 0.69, size / 2, 0.13 * size * profile, 0.27 * size * profile * jitter}};

        Grid img(spec.slice_size, spec.slice_size);
        Grid mask(spec.slice_size, spec.slice_size);
        SliceTruth truth;
        for (int y = 0; y < spec.slice_size; ++y)
            for (int x = 0; x < spec.slice_size; ++x) {
                const double px = x + 0.5, py = y + 0.5;
                double v = kAir;
                if (body.radius2(px, py) <= 1.0) {
                    v = kBody;
                    if (lungs[0].radius2(px, py) <= 1.0 || lungs[1].radius2(px, py) <= 1.0) {
                        v = kLung + 0.03 * std::sin(tex_freq * px + tex_phase_x) *
                                        std::cos(tex_freq * py + tex_phase_y + 0.2 * z);
                    }
                }
                img(y, x) = v;
            }

        for (const auto& les : lesions) {
            if (z < les.first || z >= les.first + les.length) continue;
            const double t = (z - les.first + 0.5) / les.length;
            const double r = les.radius * (0.6 + 0.4 * std::sin(std::numbers::pi * t));
            const auto& lung = lungs[les.lung];
            const double cx = lung.cx + les.u * lung.rx;
            const double cy = lung.cy + les.v * lung.ry;
            Box box{spec.slice_size, spec.slice_size, 0, 0};
            bool any = false;
            for (int y = 0; y < spec.slice_size; ++y)
                for (int x = 0; x < spec.slice_size; ++x) {
                    const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
                    const double d2 = (dx * dx + dy * dy) / (r * r);
                    if (d2 > 1.0) continue;
                    // Hazy opacity, brightest at the centre.
                    img(y, x) += les.intensity * (1.0 - 0.35 * d2);
                    mask(y, x) = 1.0;
                    box.x0 = std::min(box.x0, x);
                    box.y0 = std::min(box.y0, y);
                    box.x1 = std::max(box.x1, x + 1);
                    box.y1 = std::max(box.y1, y + 1);
                    any = true;
                }
            if (any) {
                truth.lesion = true;
                truth.boxes.push_back(box);
            }
        }

        // Acquisition model of the domain.
        for (double& v : img.values()) {
            v = domain->contrast_gain * std::pow(std::max(v, 0.0), domain->gamma) +
                domain->intensity_offset + domain->noise_level * rng.normal();
            v = std::clamp(v, 0.0, 65535.0 / kIntensityScale);
        }

        out.slices.push_back(std::move(img));
        out.masks.push_back(std::move(mask));
        out.truth.slices.push_back(std::move(truth));
    }
    return out;
}

std::string synthetic_spec_to_json(const SyntheticSpec& s) {
    json domains = json::array();
    for (const auto& d : s.domains)
        domains.push_back({{"name", d.name},
                           {"patients", d.patients},
                           {"intensity_offset", d.intensity_offset},
                           {"contrast_gain", d.contrast_gain},
                           {"noise_level", d.noise_level},
                           {"gamma", d.gamma}});
    json j{{"version", 1},
           {"min_slices", s.min_slices},
           {"max_slices", s.max_slices},
           {"slice_size", s.slice_size},
           {"min_lesions", s.min_lesions},
           {"max_lesions", s.max_lesions},
           {"min_lesion_radius", s.min_lesion_radius},
           {"max_lesion_radius", s.max_lesion_radius},
           {"min_lesion_intensity", s.min_lesion_intensity},
           {"max_lesion_intensity", s.max_lesion_intensity},
           {"min_run_length", s.min_run_length},
           {"max_run_length", s.max_run_length},
           {"positive_fraction", s.positive_fraction},
           {"seed", s.seed},
           {"domains", domains}};
    return j.dump(1);
}

SyntheticSpec synthetic_spec_from_json(const std::string& text) {
    const json j = json::parse(text);
    SyntheticSpec s;
    s.min_slices = j.value("min_slices", s.min_slices);
    s.max_slices = j.value("max_slices", s.max_slices);
    s.slice_size = j.value("slice_size", s.slice_size);
    s.min_lesions = j.value("min_lesions", s.min_lesions);
    s.max_lesions = j.value("max_lesions", s.max_lesions);
    s.min_lesion_radius = j.value("min_lesion_radius", s.min_lesion_radius);
    s.max_lesion_radius = j.value("max_lesion_radius", s.max_lesion_radius);
    s.min_lesion_intensity = j.value("min_lesion_intensity", s.min_lesion_intensity);
    s.max_lesion_intensity = j.value("max_lesion_intensity", s.max_lesion_intensity);
    s.min_run_length = j.value("min_run_length", s.min_run_length);
    s.max_run_length = j.value("max_run_length", s.max_run_length);
    s.positive_fraction = j.value("positive_fraction", s.positive_fraction);
    s.seed = j.value("seed", s.seed);
    if (j.contains("domains")) {
        s.domains.clear();
        for (const auto& dj : j.at("domains")) {
            DomainSpec d;
            d.name = dj.value("name", d.name);
            d.patients = dj.value("patients", d.patients);
            d.intensity_offset = dj.value("intensity_offset", d.intensity_offset);
            d.contrast_gain = dj.value("contrast_gain", d.contrast_gain);
            d.noise_level = dj.value("noise_level", d.noise_level);
            d.gamma = dj.value("gamma", d.gamma);
            s.domains.push_back(d);
        }
    }
    return s;
}

GeneratedDataset generate_synthetic(const SyntheticSpec& spec, const fs::path& dir) {
    spec.validate();
    fs::create_directories(dir);
    GeneratedDataset out;
    out.manifest = dir / "manifest.jsonl";
    out.ground_truth = dir / "ground_truth.json";
    const int total = total_patients(spec);
    for (int i = 0; i < total; ++i) {
        auto patient = render_patient(spec, i);
        PatientRecord rec;
        rec.patient_id = patient.truth.patient_id;
        rec.label = patient.truth.label;
        rec.domain_tag = patient.truth.domain_tag;
        const fs::path pdir = dir / rec.patient_id;
        fs::create_directories(pdir);
        for (size_t z = 0; z < patient.slices.size(); ++z) {
            std::ostringstream name;
            name << "slice_" << std::setw(3) << std::setfill('0') << z << ".pgm";
            const fs::path p = pdir / name.str();
            write_pgm16(p, patient.slices[z]);
            rec.slice_paths.push_back(p);
        }
        out.records.push_back(std::move(rec));
        out.truth.patients.push_back(std::move(patient.truth));
    }
    write_manifest(out.manifest, out.records);
    out.truth.save(out.ground_truth);
    std::ofstream(dir / "synthetic_spec.json", std::ios::trunc) << synthetic_spec_to_json(spec) << '\n';
    return out;
}

}  // namespace milslice
