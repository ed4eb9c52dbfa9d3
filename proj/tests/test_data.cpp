#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "milslice/data.hpp"
#include "test_support.hpp"

using namespace milslice;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Concatenated bytes of every file under `dir`, in path order.
std::string tree_bytes(const fs::path& dir) {
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::string out;
    for (const auto& f : files) out += fs::relative(f, dir).string() + "\n" + slurp(f);
    return out;
}

SyntheticSpec small_spec() {
    SyntheticSpec spec;
    spec.min_slices = 6;
    spec.max_slices = 10;
    spec.min_run_length = 2;
    spec.max_run_length = 4;
    spec.domains = preset_domains(2, 4);
    spec.seed = 7;
    return spec;
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p);
    out << text;
}

double volume_mean(const RenderedPatient& p) {
    double sum = 0, n = 0;
    for (const auto& s : p.slices) {
        for (double v : s.values()) sum += v;
        n += static_cast<double>(s.size());
    }
    return sum / n;
}

}  // namespace

TEST_CASE("manifest round-trip keeps records and slice counts") {
    TempDir dir("manifest");
    std::vector<PatientRecord> records(2);
    records[0] = {"p1", 1, {}, "A"};
    records[1] = {"p2", 0, {}, "B"};
    for (int i = 0; i < 20; ++i) {
        const auto path = dir / ("p1_" + std::to_string(i) + ".pgm");
        write_pgm16(path, Grid(4, 4, 0.5));
        records[0].slice_paths.push_back(path);
    }
    for (int i = 0; i < 15; ++i) {
        const auto path = dir / ("p2_" + std::to_string(i) + ".pgm");
        write_pgm16(path, Grid(4, 4, 0.25));
        records[1].slice_paths.push_back(path);
    }
    write_manifest(dir / "manifest.jsonl", records);
    const auto loaded = load_dataset(dir / "manifest.jsonl");
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].patient_id == "p1");
    CHECK(loaded[0].label == 1);
    CHECK(loaded[0].slice_paths.size() == 20);
    CHECK(loaded[1].slice_paths.size() == 15);
    CHECK(loaded[1].domain_tag == "B");
    CHECK(fs::equivalent(loaded[1].slice_paths[3], records[1].slice_paths[3]));

    const auto volume = load_volume(loaded[1]);
    CHECK(volume.slices.size() == 15);
    CHECK(volume.slices[0](1, 1) == doctest::Approx(0.25).epsilon(1e-4));
}

TEST_CASE("manifest errors") {
    TempDir dir("manifest_err");
    write_pgm16(dir / "a.pgm", Grid(2, 2));
    const std::string header = "{\"format\": \"milslice-manifest\", \"version\": 1}\n";

    write_text(dir / "empty.jsonl", header);
    const long before = warning_count();
    CHECK(load_dataset(dir / "empty.jsonl").empty());
    CHECK(warning_count() == before + 1);

    write_text(dir / "label.jsonl", header + R"({"patient_id": "x", "label": 2, "domain": "A", "slices": ["a.pgm"]})" "\n");
    CHECK_THROWS_AS(load_dataset(dir / "label.jsonl"), ValidationError);

    write_text(dir / "missing.jsonl", header + R"({"patient_id": "x", "label": 1, "domain": "A", "slices": ["nope.pgm"]})" "\n");
    try {
        load_dataset(dir / "missing.jsonl");
        FAIL("expected a missing-file error");
    } catch (const ValidationError& e) {
        CHECK(std::string(e.what()).find("nope.pgm") != std::string::npos);
    }

    write_text(dir / "bad.jsonl", header + R"({"patient_id": "x", "label": 1, "domain": "A", "slices": ["a.pgm"]})" "\n{oops\n");
    try {
        load_dataset(dir / "bad.jsonl");
        FAIL("expected a parse error");
    } catch (const ParseError& e) {
        CHECK(e.line == 3);
    }
    CHECK_THROWS(load_dataset(dir / "does_not_exist.jsonl"));
}

TEST_CASE("16-bit PGM round-trip") {
    TempDir dir("pgm");
    Grid g(3, 5);
    for (size_t i = 0; i < g.size(); ++i) g.values()[i] = 0.1 * static_cast<double>(i);
    write_pgm16(dir / "g.pgm", g);
    const auto back = read_pgm16(dir / "g.pgm");
    REQUIRE(back.rows() == 3);
    REQUIRE(back.cols() == 5);
    for (size_t i = 0; i < g.size(); ++i) CHECK(std::abs(back.values()[i] - g.values()[i]) <= 0.5 / kIntensityScale);
}

TEST_CASE("synthetic generation is byte-identical for a fixed seed") {
    TempDir a("synth_a"), b("synth_b");
    const auto spec = small_spec();
    generate_synthetic(spec, a.path());
    generate_synthetic(spec, b.path());
    CHECK(tree_bytes(a.path()) == tree_bytes(b.path()));

    auto other = spec;
    other.seed = 8;
    TempDir c("synth_c");
    generate_synthetic(other, c.path());
    CHECK(tree_bytes(a.path()) != tree_bytes(c.path()));

    const auto spec_back = synthetic_spec_from_json(slurp(a / "synthetic_spec.json"));
    CHECK(synthetic_spec_to_json(spec_back) == synthetic_spec_to_json(spec));
}

TEST_CASE("generated dataset loads back with matching ground truth") {
    TempDir dir("synth_load");
    const auto spec = small_spec();
    const auto gen = generate_synthetic(spec, dir.path() / "nested" / "out");
    const auto records = load_dataset(gen.manifest);
    const auto truth = GroundTruth::load(gen.ground_truth);
    REQUIRE(records.size() == 4);
    int positives = 0;
    for (const auto& r : records) {
        const auto* t = truth.find(r.patient_id);
        REQUIRE(t != nullptr);
        CHECK(t->slices.size() == r.slice_paths.size());
        CHECK(t->label == r.label);
        positives += r.label;
    }
    CHECK(positives == 2);
    CHECK(truth.find("nobody") == nullptr);
}

TEST_CASE("lesions form contiguous runs only in positive patients, and masks explain every flag") {
    auto spec = small_spec();
    spec.domains = preset_domains(3, 30);
    for (int i = 0; i < total_patients(spec); ++i) {
        const auto p = render_patient(spec, i);
        int runs = 0;
        bool prev = false;
        for (size_t s = 0; s < p.slices.size(); ++s) {
            const auto& st = p.truth.slices[s];
            bool mask_on = false;
            for (double v : p.masks[s].values()) mask_on = mask_on || v > 0;
            // A slice-level oracle reading the lesion mask is always right.
            REQUIRE(mask_on == st.lesion);
            REQUIRE(st.lesion == !st.boxes.empty());
            for (const auto& b : st.boxes) {
                REQUIRE(b.x0 < b.x1);
                REQUIRE(b.y0 < b.y1);
                REQUIRE(b.x0 >= 0);
                REQUIRE(b.y0 >= 0);
                REQUIRE(b.x1 <= spec.slice_size);
                REQUIRE(b.y1 <= spec.slice_size);
            }
            if (st.lesion && !prev) ++runs;
            prev = st.lesion;
        }
        if (p.truth.label == 1)
            REQUIRE(runs >= 1);
        else
            REQUIRE(runs == 0);
    }
}

TEST_CASE("domain intensity offset shows up in the volume means") {
    SyntheticSpec spec;
    spec.min_slices = 6;
    spec.max_slices = 6;
    spec.min_run_length = 2;
    spec.max_run_length = 4;
    spec.positive_fraction = 0.0;
    DomainSpec a{"A", 12, 0.0, 1.0, 0.02, 1.0};
    DomainSpec b{"B", 12, 0.4, 1.0, 0.02, 1.0};
    spec.domains = {a, b};
    double mean_a = 0, mean_b = 0;
    for (int i = 0; i < 12; ++i) {
        mean_a += volume_mean(render_patient(spec, i)) / 12;
        mean_b += volume_mean(render_patient(spec, 12 + i)) / 12;
    }
    CHECK(mean_b - mean_a == doctest::Approx(0.4).epsilon(0.05 / 0.4));
}

TEST_CASE("unsatisfiable synthetic specs are rejected") {
    auto spec = small_spec();
    spec.max_lesion_radius = 30;
    CHECK_THROWS_AS(spec.validate(), ValidationError);
    spec = small_spec();
    spec.min_slices = 12;
    spec.max_slices = 6;
    CHECK_THROWS_AS(spec.validate(), ValidationError);
    spec = small_spec();
    spec.domains.clear();
    CHECK_THROWS_AS(spec.validate(), ValidationError);
    spec = small_spec();
    spec.domains[1].name = spec.domains[0].name;
    CHECK_THROWS_AS(spec.validate(), ValidationError);
    TempDir dir("synth_bad");
    spec = small_spec();
    spec.slice_size = 8;
    CHECK_THROWS_AS(generate_synthetic(spec, dir.path()), ValidationError);
}

TEST_CASE("preset domains differ and split patients evenly") {
    const auto d = preset_domains(5, 22);
    REQUIRE(d.size() == 5);
    CHECK(d[0].patients == 5);
    CHECK(d[1].patients == 5);
    CHECK(d[4].patients == 4);
    for (size_t i = 0; i < d.size(); ++i)
        for (size_t j = i + 1; j < d.size(); ++j) {
            CHECK(d[i].name != d[j].name);
            CHECK((d[i].intensity_offset != d[j].intensity_offset || d[i].contrast_gain != d[j].contrast_gain));
        }
}

TEST_CASE("augmentation identity path reproduces the slice") {
    AugmentationConfig cfg;
    cfg.flip_probability = 0;
    cfg.min_area = cfg.max_area = 1.0;
    cfg.min_aspect = cfg.max_aspect = 1.0;
    cfg.min_brightness = cfg.max_brightness = 1.0;
    cfg.min_contrast = cfg.max_contrast = 1.0;
    cfg.output_size = 24;
    const auto slice = random_slices(1, 24, 1).front();
    const auto out = augment(slice, cfg, 5);
    for (size_t i = 0; i < slice.size(); ++i) CHECK(out.values()[i] == doctest::Approx(slice.values()[i]).epsilon(1e-12));
}

TEST_CASE("brightness scales a constant slice") {
    AugmentationConfig cfg;
    cfg.flip_probability = 0;
    cfg.min_brightness = cfg.max_brightness = 1.1;
    cfg.min_contrast = cfg.max_contrast = 1.0;
    cfg.output_size = 16;
    const auto out = augment(Grid(20, 20, 0.5), cfg, 3);
    CHECK(out.rows() == 16);
    for (double v : out.values()) CHECK(v == doctest::Approx(0.55));
}

TEST_CASE("augmentation is seeded and shares crop and flip across a volume") {
    AugmentationConfig cfg;
    cfg.output_size = 20;
    Volume v;
    v.record.patient_id = "v";
    v.slices = random_slices(6, 30, 2);
    // Bright left third on every slice so flips are visible after any crop.
    for (auto& s : v.slices)
        for (int r = 0; r < 30; ++r)
            for (int c = 0; c < 10; ++c) s(r, c) = 50.0;

    const auto a = preprocess_train(v, cfg, 11);
    const auto b = preprocess_train(v, cfg, 11);
    CHECK(a == b);

    int flipped_volumes = 0;
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
        const auto params = sample_augmentation(30, 30, 6, cfg, seed);
        CHECK(params.brightness.size() == 6);
        const auto out = preprocess_train(v, cfg, seed);
        int flipped = 0;
        for (const auto& s : out) flipped += s(10, 19) > s(10, 0) ? 1 : 0;
        CHECK((flipped == 0 || flipped == 6));
        CHECK((flipped == 6) == params.flip);
        flipped_volumes += params.flip;
        for (double x : params.brightness) CHECK((x >= 0.9 && x <= 1.1));
        const double area = params.crop_w * params.crop_h / 900.0;
        CHECK(area >= 0.9 - 1e-9);
        CHECK(area <= 1.0 + 1e-9);
    }
    CHECK(flipped_volumes > 5);
    CHECK(flipped_volumes < 35);
}

TEST_CASE("z-score normalisation per volume") {
    Random rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        auto slices = random_slices(rng.uniform_int(1, 8), rng.uniform_int(2, 12), static_cast<std::uint64_t>(trial));
        const double scale = rng.uniform(0.1, 50), shift = rng.uniform(-10, 10);
        for (auto& s : slices)
            for (double& v : s.values()) v = v * scale + shift;
        zscore_volume(slices);
        double sum = 0, ss = 0, n = 0;
        for (const auto& s : slices)
            for (double v : s.values()) {
                sum += v;
                ss += v * v;
                n += 1;
            }
        CHECK(std::abs(sum / n) < 1e-6);
        CHECK(std::abs(std::sqrt(ss / n - (sum / n) * (sum / n)) - 1.0) < 1e-6);
    }
    std::vector<Grid> constant{Grid(3, 3, 2.0)};
    zscore_volume(constant);
    for (double v : constant[0].values()) CHECK(v == 0.0);
}

TEST_CASE("tiny slices are upscaled with a warning") {
    Volume v;
    v.record.patient_id = "tiny";
    v.slices = {Grid(1, 1, 3.0), Grid(1, 1, 1.0)};
    const long before = warning_count();
    const auto out = preprocess_eval(v, 8);
    CHECK(warning_count() == before + 1);
    REQUIRE(out.size() == 2);
    CHECK(out[0].rows() == 8);
    CHECK(out[0](4, 4) == doctest::Approx(1.0));
}

TEST_CASE("mask directory hook blanks pixels outside the mask") {
    TempDir dir("mask");
    Volume v;
    v.record.patient_id = "m";
    v.record.slice_paths = {dir / "s0.pgm", dir / "s1.pgm"};
    v.slices = {Grid(2, 2, 1.0), Grid(2, 2, 1.0)};
    fs::create_directories(dir / "masks" / "m");
    Grid mask(2, 2, 1.0);
    mask(0, 1) = 0.0;
    write_pgm16(dir / "masks" / "m" / "s0.pgm", mask);
    auto slices = v.slices;
    mask_directory_hook(dir / "masks")(v.record, slices);
    CHECK(slices[0](0, 1) == 0.0);
    CHECK(slices[0](0, 0) == 1.0);
    CHECK(slices[1] == v.slices[1]);
}

TEST_CASE("domain filtering") {
    std::vector<PatientRecord> r{{"a", 0, {}, "A"}, {"b", 1, {}, "B"}, {"c", 0, {}, "C"}};
    const std::vector<std::string> pick{"A", "C"};
    CHECK(filter_domains(r, pick, true).size() == 2);
    const auto rest = filter_domains(r, pick, false);
    REQUIRE(rest.size() == 1);
    CHECK(rest[0].patient_id == "b");
}
