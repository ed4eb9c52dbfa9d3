#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "milslice/data.hpp"

namespace milslice {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Manifest

std::vector<PatientRecord> load_dataset(const fs::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw ValidationError("cannot open manifest " + manifest_path.string());
    const fs::path base = manifest_path.has_parent_path() ? manifest_path.parent_path() : fs::path(".");

    std::vector<PatientRecord> records;
    std::string line;
    int line_no = 0;
    bool saw_header = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (std::all_of(line.begin(), line.end(), [](unsigned char ch) { return std::isspace(ch); }))
            continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError("malformed manifest " + manifest_path.string() + ": " + e.what(), line_no);
        }
        if (!j.is_object()) throw ParseError("manifest line is not an object", line_no);
        if (!saw_header) {
            if (j.value("format", "") != "milslice-manifest")
                throw ParseError("missing manifest header", line_no);
            const int version = j.value("version", 0);
            if (version < 1 || version > kManifestVersion)
                throw ParseError("unsupported manifest version " + std::to_string(version), line_no);
            saw_header = true;
            continue;
        }
        PatientRecord r;
        try {
            r.patient_id = j.at("patient_id").get<std::string>();
            r.domain_tag = j.value("domain", "");
            const auto& label = j.at("label");
            if (!label.is_number_integer())
                throw ValidationError("patient " + r.patient_id + ": label must be an integer");
            r.label = label.get<int>();
            for (const auto& s : j.at("slices")) r.slice_paths.push_back(base / s.get<std::string>());
        } catch (const json::exception& e) {
            throw ParseError(std::string("bad manifest record: ") + e.what(), line_no);
        }
        if (r.label != 0 && r.label != 1)
            throw ValidationError("patient " + r.patient_id + ": label must be 0 or 1, got " +
                                  std::to_string(r.label));
        if (r.slice_paths.empty())
            throw ValidationError("patient " + r.patient_id + " has no slices");
        for (const auto& p : r.slice_paths)
            if (!fs::exists(p))
                throw ValidationError("patient " + r.patient_id + ": missing slice file " + p.string());
        records.push_back(std::move(r));
    }
    if (records.empty()) warn("manifest " + manifest_path.string() + " lists no patients");
    return records;
}

void write_manifest(const fs::path& manifest_path, std::span<const PatientRecord> records) {
    if (manifest_path.has_parent_path()) fs::create_directories(manifest_path.parent_path());
    const fs::path base = manifest_path.has_parent_path() ? manifest_path.parent_path() : fs::path(".");
    std::ofstream out(manifest_path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + manifest_path.string());
    out << json{{"format", "milslice-manifest"}, {"version", kManifestVersion}}.dump() << '\n';
    for (const auto& r : records) {
        json slices = json::array();
        for (const auto& p : r.slice_paths) slices.push_back(fs::relative(p, base).generic_string());
        out << json{{"patient_id", r.patient_id},
                    {"label", r.label},
                    {"domain", r.domain_tag},
                    {"slices", slices}}
                   .dump()
            << '\n';
    }
}

// ---------------------------------------------------------------------------
// Images

void write_pgm16(const fs::path& path, const Grid& intensities) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P5\n" << intensities.cols() << ' ' << intensities.rows() << "\n65535\n";
    std::vector<unsigned char> bytes;
    bytes.reserve(intensities.size() * 2);
    for (double v : intensities.values()) {
        const auto q = static_cast<std::uint16_t>(std::clamp(std::lround(v * kIntensityScale), 0L, 65535L));
        bytes.push_back(static_cast<unsigned char>(q >> 8));
        bytes.push_back(static_cast<unsigned char>(q & 0xff));
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace {

int read_pnm_int(std::istream& in) {
    int ch = in.peek();
    while (ch != EOF) {
        if (ch == '#') {
            std::string ignored;
            std::getline(in, ignored);
        } else if (std::isspace(ch)) {
            in.get();
        } else {
            break;
        }
        ch = in.peek();
    }
    int v = -1;
    if (!(in >> v)) throw std::runtime_error("bad PNM header");
    return v;
}

}  // namespace

Grid read_pgm16(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open image " + path.string());
    std::string magic(2, '\0');
    in.read(magic.data(), 2);
    if (magic != "P5") throw ValidationError(path.string() + " is not a binary PGM");
    const int width = read_pnm_int(in);
    const int height = read_pnm_int(in);
    const int maxval = read_pnm_int(in);
    in.get();
    if (width < 1 || height < 1 || maxval < 1 || maxval > 65535)
        throw ValidationError(path.string() + ": bad PGM header");
    const int bytes_per = maxval > 255 ? 2 : 1;
    std::vector<unsigned char> raw(static_cast<size_t>(width) * height * bytes_per);
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw ValidationError(path.string() + ": truncated PGM");
    Grid g(height, width);
    auto v = g.values();
    const double scale = bytes_per == 2 ? 1.0 / kIntensityScale : 1.0 / 255.0;
    for (size_t i = 0; i < v.size(); ++i) {
        const unsigned q = bytes_per == 2 ? (raw[2 * i] << 8) | raw[2 * i + 1] : raw[i];
        v[i] = q * scale;
    }
    return g;
}

void write_ppm(const fs::path& path, const Grid& red, const Grid& green, const Grid& blue) {
    if (red.rows() != green.rows() || red.rows() != blue.rows() || red.cols() != green.cols() ||
        red.cols() != blue.cols())
        throw ShapeError("PPM channels differ in size");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "P6\n" << red.cols() << ' ' << red.rows() << "\n255\n";
    auto to8 = [](double v) {
        return static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
    };
    for (size_t i = 0; i < red.size(); ++i) {
        const char px[3] = {to8(red.values()[i]), to8(green.values()[i]), to8(blue.values()[i])};
        out.write(px, 3);
    }
}

Volume load_volume(const PatientRecord& record) {
    Volume v{record, {}};
    v.slices.reserve(record.slice_paths.size());
    for (const auto& p : record.slice_paths) {
        v.slices.push_back(read_pgm16(p));
        if (v.slices.back().rows() != v.slices.front().rows() ||
            v.slices.back().cols() != v.slices.front().cols())
            throw ShapeError("patient " + record.patient_id + ": slices differ in size");
    }
    return v;
}

std::vector<Volume> load_volumes(std::span<const PatientRecord> records) {
    std::vector<Volume> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(load_volume(r));
    return out;
}

std::vector<PatientRecord> filter_domains(std::span<const PatientRecord> records,
                                          std::span<const std::string> domains, bool keep) {
    std::vector<PatientRecord> out;
    for (const auto& r : records) {
        const bool listed = std::find(domains.begin(), domains.end(), r.domain_tag) != domains.end();
        if (listed == keep) out.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ground truth

const PatientTruth* GroundTruth::find(const std::string& patient_id) const {
    for (const auto& p : patients)
        if (p.patient_id == patient_id) return &p;
    return nullptr;
}

void GroundTruth::save(const fs::path& path) const {
    json j;
    j["format"] = "milslice-ground-truth";
    j["version"] = version;
    j["box_convention"] = "[x0, y0, x1, y1], half-open pixel coordinates";
    json patients_json = json::array();
    for (const auto& p : patients) {
        json slices = json::array();
        for (const auto& s : p.slices) {
            json boxes = json::array();
            for (const auto& b : s.boxes) boxes.push_back({b.x0, b.y0, b.x1, b.y1});
            slices.push_back({{"lesion", s.lesion}, {"boxes", boxes}});
        }
        patients_json.push_back(
            {{"patient_id", p.patient_id}, {"label", p.label}, {"domain", p.domain_tag}, {"slices", slices}});
    }
    j["patients"] = patients_json;
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << j.dump(1) << '\n';
}

GroundTruth GroundTruth::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open ground truth " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("malformed ground truth: ") + e.what(), 0);
    }
    GroundTruth gt;
    gt.version = j.value("version", 0);
    if (gt.version < 1 || gt.version > kGroundTruthVersion)
        throw ValidationError("unsupported ground truth version");
    for (const auto& pj : j.at("patients")) {
        PatientTruth p;
        p.patient_id = pj.at("patient_id").get<std::string>();
        p.label = pj.at("label").get<int>();
        p.domain_tag = pj.value("domain", "");
        for (const auto& sj : pj.at("slices")) {
            SliceTruth s;
            s.lesion = sj.at("lesion").get<bool>();
            for (const auto& b : sj.at("boxes"))
                s.boxes.push_back({b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()});
            p.slices.push_back(std::move(s));
        }
        gt.patients.push_back(std::move(p));
    }
    return gt;
}

}  // namespace milslice
