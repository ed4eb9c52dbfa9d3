#include "milslice/archive.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <stdexcept>

namespace milslice {

namespace {

constexpr char kMagic[8] = {'M', 'I', 'L', 'A', 'R', 'R', 'A', 'Y'};

template <typename T>
void put(std::ostream& os, T value) {
    static_assert(std::is_trivially_copyable_v<T>);
    if constexpr (std::endian::native == std::endian::big) {
        auto bytes = std::bit_cast<std::array<char, sizeof(T)>>(value);
        std::reverse(bytes.begin(), bytes.end());
        os.write(bytes.data(), sizeof(T));
    } else {
        os.write(reinterpret_cast<const char*>(&value), sizeof(T));
    }
}

template <typename T>
T read_le(std::istream& is) {
    std::array<char, sizeof(T)> bytes{};
    if (!is.read(bytes.data(), sizeof(T))) throw std::runtime_error("archive truncated");
    if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
}

void put_string(std::ostream& os, const std::string& s) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
    const auto n = read_le<std::uint32_t>(is);
    if (n > (1u << 24)) throw std::runtime_error("archive string too long");
    std::string s(n, '\0');
    if (n && !is.read(s.data(), n)) throw std::runtime_error("archive truncated");
    return s;
}

}  // namespace

void ArrayArchive::add(std::string name, std::vector<std::int64_t> shape, std::vector<double> data) {
    const auto count = std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
    if (count != static_cast<std::int64_t>(data.size()))
        throw std::invalid_argument("array '" + name + "' shape does not match its data");
    arrays.push_back({std::move(name), std::move(shape), std::move(data)});
}

const NamedArray& ArrayArchive::get(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return a;
    throw std::out_of_range("archive has no array '" + name + "'");
}

bool ArrayArchive::contains(const std::string& name) const {
    for (const auto& a : arrays)
        if (a.name == name) return true;
    return false;
}

const std::string& ArrayArchive::attribute(const std::string& key) const {
    auto it = attributes.find(key);
    if (it == attributes.end()) throw std::out_of_range("archive has no attribute '" + key + "'");
    return it->second;
}

void ArrayArchive::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + tmp.string());
        os.write(kMagic, sizeof(kMagic));
        put<std::uint32_t>(os, version);
        put<std::uint32_t>(os, static_cast<std::uint32_t>(attributes.size()));
        for (const auto& [k, v] : attributes) {
            put_string(os, k);
            put_string(os, v);
        }
        put<std::uint32_t>(os, static_cast<std::uint32_t>(arrays.size()));
        for (const auto& a : arrays) {
            put_string(os, a.name);
            put<std::uint32_t>(os, static_cast<std::uint32_t>(a.shape.size()));
            for (auto d : a.shape) put<std::uint64_t>(os, static_cast<std::uint64_t>(d));
            for (double v : a.data) put<double>(os, v);
        }
        if (!os) throw std::runtime_error("failed writing " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

ArrayArchive ArrayArchive::load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open archive " + path.string());
    char magic[sizeof(kMagic)];
    if (!is.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw std::runtime_error(path.string() + " is not an array archive");
    ArrayArchive ar;
    ar.version = read_le<std::uint32_t>(is);
    if (ar.version > kArchiveVersion)
        throw std::runtime_error("archive version " + std::to_string(ar.version) + " is newer than supported");
    const auto n_attr = read_le<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n_attr; ++i) {
        auto k = get_string(is);
        ar.attributes[k] = get_string(is);
    }
    const auto n_arrays = read_le<std::uint32_t>(is);
    for (std::uint32_t i = 0; i < n_arrays; ++i) {
        NamedArray a;
        a.name = get_string(is);
        const auto ndim = read_le<std::uint32_t>(is);
        if (ndim > 8) throw std::runtime_error("archive array has too many dimensions");
        std::uint64_t count = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            const auto dim = read_le<std::uint64_t>(is);
            a.shape.push_back(static_cast<std::int64_t>(dim));
            count *= dim;
        }
        if (count > (1ull << 32)) throw std::runtime_error("archive array too large");
        a.data.resize(count);
        for (auto& v : a.data) v = read_le<double>(is);
        ar.arrays.push_back(std::move(a));
    }
    return ar;
}

}  // namespace milslice
