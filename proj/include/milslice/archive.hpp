#pragma once
// Versioned archive of named real arrays plus string attributes. Used for
// checkpoints and diagnostic dumps.
//
// Layout (all integers little-endian):
//   magic "MILARRAY" | u32 version | u32 n_attributes
//   n_attributes x (string key, string value)
//   u32 n_arrays
//   n_arrays x (string name, u32 ndim, ndim x u64 dim, prod(dim) x f64)
// where a string is u32 length followed by raw bytes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace milslice {

inline constexpr std::uint32_t kArchiveVersion = 1;

struct NamedArray {
    std::string name;
    std::vector<std::int64_t> shape;
    std::vector<double> data;
};

class ArrayArchive {
public:
    std::uint32_t version = kArchiveVersion;
    std::map<std::string, std::string> attributes;
    std::vector<NamedArray> arrays;

    void add(std::string name, std::vector<std::int64_t> shape, std::vector<double> data);
    /// Throws std::out_of_range when missing.
    const NamedArray& get(const std::string& name) const;
    bool contains(const std::string& name) const;
    const std::string& attribute(const std::string& key) const;

    void save(const std::filesystem::path& path) const;
    /// Throws std::runtime_error on a truncated, corrupt or newer-version file.
    static ArrayArchive load(const std::filesystem::path& path);
};

}  // namespace milslice
