#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include "dynhead/params.hpp"
#include "dynhead/tensor.hpp"

namespace dynhead {

/// Versioned binary checkpoint container.
///
/// Layout (all integers little-endian):
///   magic   8 bytes  "DYNHEAD\0"
///   version u32      currently 1
///   two sections, parameters then momentum buffers, each:
///     count u64
///     count entries of:
///       name_len u32, name bytes (UTF-8, no terminator),
///       shape 4 x u64 (batch, channels, height, width),
///       numel f64 values, IEEE-754 little-endian
/// Round-trips are bit-exact.
namespace checkpoint {

constexpr std::array<char, 8> kMagic = {'D', 'Y', 'N', 'H', 'E', 'A', 'D', '\0'};
constexpr std::uint32_t kVersion = 1;

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    std::array<unsigned char, 4> b{};
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b.data()), b.size());
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    std::array<unsigned char, 8> b{};
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    os.write(reinterpret_cast<const char*>(b.data()), b.size());
}

inline void put_f64(std::ostream& os, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
}

inline std::uint32_t get_u32(std::istream& is) {
    std::array<unsigned char, 4> b{};
    is.read(reinterpret_cast<char*>(b.data()), b.size());
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

inline std::uint64_t get_u64(std::istream& is) {
    std::array<unsigned char, 8> b{};
    is.read(reinterpret_cast<char*>(b.data()), b.size());
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

inline double get_f64(std::istream& is) {
    const std::uint64_t bits = get_u64(is);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

inline void write_section(std::ostream& os, const std::map<std::string, Tensor>& entries) {
    put_u64(os, entries.size());
    for (const auto& [name, t] : entries) {
        put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        const Shape s = t.shape();
        put_u64(os, static_cast<std::uint64_t>(s.n));
        put_u64(os, static_cast<std::uint64_t>(s.c));
        put_u64(os, static_cast<std::uint64_t>(s.h));
        put_u64(os, static_cast<std::uint64_t>(s.w));
        for (double v : t.values()) put_f64(os, v);
    }
}

inline std::map<std::string, Tensor> read_section(std::istream& is, const std::string& path) {
    std::map<std::string, Tensor> entries;
    const std::uint64_t count = get_u64(is);
    for (std::uint64_t i = 0; i < count; ++i) {
        const std::uint32_t len = get_u32(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        Shape s{static_cast<int>(get_u64(is)), static_cast<int>(get_u64(is)),
                static_cast<int>(get_u64(is)), static_cast<int>(get_u64(is))};
        std::vector<double> values(static_cast<std::size_t>(s.numel()));
        for (double& v : values) v = get_f64(is);
        if (!is) throw std::runtime_error("checkpoint: truncated file '" + path + "'");
        entries.emplace(std::move(name), Tensor::from_values(s, std::move(values)));
    }
    return entries;
}

} // namespace detail

inline void save(const std::string& path, const ParameterSet& params) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("checkpoint: cannot open '" + path + "' for writing");
    os.write(kMagic.data(), kMagic.size());
    detail::put_u32(os, kVersion);
    detail::write_section(os, params.entries());
    detail::write_section(os, params.momentum());
    if (!os) throw std::runtime_error("checkpoint: write failed for '" + path + "'");
}

inline ParameterSet load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open '" + path + "'");
    std::array<char, 8> magic{};
    is.read(magic.data(), magic.size());
    if (!is || magic != kMagic)
        throw std::runtime_error("checkpoint: '" + path + "' is not a checkpoint file");
    const std::uint32_t version = detail::get_u32(is);
    if (version != kVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version) +
                                 " in '" + path + "'");
    ParameterSet out;
    for (auto& [name, t] : detail::read_section(is, path)) out.add(name, std::move(t));
    out.momentum() = detail::read_section(is, path);
    return out;
}

/// Copies values from a loaded checkpoint into an already-built parameter set,
/// rejecting key or shape mismatches.
inline void restore_into(ParameterSet& target, const ParameterSet& loaded) {
    if (loaded.size() != target.size())
        throw std::runtime_error("checkpoint: parameter count mismatch (checkpoint " +
                                 std::to_string(loaded.size()) + ", model " +
                                 std::to_string(target.size()) + ")");
    for (auto& [name, t] : target.entries()) {
        const Tensor& src = loaded.get(name);
        if (src.shape() != t.shape())
            throw std::runtime_error("checkpoint: shape mismatch for '" + name + "': checkpoint " +
                                     src.shape().str() + ", model " + t.shape().str());
        std::copy(src.values().begin(), src.values().end(), t.values_mut().begin());
    }
    target.momentum().clear();
    for (const auto& [name, t] : loaded.momentum()) target.momentum().emplace(name, t.clone());
}

} // namespace checkpoint

} // namespace dynhead
