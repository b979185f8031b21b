#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dynhead/tensor.hpp"

namespace dynhead {

/// 8-bit quantization of a gate value. The endpoints are reserved so they are
/// exact in both directions: pixel 0 <=> gate exactly 0, pixel 255 <=> gate
/// exactly 1; everything in between lands on 1..254.
inline std::uint8_t gate_to_pixel(double m) {
    if (m <= 0.0) return 0;
    if (m >= 1.0) return 255;
    const long v = 1 + std::lround(m * 253.0);
    return static_cast<std::uint8_t>(std::min(254L, std::max(1L, v)));
}

/// Writes one sample/channel of a map as a binary PGM (P5, maxval 255).
inline void write_pgm(const std::string& path, const Tensor& map, int sample = 0,
                      int channel = 0) {
    const Shape s = map.shape();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("heatmap: cannot open '" + path + "' for writing");
    os << "P5\n" << s.w << " " << s.h << "\n255\n";
    for (int y = 0; y < s.h; ++y)
        for (int x = 0; x < s.w; ++x) {
            const std::uint8_t p = gate_to_pixel(map.at(sample, channel, y, x));
            os.write(reinterpret_cast<const char*>(&p), 1);
        }
    if (!os) throw std::runtime_error("heatmap: write failed for '" + path + "'");
}

struct PgmImage {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> pixels;
};

inline PgmImage read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("heatmap: cannot open '" + path + "'");
    std::string magic;
    is >> magic;
    if (magic != "P5") throw std::runtime_error("heatmap: '" + path + "' is not a binary PGM");
    PgmImage img;
    int maxval = 0;
    is >> img.width >> img.height >> maxval;
    is.get(); // single whitespace after the header
    if (maxval != 255) throw std::runtime_error("heatmap: unsupported maxval in '" + path + "'");
    img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
    is.read(reinterpret_cast<char*>(img.pixels.data()),
            static_cast<std::streamsize>(img.pixels.size()));
    if (!is) throw std::runtime_error("heatmap: truncated PGM '" + path + "'");
    return img;
}

inline std::string csv_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace dynhead
