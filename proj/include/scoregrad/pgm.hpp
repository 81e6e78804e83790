#pragma once

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "scoregrad/error.hpp"
#include "scoregrad/tensor.hpp"

namespace scoregrad {

// binary PGM (P5, maxval 255)
inline void write_pgm(const std::string& path, std::int64_t height, std::int64_t width,
                      const std::vector<unsigned char>& pixels) {
    if (static_cast<std::int64_t>(pixels.size()) != height * width) fail_data("pgm: pixel count mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) fail_io("pgm: cannot open '" + path + "' for writing");
    os << "P5\n" << width << " " << height << "\n255\n";
    os.write(reinterpret_cast<const char*>(pixels.data()), static_cast<std::streamsize>(pixels.size()));
    if (!os) fail_io("pgm: write failed for '" + path + "'");
}

struct PgmImage {
    std::int64_t height = 0, width = 0;
    std::vector<unsigned char> pixels;
};

inline PgmImage read_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail_io("pgm: cannot open '" + path + "'");
    std::string magic;
    is >> magic;
    if (magic != "P5") fail_data("pgm '" + path + "': expected P5");
    std::int64_t w = 0, h = 0, maxval = 0;
    is >> w >> h >> maxval;
    if (maxval != 255) fail_data("pgm '" + path + "': expected maxval 255");
    is.get();  // single whitespace after header
    PgmImage img;
    img.height = h;
    img.width = w;
    img.pixels.resize(static_cast<std::size_t>(w * h));
    if (!is.read(reinterpret_cast<char*>(img.pixels.data()), w * h)) fail_data("pgm '" + path + "': truncated");
    return img;
}

// min-max quantization to 8 bits; a flat map (min == max) becomes all zeros
inline std::vector<unsigned char> quantize_minmax(const Tensor& map, double& out_min, double& out_max) {
    out_min = map[0];
    out_max = map[0];
    for (std::int64_t i = 1; i < map.numel(); ++i) {
        out_min = std::min(out_min, map[i]);
        out_max = std::max(out_max, map[i]);
    }
    std::vector<unsigned char> px(static_cast<std::size_t>(map.numel()), 0);
    if (out_max > out_min) {
        double scale = 255.0 / (out_max - out_min);
        for (std::int64_t i = 0; i < map.numel(); ++i)
            px[static_cast<std::size_t>(i)] = static_cast<unsigned char>(
                std::min(255.0, std::max(0.0, std::round((map[i] - out_min) * scale))));
    }
    return px;
}

}  // namespace scoregrad
