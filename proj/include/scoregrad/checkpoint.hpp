#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "scoregrad/models.hpp"

// Checkpoint container: fixed magic, format version, arch metadata, then the
// named parameter tensors as little-endian 64-bit floats. Round-trips must be
// bit-exact, so values never pass through text formatting.

namespace scoregrad {

namespace detail {

constexpr char kCheckpointMagic[8] = {'S', 'G', 'R', 'A', 'D', 'C', 'K', '1'};
constexpr std::uint32_t kCheckpointVersion = 1;

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline void put_f64(std::ostream& os, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(os, bits);
}

inline void put_string(std::ostream& os, const std::string& s) {
    put_u32(os, static_cast<std::uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::uint32_t get_u32(std::istream& is, const std::string& what) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) fail_io("checkpoint: truncated reading " + what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

inline std::uint64_t get_u64(std::istream& is, const std::string& what) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) fail_io("checkpoint: truncated reading " + what);
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
    return v;
}

inline double get_f64(std::istream& is, const std::string& what) {
    std::uint64_t bits = get_u64(is, what);
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
}

inline std::string get_string(std::istream& is, const std::string& what) {
    std::uint32_t n = get_u32(is, what);
    std::string s(n, '\0');
    if (n && !is.read(s.data(), n)) fail_io("checkpoint: truncated reading " + what);
    return s;
}

}  // namespace detail

inline void save_checkpoint(const ClassifierModel& model, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) fail_io("checkpoint: cannot open '" + path + "' for writing");
    os.write(detail::kCheckpointMagic, 8);
    detail::put_u32(os, detail::kCheckpointVersion);
    detail::put_string(os, arch_name(model.preset()));
    detail::put_f64(os, model.beta());
    detail::put_u32(os, static_cast<std::uint32_t>(model.num_classes()));
    detail::put_u32(os, static_cast<std::uint32_t>(model.input_shape().size()));
    for (auto e : model.input_shape()) detail::put_u64(os, static_cast<std::uint64_t>(e));
    detail::put_u32(os, static_cast<std::uint32_t>(model.params().size()));
    for (const auto& [name, t] : model.params()) {
        detail::put_string(os, name);
        detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (auto e : t.shape()) detail::put_u64(os, static_cast<std::uint64_t>(e));
        for (double v : t.data()) detail::put_f64(os, v);
    }
    if (!os) fail_io("checkpoint: write failed for '" + path + "'");
}

inline ClassifierModel load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail_io("checkpoint: cannot open '" + path + "'");
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, detail::kCheckpointMagic, 8) != 0)
        fail_data("checkpoint: bad magic in '" + path + "'");
    std::uint32_t version = detail::get_u32(is, "version");
    if (version != detail::kCheckpointVersion)
        fail_data("checkpoint: unsupported version " + std::to_string(version));
    ArchPreset preset = parse_arch(detail::get_string(is, "arch"));
    double beta = detail::get_f64(is, "beta");
    std::int64_t classes = detail::get_u32(is, "classes");
    std::uint32_t rank = detail::get_u32(is, "input rank");
    Shape input_shape;
    for (std::uint32_t i = 0; i < rank; ++i)
        input_shape.push_back(static_cast<std::int64_t>(detail::get_u64(is, "input shape")));

    ClassifierModel model = ClassifierModel::create(preset, input_shape, classes, beta, Rng(0));
    std::uint32_t count = detail::get_u32(is, "param count");
    if (count != model.params().size())
        fail_data("checkpoint: parameter count " + std::to_string(count) + " does not match preset '" +
                  std::string(arch_name(preset)) + "'");
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = detail::get_string(is, "param name");
        std::uint32_t prank = detail::get_u32(is, "param rank");
        Shape shape;
        for (std::uint32_t d = 0; d < prank; ++d)
            shape.push_back(static_cast<std::int64_t>(detail::get_u64(is, "param shape")));
        if (!model.params().has(name)) fail_data("checkpoint: unexpected parameter '" + name + "'");
        Tensor& dst = model.params().at(name);
        if (dst.shape() != shape)
            fail_data("checkpoint: parameter '" + name + "' shape " + shape_str(shape) + " != expected " +
                      dst.shape_string());
        for (auto& v : dst.data()) v = detail::get_f64(is, "param data");
    }
    return model;
}

}  // namespace scoregrad
