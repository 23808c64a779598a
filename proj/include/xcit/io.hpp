// File formats: the raw image tensor container, attention-map CSV, PGM
// heatmaps, and a synthetic image source so nothing here needs external
// data. All multi-byte fields are little-endian.
#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "xcit/tensor.hpp"

namespace xcit {

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& what) : std::runtime_error(what) {}
};

namespace io_detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is, const char* field) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) {
        throw FormatError(std::string("raw image header: truncated ") + field);
    }
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
    put_u32(os, static_cast<std::uint32_t>(v));
    put_u32(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint64_t get_u64(std::istream& is, const char* field) {
    const std::uint64_t lo = get_u32(is, field);
    const std::uint64_t hi = get_u32(is, field);
    return lo | (hi << 32);
}

inline void put_f32(std::ostream& os, float v) {
    std::uint32_t bits;
    static_assert(sizeof(bits) == sizeof(v));
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
}

inline float get_f32(std::istream& is, const char* field) {
    const std::uint32_t bits = get_u32(is, field);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace io_detail

// ---------------------------------------------------------------------------
// Raw image container: magic "XCIT", dtype code (1 = f32, 2 = f64), then
// B, C, H, W, all 32-bit little-endian, followed by the row-major payload.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kRawImageMagic = 0x54494358;  // "XCIT"

template <typename T>
void write_raw_image(std::ostream& os, const Tensor<T>& img) {
    if (img.rank() != 4) throw FormatError("raw image payload must be [B,C,H,W]");
    io_detail::put_u32(os, kRawImageMagic);
    io_detail::put_u32(os, sizeof(T) == 4 ? 1u : 2u);
    for (int i = 0; i < 4; ++i) io_detail::put_u32(os, static_cast<std::uint32_t>(img.extent(i)));
    if constexpr (sizeof(T) == 4) {
        for (std::int64_t i = 0; i < img.numel(); ++i) io_detail::put_f32(os, static_cast<float>(img[i]));
    } else {
        for (std::int64_t i = 0; i < img.numel(); ++i) {
            const double v = static_cast<double>(img[i]);
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            io_detail::put_u64(os, bits);
        }
    }
}

template <typename T>
void write_raw_image(const std::string& path, const Tensor<T>& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    write_raw_image(os, img);
}

template <typename T>
Tensor<T> read_raw_image(std::istream& is) {
    const std::uint32_t magic = io_detail::get_u32(is, "magic");
    if (magic != kRawImageMagic) {
        std::ostringstream msg;
        msg << "raw image header: bad magic 0x" << std::hex << magic;
        throw FormatError(msg.str());
    }
    const std::uint32_t dtype = io_detail::get_u32(is, "dtype");
    if (dtype != 1 && dtype != 2) {
        throw FormatError("raw image header: unsupported dtype code " + std::to_string(dtype));
    }
    const char* names[4] = {"B", "C", "H", "W"};
    Shape shape(4);
    for (int i = 0; i < 4; ++i) {
        const std::uint32_t e = io_detail::get_u32(is, names[i]);
        if (e == 0 || e > (1u << 24)) {
            throw FormatError(std::string("raw image header: bad extent ") + names[i] + " = " +
                              std::to_string(e));
        }
        shape[static_cast<std::size_t>(i)] = static_cast<std::int64_t>(e);
    }
    Tensor<T> img(shape);
    for (std::int64_t i = 0; i < img.numel(); ++i) {
        if (dtype == 1) {
            img[i] = static_cast<T>(io_detail::get_f32(is, "payload"));
        } else {
            const std::uint64_t bits = io_detail::get_u64(is, "payload");
            double v;
            std::memcpy(&v, &bits, 8);
            img[i] = static_cast<T>(v);
        }
    }
    return img;
}

template <typename T>
Tensor<T> read_raw_image(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    return read_raw_image<T>(is);
}

// Deterministic synthetic image: a few seeded sinusoid plumes per channel
// plus hash noise, enough structure for attention-map dumps.
template <typename T>
Tensor<T> make_synthetic_image(std::int64_t height, std::int64_t width, std::uint64_t seed) {
    Tensor<T> img({1, 3, height, width});
    Rng rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::int64_t c = 0; c < 3; ++c) {
        const double fx = 1.0 + 3.0 * unit(rng);
        const double fy = 1.0 + 3.0 * unit(rng);
        const double cx = unit(rng), cy = unit(rng);
        const double phase = 6.283185307179586 * unit(rng);
        for (std::int64_t y = 0; y < height; ++y) {
            for (std::int64_t x = 0; x < width; ++x) {
                const double u = static_cast<double>(x) / static_cast<double>(width);
                const double v = static_cast<double>(y) / static_cast<double>(height);
                const double r2 = (u - cx) * (u - cx) + (v - cy) * (v - cy);
                const double val = std::sin(6.283185307179586 * (fx * u + fy * v) + phase) *
                                   std::exp(-4.0 * r2);
                img[(c * height + y) * width + x] = static_cast<T>(val);
            }
        }
    }
    Tensor<T> noise({1, 3, height, width});
    fill_normal(noise, rng, 0.0, 0.05);
    for (std::int64_t i = 0; i < img.numel(); ++i) img[i] += noise[i];
    return img;
}

// ---------------------------------------------------------------------------
// Attention-map exports
// ---------------------------------------------------------------------------

// maps: [h, rows, cols]; schema head,row,col,value in row-major order
template <typename T>
void write_attention_maps_csv(std::ostream& os, const Tensor<T>& maps) {
    if (maps.rank() != 3) throw FormatError("attention maps must be [heads, rows, cols]");
    os << "head,row,col,value\n";
    char buf[64];
    for (std::int64_t h = 0; h < maps.extent(0); ++h)
        for (std::int64_t r = 0; r < maps.extent(1); ++r)
            for (std::int64_t c = 0; c < maps.extent(2); ++c) {
                std::snprintf(buf, sizeof(buf), "%.17g",
                              static_cast<double>(maps[(h * maps.extent(1) + r) * maps.extent(2) + c]));
                os << h << ',' << r << ',' << c << ',' << buf << '\n';
            }
}

// Binary PGM, values renormalized per image to [0, 255].
template <typename T>
void write_pgm(const std::string& path, const Tensor<T>& img) {
    if (img.rank() != 2) throw FormatError("pgm wants a [rows, cols] tensor");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    double lo = static_cast<double>(img[0]), hi = lo;
    for (std::int64_t i = 0; i < img.numel(); ++i) {
        lo = std::min(lo, static_cast<double>(img[i]));
        hi = std::max(hi, static_cast<double>(img[i]));
    }
    const double span = hi > lo ? hi - lo : 1.0;
    os << "P5\n" << img.cols() << " " << img.rows() << "\n255\n";
    for (std::int64_t i = 0; i < img.numel(); ++i) {
        const double v = (static_cast<double>(img[i]) - lo) / span;
        os.put(static_cast<char>(static_cast<int>(v * 255.0 + 0.5)));
    }
}

}  // namespace xcit
