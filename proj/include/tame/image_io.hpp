#pragma once

// Binary PNM input/output (P6 RGB images, P5 16-bit saliency maps), a small
// zlib-backed PNG writer for heatmap overlays, and the fixed overlay colormap.

#include <zlib.h>

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tame/error.hpp"

namespace tame {

struct ImageU8 {
    int64_t h = 0;
    int64_t w = 0;
    std::vector<uint8_t> rgb;  // interleaved, row-major, 3 bytes per pixel
};

struct GrayU16 {
    int64_t h = 0;
    int64_t w = 0;
    std::vector<uint16_t> v;
};

namespace detail {

inline void skip_pnm_whitespace(std::istream& is) {
    int c = is.peek();
    while (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '#') {
        if (c == '#') {
            std::string line;
            std::getline(is, line);
        } else {
            is.get();
        }
        c = is.peek();
    }
}

inline int64_t read_pnm_int(std::istream& is) {
    skip_pnm_whitespace(is);
    int64_t v = 0;
    is >> v;
    TAME_CHECK_IO(is.good(), "malformed PNM header");
    return v;
}

}  // namespace detail

inline void write_ppm(const std::filesystem::path& path, const ImageU8& img) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    TAME_CHECK_IO(os.good(), "cannot write ", path.string());
    os << "P6\n" << img.w << " " << img.h << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.rgb.data()),
             static_cast<std::streamsize>(img.rgb.size()));
    TAME_CHECK_IO(os.good(), "write failed for ", path.string());
}

inline ImageU8 read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    TAME_CHECK_IO(is.good(), "cannot open ", path.string());
    std::string magic(2, '\0');
    is.read(magic.data(), 2);
    TAME_CHECK_IO(magic == "P6", "not a binary PPM: ", path.string());
    ImageU8 img;
    img.w = detail::read_pnm_int(is);
    img.h = detail::read_pnm_int(is);
    int64_t maxval = detail::read_pnm_int(is);
    TAME_CHECK_IO(maxval == 255, "unsupported PPM maxval ", maxval);
    is.get();  // single whitespace after header
    img.rgb.resize(static_cast<size_t>(img.h * img.w * 3));
    is.read(reinterpret_cast<char*>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
    TAME_CHECK_IO(is.good(), "truncated PPM: ", path.string());
    return img;
}

// 16-bit PGM, big-endian samples per the PNM spec.
inline void write_pgm16(const std::filesystem::path& path, const GrayU16& g) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    TAME_CHECK_IO(os.good(), "cannot write ", path.string());
    os << "P5\n" << g.w << " " << g.h << "\n65535\n";
    for (uint16_t v : g.v) {
        os.put(static_cast<char>(v >> 8));
        os.put(static_cast<char>(v & 0xff));
    }
    TAME_CHECK_IO(os.good(), "write failed for ", path.string());
}

inline GrayU16 read_pgm16(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    TAME_CHECK_IO(is.good(), "cannot open ", path.string());
    std::string magic(2, '\0');
    is.read(magic.data(), 2);
    TAME_CHECK_IO(magic == "P5", "not a binary PGM: ", path.string());
    GrayU16 g;
    g.w = detail::read_pnm_int(is);
    g.h = detail::read_pnm_int(is);
    int64_t maxval = detail::read_pnm_int(is);
    TAME_CHECK_IO(maxval == 65535, "expected 16-bit PGM, maxval ", maxval);
    is.get();
    g.v.resize(static_cast<size_t>(g.h * g.w));
    for (auto& v : g.v) {
        int hi = is.get();
        int lo = is.get();
        TAME_CHECK_IO(hi >= 0 && lo >= 0, "truncated PGM: ", path.string());
        v = static_cast<uint16_t>((hi << 8) | lo);
    }
    return g;
}

// ---------------------------------------------------------------------------
// PNG writer (8-bit RGB, zlib deflate, filter 0 on every scanline)
// ---------------------------------------------------------------------------

namespace detail {

inline void png_u32be(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(static_cast<uint8_t>(v >> 24));
    out.push_back(static_cast<uint8_t>(v >> 16));
    out.push_back(static_cast<uint8_t>(v >> 8));
    out.push_back(static_cast<uint8_t>(v));
}

inline void png_chunk(std::ofstream& os, const char type[4], const std::vector<uint8_t>& payload) {
    std::vector<uint8_t> head;
    png_u32be(head, static_cast<uint32_t>(payload.size()));
    os.write(reinterpret_cast<const char*>(head.data()), 4);
    os.write(type, 4);
    if (!payload.empty())
        os.write(reinterpret_cast<const char*>(payload.data()),
                 static_cast<std::streamsize>(payload.size()));
    uLong crc = crc32(0L, reinterpret_cast<const Bytef*>(type), 4);
    if (!payload.empty())
        crc = crc32(crc, payload.data(), static_cast<uInt>(payload.size()));
    std::vector<uint8_t> tail;
    png_u32be(tail, static_cast<uint32_t>(crc));
    os.write(reinterpret_cast<const char*>(tail.data()), 4);
}

}  // namespace detail

inline void write_png_rgb(const std::filesystem::path& path, const ImageU8& img) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    TAME_CHECK_IO(os.good(), "cannot write ", path.string());
    static const uint8_t sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
    os.write(reinterpret_cast<const char*>(sig), 8);

    std::vector<uint8_t> ihdr;
    detail::png_u32be(ihdr, static_cast<uint32_t>(img.w));
    detail::png_u32be(ihdr, static_cast<uint32_t>(img.h));
    ihdr.push_back(8);  // bit depth
    ihdr.push_back(2);  // color type: truecolor
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    detail::png_chunk(os, "IHDR", ihdr);

    std::vector<uint8_t> raw;
    raw.reserve(static_cast<size_t>(img.h * (img.w * 3 + 1)));
    for (int64_t y = 0; y < img.h; ++y) {
        raw.push_back(0);  // filter: none
        const uint8_t* row = img.rgb.data() + y * img.w * 3;
        raw.insert(raw.end(), row, row + img.w * 3);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<uint8_t> zdata(bound);
    int rc = compress2(zdata.data(), &bound, raw.data(), static_cast<uLong>(raw.size()), 6);
    TAME_CHECK_IO(rc == Z_OK, "zlib compression failed (", rc, ")");
    zdata.resize(bound);
    detail::png_chunk(os, "IDAT", zdata);
    detail::png_chunk(os, "IEND", {});
    TAME_CHECK_IO(os.good(), "write failed for ", path.string());
}

// ---------------------------------------------------------------------------
// Overlay colormap
// ---------------------------------------------------------------------------

// Fixed 9-stop dark-blue -> green -> yellow ramp; documented constant so that
// overlay bytes are reproducible across builds.
inline std::array<uint8_t, 3> heat_color(double t) {
    static constexpr std::array<std::array<double, 3>, 9> stops = {{
        {68, 1, 84},
        {71, 44, 122},
        {59, 81, 139},
        {44, 113, 142},
        {33, 144, 141},
        {39, 173, 129},
        {92, 200, 99},
        {170, 220, 50},
        {253, 231, 37},
    }};
    t = std::min(1.0, std::max(0.0, t));
    double pos = t * (stops.size() - 1);
    size_t lo = static_cast<size_t>(pos);
    size_t hi = std::min(lo + 1, stops.size() - 1);
    double f = pos - static_cast<double>(lo);
    std::array<uint8_t, 3> out{};
    for (int c = 0; c < 3; ++c) {
        double v = stops[lo][static_cast<size_t>(c)] +
                   f * (stops[hi][static_cast<size_t>(c)] - stops[lo][static_cast<size_t>(c)]);
        out[static_cast<size_t>(c)] = static_cast<uint8_t>(std::lround(v));
    }
    return out;
}

// heat must be h*w values in [0, 1], row-major, matching the image size.
inline ImageU8 overlay_heatmap(const ImageU8& base, const std::vector<double>& heat,
                               double alpha = 0.45) {
    TAME_CHECK_SHAPE(static_cast<int64_t>(heat.size()) == base.h * base.w,
                     "overlay: heat size does not match image");
    ImageU8 out = base;
    for (int64_t i = 0; i < base.h * base.w; ++i) {
        auto color = heat_color(heat[static_cast<size_t>(i)]);
        for (int c = 0; c < 3; ++c) {
            double v = (1.0 - alpha) * base.rgb[static_cast<size_t>(i * 3 + c)] +
                       alpha * color[static_cast<size_t>(c)];
            out.rgb[static_cast<size_t>(i * 3 + c)] = static_cast<uint8_t>(std::lround(v));
        }
    }
    return out;
}

// General bilinear resize for CLI input handling (either direction).
inline ImageU8 resize_bilinear_u8(const ImageU8& img, int64_t oh, int64_t ow) {
    ImageU8 out;
    out.h = oh;
    out.w = ow;
    out.rgb.resize(static_cast<size_t>(oh * ow * 3));
    for (int64_t y = 0; y < oh; ++y)
        for (int64_t x = 0; x < ow; ++x) {
            double sy = (y + 0.5) * static_cast<double>(img.h) / static_cast<double>(oh) - 0.5;
            double sx = (x + 0.5) * static_cast<double>(img.w) / static_cast<double>(ow) - 0.5;
            sy = std::min(std::max(sy, 0.0), static_cast<double>(img.h - 1));
            sx = std::min(std::max(sx, 0.0), static_cast<double>(img.w - 1));
            int64_t y0 = static_cast<int64_t>(sy), x0 = static_cast<int64_t>(sx);
            int64_t y1 = std::min(y0 + 1, img.h - 1), x1 = std::min(x0 + 1, img.w - 1);
            double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
            for (int c = 0; c < 3; ++c) {
                auto at = [&](int64_t yy, int64_t xx) {
                    return static_cast<double>(img.rgb[static_cast<size_t>((yy * img.w + xx) * 3 + c)]);
                };
                double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                           fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
                out.rgb[static_cast<size_t>((y * ow + x) * 3 + c)] =
                    static_cast<uint8_t>(std::lround(v));
            }
        }
    return out;
}

}  // namespace tame
