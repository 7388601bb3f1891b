#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

namespace skid::png {

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 24));
    out.push_back(static_cast<std::uint8_t>(v >> 16));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v));
}

inline void put_chunk(std::vector<std::uint8_t>& out, const char type[4],
                      const std::vector<std::uint8_t>& payload) {
    put_u32(out, static_cast<std::uint32_t>(payload.size()));
    const std::size_t crc_start = out.size();
    out.insert(out.end(), type, type + 4);
    out.insert(out.end(), payload.begin(), payload.end());
    const auto crc = crc32(0, out.data() + crc_start, static_cast<uInt>(out.size() - crc_start));
    put_u32(out, static_cast<std::uint32_t>(crc));
}

}  // namespace detail

/// Encode 8-bit RGB pixels (row major, 3 bytes per pixel) as a PNG byte
/// stream. zlib does the IDAT compression.
inline std::vector<std::uint8_t> encode_rgb(std::size_t width, std::size_t height,
                                            const std::vector<std::uint8_t>& rgb) {
    if (width == 0 || height == 0) throw std::invalid_argument("encode_rgb: empty image");
    if (rgb.size() != width * height * 3)
        throw std::invalid_argument("encode_rgb: pixel buffer size mismatch");

    // filter byte 0 in front of every scanline
    std::vector<std::uint8_t> raw;
    raw.reserve(height * (1 + width * 3));
    for (std::size_t y = 0; y < height; ++y) {
        raw.push_back(0);
        raw.insert(raw.end(), rgb.begin() + static_cast<std::ptrdiff_t>(y * width * 3),
                   rgb.begin() + static_cast<std::ptrdiff_t>((y + 1) * width * 3));
    }

    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::vector<std::uint8_t> idat(bound);
    if (compress2(idat.data(), &bound, raw.data(), static_cast<uLong>(raw.size()),
                  Z_BEST_COMPRESSION) != Z_OK)
        throw std::runtime_error("encode_rgb: zlib compression failed");
    idat.resize(bound);

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<std::uint8_t> ihdr;
    detail::put_u32(ihdr, static_cast<std::uint32_t>(width));
    detail::put_u32(ihdr, static_cast<std::uint32_t>(height));
    ihdr.push_back(8);   // bit depth
    ihdr.push_back(2);   // color type: truecolor
    ihdr.push_back(0);   // compression
    ihdr.push_back(0);   // filter
    ihdr.push_back(0);   // interlace
    detail::put_chunk(out, "IHDR", ihdr);
    detail::put_chunk(out, "IDAT", idat);
    detail::put_chunk(out, "IEND", {});
    return out;
}

inline void write_rgb(const std::string& path, std::size_t width, std::size_t height,
                      const std::vector<std::uint8_t>& rgb) {
    const auto bytes = encode_rgb(width, height, rgb);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("write_rgb: cannot open " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write_rgb: short write to " + path);
}

}  // namespace skid::png
