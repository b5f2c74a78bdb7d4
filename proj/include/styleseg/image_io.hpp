#pragma once

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <png.h>

#include "styleseg/errors.hpp"
#include "styleseg/image.hpp"

namespace styleseg {

inline void write_png_rgb(const std::string& path, const Image& img) {
    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(img.width);
    pi.height = static_cast<png_uint_32>(img.height);
    pi.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(img.width) * img.height * 3);
    for (std::size_t i = 0; i < buf.size(); ++i) {
        Real v = img.pixels[i];
        v = v < 0 ? 0 : (v > 1 ? 1 : v);
        buf[i] = static_cast<std::uint8_t>(v * 255.0 + 0.5);
    }
    if (!png_image_write_to_file(&pi, path.c_str(), 0, buf.data(), 0, nullptr))
        throw DataError("failed to write PNG " + path + ": " + pi.message);
}

inline void write_png_gray(const std::string& path, const BinaryMask& mask) {
    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    pi.width = static_cast<png_uint_32>(mask.width);
    pi.height = static_cast<png_uint_32>(mask.height);
    pi.format = PNG_FORMAT_GRAY;
    std::vector<std::uint8_t> buf(mask.pixels.size());
    for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = mask.pixels[i] ? 255 : 0;
    if (!png_image_write_to_file(&pi, path.c_str(), 0, buf.data(), 0, nullptr))
        throw DataError("failed to write PNG " + path + ": " + pi.message);
}

inline Image read_png_rgb(const std::string& path) {
    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&pi, path.c_str()))
        throw DataError("failed to read PNG " + path + ": " + pi.message);
    pi.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(pi));
    if (!png_image_finish_read(&pi, nullptr, buf.data(), 0, nullptr))
        throw DataError("failed to decode PNG " + path + ": " + pi.message);
    Image img(static_cast<int>(pi.height), static_cast<int>(pi.width));
    for (std::size_t i = 0; i < buf.size(); ++i) img.pixels[i] = buf[i] / Real(255);
    return img;
}

// Masks are stored 0/255 single-channel; anything >= 128 counts as foreground.
inline BinaryMask read_png_mask(const std::string& path) {
    png_image pi;
    std::memset(&pi, 0, sizeof(pi));
    pi.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&pi, path.c_str()))
        throw DataError("failed to read PNG " + path + ": " + pi.message);
    pi.format = PNG_FORMAT_GRAY;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(pi));
    if (!png_image_finish_read(&pi, nullptr, buf.data(), 0, nullptr))
        throw DataError("failed to decode PNG " + path + ": " + pi.message);
    BinaryMask mask(static_cast<int>(pi.height), static_cast<int>(pi.width));
    for (std::size_t i = 0; i < buf.size(); ++i) mask.pixels[i] = buf[i] >= 128 ? 1 : 0;
    return mask;
}

// ---------------------------------------------------------------------------
// Minimal baseline TIFF reader: uncompressed 8-bit gray/RGB/RGBA, chunky
// planar layout. Enough for stock MoNuSeg tiles; anything else should be
// converted to PNG first.
// ---------------------------------------------------------------------------

namespace tiff_detail {

struct Reader {
    std::vector<std::uint8_t> bytes;
    bool little = true;

    std::uint16_t u16(std::size_t off) const {
        if (off + 2 > bytes.size()) throw DataError("TIFF: truncated file");
        return little ? static_cast<std::uint16_t>(bytes[off] | (bytes[off + 1] << 8))
                      : static_cast<std::uint16_t>((bytes[off] << 8) | bytes[off + 1]);
    }
    std::uint32_t u32(std::size_t off) const {
        if (off + 4 > bytes.size()) throw DataError("TIFF: truncated file");
        return little ? (bytes[off] | (bytes[off + 1] << 8) | (bytes[off + 2] << 16) | (static_cast<std::uint32_t>(bytes[off + 3]) << 24))
                      : ((static_cast<std::uint32_t>(bytes[off]) << 24) | (bytes[off + 1] << 16) | (bytes[off + 2] << 8) | bytes[off + 3]);
    }
};

struct Entry {
    std::uint16_t type = 0;
    std::uint32_t count = 0;
    std::size_t value_off = 0; // offset of the value field itself
};

inline std::uint32_t entry_value(const Reader& r, const Entry& e, std::uint32_t index = 0) {
    const std::size_t elem = (e.type == 3) ? 2 : 4; // SHORT vs LONG
    std::size_t base = e.value_off;
    if (e.count * elem > 4) base = r.u32(e.value_off);
    const std::size_t off = base + index * elem;
    return e.type == 3 ? r.u16(off) : r.u32(off);
}

} // namespace tiff_detail

inline Image read_tiff_rgb(const std::string& path) {
    using namespace tiff_detail;
    Reader r;
    {
        std::FILE* f = std::fopen(path.c_str(), "rb");
        if (!f) throw DataError("cannot open " + path);
        std::fseek(f, 0, SEEK_END);
        const long len = std::ftell(f);
        std::fseek(f, 0, SEEK_SET);
        r.bytes.resize(static_cast<std::size_t>(len));
        if (std::fread(r.bytes.data(), 1, r.bytes.size(), f) != r.bytes.size()) {
            std::fclose(f);
            throw DataError("cannot read " + path);
        }
        std::fclose(f);
    }
    if (r.bytes.size() < 8) throw DataError("TIFF: file too small: " + path);
    if (r.bytes[0] == 'I' && r.bytes[1] == 'I')
        r.little = true;
    else if (r.bytes[0] == 'M' && r.bytes[1] == 'M')
        r.little = false;
    else
        throw DataError("TIFF: bad byte-order mark in " + path);
    if (r.u16(2) != 42) throw DataError("TIFF: bad magic in " + path);

    const std::size_t ifd = r.u32(4);
    const std::uint16_t n_entries = r.u16(ifd);
    std::map<std::uint16_t, Entry> tags;
    for (std::uint16_t i = 0; i < n_entries; ++i) {
        const std::size_t off = ifd + 2 + static_cast<std::size_t>(i) * 12;
        Entry e;
        const std::uint16_t tag = r.u16(off);
        e.type = r.u16(off + 2);
        e.count = r.u32(off + 4);
        e.value_off = off + 8;
        tags[tag] = e;
    }
    auto tag_or = [&](std::uint16_t tag, std::uint32_t dflt) {
        auto it = tags.find(tag);
        return it == tags.end() ? dflt : entry_value(r, it->second);
    };

    const std::uint32_t width = tag_or(256, 0);
    const std::uint32_t height = tag_or(257, 0);
    const std::uint32_t compression = tag_or(259, 1);
    const std::uint32_t spp = tag_or(277, 1);
    const std::uint32_t rows_per_strip = tag_or(278, height);
    const std::uint32_t planar = tag_or(284, 1);
    if (!width || !height) throw DataError("TIFF: missing dimensions in " + path);
    if (compression != 1)
        throw DataError("TIFF: only uncompressed baseline TIFF is supported (" + path + "); convert to PNG");
    if (planar != 1) throw DataError("TIFF: planar layout not supported: " + path);
    if (spp != 1 && spp != 3 && spp != 4) throw DataError("TIFF: unsupported samples per pixel: " + path);
    if (tags.count(258)) {
        const Entry& bits = tags.at(258);
        for (std::uint32_t i = 0; i < bits.count; ++i)
            if (entry_value(r, bits, i) != 8) throw DataError("TIFF: only 8-bit samples supported: " + path);
    }
    auto strips_it = tags.find(273);
    auto counts_it = tags.find(279);
    if (strips_it == tags.end()) throw DataError("TIFF: missing strip offsets: " + path);

    Image img(static_cast<int>(height), static_cast<int>(width));
    const std::size_t row_bytes = static_cast<std::size_t>(width) * spp;
    std::uint32_t row = 0;
    for (std::uint32_t s = 0; s < strips_it->second.count && row < height; ++s) {
        std::size_t off = entry_value(r, strips_it->second, s);
        std::size_t remaining = counts_it != tags.end()
                                    ? entry_value(r, counts_it->second, s)
                                    : row_bytes * rows_per_strip;
        while (remaining >= row_bytes && row < height) {
            if (off + row_bytes > r.bytes.size()) throw DataError("TIFF: strip out of bounds: " + path);
            for (std::uint32_t x = 0; x < width; ++x) {
                const std::uint8_t* px = &r.bytes[off + static_cast<std::size_t>(x) * spp];
                if (spp == 1) {
                    const Real v = px[0] / Real(255);
                    for (int c = 0; c < 3; ++c) img.at(static_cast<int>(row), static_cast<int>(x), c) = v;
                } else {
                    for (int c = 0; c < 3; ++c) img.at(static_cast<int>(row), static_cast<int>(x), c) = px[c] / Real(255);
                }
            }
            off += row_bytes;
            remaining -= row_bytes;
            ++row;
        }
    }
    if (row != height) throw DataError("TIFF: incomplete pixel data: " + path);
    return img;
}

inline Image read_image(const std::string& path) {
    auto ext = std::filesystem::path(path).extension().string();
    for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    if (ext == ".png") return read_png_rgb(path);
    if (ext == ".tif" || ext == ".tiff") return read_tiff_rgb(path);
    throw DataError("unsupported image format: " + path);
}

} // namespace styleseg
