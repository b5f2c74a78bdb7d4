#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "styleseg/tensor.hpp"

namespace styleseg {

// RGB image, interleaved row-major, values in [0,1].
struct Image {
    int height = 0, width = 0;
    std::vector<Real> pixels; // height * width * 3

    Image() = default;
    Image(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, 0) {
        if (h < 1 || w < 1) throw std::invalid_argument("Image: dimensions must be positive");
    }

    Real& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    Real at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

    bool in_range() const {
        for (Real v : pixels)
            if (!(v >= 0.0 && v <= 1.0)) return false;
        return true;
    }
};

struct BinaryMask {
    int height = 0, width = 0;
    std::vector<std::uint8_t> pixels; // 0 or 1

    BinaryMask() = default;
    BinaryMask(int h, int w) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, 0) {
        if (h < 1 || w < 1) throw std::invalid_argument("BinaryMask: dimensions must be positive");
    }

    std::uint8_t& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }

    bool is_binary() const {
        for (auto v : pixels)
            if (v > 1) return false;
        return true;
    }

    std::int64_t popcount() const {
        std::int64_t n = 0;
        for (auto v : pixels) n += v;
        return n;
    }
};

struct Sample {
    Image image;
    BinaryMask mask;
    std::string id;

    bool consistent() const { return image.height == mask.height && image.width == mask.width; }
};

enum class SplitTag { Train, Val, Test };

inline const char* split_name(SplitTag t) {
    switch (t) {
        case SplitTag::Train: return "train";
        case SplitTag::Val: return "val";
        default: return "test";
    }
}

struct Dataset {
    std::vector<Sample> samples;
    SplitTag split_tag = SplitTag::Train;

    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
};

// Bilinear resize with half-pixel centers: src = (dst + 0.5) * scale - 0.5.
// Identity when sizes match, since src then lands exactly on integers.
inline Image resize_bilinear(const Image& img, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_bilinear: bad target size");
    Image out(out_h, out_w);
    const Real sy = static_cast<Real>(img.height) / out_h;
    const Real sx = static_cast<Real>(img.width) / out_w;
    for (int y = 0; y < out_h; ++y) {
        Real fy = (y + Real(0.5)) * sy - Real(0.5);
        fy = std::clamp(fy, Real(0), static_cast<Real>(img.height - 1));
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, img.height - 1);
        const Real wy = fy - y0;
        for (int x = 0; x < out_w; ++x) {
            Real fx = (x + Real(0.5)) * sx - Real(0.5);
            fx = std::clamp(fx, Real(0), static_cast<Real>(img.width - 1));
            const int x0 = static_cast<int>(fx);
            const int x1 = std::min(x0 + 1, img.width - 1);
            const Real wx = fx - x0;
            for (int c = 0; c < 3; ++c) {
                const Real top = img.at(y0, x0, c) * (1 - wx) + img.at(y0, x1, c) * wx;
                const Real bot = img.at(y1, x0, c) * (1 - wx) + img.at(y1, x1, c) * wx;
                out.at(y, x, c) = std::clamp(top * (1 - wy) + bot * wy, Real(0), Real(1));
            }
        }
    }
    return out;
}

inline BinaryMask resize_nearest(const BinaryMask& mask, int out_h, int out_w) {
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_nearest: bad target size");
    BinaryMask out(out_h, out_w);
    const Real sy = static_cast<Real>(mask.height) / out_h;
    const Real sx = static_cast<Real>(mask.width) / out_w;
    for (int y = 0; y < out_h; ++y) {
        const int sy_i = std::min(static_cast<int>((y + Real(0.5)) * sy), mask.height - 1);
        for (int x = 0; x < out_w; ++x) {
            const int sx_i = std::min(static_cast<int>((x + Real(0.5)) * sx), mask.width - 1);
            out.at(y, x) = mask.at(sy_i, sx_i);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Tensor bridging (NCHW)
// ---------------------------------------------------------------------------

inline Tensor images_to_tensor(const std::vector<const Image*>& batch) {
    if (batch.empty()) throw std::invalid_argument("images_to_tensor: empty batch");
    const int H = batch[0]->height, W = batch[0]->width;
    Tensor t({static_cast<int>(batch.size()), 3, H, W});
    for (std::size_t n = 0; n < batch.size(); ++n) {
        const Image& img = *batch[n];
        if (img.height != H || img.width != W) throw std::invalid_argument("images_to_tensor: ragged batch");
        for (int c = 0; c < 3; ++c)
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) t.at4(static_cast<int>(n), c, y, x) = img.at(y, x, c);
    }
    return t;
}

inline Tensor image_to_tensor(const Image& img) { return images_to_tensor({&img}); }

inline Image tensor_to_image(const Tensor& t, int n = 0) {
    if (t.rank() != 4 || t.dim(1) != 3) throw std::invalid_argument("tensor_to_image: expects Nx3xHxW");
    Image img(t.dim(2), t.dim(3));
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < t.dim(2); ++y)
            for (int x = 0; x < t.dim(3); ++x)
                img.at(y, x, c) = std::clamp(t.at4(n, c, y, x), Real(0), Real(1));
    return img;
}

inline Tensor masks_to_tensor(const std::vector<const BinaryMask*>& batch) {
    if (batch.empty()) throw std::invalid_argument("masks_to_tensor: empty batch");
    const int H = batch[0]->height, W = batch[0]->width;
    Tensor t({static_cast<int>(batch.size()), 1, H, W});
    for (std::size_t n = 0; n < batch.size(); ++n) {
        const BinaryMask& m = *batch[n];
        if (m.height != H || m.width != W) throw std::invalid_argument("masks_to_tensor: ragged batch");
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) t.at4(static_cast<int>(n), 0, y, x) = m.at(y, x);
    }
    return t;
}

inline Real psnr(const Image& a, const Image& b) {
    if (a.height != b.height || a.width != b.width) throw std::invalid_argument("psnr: size mismatch");
    Real mse = 0;
    for (std::size_t i = 0; i < a.pixels.size(); ++i) {
        const Real d = a.pixels[i] - b.pixels[i];
        mse += d * d;
    }
    mse /= static_cast<Real>(a.pixels.size());
    if (mse == 0) return 99.0;
    return -10.0 * std::log10(mse);
}

} // namespace styleseg
