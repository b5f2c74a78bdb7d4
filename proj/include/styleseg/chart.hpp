#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "styleseg/image.hpp"

namespace styleseg {

// Minimal line-chart renderer for loss curves; enough for a readable
// train/val plot without an external plotting dependency.
class Chart {
public:
    Chart(int height = 480, int width = 720) : img_(height, width) {
        for (auto& v : img_.pixels) v = 1.0;
    }

    struct Series {
        std::vector<Real> ys;
        Real r, g, b;
    };

    void add_series(std::vector<Real> ys, Real r, Real g, Real b) { series_.push_back({std::move(ys), r, g, b}); }

    Image render() {
        Real y_min = 1e300, y_max = -1e300;
        std::size_t n_max = 0;
        for (const auto& s : series_) {
            n_max = std::max(n_max, s.ys.size());
            for (Real v : s.ys) {
                y_min = std::min(y_min, v);
                y_max = std::max(y_max, v);
            }
        }
        if (n_max == 0) return img_;
        if (y_max <= y_min) {
            y_max = y_min + 1;
            y_min -= 1;
        } else {
            const Real pad = 0.05 * (y_max - y_min);
            y_min -= pad;
            y_max += pad;
        }

        draw_line(margin_, img_.height - margin_, img_.width - margin_, img_.height - margin_, 0, 0, 0);
        draw_line(margin_, margin_, margin_, img_.height - margin_, 0, 0, 0);

        const int plot_w = img_.width - 2 * margin_;
        const int plot_h = img_.height - 2 * margin_;
        auto x_of = [&](std::size_t i) {
            return margin_ + (n_max == 1 ? plot_w / 2
                                         : static_cast<int>(std::lround(static_cast<Real>(i) / static_cast<Real>(n_max - 1) * plot_w)));
        };
        auto y_of = [&](Real v) {
            return img_.height - margin_ - static_cast<int>(std::lround((v - y_min) / (y_max - y_min) * plot_h));
        };

        for (int t = 0; t <= 4; ++t) {
            const Real v = y_min + (y_max - y_min) * t / 4.0;
            const int y = y_of(v);
            draw_line(margin_ - 4, y, margin_, y, 0, 0, 0);
            char label[32];
            std::snprintf(label, sizeof(label), "%.3g", v);
            draw_text(2, y - 2, label, 0, 0, 0);
            const std::size_t xi = static_cast<std::size_t>(t) * (n_max - (n_max ? 1 : 0)) / 4;
            const int x = x_of(xi);
            draw_line(x, img_.height - margin_, x, img_.height - margin_ + 4, 0, 0, 0);
            std::snprintf(label, sizeof(label), "%zu", xi + 1);
            draw_text(x - 4, img_.height - margin_ + 6, label, 0, 0, 0);
        }

        int legend_y = margin_ / 2;
        for (const auto& s : series_) {
            if (s.ys.empty()) continue;
            for (std::size_t i = 0; i + 1 < s.ys.size(); ++i)
                draw_line(x_of(i), y_of(s.ys[i]), x_of(i + 1), y_of(s.ys[i + 1]), s.r, s.g, s.b);
            if (s.ys.size() == 1) plot_dot(x_of(0), y_of(s.ys[0]), s.r, s.g, s.b);
            draw_line(margin_, legend_y, margin_ + 20, legend_y, s.r, s.g, s.b);
            legend_y += 6;
        }
        return img_;
    }

private:
    void put(int y, int x, Real r, Real g, Real b) {
        if (y < 0 || y >= img_.height || x < 0 || x >= img_.width) return;
        img_.at(y, x, 0) = r;
        img_.at(y, x, 1) = g;
        img_.at(y, x, 2) = b;
    }

    void plot_dot(int x, int y, Real r, Real g, Real b) {
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) put(y + dy, x + dx, r, g, b);
    }

    void draw_line(int x0, int y0, int x1, int y1, Real r, Real g, Real b) {
        // Bresenham
        const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
        const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
        int err = dx + dy;
        for (;;) {
            put(y0, x0, r, g, b);
            if (x0 == x1 && y0 == y1) break;
            const int e2 = 2 * err;
            if (e2 >= dy) {
                err += dy;
                x0 += sx;
            }
            if (e2 <= dx) {
                err += dx;
                y0 += sy;
            }
        }
    }

    // 3x5 glyphs for tick labels: digits plus . - + e g
    void draw_text(int x, int y, const char* text, Real r, Real g, Real b) {
        for (const char* p = text; *p; ++p, x += 4) {
            const char* rows = glyph(*p);
            if (!rows) continue;
            for (int gy = 0; gy < 5; ++gy)
                for (int gx = 0; gx < 3; ++gx)
                    if (rows[gy * 3 + gx] == '#') put(y + gy, x + gx, r, g, b);
        }
    }

    static const char* glyph(char c) {
        switch (c) {
            case '0': return "####.##.##.####";
            case '1': return ".#.##..#..#.###";
            case '2': return "###..#####..###";
            case '3': return "###..####..####";
            case '4': return "#.##.####..#..#";
            case '5': return "####..###..####";
            case '6': return "####..####.####";
            case '7': return "###..#..#..#..#";
            case '8': return "####.####.#####";
            case '9': return "####.####..####";
            case '.': return "............#..";
            case '-': return "......###......";
            case '+': return "....#.###..#...";
            case 'e': return "...#####...####";
            case 'g': return "...####.#.##.#.";
            default: return nullptr;
        }
    }

    Image img_;
    std::vector<Series> series_;
    int margin_ = 40;
};

} // namespace styleseg
