#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "styleseg/errors.hpp"
#include "styleseg/image.hpp"
#include "styleseg/image_io.hpp"
#include "styleseg/rng.hpp"

namespace styleseg {

struct Polygon {
    std::vector<std::pair<Real, Real>> vertices; // (x, y) pixel coordinates
};

// ---------------------------------------------------------------------------
// Annotation XML (Aperio-style: Annotations/Annotation/Regions/Region/
// Vertices/Vertex with X/Y attributes)
// ---------------------------------------------------------------------------

namespace xml_detail {

struct Attr {
    std::string name, value;
};

struct Tag {
    std::string name;
    std::vector<Attr> attrs;
    bool closing = false;
    bool self_closing = false;
    int line = 0;
};

class Scanner {
public:
    explicit Scanner(const std::string& text) : text_(text) {}

    // Returns the next element tag, skipping text, comments, PIs, doctype.
    std::optional<Tag> next() {
        while (pos_ < text_.size()) {
            if (text_[pos_] != '<') {
                advance();
                continue;
            }
            if (match("<!--")) {
                const int start_line = line_;
                if (!skip_until("-->")) throw ParseError("unterminated comment", start_line);
                continue;
            }
            if (match("<?")) {
                const int start_line = line_;
                if (!skip_until("?>")) throw ParseError("unterminated processing instruction", start_line);
                continue;
            }
            if (pos_ + 1 < text_.size() && text_[pos_ + 1] == '!') {
                const int start_line = line_;
                if (!skip_until(">")) throw ParseError("unterminated declaration", start_line);
                continue;
            }
            return parse_tag();
        }
        return std::nullopt;
    }

private:
    void advance() {
        if (text_[pos_] == '\n') ++line_;
        ++pos_;
    }

    bool match(const char* s) {
        const std::size_t len = std::strlen(s);
        if (text_.compare(pos_, len, s) != 0) return false;
        for (std::size_t i = 0; i < len; ++i) advance();
        return true;
    }

    bool skip_until(const char* s) {
        const std::size_t len = std::strlen(s);
        while (pos_ < text_.size()) {
            if (text_.compare(pos_, len, s) == 0) {
                for (std::size_t i = 0; i < len; ++i) advance();
                return true;
            }
            advance();
        }
        return false;
    }

    void skip_ws() {
        while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) advance();
    }

    Tag parse_tag() {
        Tag tag;
        tag.line = line_;
        advance(); // '<'
        if (pos_ < text_.size() && text_[pos_] == '/') {
            tag.closing = true;
            advance();
        }
        while (pos_ < text_.size() && (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_' || text_[pos_] == ':' || text_[pos_] == '-' || text_[pos_] == '.'))
        {
            tag.name += text_[pos_];
            advance();
        }
        if (tag.name.empty()) throw ParseError("malformed tag", tag.line);
        for (;;) {
            skip_ws();
            if (pos_ >= text_.size()) throw ParseError("unterminated tag <" + tag.name + ">", tag.line);
            if (text_[pos_] == '>') {
                advance();
                return tag;
            }
            if (text_[pos_] == '/') {
                advance();
                skip_ws();
                if (pos_ >= text_.size() || text_[pos_] != '>') throw ParseError("malformed tag <" + tag.name + ">", tag.line);
                advance();
                tag.self_closing = true;
                return tag;
            }
            Attr a;
            while (pos_ < text_.size() && (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_' || text_[pos_] == ':' || text_[pos_] == '-'))
            {
                a.name += text_[pos_];
                advance();
            }
            if (a.name.empty()) throw ParseError("malformed attribute in <" + tag.name + ">", line_);
            skip_ws();
            if (pos_ >= text_.size() || text_[pos_] != '=') throw ParseError("attribute " + a.name + " missing '='", line_);
            advance();
            skip_ws();
            if (pos_ >= text_.size() || (text_[pos_] != '"' && text_[pos_] != '\'')) throw ParseError("attribute " + a.name + " missing quoted value", line_);
            const char quote = text_[pos_];
            advance();
            while (pos_ < text_.size() && text_[pos_] != quote) {
                a.value += text_[pos_];
                advance();
            }
            if (pos_ >= text_.size()) throw ParseError("unterminated attribute value for " + a.name, line_);
            advance();
            tag.attrs.push_back(std::move(a));
        }
    }

    const std::string& text_;
    std::size_t pos_ = 0;
    int line_ = 1;
};

} // namespace xml_detail

// One polygon per Region, vertex order preserved. Regions with fewer than
// three vertices are dropped and a warning is recorded.
inline std::vector<Polygon> parse_annotation_xml(const std::string& xml_text,
                                                 std::vector<std::string>* warnings = nullptr) {
    xml_detail::Scanner scanner(xml_text);
    std::vector<Polygon> polygons;
    std::vector<std::string> stack;
    int region_depth = 0;
    Polygon current;
    int current_region_line = 0;

    auto flush_region = [&](int line) {
        if (current.vertices.size() >= 3) {
            polygons.push_back(std::move(current));
        } else if (warnings) {
            warnings->push_back("Region at line " + std::to_string(line) + " has " +
                                std::to_string(current.vertices.size()) + " vertices; skipped");
        }
        current = Polygon{};
    };

    while (auto tag = scanner.next()) {
        if (tag->closing) {
            if (stack.empty() || stack.back() != tag->name)
                throw ParseError("mismatched closing tag </" + tag->name + ">", tag->line);
            stack.pop_back();
            if (tag->name == "Region") {
                --region_depth;
                flush_region(current_region_line);
            }
            continue;
        }
        if (tag->name == "Region") {
            if (tag->self_closing) {
                flush_region(tag->line);
                continue;
            }
            ++region_depth;
            current_region_line = tag->line;
        } else if (tag->name == "Vertex" && region_depth > 0) {
            std::optional<Real> x, y;
            for (const auto& a : tag->attrs) {
                if (a.name == "X") x = std::strtod(a.value.c_str(), nullptr);
                if (a.name == "Y") y = std::strtod(a.value.c_str(), nullptr);
            }
            if (!x || !y) throw ParseError("Vertex missing X or Y attribute", tag->line);
            current.vertices.emplace_back(*x, *y);
        }
        if (!tag->self_closing) stack.push_back(tag->name);
    }
    if (!stack.empty())
        throw ParseError("unclosed element <" + stack.back() + ">", 0);
    return polygons;
}

// ---------------------------------------------------------------------------
// Rasterization: pixel (i, j) is foreground iff its center (j+0.5, i+0.5)
// lies inside any polygon under the nonzero-winding rule. Scanline fill;
// edge crossings use the half-open rule y1 <= py < y2, and a crossing at
// exactly the pixel center x is excluded, matching a ray cast to +inf.
// ---------------------------------------------------------------------------

inline BinaryMask rasterize_polygons(const std::vector<Polygon>& polygons, int width, int height) {
    if (width < 1 || height < 1) throw std::invalid_argument("rasterize_polygons: width and height must be >= 1");
    BinaryMask mask(height, width);
    struct Crossing {
        Real x;
        int dir;
    };
    std::vector<Crossing> crossings;
    for (const auto& poly : polygons) {
        if (poly.vertices.size() < 3) continue;
        Real min_y = poly.vertices[0].second, max_y = min_y;
        for (const auto& [vx, vy] : poly.vertices) {
            min_y = std::min(min_y, vy);
            max_y = std::max(max_y, vy);
        }
        const int row_lo = std::max(0, static_cast<int>(std::floor(min_y - Real(0.5))));
        const int row_hi = std::min(height - 1, static_cast<int>(std::ceil(max_y)));
        for (int i = row_lo; i <= row_hi; ++i) {
            const Real py = i + Real(0.5);
            crossings.clear();
            const std::size_t m = poly.vertices.size();
            for (std::size_t e = 0; e < m; ++e) {
                const auto [x1, y1] = poly.vertices[e];
                const auto [x2, y2] = poly.vertices[(e + 1) % m];
                if (y1 <= py && py < y2) {
                    crossings.push_back({x1 + (py - y1) * (x2 - x1) / (y2 - y1), +1});
                } else if (y2 <= py && py < y1) {
                    crossings.push_back({x1 + (py - y1) * (x2 - x1) / (y2 - y1), -1});
                }
            }
            if (crossings.empty()) continue;
            std::sort(crossings.begin(), crossings.end(), [](const Crossing& a, const Crossing& b) { return a.x < b.x; });
            // wind(px) = sum of dir over crossings with x > px; walk pixels
            // left to right, dropping crossings as they fall at or behind px.
            int total = 0;
            for (const auto& c : crossings) total += c.dir;
            std::size_t k = 0;
            int wind = total;
            for (int j = 0; j < width; ++j) {
                const Real px = j + Real(0.5);
                while (k < crossings.size() && crossings[k].x <= px) {
                    wind -= crossings[k].dir;
                    ++k;
                }
                if (wind != 0) mask.at(i, j) = 1;
            }
        }
    }
    return mask;
}

// ---------------------------------------------------------------------------
// Sample-level operations
// ---------------------------------------------------------------------------

inline Sample resize_sample(const Sample& sample, int target) {
    if (target < 8) throw std::invalid_argument("resize_sample: target must be >= 8");
    Sample out;
    out.id = sample.id;
    out.image = (sample.image.height == target && sample.image.width == target)
                    ? sample.image
                    : resize_bilinear(sample.image, target, target);
    out.mask = (sample.mask.height == target && sample.mask.width == target)
                   ? sample.mask
                   : resize_nearest(sample.mask, target, target);
    return out;
}

// Seeded partition; both parts keep the input's relative order.
inline std::pair<Dataset, Dataset> split_train_val(const Dataset& dataset, int n_val, std::uint64_t seed) {
    const int n = static_cast<int>(dataset.size());
    if (n_val < 0 || n_val > n) throw std::invalid_argument("split_train_val: n_val out of range");
    std::vector<int> idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
    Rng rng(seed);
    rng.shuffle(idx);
    std::vector<bool> is_val(static_cast<std::size_t>(n), false);
    for (int i = 0; i < n_val; ++i) is_val[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = true;
    Dataset train, val;
    train.split_tag = SplitTag::Train;
    val.split_tag = SplitTag::Val;
    for (int i = 0; i < n; ++i) {
        if (is_val[static_cast<std::size_t>(i)])
            val.samples.push_back(dataset.samples[static_cast<std::size_t>(i)]);
        else
            train.samples.push_back(dataset.samples[static_cast<std::size_t>(i)]);
    }
    return {std::move(train), std::move(val)};
}

// ---------------------------------------------------------------------------
// Disk layout
//   raw root:       <root>/images/*.{png,tif} + <root>/annotations/*.xml
//                   or <root>/masks/*.png (0/255)
//   processed root: <root>/<split>/images/*.png + <root>/<split>/masks/*.png
// ---------------------------------------------------------------------------

inline Dataset load_dataset(const std::string& root_path, const std::string& split_tag, int target) {
    namespace fs = std::filesystem;
    SplitTag tag = SplitTag::Train;
    if (split_tag == "val")
        tag = SplitTag::Val;
    else if (split_tag == "test")
        tag = SplitTag::Test;
    else if (split_tag != "train")
        throw std::invalid_argument("load_dataset: split_tag must be train/val/test");

    fs::path root(root_path);
    if (fs::exists(root / split_tag / "images")) root = root / split_tag;
    const fs::path img_dir = root / "images";
    if (!fs::exists(img_dir)) throw DataError("no samples found: missing " + img_dir.string());
    const fs::path ann_dir = root / "annotations";
    const fs::path mask_dir = root / "masks";

    std::vector<fs::path> image_files;
    for (const auto& entry : fs::directory_iterator(img_dir)) {
        if (!entry.is_regular_file()) continue;
        auto ext = entry.path().extension().string();
        for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
        if (ext == ".png" || ext == ".tif" || ext == ".tiff") image_files.push_back(entry.path());
    }
    std::sort(image_files.begin(), image_files.end(),
              [](const fs::path& a, const fs::path& b) { return a.stem().string() < b.stem().string(); });
    if (image_files.empty()) throw DataError("no samples found in " + img_dir.string());

    Dataset ds;
    ds.split_tag = tag;
    for (const auto& img_path : image_files) {
        const std::string stem = img_path.stem().string();
        Sample s;
        s.id = stem;
        s.image = read_image(img_path.string());
        const fs::path xml_path = ann_dir / (stem + ".xml");
        const fs::path mask_path = mask_dir / (stem + ".png");
        if (fs::exists(xml_path)) {
            std::ifstream in(xml_path);
            std::string xml((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
            auto polygons = parse_annotation_xml(xml);
            s.mask = rasterize_polygons(polygons, s.image.width, s.image.height);
        } else if (fs::exists(mask_path)) {
            s.mask = read_png_mask(mask_path.string());
            if (s.mask.height != s.image.height || s.mask.width != s.image.width)
                throw DataError("mask size mismatch for sample " + stem);
        } else {
            throw DataError("sample " + stem + " has no annotation XML or mask PNG");
        }
        ds.samples.push_back(resize_sample(s, target));
    }
    return ds;
}

inline void write_dataset(const Dataset& ds, const std::string& out_dir) {
    namespace fs = std::filesystem;
    const fs::path root(out_dir);
    fs::create_directories(root / "images");
    fs::create_directories(root / "masks");
    for (const auto& s : ds.samples) {
        write_png_rgb((root / "images" / (s.id + ".png")).string(), s.image);
        write_png_gray((root / "masks" / (s.id + ".png")).string(), s.mask);
    }
}

// ---------------------------------------------------------------------------
// Synthetic texture-shift data
// ---------------------------------------------------------------------------

struct TextureBand {
    Real freq_lo = 2, freq_hi = 5;        // cycles per image
    Real orient_lo = 0, orient_hi = 1.5;  // radians
    Real noise_amp = 0.05;
};

// Band used for the shifted test split: frequencies scaled down by a fixed
// factor (coarser textures, no aliasing at small image sizes), orientation
// rotated by pi/2. Requires freq_hi/freq_lo < 1/kShiftScale for the scaled
// band to clear the original one.
inline constexpr Real kShiftScale = 0.35;

inline TextureBand shifted_band(const TextureBand& b) {
    TextureBand out = b;
    out.freq_lo = b.freq_lo * kShiftScale;
    out.freq_hi = b.freq_hi * kShiftScale;
    out.orient_lo = b.orient_lo + Real(1.5707963267948966);
    out.orient_hi = b.orient_hi + Real(1.5707963267948966);
    return out;
}

inline bool bands_disjoint(const TextureBand& a, const TextureBand& b) {
    return a.freq_hi < b.freq_lo || b.freq_hi < a.freq_lo;
}

struct SyntheticSpec {
    int image_size = 64;
    int n_train = 16;
    int n_val = 8;
    int n_test = 16;
    int shapes_min = 3;
    int shapes_max = 8;
    Real radius_lo = 5;
    Real radius_hi = 12;
    TextureBand background{2, 5, 0, 1.5, 0.05};
    TextureBand foreground{9, 14, 0, 1.5, 0.05};
    // per-region, per-channel color statistics drawn per image: mean level
    // and sinusoid amplitude
    Real color_base_lo = 0.35, color_base_hi = 0.65;
    Real color_amp_lo = 0.15, color_amp_hi = 0.40;
    // membrane-like dark contour around each shape: pixels whose ellipse
    // quadform falls within ring_width of the boundary are drawn at
    // ring_level (the mask itself is unaffected)
    bool boundary_rings = true;
    Real ring_width = 0.12;
    Real ring_level = 0.15;
    // fraction of shapes textured from the background band instead of the
    // foreground band: such regions stay visible (own texture draw, ring)
    // but carry no band-level frequency cue
    Real ambiguous_shape_prob = 0.0;
    // draw each texture's waveform from {sine, square, triangle} instead of
    // sine only, widening per-image appearance spread
    bool waveform_variety = false;
    bool texture_shift = true;
    std::uint64_t seed = 0;

    void validate() const {
        if (image_size < 8) throw std::invalid_argument("SyntheticSpec: image_size must be >= 8");
        if (n_train < 0 || n_val < 0 || n_test < 0) throw std::invalid_argument("SyntheticSpec: negative counts");
        if (shapes_min > shapes_max || shapes_min < 0) throw std::invalid_argument("SyntheticSpec: bad shapes range");
        if (radius_lo > radius_hi || radius_lo <= 0) throw std::invalid_argument("SyntheticSpec: bad radius range");
        if (background.freq_lo > background.freq_hi || foreground.freq_lo > foreground.freq_hi)
            throw std::invalid_argument("SyntheticSpec: bad frequency range");
        if (color_base_lo > color_base_hi || color_amp_lo > color_amp_hi || color_amp_lo < 0)
            throw std::invalid_argument("SyntheticSpec: bad color ranges");
        if (ring_width < 0 || ring_level < 0 || ring_level > 1)
            throw std::invalid_argument("SyntheticSpec: bad ring parameters");
        if (ambiguous_shape_prob < 0 || ambiguous_shape_prob > 1)
            throw std::invalid_argument("SyntheticSpec: ambiguous_shape_prob must be in [0,1]");
    }
};

inline void to_json(nlohmann::json& j, const TextureBand& b) {
    j = {{"freq_lo", b.freq_lo},
         {"freq_hi", b.freq_hi},
         {"orient_lo", b.orient_lo},
         {"orient_hi", b.orient_hi},
         {"noise_amp", b.noise_amp}};
}

inline void from_json(const nlohmann::json& j, TextureBand& b) {
    b.freq_lo = j.value("freq_lo", 2.0);
    b.freq_hi = j.value("freq_hi", 5.0);
    b.orient_lo = j.value("orient_lo", 0.0);
    b.orient_hi = j.value("orient_hi", 1.5);
    b.noise_amp = j.value("noise_amp", 0.05);
}

inline void to_json(nlohmann::json& j, const SyntheticSpec& s) {
    j = {{"image_size", s.image_size},
         {"n_train", s.n_train},
         {"n_val", s.n_val},
         {"n_test", s.n_test},
         {"shapes_min", s.shapes_min},
         {"shapes_max", s.shapes_max},
         {"radius_lo", s.radius_lo},
         {"radius_hi", s.radius_hi},
         {"color_base_lo", s.color_base_lo},
         {"color_base_hi", s.color_base_hi},
         {"color_amp_lo", s.color_amp_lo},
         {"color_amp_hi", s.color_amp_hi},
         {"boundary_rings", s.boundary_rings},
         {"ring_width", s.ring_width},
         {"ring_level", s.ring_level},
         {"ambiguous_shape_prob", s.ambiguous_shape_prob},
         {"waveform_variety", s.waveform_variety},
         {"background", s.background},
         {"foreground", s.foreground},
         {"texture_shift", s.texture_shift},
         {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticSpec& s) {
    SyntheticSpec defaults;
    s.image_size = j.value("image_size", defaults.image_size);
    s.n_train = j.value("n_train", defaults.n_train);
    s.n_val = j.value("n_val", defaults.n_val);
    s.n_test = j.value("n_test", defaults.n_test);
    s.shapes_min = j.value("shapes_min", defaults.shapes_min);
    s.shapes_max = j.value("shapes_max", defaults.shapes_max);
    s.radius_lo = j.value("radius_lo", defaults.radius_lo);
    s.radius_hi = j.value("radius_hi", defaults.radius_hi);
    s.color_base_lo = j.value("color_base_lo", defaults.color_base_lo);
    s.color_base_hi = j.value("color_base_hi", defaults.color_base_hi);
    s.color_amp_lo = j.value("color_amp_lo", defaults.color_amp_lo);
    s.color_amp_hi = j.value("color_amp_hi", defaults.color_amp_hi);
    s.boundary_rings = j.value("boundary_rings", defaults.boundary_rings);
    s.ring_width = j.value("ring_width", defaults.ring_width);
    s.ring_level = j.value("ring_level", defaults.ring_level);
    s.ambiguous_shape_prob = j.value("ambiguous_shape_prob", defaults.ambiguous_shape_prob);
    s.waveform_variety = j.value("waveform_variety", defaults.waveform_variety);
    if (j.contains("background")) j.at("background").get_to(s.background);
    if (j.contains("foreground")) j.at("foreground").get_to(s.foreground);
    s.texture_shift = j.value("texture_shift", defaults.texture_shift);
    s.seed = j.value("seed", defaults.seed);
}

struct EllipseShape {
    Real cx, cy, a, b, phi;

    // squared normalized radius: <= 1 inside, == 1 on the boundary
    Real quadform(Real x, Real y) const {
        const Real dx = x - cx, dy = y - cy;
        const Real c = std::cos(phi), s = std::sin(phi);
        const Real u = (dx * c + dy * s) / a;
        const Real v = (-dx * s + dy * c) / b;
        return u * u + v * v;
    }

    bool contains(Real x, Real y) const { return quadform(x, y) <= 1.0; }
};

namespace synth_detail {

struct TextureParams {
    Real freq, orient, noise_amp;
    int waveform; // 0 sin, 1 square, 2 triangle
    Real phase[3];
    Real base[3];
    Real amp[3];
};

inline TextureParams draw_texture(const TextureBand& band, const SyntheticSpec& spec, Rng& rng) {
    TextureParams t;
    t.freq = rng.uniform(band.freq_lo, band.freq_hi);
    t.orient = rng.uniform(band.orient_lo, band.orient_hi);
    t.noise_amp = band.noise_amp;
    t.waveform = spec.waveform_variety ? static_cast<int>(rng.uniform_int(3)) : 0;
    for (auto& p : t.phase) p = rng.uniform(0, 6.283185307179586);
    for (auto& b : t.base) b = rng.uniform(spec.color_base_lo, spec.color_base_hi);
    for (auto& a : t.amp) a = rng.uniform(spec.color_amp_lo, spec.color_amp_hi);
    return t;
}

inline Real texture_value(const TextureParams& t, Real x, Real y, int ch, int size, Rng& noise_rng) {
    const Real k = 2.0 * 3.14159265358979323846 * t.freq / static_cast<Real>(size);
    const Real proj = x * std::cos(t.orient) + y * std::sin(t.orient);
    Real w = std::sin(k * proj + t.phase[ch]);
    if (t.waveform == 1)
        w = w >= 0 ? 1.0 : -1.0;
    else if (t.waveform == 2)
        w = std::asin(w) * Real(0.6366197723675814); // 2/pi
    const Real wave = t.base[ch] + t.amp[ch] * w;
    return wave + t.noise_amp * (2.0 * noise_rng.uniform() - 1.0);
}

inline Sample make_sample(const SyntheticSpec& spec, const TextureBand& bg_band, const TextureBand& fg_band,
                          const std::string& id, Rng rng, std::vector<EllipseShape>* shapes_out = nullptr) {
    const int S = spec.image_size;
    const int n_shapes = spec.shapes_min + static_cast<int>(rng.uniform_int(
                             static_cast<std::uint64_t>(spec.shapes_max - spec.shapes_min + 1)));
    std::vector<EllipseShape> shapes;
    std::vector<TextureParams> shape_textures;
    shapes.reserve(static_cast<std::size_t>(n_shapes));
    for (int i = 0; i < n_shapes; ++i) {
        EllipseShape e;
        e.a = rng.uniform(spec.radius_lo, spec.radius_hi);
        e.b = rng.uniform(spec.radius_lo, spec.radius_hi);
        e.cx = rng.uniform(0, static_cast<Real>(S));
        e.cy = rng.uniform(0, static_cast<Real>(S));
        e.phi = rng.uniform(0, 3.14159265358979323846);
        shapes.push_back(e);
        // each shape draws its own texture; ambiguous shapes draw from the
        // background band and are identifiable only by region and ring
        const bool ambiguous = rng.uniform() < spec.ambiguous_shape_prob;
        shape_textures.push_back(draw_texture(ambiguous ? bg_band : fg_band, spec, rng));
    }
    const TextureParams bg = draw_texture(bg_band, spec, rng);
    if (shapes_out) *shapes_out = shapes;

    Sample sample;
    sample.id = id;
    sample.image = Image(S, S);
    sample.mask = BinaryMask(S, S);
    for (int i = 0; i < S; ++i) {
        for (int j = 0; j < S; ++j) {
            const Real cx = j + Real(0.5), cy = i + Real(0.5);
            int first_inside = -1;
            bool near_boundary = false, deep_inside = false;
            for (std::size_t e = 0; e < shapes.size(); ++e) {
                const Real q = shapes[e].quadform(cx, cy);
                if (q <= 1.0 && first_inside < 0) first_inside = static_cast<int>(e);
                if (std::abs(q - 1.0) <= spec.ring_width) near_boundary = true;
                if (q < 1.0 - spec.ring_width) deep_inside = true;
            }
            // rings trace the visible union boundary; occluded segments vanish
            const bool on_ring = spec.boundary_rings && near_boundary && !deep_inside;
            sample.mask.at(i, j) = first_inside >= 0 ? 1 : 0;
            const TextureParams& t = first_inside >= 0 ? shape_textures[static_cast<std::size_t>(first_inside)] : bg;
            for (int c = 0; c < 3; ++c) {
                const Real v = on_ring ? spec.ring_level + t.noise_amp * (2.0 * rng.uniform() - 1.0)
                                       : texture_value(t, cx, cy, c, S, rng);
                sample.image.at(i, j, c) = std::clamp(v, Real(0), Real(1));
            }
        }
    }
    return sample;
}

} // namespace synth_detail

struct SyntheticData {
    Dataset train, val, test;
};

inline SyntheticData generate_synthetic(const SyntheticSpec& spec,
                                        std::vector<std::vector<EllipseShape>>* shapes_out = nullptr) {
    spec.validate();
    if (spec.texture_shift) {
        if (!bands_disjoint(spec.background, shifted_band(spec.background)) ||
            !bands_disjoint(spec.foreground, shifted_band(spec.foreground)))
            throw std::invalid_argument("SyntheticSpec: shifted bands are not disjoint");
    }
    Rng master(spec.seed);
    SyntheticData out;
    out.train.split_tag = SplitTag::Train;
    out.val.split_tag = SplitTag::Val;
    out.test.split_tag = SplitTag::Test;

    const TextureBand test_bg = spec.texture_shift ? shifted_band(spec.background) : spec.background;
    const TextureBand test_fg = spec.texture_shift ? shifted_band(spec.foreground) : spec.foreground;

    auto fill = [&](Dataset& ds, int count, std::uint64_t stream, const char* prefix,
                    const TextureBand& bg, const TextureBand& fg) {
        Rng split_rng = master.derive(stream);
        for (int i = 0; i < count; ++i) {
            char id[64];
            std::snprintf(id, sizeof(id), "%s-%03d", prefix, i);
            std::vector<EllipseShape> shapes;
            ds.samples.push_back(synth_detail::make_sample(spec, bg, fg, id,
                                                           split_rng.derive(static_cast<std::uint64_t>(i)),
                                                           shapes_out ? &shapes : nullptr));
            if (shapes_out) shapes_out->push_back(std::move(shapes));
        }
    };
    fill(out.train, spec.n_train, 1, "synth-train", spec.background, spec.foreground);
    fill(out.val, spec.n_val, 2, "synth-val", spec.background, spec.foreground);
    fill(out.test, spec.n_test, 3, "synth-test", test_bg, test_fg);
    return out;
}

// Writes the processed-root layout plus a spec.json echo of all generator
// parameters and the seed.
inline void write_synthetic(const SyntheticData& data, const SyntheticSpec& spec, const std::string& out_root) {
    namespace fs = std::filesystem;
    fs::create_directories(out_root);
    write_dataset(data.train, (fs::path(out_root) / "train").string());
    write_dataset(data.val, (fs::path(out_root) / "val").string());
    write_dataset(data.test, (fs::path(out_root) / "test").string());
    nlohmann::json j = spec;
    std::ofstream out(fs::path(out_root) / "spec.json");
    if (!out) throw DataError("cannot write spec.json under " + out_root);
    out << j.dump(2) << "\n";
}

} // namespace styleseg
