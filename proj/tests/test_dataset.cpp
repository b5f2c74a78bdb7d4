#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "styleseg/dataset.hpp"
#include "test_util.hpp"

using namespace styleseg;
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Annotation XML
// ---------------------------------------------------------------------------

namespace {

const char* kOneRegionXml = R"(<?xml version="1.0"?>
<Annotations>
  <Annotation>
    <Regions>
      <Region Id="1">
        <Vertices>
          <Vertex X="0" Y="0"/>
          <Vertex X="4" Y="0"/>
          <Vertex X="0" Y="4"/>
        </Vertices>
      </Region>
    </Regions>
  </Annotation>
</Annotations>
)";

fs::path fresh_dir(const std::string& name) {
    fs::path dir = fs::temp_directory_path() / ("styleseg_test_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

} // namespace

TEST(AnnotationXml, OneRegionTranscribesVertices) {
    auto polys = parse_annotation_xml(kOneRegionXml);
    ASSERT_EQ(polys.size(), 1u);
    ASSERT_EQ(polys[0].vertices.size(), 3u);
    EXPECT_EQ(polys[0].vertices[0], std::make_pair(0.0, 0.0));
    EXPECT_EQ(polys[0].vertices[1], std::make_pair(4.0, 0.0));
    EXPECT_EQ(polys[0].vertices[2], std::make_pair(0.0, 4.0));
}

TEST(AnnotationXml, TwoRegionsKeepSizes) {
    std::string xml = "<Annotations><Annotation><Regions>";
    xml += "<Region><Vertices><Vertex X=\"0\" Y=\"0\"/><Vertex X=\"1\" Y=\"0\"/><Vertex X=\"0\" Y=\"1\"/></Vertices></Region>";
    xml += "<Region><Vertices>";
    for (int i = 0; i < 5; ++i)
        xml += "<Vertex X=\"" + std::to_string(i) + "\" Y=\"" + std::to_string(i * i) + "\"/>";
    xml += "</Vertices></Region>";
    xml += "</Regions></Annotation></Annotations>";
    auto polys = parse_annotation_xml(xml);
    ASSERT_EQ(polys.size(), 2u);
    EXPECT_EQ(polys[0].vertices.size(), 3u);
    EXPECT_EQ(polys[1].vertices.size(), 5u);
}

TEST(AnnotationXml, DegenerateRegionSkippedWithWarning) {
    const char* xml =
        "<Annotations><Region><Vertices><Vertex X=\"1\" Y=\"2\"/><Vertex X=\"3\" Y=\"4\"/></Vertices></Region></Annotations>";
    std::vector<std::string> warnings;
    auto polys = parse_annotation_xml(xml, &warnings);
    EXPECT_TRUE(polys.empty());
    ASSERT_EQ(warnings.size(), 1u);
    EXPECT_NE(warnings[0].find("2 vertices"), std::string::npos);
}

TEST(AnnotationXml, NoRegionsIsEmptyNotError) {
    auto polys = parse_annotation_xml("<Annotations><Annotation></Annotation></Annotations>");
    EXPECT_TRUE(polys.empty());
}

TEST(AnnotationXml, MalformedXmlNamesLine) {
    const char* xml = "<Annotations>\n<Region>\n<Vertices>\n</Wrong>\n";
    try {
        parse_annotation_xml(xml);
        FAIL() << "expected ParseError";
    } catch (const ParseError& e) {
        EXPECT_EQ(e.line, 4);
        EXPECT_NE(std::string(e.what()).find("line 4"), std::string::npos);
    }
}

TEST(AnnotationXml, VertexMissingCoordinateIsParseError) {
    const char* xml = "<Annotations><Region><Vertices><Vertex X=\"1\"/></Vertices></Region></Annotations>";
    EXPECT_THROW(parse_annotation_xml(xml), ParseError);
}

TEST(AnnotationXml, UnterminatedAttributeIsParseError) {
    EXPECT_THROW(parse_annotation_xml("<Annotations><Region Id=\"1></Region></Annotations>"), ParseError);
}

// ---------------------------------------------------------------------------
// Rasterization
// ---------------------------------------------------------------------------

TEST(Rasterize, EmptyPolygonListGivesZeroMask) {
    auto mask = rasterize_polygons({}, 8, 8);
    EXPECT_EQ(mask.popcount(), 0);
}

TEST(Rasterize, UnitSquareCoversWholeGrid) {
    Polygon square;
    square.vertices = {{0, 0}, {4, 0}, {4, 4}, {0, 4}};
    auto mask = rasterize_polygons({square}, 4, 4);
    // brute-force oracle agrees: every center (j+0.5, i+0.5) is inside
    auto expected = oracle::rasterize_brute_force({square}, 4, 4);
    EXPECT_EQ(expected.popcount(), 16);
    EXPECT_EQ(mask.pixels, expected.pixels);
}

TEST(Rasterize, TriangleMatchesHalfPlaneRule) {
    Polygon tri;
    tri.vertices = {{0, 0}, {4, 0}, {0, 4}};
    auto mask = rasterize_polygons({tri}, 4, 4);
    auto expected = oracle::rasterize_brute_force({tri}, 4, 4);
    EXPECT_EQ(mask.pixels, expected.pixels);
    // centers satisfying x + y < 4 are exactly the lit pixels
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j)
            EXPECT_EQ(mask.at(i, j), (j + 0.5) + (i + 0.5) < 4.0 ? 1 : 0);
}

TEST(Rasterize, MatchesPointInPolygonOracleOnRandomPolygons) {
    Rng rng(1312);
    for (int trial = 0; trial < 100; ++trial) {
        const int size = 8 + static_cast<int>(rng.uniform_int(57)); // up to 64
        std::vector<Polygon> polys;
        const int n_polys = 1 + static_cast<int>(rng.uniform_int(3));
        for (int p = 0; p < n_polys; ++p) polys.push_back(oracle::random_simple_polygon(rng, size));
        auto fast = rasterize_polygons(polys, size, size);
        auto slow = oracle::rasterize_brute_force(polys, size, size);
        ASSERT_EQ(fast.pixels, slow.pixels) << "trial " << trial << " size " << size;
    }
}

TEST(Rasterize, OverlappingPolygonsUnion) {
    Polygon a, b;
    a.vertices = {{0, 0}, {3, 0}, {3, 3}, {0, 3}};
    b.vertices = {{2, 2}, {6, 2}, {6, 6}, {2, 6}};
    auto mask = rasterize_polygons({a, b}, 6, 6);
    auto expected = oracle::rasterize_brute_force({a, b}, 6, 6);
    EXPECT_EQ(mask.pixels, expected.pixels);
    EXPECT_EQ(mask.popcount(), 9 + 16 - 1);
}

TEST(Rasterize, RejectsBadDimensions) {
    EXPECT_THROW(rasterize_polygons({}, 0, 4), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Resize
// ---------------------------------------------------------------------------

TEST(Resize, SameSizeIsBitwiseIdentity) {
    Rng rng(5);
    Sample s;
    s.id = "x";
    s.image = oracle::random_image(rng, 24, 24);
    s.mask = oracle::random_mask(rng, 24, 24, 0.3);
    Sample out = resize_sample(s, 24);
    EXPECT_EQ(out.image.pixels, s.image.pixels);
    EXPECT_EQ(out.mask.pixels, s.mask.pixels);
}

TEST(Resize, LargeSampleDownToTarget) {
    Rng rng(6);
    Sample s;
    s.id = "big";
    s.image = oracle::random_image(rng, 1000, 1000);
    s.mask = oracle::random_mask(rng, 1000, 1000, 0.2);
    Sample out = resize_sample(s, 512);
    EXPECT_EQ(out.image.height, 512);
    EXPECT_EQ(out.image.width, 512);
    EXPECT_EQ(out.mask.height, 512);
    EXPECT_TRUE(out.mask.is_binary());
    EXPECT_TRUE(out.image.in_range());
}

TEST(Resize, ConstantImageStaysConstant) {
    Sample s;
    s.id = "const";
    s.image = Image(20, 20);
    for (auto& v : s.image.pixels) v = 0.5;
    s.mask = BinaryMask(20, 20);
    for (int target : {8, 16, 33, 64}) {
        Sample out = resize_sample(s, target);
        for (Real v : out.image.pixels) ASSERT_DOUBLE_EQ(v, 0.5);
    }
}

TEST(Resize, RejectsTinyTarget) {
    Sample s;
    s.image = Image(16, 16);
    s.mask = BinaryMask(16, 16);
    EXPECT_THROW(resize_sample(s, 7), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Split
// ---------------------------------------------------------------------------

namespace {

Dataset numbered_dataset(int n) {
    Dataset ds;
    for (int i = 0; i < n; ++i) {
        Sample s;
        s.id = "img-" + std::to_string(i);
        s.image = Image(8, 8);
        s.mask = BinaryMask(8, 8);
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

} // namespace

TEST(Split, ThirtyIntoTwentyFiveFive) {
    auto [train, val] = split_train_val(numbered_dataset(30), 5, 42);
    EXPECT_EQ(train.size(), 25u);
    EXPECT_EQ(val.size(), 5u);
}

TEST(Split, ZeroValKeepsOriginalOrder) {
    Dataset ds = numbered_dataset(7);
    auto [train, val] = split_train_val(ds, 0, 9);
    EXPECT_TRUE(val.empty());
    ASSERT_EQ(train.size(), 7u);
    for (int i = 0; i < 7; ++i) EXPECT_EQ(train.samples[i].id, ds.samples[i].id);
}

TEST(Split, DeterministicAndPartition) {
    Dataset ds = numbered_dataset(20);
    auto [t1, v1] = split_train_val(ds, 6, 123);
    auto [t2, v2] = split_train_val(ds, 6, 123);
    ASSERT_EQ(t1.size(), t2.size());
    for (std::size_t i = 0; i < t1.size(); ++i) EXPECT_EQ(t1.samples[i].id, t2.samples[i].id);
    for (std::size_t i = 0; i < v1.size(); ++i) EXPECT_EQ(v1.samples[i].id, v2.samples[i].id);

    std::set<std::string> all, seen;
    for (const auto& s : ds.samples) all.insert(s.id);
    for (const auto& s : t1.samples) EXPECT_TRUE(seen.insert(s.id).second);
    for (const auto& s : v1.samples) EXPECT_TRUE(seen.insert(s.id).second);
    EXPECT_EQ(all, seen);
}

TEST(Split, DifferentSeedsUsuallyDiffer) {
    Dataset ds = numbered_dataset(20);
    auto [t1, v1] = split_train_val(ds, 6, 1);
    auto [t2, v2] = split_train_val(ds, 6, 2);
    std::vector<std::string> a, b;
    for (const auto& s : v1.samples) a.push_back(s.id);
    for (const auto& s : v2.samples) b.push_back(s.id);
    EXPECT_NE(a, b);
}

TEST(Split, OutOfRangeThrows) {
    Dataset ds = numbered_dataset(3);
    EXPECT_THROW(split_train_val(ds, 4, 0), std::invalid_argument);
    EXPECT_THROW(split_train_val(ds, -1, 0), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Disk loading
// ---------------------------------------------------------------------------

TEST(LoadDataset, LoadsXmlAndMaskSamples) {
    auto root = fresh_dir("load");
    fs::create_directories(root / "images");
    fs::create_directories(root / "annotations");
    fs::create_directories(root / "masks");
    Rng rng(3);
    write_png_rgb((root / "images" / "a.png").string(), oracle::random_image(rng, 32, 32));
    {
        std::ofstream xml(root / "annotations" / "a.xml");
        xml << kOneRegionXml;
    }
    write_png_rgb((root / "images" / "b.png").string(), oracle::random_image(rng, 32, 32));
    write_png_gray((root / "masks" / "b.png").string(), oracle::random_mask(rng, 32, 32, 0.4));

    Dataset ds = load_dataset(root.string(), "train", 16);
    ASSERT_EQ(ds.size(), 2u);
    EXPECT_EQ(ds.samples[0].id, "a");
    EXPECT_EQ(ds.samples[1].id, "b");
    for (const auto& s : ds.samples) {
        EXPECT_EQ(s.image.height, 16);
        EXPECT_TRUE(s.consistent());
        EXPECT_TRUE(s.mask.is_binary());
        EXPECT_TRUE(s.image.in_range());
    }
}

TEST(LoadDataset, MissingAnnotationNamesSample) {
    auto root = fresh_dir("noann");
    fs::create_directories(root / "images");
    Rng rng(4);
    write_png_rgb((root / "images" / "orphan.png").string(), oracle::random_image(rng, 16, 16));
    try {
        load_dataset(root.string(), "train", 16);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("orphan"), std::string::npos);
    }
}

TEST(LoadDataset, EmptyDirectoryIsLoadError) {
    auto root = fresh_dir("empty");
    fs::create_directories(root / "images");
    try {
        load_dataset(root.string(), "train", 16);
        FAIL() << "expected DataError";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("no samples found"), std::string::npos);
    }
}

TEST(LoadDataset, RoundTripsProcessedLayout) {
    SyntheticSpec spec;
    spec.image_size = 16;
    spec.n_train = 2;
    spec.n_val = 1;
    spec.n_test = 1;
    spec.radius_lo = 2;
    spec.radius_hi = 5;
    spec.seed = 77;
    auto data = generate_synthetic(spec);
    auto root = fresh_dir("roundtrip");
    write_synthetic(data, spec, root.string());
    EXPECT_TRUE(fs::exists(root / "spec.json"));

    Dataset train = load_dataset(root.string(), "train", 16);
    ASSERT_EQ(train.size(), data.train.size());
    // masks are bit-exact through the 0/255 PNG encoding; images are 8-bit
    // quantised so allow 1/255 per channel
    for (std::size_t i = 0; i < train.size(); ++i) {
        EXPECT_EQ(train.samples[i].mask.pixels, data.train.samples[i].mask.pixels);
        for (std::size_t k = 0; k < train.samples[i].image.pixels.size(); ++k)
            ASSERT_NEAR(train.samples[i].image.pixels[k], data.train.samples[i].image.pixels[k], 1.0 / 255.0 + 1e-9);
    }
}

TEST(TiffReader, ReadsUncompressedRgb) {
    // hand-built 2x2 little-endian baseline TIFF, chunky RGB
    auto root = fresh_dir("tiff");
    const fs::path path = root / "t.tif";
    std::vector<std::uint8_t> px = {255, 0, 0, 0, 255, 0, 0, 0, 255, 128, 128, 128};
    std::vector<std::uint8_t> bytes = {'I', 'I', 42, 0, 20, 0, 0, 0};
    bytes.insert(bytes.end(), px.begin(), px.end()); // pixel data at offset 8
    auto push_entry = [&](std::uint16_t tag, std::uint16_t type, std::uint32_t count, std::uint32_t value) {
        bytes.push_back(tag & 0xff);
        bytes.push_back(tag >> 8);
        bytes.push_back(type & 0xff);
        bytes.push_back(type >> 8);
        for (int i = 0; i < 4; ++i) bytes.push_back((count >> (8 * i)) & 0xff);
        for (int i = 0; i < 4; ++i) bytes.push_back((value >> (8 * i)) & 0xff);
    };
    bytes.push_back(8); // 8 IFD entries
    bytes.push_back(0);
    push_entry(256, 3, 1, 2);  // width
    push_entry(257, 3, 1, 2);  // height
    push_entry(258, 3, 1, 8);  // bits per sample (single SHORT fits inline)
    push_entry(259, 3, 1, 1);  // no compression
    push_entry(262, 3, 1, 2);  // RGB
    push_entry(273, 4, 1, 8);  // strip offset
    push_entry(277, 3, 1, 3);  // samples per pixel
    push_entry(279, 4, 1, 12); // strip byte count
    for (int i = 0; i < 4; ++i) bytes.push_back(0); // next IFD = none
    {
        std::ofstream out(path, std::ios::binary);
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    }
    Image img = read_tiff_rgb(path.string());
    ASSERT_EQ(img.height, 2);
    ASSERT_EQ(img.width, 2);
    EXPECT_DOUBLE_EQ(img.at(0, 0, 0), 1.0);
    EXPECT_DOUBLE_EQ(img.at(0, 1, 1), 1.0);
    EXPECT_DOUBLE_EQ(img.at(1, 0, 2), 1.0);
    EXPECT_NEAR(img.at(1, 1, 0), 128.0 / 255.0, 1e-12);
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

TEST(Synthetic, DeterministicForSeed) {
    SyntheticSpec spec;
    spec.image_size = 24;
    spec.n_train = 3;
    spec.n_val = 2;
    spec.n_test = 2;
    spec.radius_lo = 3;
    spec.radius_hi = 6;
    spec.seed = 9;
    auto a = generate_synthetic(spec);
    auto b = generate_synthetic(spec);
    ASSERT_EQ(a.train.size(), b.train.size());
    for (std::size_t i = 0; i < a.train.size(); ++i) {
        EXPECT_EQ(a.train.samples[i].image.pixels, b.train.samples[i].image.pixels);
        EXPECT_EQ(a.train.samples[i].mask.pixels, b.train.samples[i].mask.pixels);
        EXPECT_EQ(a.train.samples[i].id, b.train.samples[i].id);
    }
    for (std::size_t i = 0; i < a.test.size(); ++i)
        EXPECT_EQ(a.test.samples[i].image.pixels, b.test.samples[i].image.pixels);
}

TEST(Synthetic, ZeroShapesGiveEmptyMasks) {
    SyntheticSpec spec;
    spec.image_size = 16;
    spec.n_train = 2;
    spec.n_val = 1;
    spec.n_test = 1;
    spec.shapes_min = 0;
    spec.shapes_max = 0;
    spec.seed = 5;
    auto data = generate_synthetic(spec);
    for (const auto& s : data.train.samples) EXPECT_EQ(s.mask.popcount(), 0);
    for (const auto& s : data.test.samples) EXPECT_EQ(s.mask.popcount(), 0);
}

TEST(Synthetic, SamplesAreWellFormed) {
    auto data = generate_synthetic(SyntheticSpec{});
    for (const Dataset* ds : {&data.train, &data.val, &data.test}) {
        for (const auto& s : ds->samples) {
            ASSERT_TRUE(s.consistent());
            ASSERT_TRUE(s.mask.is_binary());
            ASSERT_TRUE(s.image.in_range());
        }
        // unique ids
        std::set<std::string> ids;
        for (const auto& s : ds->samples) EXPECT_TRUE(ids.insert(s.id).second);
    }
}

TEST(Synthetic, ShiftedBandsAreDisjoint) {
    SyntheticSpec spec; // defaults have texture_shift on
    EXPECT_TRUE(bands_disjoint(spec.background, shifted_band(spec.background)));
    EXPECT_TRUE(bands_disjoint(spec.foreground, shifted_band(spec.foreground)));
    EXPECT_FALSE(bands_disjoint(spec.background, spec.background));
}

TEST(Synthetic, ForegroundFractionLawUnchangedUnderShift) {
    SyntheticSpec spec;
    spec.image_size = 32;
    spec.n_train = 64;
    spec.n_val = 1;
    spec.n_test = 64;
    spec.seed = 31;
    auto data = generate_synthetic(spec);
    auto mean_fraction = [](const Dataset& ds) {
        double acc = 0;
        for (const auto& s : ds.samples)
            acc += double(s.mask.popcount()) / double(s.mask.height * s.mask.width);
        return acc / double(ds.size());
    };
    const double train_frac = mean_fraction(data.train);
    const double test_frac = mean_fraction(data.test);
    EXPECT_GT(train_frac, 0.05);
    EXPECT_LT(train_frac, 0.95);
    EXPECT_NEAR(train_frac, test_frac, 0.08);
}

TEST(Synthetic, MaskMatchesEllipseMembershipOracle) {
    SyntheticSpec spec;
    spec.image_size = 24;
    spec.n_train = 4;
    spec.n_val = 1;
    spec.n_test = 2;
    spec.seed = 17;
    std::vector<std::vector<EllipseShape>> shapes;
    auto data = generate_synthetic(spec, &shapes);
    ASSERT_EQ(shapes.size(), data.train.size() + data.val.size() + data.test.size());
    std::vector<const Sample*> all;
    for (const auto& s : data.train.samples) all.push_back(&s);
    for (const auto& s : data.val.samples) all.push_back(&s);
    for (const auto& s : data.test.samples) all.push_back(&s);
    for (std::size_t si = 0; si < all.size(); ++si) {
        const Sample& s = *all[si];
        for (int i = 0; i < s.mask.height; ++i)
            for (int j = 0; j < s.mask.width; ++j) {
                // independent membership test: rotate into ellipse frame
                bool inside = false;
                for (const auto& e : shapes[si]) {
                    const double dx = (j + 0.5) - e.cx, dy = (i + 0.5) - e.cy;
                    const double u = dx * std::cos(e.phi) + dy * std::sin(e.phi);
                    const double v = -dx * std::sin(e.phi) + dy * std::cos(e.phi);
                    if ((u / e.a) * (u / e.a) + (v / e.b) * (v / e.b) <= 1.0) {
                        inside = true;
                        break;
                    }
                }
                ASSERT_EQ(s.mask.at(i, j), inside ? 1 : 0) << "sample " << si << " at " << i << "," << j;
            }
    }
}

TEST(Synthetic, InvalidSpecThrows) {
    SyntheticSpec spec;
    spec.radius_lo = 5;
    spec.radius_hi = 2;
    EXPECT_THROW(generate_synthetic(spec), std::invalid_argument);
    SyntheticSpec spec2;
    spec2.image_size = 4;
    EXPECT_THROW(generate_synthetic(spec2), std::invalid_argument);
}
