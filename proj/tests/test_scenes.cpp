#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "lumix/image_io.hpp"
#include "lumix/scenes.hpp"

using namespace lumix;
using namespace lumix::scenes;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / ("lumix_test_" + name)) {
        fs::remove_all(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

SceneDescriptor one_sphere() {
    SceneDescriptor d;
    d.object_count = 1;
    d.shapes[0] = ShapeKind::Sphere;
    d.palette = 3;
    return d;
}

// Normal from the depth map by central differences in the camera frame
// (x right, y up, z towards the camera); the surface is z = -depth(x, y).
std::array<double, 3> depth_normal(const Tensor& depth, std::size_t S, std::size_t x, std::size_t y) {
    const double step = 2.0 / static_cast<double>(S);
    const double dx = (depth[y * S + x + 1] - depth[y * S + x - 1]) / (2 * step);
    const double dy = (depth[(y - 1) * S + x] - depth[(y + 1) * S + x]) / (2 * step);
    const double n = std::sqrt(dx * dx + dy * dy + 1.0);
    return {dx / n, dy / n, 1.0 / n};
}

}  // namespace

TEST_CASE("head-on light on a sphere") {
    const Lighting light{{0, 0, 1}, {0.7, 0.6, 0.5}, {0.1, 0.2, 0.3}};
    const auto d = one_sphere();
    const auto s = render(d, 5, {64, light});
    const auto obj = layout(d, 5)[0];
    // pixel whose centre is nearest the sphere centre
    const auto px = static_cast<std::size_t>((obj.center[0] + 1.0) / 2.0 * 64);
    const auto py = static_cast<std::size_t>((1.0 - obj.center[1]) / 2.0 * 64);
    const std::size_t p = py * 64 + px;
    CHECK(s.normal[p * 3 + 2] > 0.99);
    for (std::size_t c = 0; c < 3; ++c) {
        const double irr = s.normal[p * 3 + 2] * light.color[c] + light.ambient[c];
        CHECK(s.irradiance[p * 3 + c] == doctest::Approx(irr).epsilon(1e-14));
        CHECK(s.color[p * 3 + c] == s.albedo[p * 3 + c] * s.irradiance[p * 3 + c]);
        CHECK(s.albedo[p * 3 + c] == obj.albedo[c]);
    }
}

TEST_CASE("constant shading when the light is off") {
    SceneDescriptor d;
    d.object_count = 3;
    d.shapes = {ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Box, ShapeKind::Sphere};
    d.ambient = Ambient::High;
    const double a = ambient_level(Ambient::High);
    const auto s = render(d, 9, {32, Lighting{{0, 0, 1}, {0, 0, 0}, {a, a, a}}});
    for (std::size_t i = 0; i < s.irradiance.size(); ++i) {
        CHECK(s.irradiance[i] == a);
        CHECK(s.color[i] == s.albedo[i] * a);
    }
}

TEST_CASE("ground-truth invariants over random scenes") {
    for (std::size_t i = 0; i < 50; ++i) {
        const auto s = generate(77, i, 24);
        const auto ids = surface_ids(s.descriptor, s.seed, 24);
        std::size_t background = 0;
        for (std::size_t p = 0; p < 24 * 24; ++p) {
            double len = 0.0;
            for (std::size_t c = 0; c < 3; ++c) {
                CHECK(s.color[p * 3 + c] == s.albedo[p * 3 + c] * s.irradiance[p * 3 + c]);
                CHECK(s.color[p * 3 + c] >= 0.0);
                CHECK(s.irradiance[p * 3 + c] <= 1.0);
                len += s.normal[p * 3 + c] * s.normal[p * 3 + c];
            }
            CHECK(std::abs(std::sqrt(len) - 1.0) < 1e-6);
            CHECK(s.depth[p] > 0.0);
            if (ids[p] < 0) {
                ++background;
                CHECK(s.depth[p] == kMaxDepth);
                CHECK(s.normal[p * 3 + 2] == 1.0);
                for (std::size_t c = 0; c < 3; ++c) CHECK(s.albedo[p * 3 + c] == kBackgroundAlbedo[c]);
            } else {
                CHECK(s.depth[p] >= kMinObjectDepth);
                CHECK(s.depth[p] <= kMaxObjectDepth);
            }
        }
        CHECK(background > 0);
    }
}

TEST_CASE("normals agree with depth gradients") {
    const std::size_t S = 64;
    std::vector<double> errors;
    for (std::size_t i = 0; i < 100; ++i) {
        const auto s = generate(1234, i, S);
        const auto ids = surface_ids(s.descriptor, s.seed, S);
        for (std::size_t y = 1; y + 1 < S; ++y)
            for (std::size_t x = 1; x + 1 < S; ++x) {
                const int id = ids[y * S + x];
                if (id < 0) continue;
                bool interior = true;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx) interior &= ids[(y + dy) * S + x + dx] == id;
                if (!interior) continue;
                const auto n = depth_normal(s.depth, S, x, y);
                const std::size_t p = y * S + x;
                const double c = n[0] * s.normal[p * 3] + n[1] * s.normal[p * 3 + 1] + n[2] * s.normal[p * 3 + 2];
                errors.push_back(std::acos(std::clamp(c, -1.0, 1.0)) * 180.0 / std::numbers::pi);
            }
    }
    REQUIRE(errors.size() > 1000);
    std::nth_element(errors.begin(), errors.begin() + errors.size() / 2, errors.end());
    CHECK(errors[errors.size() / 2] < 3.0);
}

TEST_CASE("render is a pure function of descriptor and seed") {
    const auto a = generate(5, 3, 16);
    const auto b = render(a.descriptor, a.seed, {16, std::nullopt});
    CHECK(a.color.values() == b.color.values());
    CHECK(a.depth.values() == b.depth.values());
    CHECK(a.normal.values() == b.normal.values());
    const auto c = render(a.descriptor, a.seed + 1, {16, std::nullopt});
    CHECK(a.depth.values() != c.depth.values());
}

TEST_CASE("descriptor validation") {
    SceneDescriptor d;
    d.object_count = 5;
    CHECK_THROWS_AS(d.validate(), std::invalid_argument);
    d.object_count = 2;
    d.palette = 16;
    CHECK_THROWS_AS(d.validate(), std::invalid_argument);
    d.palette = 0;
    d.light_bucket = 8;
    CHECK_THROWS_AS(d.validate(), std::invalid_argument);
}

TEST_CASE("dataset round trip") {
    TempDir tmp("roundtrip");
    std::vector<IntrinsicSample> samples;
    for (std::size_t i = 0; i < 6; ++i) samples.push_back(generate(11, i, 16));
    write_dataset(samples, tmp.path);
    const auto back = read_dataset(tmp.path);
    REQUIRE(back.size() == samples.size());
    const auto m = read_manifest(tmp.path);
    CHECK(m.count == 6);
    CHECK(m.image_size == 16);
    CHECK(m.max_depth == kMaxDepth);
    for (std::size_t i = 0; i < samples.size(); ++i) {
        CHECK(m.seeds[i] == samples[i].seed);
        CHECK(back[i].descriptor == samples[i].descriptor);
        CHECK(back[i].seed == samples[i].seed);
        for (auto p : {Property::Color, Property::Albedo, Property::Irradiance, Property::Normal})
            CHECK(max_abs_diff(back[i].get(p), samples[i].get(p)) <= 1.0 / 255 + 1e-12);
        CHECK(max_abs_diff(back[i].depth, samples[i].depth) <= kMaxDepth / 65535 + 1e-12);
        // Lambertian residual after 8-bit quantization
        for (std::size_t k = 0; k < back[i].color.size(); ++k)
            CHECK(std::abs(back[i].color[k] - back[i].albedo[k] * back[i].irradiance[k]) <= 3.0 / 255);
    }
}

TEST_CASE("descriptor fields survive a 1000-sample round trip") {
    TempDir tmp("many");
    std::vector<IntrinsicSample> samples;
    for (std::size_t i = 0; i < 1000; ++i) samples.push_back(generate(99, i, 2));
    write_dataset(samples, tmp.path);
    const auto back = read_dataset(tmp.path);
    REQUIRE(back.size() == 1000);
    for (std::size_t i = 0; i < 1000; ++i) CHECK(back[i].descriptor == samples[i].descriptor);
}

TEST_CASE("dataset error paths") {
    TempDir tmp("errors");
    fs::create_directories(tmp.path);
    CHECK_THROWS_WITH_AS(read_dataset(tmp.path), doctest::Contains("missing manifest"), DatasetError);

    write_dataset({}, tmp.path);
    CHECK(read_dataset(tmp.path).empty());
    CHECK(read_manifest(tmp.path).count == 0);

    write_dataset({generate(1, 0, 8)}, tmp.path);
    std::ofstream(tmp.path / "manifest.txt") << "count=1\nimage_size=16\nmax_depth=10\nseeds=1\n";
    CHECK_THROWS_WITH_AS(read_dataset(tmp.path), doctest::Contains("dimension mismatch"), DatasetError);
    std::ofstream(tmp.path / "manifest.txt") << "count=two\n";
    CHECK_THROWS_AS(read_manifest(tmp.path), DatasetError);
}

TEST_CASE("image files") {
    TempDir tmp("images");
    fs::create_directories(tmp.path);
    Tensor rgb({2, 3, 3});
    for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = static_cast<double>(i) / 17.0;
    image::write_ppm(tmp.path / "a.ppm", rgb);
    std::ifstream in(tmp.path / "a.ppm", std::ios::binary);
    std::string header((std::istreambuf_iterator<char>(in)), {});
    CHECK(header.rfind("P6\n3 2\n255\n", 0) == 0);
    CHECK(header.size() == 11 + 18);
    CHECK(max_abs_diff(image::read_ppm(tmp.path / "a.ppm"), rgb) <= 0.5 / 255 + 1e-12);

    Tensor depth({1, 2, 1}, std::vector<double>{10.0, 2.5});
    image::write_pgm16(tmp.path / "d.pgm", depth, 10.0);
    std::ifstream din(tmp.path / "d.pgm", std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(din)), {});
    const std::string raster = bytes.substr(bytes.size() - 4);
    CHECK(static_cast<unsigned char>(raster[0]) == 0xff);
    CHECK(static_cast<unsigned char>(raster[1]) == 0xff);
    CHECK(static_cast<unsigned char>(raster[2]) == 0x40);  // 16384 = round(0.25 * 65535), big-endian
    CHECK(static_cast<unsigned char>(raster[3]) == 0x00);
    CHECK_THROWS_AS(image::read_ppm(tmp.path / "d.pgm"), image::IoError);
    CHECK_THROWS_AS(image::read_ppm(tmp.path / "missing.ppm"), image::IoError);
}

TEST_CASE("model-space mapping") {
    const auto s = generate(3, 0, 8);
    for (auto p : kAllProperties) {
        const Tensor x = to_model_space(p, s.get(p));
        CHECK(x.shape() == Shape{8, 8, 3});
        for (double v : x.data()) CHECK(std::abs(v) <= 1.0 + 1e-12);
        CHECK(max_abs_diff(from_model_space(p, x), s.get(p)) < 1e-12);
    }
    CHECK_THROWS_AS(to_model_space(Property::Depth, s.color), ShapeError);
    CHECK(parse_property("irradiance") == Property::Irradiance);
    CHECK_THROWS_AS(parse_property("shading"), std::invalid_argument);
}
