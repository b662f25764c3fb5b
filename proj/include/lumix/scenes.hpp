#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lumix/rng.hpp"
#include "lumix/tensor.hpp"

namespace lumix::scenes {

enum class Property { Color, Albedo, Irradiance, Depth, Normal };

constexpr std::array<Property, 5> kAllProperties{Property::Color, Property::Albedo, Property::Irradiance,
                                                 Property::Depth, Property::Normal};

std::string to_string(Property p);
Property parse_property(const std::string& text);
/// Stored channels: 1 for depth, 3 otherwise.
std::size_t channels(Property p);

enum class ShapeKind { Sphere, Box };
enum class Ambient { Low, Mid, High };

constexpr double kMaxDepth = 10.0;
constexpr double kMinObjectDepth = 2.0;
constexpr double kMaxObjectDepth = 8.0;
constexpr std::array<double, 3> kBackgroundAlbedo{0.55, 0.55, 0.55};

struct SceneDescriptor {
    int object_count = 1;                   ///< 1..4
    std::array<ShapeKind, 4> shapes{};      ///< first object_count entries used
    int palette = 0;                        ///< 0..15
    int light_bucket = 0;                   ///< azimuth octant 0..7
    Ambient ambient = Ambient::Mid;

    void validate() const;
    bool operator==(const SceneDescriptor&) const = default;

    static SceneDescriptor random(Rng& rng);
};

double ambient_level(Ambient a);
/// Albedo of object `slot` under palette `palette`.
std::array<double, 3> palette_color(int palette, int slot);

struct Lighting {
    std::array<double, 3> direction;    ///< unit, camera frame (x right, y up, z towards the camera)
    std::array<double, 3> color;
    std::array<double, 3> ambient;
};

Lighting lighting_for(const SceneDescriptor& d);

struct IntrinsicSample {
    Tensor color, albedo, irradiance;  ///< [S, S, 3] linear, in [0, 1]
    Tensor depth;                      ///< [S, S, 1], background at kMaxDepth
    Tensor normal;                     ///< [S, S, 3] unit vectors
    SceneDescriptor descriptor;
    std::uint64_t seed = 0;

    std::size_t size() const { return color.extent(0); }
    const Tensor& get(Property p) const;
    Tensor& get(Property p);
};

struct RenderOptions {
    std::size_t image_size = 32;
    std::optional<Lighting> lighting;  ///< overrides the descriptor's light when set
};

/// Orthographic render of the scene drawn from (descriptor, seed). Pure function.
IntrinsicSample render(const SceneDescriptor& descriptor, std::uint64_t seed, const RenderOptions& options = {});

struct Object {
    ShapeKind kind = ShapeKind::Sphere;
    std::array<double, 3> center{};  ///< camera frame; z = -depth
    double radius = 0.0;             ///< sphere
    std::array<double, 3> half{};    ///< box half extents
    std::array<double, 9> rotation{};  ///< box orientation, row-major, local -> camera
    std::array<double, 3> albedo{};
};

/// Objects drawn for (descriptor, seed).
std::vector<Object> layout(const SceneDescriptor& descriptor, std::uint64_t seed);

/// Visible surface per pixel: -1 for background, else object * 8 + face.
std::vector<int> surface_ids(const SceneDescriptor& descriptor, std::uint64_t seed, std::size_t image_size);

/// Sample i of a dataset rooted at `seed`.
IntrinsicSample generate(std::uint64_t seed, std::size_t index, std::size_t image_size);

struct DatasetError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Manifest {
    std::size_t count = 0;
    std::size_t image_size = 0;
    double max_depth = kMaxDepth;
    std::vector<std::uint64_t> seeds;
};

void write_dataset(const std::vector<IntrinsicSample>& samples, const std::filesystem::path& dir);
std::vector<IntrinsicSample> read_dataset(const std::filesystem::path& dir);
Manifest read_manifest(const std::filesystem::path& dir);

std::string descriptor_text(const SceneDescriptor& d, std::uint64_t seed);
/// Descriptor in the dataset's key=value form; the seed line is optional.
SceneDescriptor read_descriptor(const std::filesystem::path& path);

/// "<property>.ppm", or "depth.pgm".
std::string image_filename(Property p);
/// Dataset encoding: 8-bit PPM (normals mapped from [-1, 1]), 16-bit PGM depth scaled by max_depth.
void write_property_image(const std::filesystem::path& path, Property p, const Tensor& image,
                          double max_depth = kMaxDepth);
Tensor read_property_image(const std::filesystem::path& path, Property p, double max_depth = kMaxDepth);

/// Property image mapped to [-1, 1] with 3 channels (depth replicated, scaled by max_depth).
Tensor to_model_space(Property p, const Tensor& image, double max_depth = kMaxDepth);
/// Inverse of to_model_space: unit-range images (depth in scene units, normals re-normalized).
Tensor from_model_space(Property p, const Tensor& x, double max_depth = kMaxDepth);

}  // namespace lumix::scenes
