#include "lumix/scenes.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>

#include <fmt/format.h>

#include "lumix/image_io.hpp"

namespace lumix::scenes {

namespace fs = std::filesystem;

namespace {

using Vec3 = std::array<double, 3>;

double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

Vec3 hsv_to_rgb(double h, double s, double v) {
    const double c = v * s;
    const double hp = h * 6.0;
    const double x = c * (1.0 - std::abs(std::fmod(hp, 2.0) - 1.0));
    Vec3 rgb{};
    switch (static_cast<int>(hp) % 6) {
        case 0: rgb = {c, x, 0}; break;
        case 1: rgb = {x, c, 0}; break;
        case 2: rgb = {0, c, x}; break;
        case 3: rgb = {0, x, c}; break;
        case 4: rgb = {x, 0, c}; break;
        default: rgb = {c, 0, x}; break;
    }
    const double m = v - c;
    return {rgb[0] + m, rgb[1] + m, rgb[2] + m};
}

// Random rotation from a unit quaternion.
std::array<double, 9> random_rotation(Rng& rng) {
    double q[4];
    double n = 0.0;
    do {
        n = 0.0;
        for (double& c : q) {
            c = rng.uniform(-1.0, 1.0);
            n += c * c;
        }
    } while (n < 1e-3 || n > 1.0);
    n = std::sqrt(n);
    const double w = q[0] / n, x = q[1] / n, y = q[2] / n, z = q[3] / n;
    return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
            2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
}

struct Hit {
    double depth = std::numeric_limits<double>::infinity();
    Vec3 normal{0, 0, 1};
    int id = -1;
};

// Orthographic ray through image-plane point (u, v), travelling towards -z.
void intersect(const Object& o, int index, double u, double v, Hit& best) {
    if (o.kind == ShapeKind::Sphere) {
        const double dx = u - o.center[0], dy = v - o.center[1];
        const double rho2 = dx * dx + dy * dy;
        if (rho2 >= o.radius * o.radius) return;
        const double h = std::sqrt(o.radius * o.radius - rho2);
        const double depth = -o.center[2] - h;
        if (depth < best.depth) best = {depth, {dx / o.radius, dy / o.radius, h / o.radius}, index * 8};
        return;
    }
    const auto& R = o.rotation;
    // local origin and direction: R^T (p - c), R^T (0, 0, -1)
    const Vec3 p{u - o.center[0], v - o.center[1], -o.center[2]};
    double t_near = -std::numeric_limits<double>::infinity(), t_far = std::numeric_limits<double>::infinity();
    int face = -1;
    for (int a = 0; a < 3; ++a) {
        const double org = R[0 * 3 + a] * p[0] + R[1 * 3 + a] * p[1] + R[2 * 3 + a] * p[2];
        const double dir = -R[2 * 3 + a];
        if (std::abs(dir) < 1e-12) {
            if (std::abs(org) > o.half[a]) return;
            continue;
        }
        double t0 = (-o.half[a] - org) / dir, t1 = (o.half[a] - org) / dir;
        int f = a * 2 + (dir > 0 ? 0 : 1);  // entering through the -a face when dir > 0
        if (t0 > t1) std::swap(t0, t1);
        if (t0 > t_near) {
            t_near = t0;
            face = f;
        }
        t_far = std::min(t_far, t1);
    }
    if (face < 0 || t_near > t_far || t_near <= 0.0) return;
    if (t_near < best.depth) {
        const int a = face / 2;
        const double sign = face % 2 == 0 ? -1.0 : 1.0;
        best = {t_near, {sign * R[0 * 3 + a], sign * R[1 * 3 + a], sign * R[2 * 3 + a]}, index * 8 + 1 + face};
    }
}

template <typename Fn>
void trace(const std::vector<Object>& objects, std::size_t size, Fn&& fn) {
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
            const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(size) * 2.0 - 1.0;
            const double v = 1.0 - (static_cast<double>(y) + 0.5) / static_cast<double>(size) * 2.0;
            Hit hit;
            for (std::size_t i = 0; i < objects.size(); ++i) intersect(objects[i], static_cast<int>(i), u, v, hit);
            fn(y * size + x, hit);
        }
}

const std::map<std::string, Property>& property_names() {
    static const std::map<std::string, Property> names{{"color", Property::Color},
                                                        {"albedo", Property::Albedo},
                                                        {"irradiance", Property::Irradiance},
                                                        {"depth", Property::Depth},
                                                        {"normal", Property::Normal}};
    return names;
}

std::string ambient_name(Ambient a) { return a == Ambient::Low ? "low" : a == Ambient::Mid ? "mid" : "high"; }

std::map<std::string, std::string> read_key_values(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DatasetError(fmt::format("cannot read {}", path.string()));
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw DatasetError(fmt::format("{}: malformed line '{}'", path.string(), line));
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

const std::string& require(const std::map<std::string, std::string>& kv, const std::string& key, const fs::path& path) {
    auto it = kv.find(key);
    if (it == kv.end()) throw DatasetError(fmt::format("{}: missing key '{}'", path.string(), key));
    return it->second;
}

long parse_int(const std::string& text, const fs::path& path) {
    try {
        std::size_t used = 0;
        const long v = std::stol(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw DatasetError(fmt::format("{}: bad integer '{}'", path.string(), text));
    }
}

SceneDescriptor parse_descriptor(const fs::path& path, std::uint64_t& seed, bool seed_required = true) {
    const auto kv = read_key_values(path);
    SceneDescriptor d;
    d.object_count = static_cast<int>(parse_int(require(kv, "object_count", path), path));
    std::stringstream shapes(require(kv, "shapes", path));
    std::string item;
    int i = 0;
    while (std::getline(shapes, item, ',')) {
        if (i >= 4) throw DatasetError(fmt::format("{}: too many shapes", path.string()));
        if (item == "sphere") d.shapes[i] = ShapeKind::Sphere;
        else if (item == "box") d.shapes[i] = ShapeKind::Box;
        else throw DatasetError(fmt::format("{}: unknown shape '{}'", path.string(), item));
        ++i;
    }
    if (i != d.object_count) throw DatasetError(fmt::format("{}: shapes do not match object_count", path.string()));
    d.palette = static_cast<int>(parse_int(require(kv, "palette", path), path));
    d.light_bucket = static_cast<int>(parse_int(require(kv, "light", path), path));
    const std::string& amb = require(kv, "ambient", path);
    if (amb == "low") d.ambient = Ambient::Low;
    else if (amb == "mid") d.ambient = Ambient::Mid;
    else if (amb == "high") d.ambient = Ambient::High;
    else throw DatasetError(fmt::format("{}: unknown ambient '{}'", path.string(), amb));
    if (seed_required || kv.count("seed")) seed = std::stoull(require(kv, "seed", path));
    try {
        d.validate();
    } catch (const std::invalid_argument& e) {
        throw DatasetError(fmt::format("{}: {}", path.string(), e.what()));
    }
    return d;
}

}  // namespace

std::string to_string(Property p) {
    for (const auto& [name, prop] : property_names())
        if (prop == p) return name;
    return "?";
}

Property parse_property(const std::string& text) {
    auto it = property_names().find(text);
    if (it == property_names().end()) throw std::invalid_argument("unknown property '" + text + "'");
    return it->second;
}

std::size_t channels(Property p) { return p == Property::Depth ? 1 : 3; }

void SceneDescriptor::validate() const {
    if (object_count < 1 || object_count > 4) throw std::invalid_argument("object_count must be in 1..4");
    if (palette < 0 || palette > 15) throw std::invalid_argument("palette must be in 0..15");
    if (light_bucket < 0 || light_bucket > 7) throw std::invalid_argument("light bucket must be in 0..7");
}

SceneDescriptor SceneDescriptor::random(Rng& rng) {
    SceneDescriptor d;
    d.object_count = 1 + static_cast<int>(rng.below(4));
    for (auto& s : d.shapes) s = rng.below(2) == 0 ? ShapeKind::Sphere : ShapeKind::Box;
    for (int i = d.object_count; i < 4; ++i) d.shapes[i] = ShapeKind::Sphere;
    d.palette = static_cast<int>(rng.below(16));
    d.light_bucket = static_cast<int>(rng.below(8));
    d.ambient = static_cast<Ambient>(rng.below(3));
    return d;
}

double ambient_level(Ambient a) {
    switch (a) {
        case Ambient::Low: return 0.15;
        case Ambient::Mid: return 0.3;
        case Ambient::High: return 0.5;
    }
    return 0.3;
}

std::array<double, 3> palette_color(int palette, int slot) {
    const double hue = std::fmod(palette * 0.381966 + slot * 0.25 + 0.05, 1.0);
    const double sat = 0.35 + 0.5 * ((palette * 7 + slot * 3) % 4) / 3.0;
    const double val = 0.5 + 0.4 * ((palette + slot) % 3) / 2.0;
    return hsv_to_rgb(hue, sat, val);
}

Lighting lighting_for(const SceneDescriptor& d) {
    const double azimuth = (d.light_bucket + 0.5) * std::numbers::pi / 4.0;
    const double elevation = 40.0 * std::numbers::pi / 180.0;
    const double a = ambient_level(d.ambient);
    return Lighting{{std::cos(elevation) * std::cos(azimuth), std::cos(elevation) * std::sin(azimuth), std::sin(elevation)},
                    {1.0 - a, 0.95 * (1.0 - a), 0.85 * (1.0 - a)},
                    {0.85 * a, 0.95 * a, a}};
}

const Tensor& IntrinsicSample::get(Property p) const {
    switch (p) {
        case Property::Color: return color;
        case Property::Albedo: return albedo;
        case Property::Irradiance: return irradiance;
        case Property::Depth: return depth;
        case Property::Normal: return normal;
    }
    return color;
}

Tensor& IntrinsicSample::get(Property p) { return const_cast<Tensor&>(std::as_const(*this).get(p)); }

std::vector<Object> layout(const SceneDescriptor& descriptor, std::uint64_t seed) {
    descriptor.validate();
    Rng rng = Rng(seed).split("geometry");
    std::vector<Object> objects;
    for (int i = 0; i < descriptor.object_count; ++i) {
        Object o;
        o.kind = descriptor.shapes[i];
        double bound = 0.0;
        if (o.kind == ShapeKind::Sphere) {
            o.radius = rng.uniform(0.2, 0.45);
            bound = o.radius;
        } else {
            for (auto& h : o.half) h = rng.uniform(0.15, 0.32);
            o.rotation = random_rotation(rng);
            bound = std::sqrt(dot(o.half, o.half));
        }
        o.center = {rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6),
                    -rng.uniform(kMinObjectDepth + bound, kMaxObjectDepth - bound)};
        o.albedo = palette_color(descriptor.palette, i);
        objects.push_back(o);
    }
    return objects;
}

std::vector<int> surface_ids(const SceneDescriptor& descriptor, std::uint64_t seed, std::size_t image_size) {
    std::vector<int> ids(image_size * image_size);
    trace(layout(descriptor, seed), image_size, [&](std::size_t p, const Hit& hit) { ids[p] = hit.id; });
    return ids;
}

IntrinsicSample render(const SceneDescriptor& descriptor, std::uint64_t seed, const RenderOptions& options) {
    const std::size_t S = options.image_size;
    if (S == 0) throw std::invalid_argument("image_size must be positive");
    const auto objects = layout(descriptor, seed);
    const Lighting light = options.lighting.value_or(lighting_for(descriptor));

    IntrinsicSample s{Tensor({S, S, 3}), Tensor({S, S, 3}), Tensor({S, S, 3}), Tensor({S, S, 1}), Tensor({S, S, 3}),
                      descriptor, seed};
    trace(objects, S, [&](std::size_t p, const Hit& hit) {
        const bool fg = hit.id >= 0;
        const Vec3 n = fg ? hit.normal : Vec3{0, 0, 1};
        const Vec3& albedo = fg ? objects[static_cast<std::size_t>(hit.id / 8)].albedo : kBackgroundAlbedo;
        const double lambert = std::max(0.0, dot(n, light.direction));
        s.depth[p] = fg ? hit.depth : kMaxDepth;
        for (std::size_t c = 0; c < 3; ++c) {
            const double irr = lambert * light.color[c] + light.ambient[c];
            s.normal[p * 3 + c] = n[c];
            s.albedo[p * 3 + c] = albedo[c];
            s.irradiance[p * 3 + c] = irr;
            s.color[p * 3 + c] = albedo[c] * irr;
        }
    });
    return s;
}

IntrinsicSample generate(std::uint64_t seed, std::size_t index, std::size_t image_size) {
    Rng rng = Rng(seed).split("dataset").split(static_cast<std::uint64_t>(index));
    Rng drng = rng.split("descriptor");
    const SceneDescriptor d = SceneDescriptor::random(drng);
    return render(d, rng.split("scene").next_u64(), {image_size, std::nullopt});
}

SceneDescriptor read_descriptor(const fs::path& path) {
    std::uint64_t seed = 0;
    return parse_descriptor(path, seed, false);
}

std::string image_filename(Property p) { return to_string(p) + (p == Property::Depth ? ".pgm" : ".ppm"); }

void write_property_image(const fs::path& path, Property p, const Tensor& image, double max_depth) {
    if (p == Property::Depth) return image::write_pgm16(path, image, max_depth);
    if (p != Property::Normal) return image::write_ppm(path, image);
    Tensor enc(image.shape());
    for (std::size_t k = 0; k < enc.size(); ++k) enc[k] = (image[k] + 1.0) / 2.0;
    image::write_ppm(path, enc);
}

Tensor read_property_image(const fs::path& path, Property p, double max_depth) {
    if (p == Property::Depth) return image::read_pgm16(path, max_depth);
    Tensor t = image::read_ppm(path);
    if (p == Property::Normal) {
        for (auto& v : t.data()) v = v * 2.0 - 1.0;
    }
    return t;
}

std::string descriptor_text(const SceneDescriptor& d, std::uint64_t seed) {
    std::string shapes;
    for (int i = 0; i < d.object_count; ++i) {
        if (i) shapes += ',';
        shapes += d.shapes[i] == ShapeKind::Sphere ? "sphere" : "box";
    }
    return fmt::format("object_count={}\nshapes={}\npalette={}\nlight={}\nambient={}\nseed={}\n", d.object_count,
                       shapes, d.palette, d.light_bucket, ambient_name(d.ambient), seed);
}

void write_dataset(const std::vector<IntrinsicSample>& samples, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw DatasetError(fmt::format("cannot create {}: {}", dir.string(), ec.message()));
    const std::size_t size = samples.empty() ? 0 : samples.front().size();
    std::string seeds;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        if (s.size() != size) throw DatasetError("samples in a dataset must share one image size");
        const fs::path sub = dir / std::to_string(i);
        fs::create_directories(sub, ec);
        if (ec) throw DatasetError(fmt::format("cannot create {}: {}", sub.string(), ec.message()));
        for (Property p : kAllProperties) write_property_image(sub / image_filename(p), p, s.get(p));
        std::ofstream(sub / "descriptor.txt") << descriptor_text(s.descriptor, s.seed);
        seeds += (i ? "," : "") + std::to_string(s.seed);
    }
    std::ofstream out(dir / "manifest.txt");
    out << fmt::format("count={}\nimage_size={}\nmax_depth={}\nseeds={}\n", samples.size(), size, kMaxDepth, seeds);
    if (!out) throw DatasetError(fmt::format("cannot write manifest in {}", dir.string()));
}

Manifest read_manifest(const fs::path& dir) {
    const fs::path path = dir / "manifest.txt";
    if (!fs::exists(path)) throw DatasetError(fmt::format("missing manifest: {}", path.string()));
    const auto kv = read_key_values(path);
    Manifest m;
    m.count = static_cast<std::size_t>(parse_int(require(kv, "count", path), path));
    m.image_size = static_cast<std::size_t>(parse_int(require(kv, "image_size", path), path));
    try {
        m.max_depth = std::stod(require(kv, "max_depth", path));
    } catch (const std::logic_error&) {
        throw DatasetError(fmt::format("{}: bad max_depth", path.string()));
    }
    std::stringstream seeds(kv.count("seeds") ? kv.at("seeds") : "");
    std::string item;
    while (std::getline(seeds, item, ',')) m.seeds.push_back(std::stoull(item));
    if (m.seeds.size() != m.count) throw DatasetError(fmt::format("{}: seeds do not match count", path.string()));
    return m;
}

std::vector<IntrinsicSample> read_dataset(const fs::path& dir) {
    const Manifest m = read_manifest(dir);
    std::vector<IntrinsicSample> samples;
    samples.reserve(m.count);
    const Shape rgb{m.image_size, m.image_size, 3};
    for (std::size_t i = 0; i < m.count; ++i) {
        const fs::path sub = dir / std::to_string(i);
        IntrinsicSample s;
        try {
            for (Property p : kAllProperties) s.get(p) = read_property_image(sub / image_filename(p), p, m.max_depth);
        } catch (const image::IoError& e) {
            throw DatasetError(e.what());
        }
        for (const Tensor* t : {&s.color, &s.albedo, &s.irradiance, &s.normal}) {
            if (t->shape() != rgb) {
                throw DatasetError(fmt::format("{}: dimension mismatch, expected {} got {}", sub.string(),
                                               shape_string(rgb), shape_string(t->shape())));
            }
        }
        if (s.depth.shape() != Shape{m.image_size, m.image_size, 1}) {
            throw DatasetError(fmt::format("{}: depth dimension mismatch", sub.string()));
        }
        s.descriptor = parse_descriptor(sub / "descriptor.txt", s.seed);
        samples.push_back(std::move(s));
    }
    return samples;
}

Tensor to_model_space(Property p, const Tensor& image, double max_depth) {
    const std::size_t H = image.extent(0), W = image.extent(1);
    if (image.extent(2) != channels(p)) {
        throw ShapeError(fmt::format("{} image must have {} channels, got {}", to_string(p), channels(p),
                                     shape_string(image.shape())));
    }
    Tensor out({H, W, 3});
    for (std::size_t i = 0; i < H * W; ++i)
        for (std::size_t c = 0; c < 3; ++c) {
            switch (p) {
                case Property::Depth: out[i * 3 + c] = 2.0 * image[i] / max_depth - 1.0; break;
                case Property::Normal: out[i * 3 + c] = image[i * 3 + c]; break;
                default: out[i * 3 + c] = 2.0 * image[i * 3 + c] - 1.0; break;
            }
        }
    return out;
}

Tensor from_model_space(Property p, const Tensor& x, double max_depth) {
    const std::size_t H = x.extent(0), W = x.extent(1);
    if (p == Property::Depth) {
        Tensor out({H, W, 1});
        for (std::size_t i = 0; i < H * W; ++i) {
            const double mean = (x[i * 3] + x[i * 3 + 1] + x[i * 3 + 2]) / 3.0;
            out[i] = std::clamp((mean + 1.0) / 2.0, 0.0, 1.0) * max_depth;
        }
        return out;
    }
    Tensor out({H, W, 3});
    for (std::size_t i = 0; i < H * W; ++i) {
        if (p == Property::Normal) {
            Vec3 n{x[i * 3], x[i * 3 + 1], x[i * 3 + 2]};
            const double len = std::sqrt(dot(n, n));
            n = len > 1e-12 ? Vec3{n[0] / len, n[1] / len, n[2] / len} : Vec3{0, 0, 1};
            for (std::size_t c = 0; c < 3; ++c) out[i * 3 + c] = n[c];
        } else {
            for (std::size_t c = 0; c < 3; ++c) out[i * 3 + c] = std::clamp((x[i * 3 + c] + 1.0) / 2.0, 0.0, 1.0);
        }
    }
    return out;
}

}  // namespace lumix::scenes
