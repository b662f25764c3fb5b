#include "lumix/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <fmt/format.h>

namespace lumix::image {

namespace {

struct Header {
    std::string magic;
    std::size_t width = 0, height = 0, maxval = 0;
};

Header read_header(std::istream& in, const std::filesystem::path& path) {
    Header h;
    auto token = [&]() {
        std::string t;
        while (true) {
            int c = in.peek();
            if (c == '#') {
                std::string skip;
                std::getline(in, skip);
            } else if (c == ' ' || c == '\n' || c == '\r' || c == '\t') {
                in.get();
            } else {
                break;
            }
        }
        in >> t;
        return t;
    };
    h.magic = token();
    try {
        h.width = std::stoul(token());
        h.height = std::stoul(token());
        h.maxval = std::stoul(token());
    } catch (const std::exception&) {
        throw IoError(fmt::format("{}: malformed image header", path.string()));
    }
    in.get();  // single whitespace before the raster
    if (!in || h.width == 0 || h.height == 0) throw IoError(fmt::format("{}: malformed image header", path.string()));
    return h;
}

std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError(fmt::format("cannot open {} for writing", path.string()));
    return out;
}

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(fmt::format("cannot open {}", path.string()));
    return in;
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Tensor& rgb) {
    if (rgb.rank() != 3 || rgb.extent(2) != 3) throw ShapeError("write_ppm expects [H x W x 3], got " + shape_string(rgb.shape()));
    auto out = open_out(path);
    out << "P6\n" << rgb.extent(1) << ' ' << rgb.extent(0) << "\n255\n";
    std::vector<unsigned char> bytes(rgb.size());
    for (std::size_t i = 0; i < rgb.size(); ++i) bytes[i] = static_cast<unsigned char>(std::lround(quantize8(rgb[i]) * 255.0));
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(fmt::format("write failed: {}", path.string()));
}

Tensor read_ppm(const std::filesystem::path& path) {
    auto in = open_in(path);
    const Header h = read_header(in, path);
    if (h.magic != "P6" || h.maxval != 255) throw IoError(fmt::format("{}: not an 8-bit P6 image", path.string()));
    Tensor rgb({h.height, h.width, 3});
    std::vector<unsigned char> bytes(rgb.size());
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw IoError(fmt::format("{}: truncated raster", path.string()));
    for (std::size_t i = 0; i < bytes.size(); ++i) rgb[i] = bytes[i] / 255.0;
    return rgb;
}

void write_pgm16(const std::filesystem::path& path, const Tensor& gray, double max_value) {
    if (gray.rank() != 3 || gray.extent(2) != 1) {
        throw ShapeError("write_pgm16 expects [H x W x 1], got " + shape_string(gray.shape()));
    }
    auto out = open_out(path);
    out << "P5\n" << gray.extent(1) << ' ' << gray.extent(0) << "\n65535\n";
    std::vector<unsigned char> bytes(2 * gray.size());
    for (std::size_t i = 0; i < gray.size(); ++i) {
        const double c = std::clamp(gray[i] / max_value, 0.0, 1.0);
        const auto v = static_cast<std::uint16_t>(std::lround(c * 65535.0));
        bytes[2 * i] = static_cast<unsigned char>(v >> 8);
        bytes[2 * i + 1] = static_cast<unsigned char>(v & 0xff);
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError(fmt::format("write failed: {}", path.string()));
}

Tensor read_pgm16(const std::filesystem::path& path, double max_value) {
    auto in = open_in(path);
    const Header h = read_header(in, path);
    if (h.magic != "P5" || h.maxval != 65535) throw IoError(fmt::format("{}: not a 16-bit P5 image", path.string()));
    Tensor gray({h.height, h.width, 1});
    std::vector<unsigned char> bytes(2 * gray.size());
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw IoError(fmt::format("{}: truncated raster", path.string()));
    for (std::size_t i = 0; i < gray.size(); ++i) {
        const unsigned v = (static_cast<unsigned>(bytes[2 * i]) << 8) | bytes[2 * i + 1];
        gray[i] = v / 65535.0 * max_value;
    }
    return gray;
}

}  // namespace lumix::image
