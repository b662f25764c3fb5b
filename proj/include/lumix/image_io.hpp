#pragma once

#include <filesystem>
#include <stdexcept>

#include "lumix/tensor.hpp"

namespace lumix::image {

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Binary P6, 8 bits per sample. `rgb` is [H, W, 3] in [0, 1]; values are clamped then rounded.
void write_ppm(const std::filesystem::path& path, const Tensor& rgb);
Tensor read_ppm(const std::filesystem::path& path);

/// Binary P5, 16-bit big-endian samples. Stores round(v / max_value * 65535) for `gray` [H, W, 1].
void write_pgm16(const std::filesystem::path& path, const Tensor& gray, double max_value);
Tensor read_pgm16(const std::filesystem::path& path, double max_value);

/// 8-bit quantization of a unit-range value, as written by write_ppm.
inline double quantize8(double v) {
    const double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    return static_cast<double>(static_cast<int>(c * 255.0 + 0.5)) / 255.0;
}

}  // namespace lumix::image
