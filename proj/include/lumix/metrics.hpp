#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lumix/attention.hpp"
#include "lumix/lora.hpp"
#include "lumix/tensor.hpp"

namespace lumix::metrics {

/// Mean |color - albedo * irradiance| over pixels and channels.
double lambertian_residual(const Tensor& color, const Tensor& albedo, const Tensor& irradiance);

/// Sobel gradient magnitude of an [H, W, C] image, channels combined in quadrature. Border pixels replicate.
Tensor sobel_magnitude(const Tensor& image);

/// Pixels whose Sobel magnitude exceeds the 90th percentile of the image's own magnitudes.
std::vector<bool> edge_map(const Tensor& image);

/**
 * Edge agreement F1 between two maps of equal spatial size.
 *
 * Edge pixels are matched one-to-one to edge pixels of the other map within
 * a 1-pixel (4-neighbour) radius; precision and recall are the matched
 * fractions of each set. Returns 0 when either set is empty, except 1 when
 * both are empty and the maps are identical.
 */
double edge_alignment(const Tensor& a, const Tensor& b);

struct AlignmentScore {
    std::vector<std::pair<std::string, double>> pairs;  ///< (property, F1 against color)
    double mean = 0.0;
};

AlignmentScore alignment_score(const Tensor& color, const std::vector<std::pair<std::string, Tensor>>& others);

double rmse(const Tensor& a, const Tensor& b);

/// Mean SSIM over channels: 11x11 Gaussian window (sigma 1.5, clipped to the image), K1=0.01, K2=0.03, range 1.
double ssim(const Tensor& a, const Tensor& b);

struct CostConfig {
    attention::Variant attention = attention::Variant::Vanilla;
    lora::Variant lora;
    std::size_t m = 5;
    std::size_t d = 3072;
    std::size_t heads = 24;
    std::uint64_t tokens = 1536;
    std::uint64_t projections = 2;  ///< adapted projections (K and V)
};

struct CostRow {
    CostConfig config;
    std::uint64_t params = 0;
    std::uint64_t lora_flops = 0;
    std::uint64_t attention_flops = 0;  ///< whole block, all properties
};

struct CostReport {
    std::vector<CostRow> rows;
    std::string tsv() const;
};

/// Vanilla, Cross-Intrinsic and Query-Broadcast, each with Separate, Fused, Hybrid and Tensor adapters.
std::vector<CostConfig> default_grid(std::size_t m = 5, std::size_t d = 3072, std::uint64_t tokens = 1536);

CostReport cost_report(const std::vector<CostConfig>& configs);

/// v rounded to 4 significant digits, fixed notation.
std::string format_sig4(double v);

}  // namespace lumix::metrics
