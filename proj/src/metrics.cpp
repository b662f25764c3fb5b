#include "lumix/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include <boost/graph/adjacency_list.hpp>
#include <boost/graph/max_cardinality_matching.hpp>
#include <fmt/format.h>

namespace lumix::metrics {

namespace {

void require_image(const Tensor& t, const char* what) {
    if (t.rank() != 3) throw ShapeError(fmt::format("{}: expected [H x W x C], got {}", what, shape_string(t.shape())));
}

void require_same_spatial(const Tensor& a, const Tensor& b, const char* what) {
    require_image(a, what);
    require_image(b, what);
    if (a.extent(0) != b.extent(0) || a.extent(1) != b.extent(1)) {
        throw ShapeError(fmt::format("{}: spatial size mismatch {} vs {}", what, shape_string(a.shape()),
                                     shape_string(b.shape())));
    }
}

std::vector<double> gaussian_window(std::size_t size, double sigma) {
    std::vector<double> w(size);
    const double c = (static_cast<double>(size) - 1.0) / 2.0;
    double total = 0.0;
    for (std::size_t i = 0; i < size; ++i) {
        const double x = static_cast<double>(i) - c;
        total += (w[i] = std::exp(-x * x / (2.0 * sigma * sigma)));
    }
    for (auto& v : w) v /= total;
    return w;
}

// Separable valid-mode filter of one [H, W] plane.
std::vector<double> filter_valid(const std::vector<double>& img, std::size_t H, std::size_t W,
                                 const std::vector<double>& w) {
    const std::size_t k = w.size(), oh = H - k + 1, ow = W - k + 1;
    std::vector<double> rows(H * ow), out(oh * ow);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (std::size_t i = 0; i < k; ++i) acc += w[i] * img[y * W + x + i];
            rows[y * ow + x] = acc;
        }
    for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (std::size_t i = 0; i < k; ++i) acc += w[i] * rows[(y + i) * ow + x];
            out[y * ow + x] = acc;
        }
    return out;
}

}  // namespace

double lambertian_residual(const Tensor& color, const Tensor& albedo, const Tensor& irradiance) {
    require_same_shape(color, albedo, "lambertian_residual");
    require_same_shape(color, irradiance, "lambertian_residual");
    double total = 0.0;
    for (std::size_t i = 0; i < color.size(); ++i) total += std::abs(color[i] - albedo[i] * irradiance[i]);
    return total / static_cast<double>(color.size());
}

Tensor sobel_magnitude(const Tensor& image) {
    require_image(image, "sobel_magnitude");
    const std::size_t H = image.extent(0), W = image.extent(1), C = image.extent(2);
    auto px = [&](long y, long x, std::size_t c) {
        y = std::clamp<long>(y, 0, static_cast<long>(H) - 1);
        x = std::clamp<long>(x, 0, static_cast<long>(W) - 1);
        return image[(static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)) * C + c];
    };
    Tensor mag({H, W});
    for (long y = 0; y < static_cast<long>(H); ++y)
        for (long x = 0; x < static_cast<long>(W); ++x) {
            double acc = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
                const double gx = (px(y - 1, x + 1, c) + 2 * px(y, x + 1, c) + px(y + 1, x + 1, c)) -
                                  (px(y - 1, x - 1, c) + 2 * px(y, x - 1, c) + px(y + 1, x - 1, c));
                const double gy = (px(y + 1, x - 1, c) + 2 * px(y + 1, x, c) + px(y + 1, x + 1, c)) -
                                  (px(y - 1, x - 1, c) + 2 * px(y - 1, x, c) + px(y - 1, x + 1, c));
                acc += gx * gx + gy * gy;
            }
            mag[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)] = std::sqrt(acc);
        }
    return mag;
}

std::vector<bool> edge_map(const Tensor& image) {
    const Tensor mag = sobel_magnitude(image);
    std::vector<double> sorted(mag.values());
    const std::size_t rank = static_cast<std::size_t>(0.9 * static_cast<double>(sorted.size() - 1));
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(rank), sorted.end());
    const double threshold = sorted[rank];
    std::vector<bool> edges(mag.size());
    for (std::size_t i = 0; i < mag.size(); ++i) edges[i] = mag[i] > threshold;
    return edges;
}

double edge_alignment(const Tensor& a, const Tensor& b) {
    require_same_spatial(a, b, "edge_alignment");
    const std::size_t H = a.extent(0), W = a.extent(1);
    const auto ea = edge_map(a), eb = edge_map(b);
    std::vector<long> index_b(H * W, -1);
    std::vector<std::size_t> pix_a;
    std::size_t nb = 0;
    for (std::size_t i = 0; i < H * W; ++i) {
        if (ea[i]) pix_a.push_back(i);
        if (eb[i]) index_b[i] = static_cast<long>(nb++);
    }
    const std::size_t na = pix_a.size();
    if (na == 0 || nb == 0) return (na == 0 && nb == 0 && a.values() == b.values()) ? 1.0 : 0.0;

    using Graph = boost::adjacency_list<boost::vecS, boost::vecS, boost::undirectedS>;
    Graph g(na + nb);
    for (std::size_t k = 0; k < na; ++k) {
        const long y = static_cast<long>(pix_a[k] / W), x = static_cast<long>(pix_a[k] % W);
        const long nbhd[5][2] = {{0, 0}, {-1, 0}, {1, 0}, {0, -1}, {0, 1}};
        for (const auto& o : nbhd) {
            const long yy = y + o[0], xx = x + o[1];
            if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
            const long j = index_b[static_cast<std::size_t>(yy) * W + static_cast<std::size_t>(xx)];
            if (j >= 0) boost::add_edge(k, na + static_cast<std::size_t>(j), g);
        }
    }
    std::vector<boost::graph_traits<Graph>::vertex_descriptor> mate(na + nb);
    boost::edmonds_maximum_cardinality_matching(g, &mate[0]);
    const double matched = static_cast<double>(boost::matching_size(g, &mate[0]));
    return 2.0 * matched / static_cast<double>(na + nb);
}

AlignmentScore alignment_score(const Tensor& color, const std::vector<std::pair<std::string, Tensor>>& others) {
    AlignmentScore s;
    for (const auto& [name, map] : others) {
        s.pairs.emplace_back(name, edge_alignment(map, color));
        s.mean += s.pairs.back().second;
    }
    if (!s.pairs.empty()) s.mean /= static_cast<double>(s.pairs.size());
    return s;
}

double rmse(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "rmse");
    double total = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) total += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(total / static_cast<double>(a.size()));
}

double ssim(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "ssim");
    require_image(a, "ssim");
    const std::size_t H = a.extent(0), W = a.extent(1), C = a.extent(2);
    std::size_t k = std::min<std::size_t>({11, H, W});
    if (k % 2 == 0) --k;
    const auto w = gaussian_window(k, 1.5);
    const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    double total = 0.0;
    std::size_t count = 0;
    std::vector<double> pa(H * W), pb(H * W), paa(H * W), pbb(H * W), pab(H * W);
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t i = 0; i < H * W; ++i) {
            pa[i] = a[i * C + c];
            pb[i] = b[i * C + c];
            paa[i] = pa[i] * pa[i];
            pbb[i] = pb[i] * pb[i];
            pab[i] = pa[i] * pb[i];
        }
        const auto mu_a = filter_valid(pa, H, W, w), mu_b = filter_valid(pb, H, W, w);
        const auto e_aa = filter_valid(paa, H, W, w), e_bb = filter_valid(pbb, H, W, w), e_ab = filter_valid(pab, H, W, w);
        for (std::size_t i = 0; i < mu_a.size(); ++i) {
            const double var_a = e_aa[i] - mu_a[i] * mu_a[i];
            const double var_b = e_bb[i] - mu_b[i] * mu_b[i];
            const double cov = e_ab[i] - mu_a[i] * mu_b[i];
            const double num = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
            const double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (var_a + var_b + c2);
            total += num / den;
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

std::vector<CostConfig> default_grid(std::size_t m, std::size_t d, std::uint64_t tokens) {
    std::vector<CostConfig> out;
    for (auto att : {attention::Variant::Vanilla, attention::Variant::CrossIntrinsic, attention::Variant::QueryBroadcast})
        for (const auto& lv : {lora::Variant::separate(48), lora::Variant::fused(48), lora::Variant::hybrid(48),
                               lora::Variant::tensor(8, 8)})
            out.push_back(CostConfig{att, lv, m, d, std::gcd<std::size_t>(d, 24), tokens, 2});
    return out;
}

CostReport cost_report(const std::vector<CostConfig>& configs) {
    CostReport r;
    for (const auto& c : configs) {
        const auto dims = lora::Dims::square(c.m, c.d);
        const attention::Config ac{c.d, c.heads, c.m, 0, c.attention};
        r.rows.push_back(CostRow{c, c.projections * lora::param_count(c.lora, dims),
                                 lora::flops_count(c.lora, dims, c.tokens, c.projections),
                                 attention::attention_flops(ac, c.tokens)});
    }
    return r;
}

std::string format_sig4(double v) {
    if (v == 0.0 || !std::isfinite(v)) return fmt::format("{}", v);
    const int magnitude = static_cast<int>(std::floor(std::log10(std::abs(v))));
    const int decimals = std::max(0, 3 - magnitude);
    const double unit = std::pow(10.0, magnitude - 3);
    return fmt::format("{:.{}f}", std::round(v / unit) * unit, decimals);
}

std::string CostReport::tsv() const {
    std::string out = "attention\tlora\tranks\tparams_M\tlora_GFLOPs\tattention_GFLOPs\n";
    for (const auto& row : rows) {
        const auto& lv = row.config.lora;
        const std::string ranks = lv.kind == lora::Kind::Separate || lv.kind == lora::Kind::Fused
                                      ? std::to_string(lv.rank)
                                      : fmt::format("{}/{}", lv.rank, lv.rank2);
        out += fmt::format("{}\t{}\t{}\t{}\t{}\t{}\n", attention::to_string(row.config.attention), lora::to_string(lv.kind),
                           ranks, format_sig4(static_cast<double>(row.params) / 1e6),
                           format_sig4(static_cast<double>(row.lora_flops) / 1e9),
                           format_sig4(static_cast<double>(row.attention_flops) / 1e9));
    }
    return out;
}

}  // namespace lumix::metrics
