#include <doctest.h>

#include <cmath>
#include <random>

#include "lumix/metrics.hpp"
#include "lumix/scenes.hpp"
#include "test_support.hpp"

using namespace lumix;
using lumix::testing::random_tensor;

namespace {

// SSIM straight from the definition: full 2D Gaussian weights per window.
double ssim_reference(const Tensor& a, const Tensor& b) {
    const std::size_t H = a.extent(0), W = a.extent(1), C = a.extent(2), k = 11;
    double w[11][11], total = 0.0;
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            const double y = static_cast<double>(i) - 5.0, x = static_cast<double>(j) - 5.0;
            total += (w[i][j] = std::exp(-(x * x + y * y) / (2 * 1.5 * 1.5)));
        }
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y0 = 0; y0 + k <= H; ++y0)
            for (std::size_t x0 = 0; x0 + k <= W; ++x0) {
                double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
                for (std::size_t i = 0; i < k; ++i)
                    for (std::size_t j = 0; j < k; ++j) {
                        const double wt = w[i][j] / total;
                        const double va = a.at({y0 + i, x0 + j, c}), vb = b.at({y0 + i, x0 + j, c});
                        ma += wt * va;
                        mb += wt * vb;
                    }
                for (std::size_t i = 0; i < k; ++i)
                    for (std::size_t j = 0; j < k; ++j) {
                        const double wt = w[i][j] / total;
                        const double da = a.at({y0 + i, x0 + j, c}) - ma, db = b.at({y0 + i, x0 + j, c}) - mb;
                        saa += wt * da * da;
                        sbb += wt * db * db;
                        sab += wt * da * db;
                    }
                const double c1 = 1e-4, c2 = 9e-4;
                sum += (2 * ma * mb + c1) * (2 * sab + c2) / ((ma * ma + mb * mb + c1) * (saa + sbb + c2));
                ++n;
            }
    return sum / static_cast<double>(n);
}

Tensor step_image(std::size_t size, std::size_t column) {
    Tensor t({size, size, 1});
    for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = column; x < size; ++x) t.at({y, x, 0}) = 1.0;
    return t;
}

}  // namespace

TEST_CASE("lambertian residual") {
    std::mt19937_64 gen(31);
    const auto s = scenes::generate(3, 1, 16);
    CHECK(metrics::lambertian_residual(s.color, s.albedo, s.irradiance) == 0.0);

    auto color = random_tensor(gen, {4, 4, 3}, 0.1, 1.0);
    Tensor zeros(color.shape());
    double mean_abs = 0.0;
    for (double v : color.data()) mean_abs += std::abs(v);
    CHECK(metrics::lambertian_residual(color, zeros, color) == doctest::Approx(mean_abs / 48).epsilon(1e-15));

    auto a = random_tensor(gen, {5, 6, 3}, 0, 1), i = random_tensor(gen, {5, 6, 3}, 0, 1);
    auto prod = hadamard(a, i);
    auto other = random_tensor(gen, {5, 6, 3}, 0, 1);
    double ref = 0.0;
    for (std::size_t k = 0; k < other.size(); ++k) ref += std::abs(other[k] - a[k] * i[k]);
    CHECK(metrics::lambertian_residual(other, a, i) == doctest::Approx(ref / 90).epsilon(1e-14));
    CHECK(metrics::lambertian_residual(prod, a, i) == 0.0);
    CHECK_THROWS_AS(metrics::lambertian_residual(a, Tensor({5, 6, 1}), i), ShapeError);
}

TEST_CASE("edge alignment conventions") {
    std::mt19937_64 gen(32);
    auto img = random_tensor(gen, {16, 16, 3});
    CHECK(metrics::edge_alignment(img, img) == 1.0);
    Tensor flat({16, 16, 3}, 0.5);
    CHECK(metrics::edge_alignment(flat, img) == 0.0);
    CHECK(metrics::edge_alignment(img, flat) == 0.0);
    CHECK(metrics::edge_alignment(flat, flat) == 1.0);
    CHECK(metrics::edge_alignment(flat, Tensor({16, 16, 3}, 0.2)) == 0.0);
    CHECK_THROWS_AS(metrics::edge_alignment(img, Tensor({8, 16, 3})), ShapeError);

    // A one-pixel shift of a step edge stays within tolerance.
    const double shifted = metrics::edge_alignment(step_image(32, 10), step_image(32, 11));
    CHECK(shifted > 0.9);
    CHECK(metrics::edge_alignment(step_image(32, 10), step_image(32, 20)) == 0.0);
}

TEST_CASE("edge alignment is symmetric and near chance on noise") {
    std::mt19937_64 gen(33);
    double total = 0.0;
    for (int t = 0; t < 100; ++t) {
        auto a = random_tensor(gen, {32, 32, 1}, 0, 1), b = random_tensor(gen, {32, 32, 1}, 0, 1);
        const double ab = metrics::edge_alignment(a, b);
        CHECK(std::abs(ab - metrics::edge_alignment(b, a)) <= 1e-12);
        CHECK(ab >= 0.0);
        CHECK(ab <= 1.0);
        total += ab;
    }
    CHECK(total / 100 < 0.35);
}

TEST_CASE("edge maps mark about ten percent of noisy pixels") {
    std::mt19937_64 gen(34);
    auto edges = metrics::edge_map(random_tensor(gen, {32, 32, 3}));
    const auto count = std::count(edges.begin(), edges.end(), true);
    CHECK(count >= 100);
    CHECK(count <= 104);
}

TEST_CASE("alignment score averages pairs against color") {
    const auto s = scenes::generate(8, 2, 32);
    auto score = metrics::alignment_score(s.color, {{"albedo", s.albedo}, {"irradiance", s.irradiance}});
    REQUIRE(score.pairs.size() == 2);
    CHECK(score.mean == doctest::Approx((score.pairs[0].second + score.pairs[1].second) / 2));
    CHECK(score.pairs[0].second == metrics::edge_alignment(s.albedo, s.color));
}

TEST_CASE("rmse and ssim") {
    std::mt19937_64 gen(35);
    auto a = random_tensor(gen, {16, 16, 3}, 0, 1);
    CHECK(metrics::rmse(a, a) == 0.0);
    CHECK(metrics::ssim(a, a) == 1.0);
    CHECK(metrics::rmse(Tensor({4, 4, 1}, 0.0), Tensor({4, 4, 1}, 1.0)) == 1.0);

    auto b = random_tensor(gen, {16, 16, 3}, 0, 1);
    CHECK(std::abs(metrics::ssim(a, b) - ssim_reference(a, b)) < 1e-10);
    auto blurred = a;
    for (std::size_t i = 3; i < blurred.size(); ++i) blurred[i] = 0.5 * (a[i] + a[i - 3]);
    CHECK(std::abs(metrics::ssim(a, blurred) - ssim_reference(a, blurred)) < 1e-10);
    CHECK(metrics::ssim(a, blurred) > metrics::ssim(a, b));

    for (int t = 0; t < 20; ++t) {
        auto x = random_tensor(gen, {6, 5, 2}), y = random_tensor(gen, {6, 5, 2}), z = random_tensor(gen, {6, 5, 2});
        CHECK(metrics::rmse(x, z) <= metrics::rmse(x, y) + metrics::rmse(y, z) + 1e-15);
    }
    CHECK_THROWS_AS(metrics::rmse(a, Tensor({16, 16, 1})), ShapeError);
}

TEST_CASE("cost report") {
    const auto report = metrics::cost_report(metrics::default_grid());
    REQUIRE(report.rows.size() == 12);
    const auto& sep = report.rows[0];
    CHECK(sep.config.attention == attention::Variant::Vanilla);
    CHECK(sep.config.lora.kind == lora::Kind::Separate);
    CHECK(std::abs(sep.params / 1e6 - 2.95) / 2.95 < 0.01);
    CHECK(std::abs(sep.lora_flops / 1e9 - 9.1) / 9.1 < 0.01);
    CHECK(sep.attention_flops == 5 * attention::attention_flops({3072, 24, 1, 0, attention::Variant::Vanilla}, 1536));

    for (const auto& row : report.rows) {
        const auto dims = lora::Dims::square(5, 3072);
        CHECK(row.params == 2 * lora::param_count(row.config.lora, dims));
        CHECK(row.lora_flops == lora::flops_count(row.config.lora, dims, 1536, 2));
    }

    const std::string tsv = report.tsv();
    CHECK(tsv == metrics::cost_report(metrics::default_grid()).tsv());
    CHECK(std::count(tsv.begin(), tsv.end(), '\n') == 13);
    CHECK(tsv.find("vanilla\tseparate\t48\t2.949\t9.060\t724.8\n") != std::string::npos);

    const auto single = metrics::cost_report(metrics::default_grid(1, 64, 16));
    for (const auto& row : single.rows) CHECK(row.attention_flops == single.rows[0].attention_flops);
}

TEST_CASE("four significant digits") {
    CHECK(metrics::format_sig4(2.94912) == "2.949");
    CHECK(metrics::format_sig4(724.775) == "724.8");
    CHECK(metrics::format_sig4(1691.23) == "1691");
    CHECK(metrics::format_sig4(0.0123456) == "0.01235");
    CHECK(metrics::format_sig4(0.0) == "0");
}
