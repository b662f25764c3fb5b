#include <doctest.h>

#include <random>

#include "lumix/attention.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace lumix;
using attention::Config;
using attention::Variant;
using lumix::testing::check_gradients;
using lumix::testing::random_tensor;
using lumix::testing::weighted_sum;

namespace {

const std::vector<Variant> kVariants{Variant::Vanilla, Variant::CrossIntrinsic, Variant::QueryBroadcast};
const std::vector<lora::Variant> kLoras{lora::Variant::separate(2), lora::Variant::fused(2),
                                        lora::Variant::hybrid(2, 1), lora::Variant::tensor(2, 2)};

attention::BlockWeights weights_with_lora(const Config& cfg, const lora::Variant& lv, Rng& rng, double scale = 0.5) {
    auto w = attention::BlockWeights::random(cfg, rng);
    w.lora_k = lora::Adapter::random(lv, lora::Dims::square(cfg.m, cfg.d), rng, scale);
    w.lora_v = lora::Adapter::random(lv, lora::Dims::square(cfg.m, cfg.d), rng, scale);
    return w;
}

int mode_of(Variant v) { return v == Variant::Vanilla ? 0 : v == Variant::CrossIntrinsic ? 1 : 2; }

}  // namespace

TEST_CASE("dense reference agreement for every variant") {
    Rng rng(21);
    std::mt19937_64 gen(21);
    for (auto variant : kVariants)
        for (const auto& lv : kLoras) {
            Config cfg{8, 2, 3, 1, variant};
            auto w = weights_with_lora(cfg, lv, rng);
            auto x = random_tensor(gen, {3, 4, 8});
            auto got = attention::forward(cfg, w, x);
            auto ref = oracle::attention_reference(mode_of(variant), 2, 1, w.wq, w.wk, w.wv, w.wo,
                                                   lora::materialize(*w.lora_k), lora::materialize(*w.lora_v), x);
            CHECK_MESSAGE(max_abs_diff(got, ref) < 1e-10, attention::to_string(variant), " ", lora::to_string(lv.kind));
        }
}

TEST_CASE("query broadcast equals vanilla with a single property") {
    Rng rng(22);
    std::mt19937_64 gen(22);
    for (const auto& lv : kLoras) {
        if (lv.kind == lora::Kind::Hybrid) continue;
        Config cfg{8, 2, 1, 0, Variant::Vanilla};
        auto w = weights_with_lora(cfg, lv, rng);
        auto x = random_tensor(gen, {1, 5, 8});
        auto vanilla = attention::forward(cfg, w, x);
        cfg.variant = Variant::QueryBroadcast;
        CHECK(max_abs_diff(attention::forward(cfg, w, x), vanilla) == 0.0);
        cfg.variant = Variant::CrossIntrinsic;
        CHECK(max_abs_diff(attention::forward(cfg, w, x), vanilla) <= 1e-12);
    }
}

TEST_CASE("identical properties with zero adapters give identical outputs") {
    Rng rng(23);
    std::mt19937_64 gen(23);
    const std::size_t M = 4;
    auto one = random_tensor(gen, {1, 5, 8});
    Tensor x({M, 5, 8});
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t i = 0; i < one.size(); ++i) x[m * one.size() + i] = one[i];
    std::vector<Tensor> outs;
    for (auto variant : kVariants) {
        Config cfg{8, 2, M, 0, variant};
        Rng wr = rng.split(7);
        auto w = attention::BlockWeights::random(cfg, wr);
        w.lora_k = lora::Adapter::zeros(lora::Variant::tensor(2, 2), lora::Dims::square(M, 8));
        w.lora_v = w.lora_k;
        outs.push_back(attention::forward(cfg, w, x));
    }
    for (const auto& out : outs) {
        for (std::size_t m = 1; m < M; ++m)
            for (std::size_t i = 0; i < one.size(); ++i) CHECK(std::abs(out[m * one.size() + i] - out[i]) <= 1e-12);
        CHECK(max_abs_diff(out, outs[0]) <= 1e-12);
    }
}

TEST_CASE("query broadcast is equivariant under permutations of non-color properties") {
    Rng rng(24);
    std::mt19937_64 gen(24);
    const std::size_t M = 4, L = 3, d = 4, color = 0;
    Config cfg{d, 2, M, color, Variant::QueryBroadcast};
    auto w = attention::BlockWeights::random(cfg, rng);
    w.lora_k = lora::Adapter::random(lora::Variant::separate(2), lora::Dims::square(M, d), rng);
    w.lora_v = lora::Adapter::random(lora::Variant::separate(2), lora::Dims::square(M, d), rng);
    auto x = random_tensor(gen, {M, L, d});
    const std::vector<std::size_t> perm{0, 3, 1, 2};  // new slot i holds old property perm[i]

    auto permute_slices = [&](const Tensor& t, std::size_t per) {
        Tensor out(t.shape());
        for (std::size_t i = 0; i < M; ++i)
            for (std::size_t e = 0; e < per; ++e) out[i * per + e] = t[perm[i] * per + e];
        return out;
    };
    auto pw = w;
    for (auto* ad : {&pw.lora_k, &pw.lora_v}) {
        for (auto& [name, t] : (*ad)->factors) t = permute_slices(t, t.size() / M);
    }
    auto base = attention::forward(cfg, w, x);
    auto permuted = attention::forward(cfg, pw, permute_slices(x, L * d));
    CHECK(max_abs_diff(permuted, permute_slices(base, L * d)) == 0.0);
}

TEST_CASE("attention probabilities shared across properties under query broadcast") {
    // Same Q and same K for every property: outputs differ only through V.
    Rng rng(25);
    std::mt19937_64 gen(25);
    const std::size_t M = 3, L = 4, d = 4;
    Config cfg{d, 1, M, 0, Variant::QueryBroadcast};
    auto w = attention::BlockWeights::random(cfg, rng);
    w.wv = Tensor::identity(d);
    w.wo = Tensor::identity(d);
    auto one = random_tensor(gen, {1, L, d});
    Tensor x({M, L, d});
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t i = 0; i < one.size(); ++i) x[m * one.size() + i] = one[i];
    // Value path carries a per-property scale so rows of P are recoverable by linearity.
    w.lora_v = lora::Adapter::zeros(lora::Variant::separate(d), lora::Dims::square(M, d));
    for (std::size_t m = 0; m < M; ++m)
        for (std::size_t i = 0; i < d; ++i) {
            w.lora_v->factor("A").at({m, i, i}) = static_cast<double>(m);
            w.lora_v->factor("B").at({m, i, i}) = 1.0;
        }
    auto out = attention::forward(cfg, w, x);
    // out_m = P x (1 + m) with shared P
    for (std::size_t m = 1; m < M; ++m)
        for (std::size_t i = 0; i < one.size(); ++i)
            CHECK(std::abs(out[m * one.size() + i] - out[i] * static_cast<double>(1 + m)) <= 1e-12);
}

TEST_CASE("groups do not mix") {
    Rng rng(26);
    std::mt19937_64 gen(26);
    for (auto variant : kVariants) {
        Config cfg{4, 2, 2, 1, variant};
        auto w = weights_with_lora(cfg, lora::Variant::tensor(2, 1), rng);
        auto x = random_tensor(gen, {6, 3, 4});
        auto all = attention::forward(cfg, w, x);
        for (std::size_t g = 0; g < 3; ++g) {
            Tensor part({2, 3, 4});
            for (std::size_t i = 0; i < part.size(); ++i) part[i] = x[g * part.size() + i];
            auto out = attention::forward(cfg, w, part);
            for (std::size_t i = 0; i < part.size(); ++i) CHECK(std::abs(out[i] - all[g * part.size() + i]) < 1e-12);
        }
    }
}

TEST_CASE("finite-difference gradients of the block") {
    Rng rng(27);
    std::mt19937_64 gen(27);
    for (auto variant : kVariants)
        for (const auto& lv : kLoras) {
            Config cfg{4, 2, 2, 0, variant};
            auto w = weights_with_lora(cfg, lv, rng);
            auto named = w.named();
            std::vector<std::string> names;
            std::vector<Tensor> params;
            for (auto& [name, t] : named) {
                names.push_back(name);
                params.push_back(*t);
            }
            params.push_back(random_tensor(gen, {2, 3, 4}));
            auto r = check_gradients(params, [&](Tape& tape, const std::vector<Var>& v) {
                auto bv = w.bind([&](const std::string& name, const Tensor&) {
                    return v[std::find(names.begin(), names.end(), name) - names.begin()];
                });
                return weighted_sum(tape, attention::forward(cfg, bv, v.back()));
            });
            CHECK_MESSAGE(r.worst < 1e-4, attention::to_string(variant), "/", lora::to_string(lv.kind), " ", r.where);
        }
}

TEST_CASE("optional query adapter") {
    Rng rng(28);
    std::mt19937_64 gen(28);
    Config cfg{4, 2, 3, 1, Variant::QueryBroadcast};
    auto w = attention::BlockWeights::random(cfg, rng);
    auto x = random_tensor(gen, {3, 3, 4});
    auto base = attention::forward(cfg, w, x);
    w.lora_q = lora::Adapter::zeros(lora::Variant::fused(2), lora::Dims::square(3, 4));
    CHECK(max_abs_diff(attention::forward(cfg, w, x), base) == 0.0);
    w.lora_q = lora::Adapter::random(lora::Variant::fused(2), lora::Dims::square(3, 4), rng);
    CHECK(max_abs_diff(attention::forward(cfg, w, x), base) > 1e-6);
}

TEST_CASE("attention flops") {
    SUBCASE("closed forms at the reference configuration") {
        Config cfg{3072, 24, 1, 0, Variant::Vanilla};
        const double per_property = static_cast<double>(attention::attention_flops(cfg, 1536)) / 1e9;
        CHECK(std::abs(per_property - 145.1) / 145.1 < 0.01);
    }
    SUBCASE("cross score/value cost is exactly M times vanilla") {
        for (std::size_t m = 1; m <= 8; ++m)
            for (std::size_t L : {1, 7, 64}) {
                Config v{16, 2, m, 0, Variant::Vanilla};
                Config c{16, 2, m, 0, Variant::CrossIntrinsic};
                CHECK(attention::score_value_flops(c, L) == m * attention::score_value_flops(v, L));
            }
    }
    SUBCASE("degenerate M=1 rows agree") {
        for (auto variant : kVariants) {
            Config cfg{64, 4, 1, 0, variant};
            CHECK(attention::attention_flops(cfg, 16) == attention::attention_flops({64, 4, 1, 0, Variant::Vanilla}, 16));
        }
    }
    SUBCASE("instrumented execution matches the closed form") {
        Rng rng(29);
        std::mt19937_64 gen(29);
        // hand count at L=H=d=M=1: 4 projections + score + value = 6 MACs = 12 FLOPs
        Config tiny{1, 1, 1, 0, Variant::Vanilla};
        attention::reset_executed_macs();
        attention::forward(tiny, attention::BlockWeights::random(tiny, rng), random_tensor(gen, {1, 1, 1}));
        CHECK(attention::executed_macs() == 6);
        CHECK(attention::attention_flops(tiny, 1) == 12);
        for (auto variant : kVariants)
            for (std::size_t m : {1, 2, 3}) {
                Config cfg{6, 3, m, m - 1, variant};
                attention::reset_executed_macs();
                attention::forward(cfg, attention::BlockWeights::random(cfg, rng), random_tensor(gen, {m, 5, 6}));
                CHECK(2 * attention::executed_macs() == attention::attention_flops(cfg, 5));
            }
    }
}

TEST_CASE("config and shape validation") {
    CHECK_THROWS_AS(Config({6, 4, 1, 0, Variant::Vanilla}).validate(), std::invalid_argument);
    CHECK_THROWS_AS(Config({8, 2, 2, 2, Variant::QueryBroadcast}).validate(), std::invalid_argument);
    Rng rng(30);
    Config cfg{4, 2, 3, 0, Variant::Vanilla};
    auto w = attention::BlockWeights::random(cfg, rng);
    CHECK_THROWS_AS(attention::forward(cfg, w, Tensor({4, 2, 4})), ShapeError);
    CHECK_THROWS_AS(attention::forward(cfg, w, Tensor({3, 2, 5})), ShapeError);
    CHECK(attention::parse_variant("qb") == Variant::QueryBroadcast);
    CHECK_THROWS_AS(attention::parse_variant("joint"), std::invalid_argument);
}
