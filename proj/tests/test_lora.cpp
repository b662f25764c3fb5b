#include <doctest.h>

#include <random>

#include "lumix/contraction.hpp"
#include "lumix/lora.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace lumix;
using lumix::testing::check_gradients;
using lumix::testing::random_tensor;
using lumix::testing::weighted_sum;

namespace {

const std::vector<lora::Kind> kAllKinds{lora::Kind::Separate, lora::Kind::Fused, lora::Kind::Hybrid,
                                        lora::Kind::Tensor};

lora::Variant variant_for(lora::Kind kind, std::size_t r1, std::size_t r2) {
    switch (kind) {
        case lora::Kind::Separate: return lora::Variant::separate(r1);
        case lora::Kind::Fused: return lora::Variant::fused(r1);
        case lora::Kind::Hybrid: return lora::Variant::hybrid(std::max<std::size_t>(r1, 2), std::min(r2, std::max<std::size_t>(r1, 2) - 1));
        case lora::Kind::Tensor: return lora::Variant::tensor(r1, r2);
    }
    return {};
}

Tensor concat_apply(const lora::Adapter& ad, const Tensor& h) {
    return oracle::matmul_loops(lora::materialize(ad), h.reshaped({h.size(), 1}))
        .reshaped({ad.dims.n_out, ad.dims.d_out});
}

// Multiply-add tally through an instrumented scalar.
struct Counted {
    double v = 0.0;
    static inline std::uint64_t macs = 0;
    Counted() = default;
    explicit Counted(double x) : v(x) {}
    Counted operator*(const Counted& o) const {
        ++macs;
        return Counted(v * o.v);
    }
    Counted& operator+=(const Counted& o) {
        v += o.v;
        return *this;
    }
};

}  // namespace

TEST_CASE("separate lora: zero factors and hand example") {
    const auto dims = lora::Dims::square(2, 2);
    auto zero = lora::Adapter::zeros(lora::Variant::separate(1), dims);
    CHECK(max_abs(lora::apply(zero, Tensor::matrix({{3, 4}, {5, 6}}))) == 0.0);

    auto ad = zero;
    ad.factor("A") = Tensor({2, 2, 1}, std::vector<double>{1, 0, 0, 1});
    ad.factor("B") = Tensor({2, 2, 1}, std::vector<double>{1, 0, 0, 1});
    auto out = lora::apply(ad, Tensor::matrix({{3, 4}, {5, 6}}));
    CHECK(out.values() == std::vector<double>{3, 0, 0, 6});
}

TEST_CASE("apply equals materialized block matrix for every variant") {
    Rng rng(7);
    int configs = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const auto kind = kAllKinds[trial % 4];
        const std::size_t m = 1 + rng.below(5);
        const std::size_t n = kind == lora::Kind::Separate ? m : 1 + rng.below(5);
        lora::Dims dims{m, n, 1 + rng.below(16), 1 + rng.below(16)};
        auto v = variant_for(kind, 1 + rng.below(4), 1 + rng.below(4));
        auto ad = lora::Adapter::random(v, dims, rng);
        Tensor h({m, dims.d_in});
        for (auto& x : h.data()) x = rng.uniform(-1, 1);
        CHECK(max_rel_diff(lora::apply(ad, h), concat_apply(ad, h)) < 1e-10);
        ++configs;
    }
    CHECK(configs == 200);
}

TEST_CASE("block-structure oracles") {
    Rng rng(8);
    SUBCASE("separate off-diagonal blocks are exactly zero") {
        auto ad = lora::Adapter::random(lora::Variant::separate(2), lora::Dims::square(3, 4), rng);
        auto delta = lora::materialize(ad);
        for (std::size_t i = 0; i < 12; ++i)
            for (std::size_t j = 0; j < 12; ++j)
                if (i / 4 != j / 4) CHECK(delta.at({i, j}) == 0.0);
    }
    SUBCASE("fused materialization has rank <= R") {
        for (std::size_t r = 1; r <= 3; ++r) {
            auto ad = lora::Adapter::random(lora::Variant::fused(r), lora::Dims::square(3, 3), rng);
            CHECK(oracle::matrix_rank(lora::materialize(ad)) <= r);
        }
    }
    SUBCASE("hybrid is the sum of pairwise low-rank blocks") {
        const auto dims = lora::Dims::square(3, 4);
        auto ad = lora::Adapter::random(lora::Variant::hybrid(3, 1), dims, rng);
        auto delta = lora::materialize(ad);
        const auto pairs = lora::hybrid_off_pairs(dims);
        auto block = [&](const Tensor& A, const Tensor& B, std::size_t idx, std::size_t r) {
            Tensor a({4, r}), b({r, 4});
            for (std::size_t i = 0; i < 4; ++i)
                for (std::size_t k = 0; k < r; ++k) {
                    a.at({i, k}) = A.at({idx, i, k});
                    b.at({k, i}) = B.at({idx, i, k});
                }
            return oracle::matmul_loops(a, b);
        };
        for (std::size_t n = 0; n < 3; ++n)
            for (std::size_t m = 0; m < 3; ++m) {
                Tensor expect;
                if (n == m) {
                    expect = block(ad.factor("A_diag"), ad.factor("B_diag"), n, 3);
                } else {
                    std::size_t p = 0;
                    while (pairs[p] != std::make_pair(n, m)) ++p;
                    expect = block(ad.factor("A_off"), ad.factor("B_off"), p, 1);
                }
                for (std::size_t i = 0; i < 4; ++i)
                    for (std::size_t j = 0; j < 4; ++j)
                        CHECK(std::abs(delta.at({n * 4 + i, m * 4 + j}) - expect.at({i, j})) < 1e-10);
            }
    }
    SUBCASE("tensor materialization equals the element-wise loop") {
        auto ad = lora::Adapter::random(lora::Variant::tensor(1, 1), lora::Dims::square(2, 3), rng);
        auto delta = lora::materialize(ad);
        auto ref = oracle::tensor_lora_delta(ad.factor("A"), ad.factor("B"), ad.factor("C"));
        CHECK(max_abs_diff(delta, ref) < 1e-14);
    }
}

TEST_CASE("separate equals hybrid with zeroed off-diagonal factors") {
    Rng rng(9);
    const auto dims = lora::Dims::square(4, 5);
    auto hyb = lora::Adapter::random(lora::Variant::hybrid(3, 2), dims, rng);
    hyb.factor("A_off").fill(0.0);
    hyb.factor("B_off").fill(0.0);
    auto sep = lora::Adapter::zeros(lora::Variant::separate(3), dims);
    sep.factor("A") = hyb.factor("A_diag");
    sep.factor("B") = hyb.factor("B_diag");
    std::mt19937_64 gen(1);
    auto h = random_tensor(gen, {4, 5});
    CHECK(max_abs_diff(lora::apply(sep, h), lora::apply(hyb, h)) == 0.0);
}

TEST_CASE("apply is linear in h") {
    Rng rng(10);
    std::mt19937_64 gen(2);
    for (auto kind : kAllKinds) {
        auto ad = lora::Adapter::random(variant_for(kind, 3, 2), lora::Dims::square(3, 6), rng);
        auto h1 = random_tensor(gen, {3, 6});
        auto h2 = random_tensor(gen, {3, 6});
        const double alpha = 0.7, beta = -1.3;
        auto lhs = lora::apply(ad, scaled(h1, alpha) + scaled(h2, beta));
        auto rhs = scaled(lora::apply(ad, h1), alpha) + scaled(lora::apply(ad, h2), beta);
        CHECK(max_rel_diff(lhs, rhs) < 1e-10);
    }
}

TEST_CASE("initialized adapters start as a zero update") {
    Rng rng(11);
    for (auto kind : kAllKinds) {
        auto ad = lora::Adapter::initialized(variant_for(kind, 4, 2), lora::Dims::square(3, 8), rng);
        CHECK(max_abs(lora::materialize(ad)) == 0.0);
        double nonzero = 0.0;
        for (auto& [name, t] : ad.factors) nonzero += max_abs(t);
        CHECK(nonzero > 0.0);
    }
}

TEST_CASE("param_count matches factor enumeration") {
    for (auto kind : kAllKinds) {
        for (std::size_t m = 1; m <= 5; ++m) {
            lora::Dims dims{m, kind == lora::Kind::Separate ? m : m + 1, 7, 5};
            auto v = variant_for(kind, 4, 2);
            std::uint64_t enumerated = 0;
            for (const auto& [name, t] : lora::Adapter::zeros(v, dims).factors) enumerated += t.size();
            CHECK(lora::param_count(v, dims) == enumerated);
        }
    }
}

TEST_CASE("param_count reference values") {
    const auto table = lora::Dims::square(5, 3072);
    CHECK(2 * lora::param_count(lora::Variant::separate(48), table) == 2'949'120);
    CHECK(lora::param_count(lora::Variant::tensor(8, 8), table) == 1'106'120);
    CHECK(lora::param_count(lora::Variant::separate(1), lora::Dims::square(1, 1)) == 2);
    CHECK_THROWS_AS(lora::param_count(lora::Variant::separate(0), table), std::invalid_argument);
    CHECK_THROWS_AS(lora::Variant::hybrid(4, 4).validate(), std::invalid_argument);
    CHECK(lora::Variant::hybrid(48).rank2 == 12);
}

TEST_CASE("tensor lora params grow as a*M + R2*M^2") {
    const std::size_t d = 16, r1 = 3, r2 = 2;
    std::vector<double> counts;
    for (std::size_t m = 1; m <= 8; ++m)
        counts.push_back(static_cast<double>(lora::param_count(lora::Variant::tensor(r1, r2), lora::Dims::square(m, d))));
    // exact fit of c(M) = a*M + b*M^2 from M=1,2, then check the rest
    const double b = (counts[1] - 2.0 * counts[0]) / 2.0;
    const double a = counts[0] - b;
    CHECK(b == static_cast<double>(r2));
    for (std::size_t m = 1; m <= 8; ++m) CHECK(counts[m - 1] == a * m + b * m * m);
}

TEST_CASE("flops_count") {
    const auto table = lora::Dims::square(5, 3072);
    const double gflops = static_cast<double>(lora::flops_count(lora::Variant::separate(48), table, 1536, 2)) / 1e9;
    CHECK(std::abs(gflops - 9.1) / 9.1 < 0.01);
    CHECK(lora::flops_count(lora::Variant::tensor(8, 8), table, 0, 2) == 0);

    // instrumented executor: tally multiply-adds of the actual 3-step loop nest
    const TensorLoraDims kd{3, 2, 5, 4, 3, 2};
    std::vector<Counted> a(3 * 4 * 3, Counted(1.0)), b(3 * 2 * 2, Counted(1.0)), c(3 * 5 * 3 * 2, Counted(1.0)),
        h(2 * 5, Counted(1.0)), out(3 * 4);
    Counted::macs = 0;
    kernels::tensor_lora_3step<Counted>(kd, a.data(), b.data(), c.data(), h.data(), out.data());
    const lora::Dims dims{2, 3, 5, 4};
    CHECK(2 * Counted::macs == lora::flops_count(lora::Variant::tensor(3, 2), dims, 1));
}

TEST_CASE("batched token path matches per-token apply") {
    Rng rng(12);
    std::mt19937_64 gen(3);
    for (auto kind : kAllKinds) {
        const std::size_t m = 3, n = kind == lora::Kind::Separate ? 3 : 2, groups = 2, L = 4;
        lora::Dims dims{m, n, 5, 6};
        auto ad = lora::Adapter::random(variant_for(kind, 3, 2), dims, rng);
        auto x = random_tensor(gen, {groups * m, L, 5});
        Tape tape;
        std::map<std::string, Var> vars;
        for (auto& [name, t] : ad.factors) vars.emplace(name, tape.constant(t));
        Var y = lora::apply_tokens(ad.variant, dims, vars, tape.constant(x));
        REQUIRE(y.shape() == Shape{groups * n, L, 6});
        for (std::size_t g = 0; g < groups; ++g)
            for (std::size_t l = 0; l < L; ++l) {
                Tensor h({m, 5});
                for (std::size_t k = 0; k < m; ++k)
                    for (std::size_t c = 0; c < 5; ++c) h.at({k, c}) = x.at({g * m + k, l, c});
                Tensor expect = lora::apply(ad, h);
                for (std::size_t k = 0; k < n; ++k)
                    for (std::size_t c = 0; c < 6; ++c)
                        CHECK(std::abs(y.value().at({g * n + k, l, c}) - expect.at({k, c})) < 1e-12);
            }
    }
}

TEST_CASE("batched token path gradients") {
    Rng rng(13);
    std::mt19937_64 gen(4);
    for (auto kind : kAllKinds) {
        lora::Dims dims{2, 2, 3, 4};
        auto ad = lora::Adapter::random(variant_for(kind, 2, 1), dims, rng);
        std::vector<std::string> names;
        std::vector<Tensor> params;
        for (auto& [name, t] : ad.factors) {
            names.push_back(name);
            params.push_back(t);
        }
        params.push_back(random_tensor(gen, {4, 3, 3}));
        auto r = check_gradients(params, [&](Tape& t, const std::vector<Var>& v) {
            std::map<std::string, Var> vars;
            for (std::size_t i = 0; i < names.size(); ++i) vars.emplace(names[i], v[i]);
            return weighted_sum(t, lora::apply_tokens(ad.variant, dims, vars, v.back()));
        });
        CHECK_MESSAGE(r.worst < 1e-4, lora::to_string(kind), " ", r.where);
    }
}

TEST_CASE("shape errors") {
    Rng rng(14);
    auto ad = lora::Adapter::random(lora::Variant::fused(2), lora::Dims::square(2, 3), rng);
    CHECK_THROWS_AS(lora::apply(ad, Tensor({3, 3})), ShapeError);
    CHECK_THROWS_AS(lora::Adapter::zeros(lora::Variant::separate(2), lora::Dims{2, 3, 4, 4}), std::invalid_argument);
    Tape tape;
    std::map<std::string, Var> vars;
    for (auto& [name, t] : ad.factors) vars.emplace(name, tape.constant(t));
    CHECK_THROWS_AS(lora::apply_tokens(ad.variant, ad.dims, vars, tape.constant(Tensor({3, 2, 3}))), ShapeError);
}
