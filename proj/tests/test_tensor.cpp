#include <doctest.h>

#include <cmath>
#include <random>

#include "lumix/contraction.hpp"
#include "lumix/tensor.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace lumix;
using lumix::testing::random_tensor;

TEST_CASE("matmul small cases") {
    auto m = Tensor::matrix({{1, 2}, {3, 4}});
    CHECK(matmul(Tensor::identity(2), m).values() == m.values());
    auto r = matmul(Tensor::matrix({{1, 2}}), Tensor::matrix({{3}, {4}}));
    CHECK(r.shape() == Shape{1, 1});
    CHECK(r.item() == 11.0);
}

TEST_CASE("matmul matches triple loop") {
    std::mt19937_64 gen(1);
    auto a = random_tensor(gen, {5, 7});
    auto b = random_tensor(gen, {7, 3});
    auto ref = oracle::matmul_loops(a, b);
    CHECK(max_rel_diff(matmul(a, b), ref) < 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    try {
        matmul(Tensor({2, 3}), Tensor({2, 3}));
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("[2x3]") != std::string::npos);
    }
}

TEST_CASE("matmul associativity") {
    std::mt19937_64 gen(2);
    for (int trial = 0; trial < 20; ++trial) {
        std::uniform_int_distribution<std::size_t> ext(1, 9);
        auto a = random_tensor(gen, {ext(gen), ext(gen)});
        auto b = random_tensor(gen, {a.extent(1), ext(gen)});
        auto c = random_tensor(gen, {b.extent(1), ext(gen)});
        CHECK(max_rel_diff(matmul(matmul(a, b), c), matmul(a, matmul(b, c))) < 1e-9);
    }
}

TEST_CASE("softmax rows") {
    auto s = softmax_rows(Tensor({1, 2}, std::vector<double>{0, 0}));
    CHECK(s[0] == doctest::Approx(0.5));
    CHECK(s[1] == doctest::Approx(0.5));

    auto big = softmax_rows(Tensor({2}, std::vector<double>{1000, 0}));
    CHECK(all_finite(big));
    CHECK(big[0] == doctest::Approx(1.0));
    CHECK(big[1] < 1e-300);

    std::mt19937_64 gen(3);
    auto x = random_tensor(gen, {6, 9}, -5, 5);
    auto y = softmax_rows(x);
    for (std::size_t r = 0; r < 6; ++r) {
        double total = 0.0;
        for (std::size_t c = 0; c < 9; ++c) total += std::exp(x[r * 9 + c]);
        double row_sum = 0.0;
        for (std::size_t c = 0; c < 9; ++c) {
            CHECK(std::abs(y[r * 9 + c] - std::exp(x[r * 9 + c]) / total) < 1e-12);
            row_sum += y[r * 9 + c];
        }
        CHECK(std::abs(row_sum - 1.0) < 1e-6);
    }
    // shift invariance
    Tensor shifted = x;
    for (std::size_t c = 0; c < 9; ++c) shifted[2 * 9 + c] += 37.5;
    CHECK(max_abs_diff(softmax_rows(shifted), y) < 1e-6);
}

TEST_CASE("tensor lora contractions: tiny case") {
    Tensor a({1, 1, 1}, std::vector<double>{2});
    Tensor b({1, 1, 1}, std::vector<double>{3});
    Tensor c({1, 1, 1, 1}, std::vector<double>{5});
    Tensor h({1, 1}, std::vector<double>{7});
    CHECK(oracle::tensor_lora_materialized_apply(a, b, c, h).item() == 210.0);
    CHECK(contract_tensor_lora_3step(a, b, c, h).item() == 210.0);
    CHECK(contract_tensor_lora_fused(a, b, c, h).item() == 210.0);
}

TEST_CASE("tensor lora contractions: annihilation and linearity") {
    std::mt19937_64 gen(4);
    auto b = random_tensor(gen, {3, 2, 2});
    auto c = random_tensor(gen, {3, 4, 3, 2});
    auto h = random_tensor(gen, {2, 4});
    auto a = Tensor({3, 5, 3});
    CHECK(max_abs(contract_tensor_lora_3step(a, b, c, h)) == 0.0);
    CHECK(max_abs(contract_tensor_lora_fused(a, b, c, h)) == 0.0);
    a = random_tensor(gen, {3, 5, 3});
    CHECK(max_abs(contract_tensor_lora_fused(a, b, c, Tensor({2, 4}))) == 0.0);
}

TEST_CASE("tensor lora contractions agree with materialized update") {
    std::mt19937_64 gen(5);
    {
        const std::size_t n = 5, m = 5, d = 8, r1 = 2, r2 = 2;
        auto a = random_tensor(gen, {n, d, r1});
        auto b = random_tensor(gen, {n, m, r2});
        auto c = random_tensor(gen, {n, d, r1, r2});
        auto h = random_tensor(gen, {m, d});
        auto ref = oracle::tensor_lora_materialized_apply(a, b, c, h);
        CHECK(max_rel_diff(contract_tensor_lora_3step(a, b, c, h), ref) < 1e-10);
        CHECK(max_rel_diff(contract_tensor_lora_fused(a, b, c, h), ref) < 1e-10);
    }
    {
        const std::size_t n = 3, m = 3, d = 16, r1 = 3, r2 = 2;
        auto a = random_tensor(gen, {n, d, r1});
        auto b = random_tensor(gen, {n, m, r2});
        auto c = random_tensor(gen, {n, d, r1, r2});
        auto h = random_tensor(gen, {m, d});
        CHECK(max_rel_diff(contract_tensor_lora_fused(a, b, c, h), contract_tensor_lora_3step(a, b, c, h)) < 1e-12);
    }
}

TEST_CASE("tensor lora contraction handles N != M and d_in != d_out") {
    std::mt19937_64 gen(6);
    auto a = random_tensor(gen, {2, 5, 3});
    auto b = random_tensor(gen, {2, 4, 2});
    auto c = random_tensor(gen, {2, 7, 3, 2});
    auto h = random_tensor(gen, {4, 7});
    auto ref = oracle::tensor_lora_materialized_apply(a, b, c, h);
    CHECK(contract_tensor_lora_fused(a, b, c, h).shape() == Shape{2, 5});
    CHECK(max_rel_diff(contract_tensor_lora_3step(a, b, c, h), ref) < 1e-10);
    CHECK(max_rel_diff(contract_tensor_lora_fused(a, b, c, h), ref) < 1e-10);
}

TEST_CASE("tensor lora extent mismatch") {
    CHECK_THROWS_AS(contract_tensor_lora_3step(Tensor({2, 3, 2}), Tensor({2, 2, 2}), Tensor({2, 3, 2, 3}),
                                               Tensor({2, 3})),
                    ShapeError);
    CHECK_THROWS_AS(contract_tensor_lora_fused(Tensor({2, 3, 2}), Tensor({2, 2, 2}), Tensor({2, 3, 2, 2}),
                                               Tensor({3, 3})),
                    ShapeError);
}

TEST_CASE("reshape and element access") {
    Tensor t({2, 3});
    t.at({1, 2}) = 4.0;
    CHECK(t[5] == 4.0);
    auto r = t.reshaped({3, 2});
    CHECK(r.at({2, 1}) == 4.0);
    CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
    CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}
