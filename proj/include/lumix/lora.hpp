#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lumix/autograd.hpp"
#include "lumix/rng.hpp"
#include "lumix/tensor.hpp"

namespace lumix::lora {

enum class Kind { Separate, Fused, Hybrid, Tensor };

std::string to_string(Kind kind);
Kind parse_kind(const std::string& text);

/**
 * Structure and ranks of a low-rank update over M stacked input streams.
 *
 * Separate and Fused use `rank`. Hybrid uses `rank` on the diagonal blocks and
 * `rank2` (< rank) on the off-diagonal ones. Tensor uses (rank, rank2) as the
 * (R1, R2) pair of the A/C and B/C rank indices.
 */
struct Variant {
    Kind kind = Kind::Separate;
    std::size_t rank = 1;
    std::size_t rank2 = 1;

    static Variant separate(std::size_t r) { return {Kind::Separate, r, r}; }
    static Variant fused(std::size_t r) { return {Kind::Fused, r, r}; }
    static Variant hybrid(std::size_t r1, std::size_t r2) { return {Kind::Hybrid, r1, r2}; }
    /// Hybrid with the default off-diagonal rank max(1, r1/4).
    static Variant hybrid(std::size_t r1) { return {Kind::Hybrid, r1, std::max<std::size_t>(1, r1 / 4)}; }
    static Variant tensor(std::size_t r1, std::size_t r2) { return {Kind::Tensor, r1, r2}; }

    void validate() const;
    bool operator==(const Variant&) const = default;
};

struct Dims {
    std::size_t m_in = 1;   ///< input streams
    std::size_t n_out = 1;  ///< output streams
    std::size_t d_in = 1;
    std::size_t d_out = 1;

    static Dims square(std::size_t m, std::size_t d) { return {m, m, d, d}; }
    bool operator==(const Dims&) const = default;
};

/// Off-diagonal (output, input) stream pairs of a Hybrid adapter, in row-major order.
std::vector<std::pair<std::size_t, std::size_t>> hybrid_off_pairs(const Dims& dims);

/// Names and shapes of the factor tensors, in a fixed order.
std::vector<std::pair<std::string, Shape>> factor_shapes(const Variant& variant, const Dims& dims);

struct Adapter {
    Variant variant;
    Dims dims;
    std::map<std::string, Tensor> factors;

    static Adapter zeros(const Variant& variant, const Dims& dims);
    /// B-side factors zero, A-side (and C) small uniform: the update starts at exactly zero.
    static Adapter initialized(const Variant& variant, const Dims& dims, Rng& rng);
    /// Every factor uniform in [-scale, scale]. Used by tests and oracles.
    static Adapter random(const Variant& variant, const Dims& dims, Rng& rng, double scale = 1.0);

    const Tensor& factor(const std::string& name) const;
    Tensor& factor(const std::string& name);
};

/// Update for one token across streams: h[M, d_in] -> [N, d_out]. Factored form; Δ is never built.
Tensor apply(const Adapter& adapter, const Tensor& h);

/// Dense (N*d_out) x (M*d_in) block matrix of the update. Test scale only.
Tensor materialize(const Adapter& adapter);

/// Trainable scalars of one adapted projection.
std::uint64_t param_count(const Variant& variant, const Dims& dims);

/// FLOPs (multiply-add = 2) of the factored update for `tokens` token groups,
/// summed over `projections` adapted projections.
std::uint64_t flops_count(const Variant& variant, const Dims& dims, std::uint64_t tokens,
                          std::uint64_t projections = 1);

/**
 * Differentiable update over a batch of token stacks.
 *
 * x has shape [G*M, L, d_in]: G groups of M stream slices. Returns
 * [G*N, L, d_out]. `factors` maps each factor name of `variant` to a Var.
 * The Tensor variant runs the fused single contraction per token.
 */
Var apply_tokens(const Variant& variant, const Dims& dims, const std::map<std::string, Var>& factors, Var x);

}  // namespace lumix::lora
