#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>

#include "lumix/autograd.hpp"
#include "lumix/lora.hpp"
#include "lumix/rng.hpp"
#include "lumix/tensor.hpp"

namespace lumix::attention {

enum class Variant { Vanilla, CrossIntrinsic, QueryBroadcast };

std::string to_string(Variant v);
Variant parse_variant(const std::string& text);

struct Config {
    std::size_t d = 8;
    std::size_t heads = 1;
    std::size_t m = 1;            ///< properties in the stack
    std::size_t color_index = 0;  ///< query donor for QueryBroadcast
    Variant variant = Variant::Vanilla;

    std::size_t head_dim() const { return d / heads; }
    void validate() const;
};

/// Adapter factors for one projection, as recorded values.
struct LoraVars {
    lora::Variant variant;
    std::map<std::string, Var> factors;
};

/// Block parameters on a tape. Base projections are [d x d] and shared by all properties.
struct BlockVars {
    Var wq, wk, wv, wo;
    std::optional<LoraVars> lora_q, lora_k, lora_v;
};

/// Plain-tensor weights, convenient outside of training.
struct BlockWeights {
    Tensor wq, wk, wv, wo;
    std::optional<lora::Adapter> lora_q, lora_k, lora_v;

    static BlockWeights random(const Config& cfg, Rng& rng);
    /// Every tensor, under stable names ("wq", "lora_k/A", ...).
    std::map<std::string, Tensor*> named();
    BlockVars on_tape(Tape& tape, bool trainable) const;
    /// Builds the Vars through `put(name, tensor)`, names as in named().
    BlockVars bind(const std::function<Var(const std::string&, const Tensor&)>& put) const;
};

/**
 * Attention over a stack of property token sequences.
 *
 * x is [G*M, L, d]: G independent groups of M property slices, property m
 * of group g at slice g*M + m. Mixing across slices happens only inside a
 * group. Returns [G*M, L, d].
 */
Var forward(const Config& cfg, const BlockVars& w, Var x);

/// Tensor convenience wrapper around forward() for a single group.
Tensor forward(const Config& cfg, const BlockWeights& w, const Tensor& x);

/// Base-path FLOPs of one block over all M properties (adapters excluded, softmax excluded).
std::uint64_t attention_flops(const Config& cfg, std::uint64_t tokens);
/// FLOPs of the QK^T and PV products alone.
std::uint64_t score_value_flops(const Config& cfg, std::uint64_t tokens);

/// Multiply-adds actually executed by forward() on this thread since the last reset.
std::uint64_t executed_macs();
void reset_executed_macs();

}  // namespace lumix::attention
