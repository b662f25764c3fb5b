#include "lumix/attention.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include <Eigen/Core>
#include <fmt/format.h>

namespace lumix::attention {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Strided = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using ConstStrided = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;
using Idx = Eigen::Index;

thread_local std::uint64_t t_macs = 0;

ConstStrided cview(const double* p, std::size_t rows, std::size_t cols, std::size_t stride) {
    return ConstStrided(p, static_cast<Idx>(rows), static_cast<Idx>(cols), Eigen::OuterStride<>(static_cast<Idx>(stride)));
}
Strided view(double* p, std::size_t rows, std::size_t cols, std::size_t stride) {
    return Strided(p, static_cast<Idx>(rows), static_cast<Idx>(cols), Eigen::OuterStride<>(static_cast<Idx>(stride)));
}

struct CoreLayout {
    std::size_t groups, m, len, d, heads, dh, keys;
    bool broadcast_q, cross;

    std::size_t q_slice(std::size_t g, std::size_t m_) const { return broadcast_q ? g : g * m + m_; }
    std::size_t kv_slice(std::size_t g, std::size_t m_) const { return cross ? g * m : g * m + m_; }
    std::size_t prob_offset(std::size_t g, std::size_t m_, std::size_t h) const {
        return ((g * m + m_) * heads + h) * len * keys;
    }
};

// Scaled dot-product attention for every (group, property, head); keeps the
// probabilities for the backward pass.
Var attention_core(const CoreLayout& lay, Var q, Var k, Var v) {
    Tape& tape = *q.tape;
    const double inv = 1.0 / std::sqrt(static_cast<double>(lay.dh));
    const std::size_t slice = lay.len * lay.d;
    Tensor out({lay.groups * lay.m, lay.len, lay.d});
    auto probs = std::make_shared<Storage>(lay.groups * lay.m * lay.heads * lay.len * lay.keys);

    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    for (std::size_t g = 0; g < lay.groups; ++g)
        for (std::size_t m = 0; m < lay.m; ++m)
            for (std::size_t h = 0; h < lay.heads; ++h) {
                const std::size_t col = h * lay.dh;
                auto Q = cview(qv.raw() + lay.q_slice(g, m) * slice + col, lay.len, lay.dh, lay.d);
                auto K = cview(kv.raw() + lay.kv_slice(g, m) * slice + col, lay.keys, lay.dh, lay.d);
                auto V = cview(vv.raw() + lay.kv_slice(g, m) * slice + col, lay.keys, lay.dh, lay.d);
                auto P = view(probs->data() + lay.prob_offset(g, m, h), lay.len, lay.keys, lay.keys);
                P.noalias() = Q * K.transpose();
                for (Idx r = 0; r < P.rows(); ++r) {
                    auto row = P.row(r);
                    row = (row.array() * inv - row.maxCoeff() * inv).exp().matrix();
                    row /= row.sum();
                }
                view(out.raw() + (g * lay.m + m) * slice + col, lay.len, lay.dh, lay.d).noalias() = P * V;
                t_macs += 2 * lay.len * lay.keys * lay.dh;
            }

    return tape.record(std::move(out), {q, k, v}, [lay, q, k, v, probs, inv, slice](Tape& t, const Tensor& gout) {
        const Tensor& qv = t.value(q);
        const Tensor& kv = t.value(k);
        const Tensor& vv = t.value(v);
        double* gq = t.grad_buffer(q).raw();
        double* gk = t.grad_buffer(k).raw();
        double* gv = t.grad_buffer(v).raw();
        RowMatrix dP;
        for (std::size_t g = 0; g < lay.groups; ++g)
            for (std::size_t m = 0; m < lay.m; ++m)
                for (std::size_t h = 0; h < lay.heads; ++h) {
                    const std::size_t col = h * lay.dh;
                    const std::size_t qo = lay.q_slice(g, m) * slice + col;
                    const std::size_t ko = lay.kv_slice(g, m) * slice + col;
                    auto Q = cview(qv.raw() + qo, lay.len, lay.dh, lay.d);
                    auto K = cview(kv.raw() + ko, lay.keys, lay.dh, lay.d);
                    auto V = cview(vv.raw() + ko, lay.keys, lay.dh, lay.d);
                    auto P = cview(probs->data() + lay.prob_offset(g, m, h), lay.len, lay.keys, lay.keys);
                    auto dO = cview(gout.raw() + (g * lay.m + m) * slice + col, lay.len, lay.dh, lay.d);

                    view(gv + ko, lay.keys, lay.dh, lay.d).noalias() += P.transpose() * dO;
                    dP.noalias() = dO * V.transpose();
                    for (Idx r = 0; r < dP.rows(); ++r) {
                        const double dot = dP.row(r).dot(P.row(r));
                        dP.row(r) = (P.row(r).array() * (dP.row(r).array() - dot) * inv).matrix();
                    }
                    view(gq + qo, lay.len, lay.dh, lay.d).noalias() += dP * K;
                    view(gk + ko, lay.keys, lay.dh, lay.d).noalias() += dP.transpose() * Q;
                }
    });
}

Var project(Var in, Var w) {
    const Shape& s = in.shape();
    t_macs += (in.value().size() / s.back()) * w.shape()[0] * w.shape()[1];
    return ad::linear(in, w);
}

Var with_delta(Var base, const std::optional<LoraVars>& adapter, const Config& cfg, Var x) {
    if (!adapter) return base;
    return ad::add(base, lora::apply_tokens(adapter->variant, lora::Dims::square(cfg.m, cfg.d), adapter->factors, x));
}

}  // namespace

std::string to_string(Variant v) {
    switch (v) {
        case Variant::Vanilla: return "vanilla";
        case Variant::CrossIntrinsic: return "cross";
        case Variant::QueryBroadcast: return "qb";
    }
    return "?";
}

Variant parse_variant(const std::string& text) {
    if (text == "vanilla") return Variant::Vanilla;
    if (text == "cross") return Variant::CrossIntrinsic;
    if (text == "qb") return Variant::QueryBroadcast;
    throw std::invalid_argument("unknown attention variant '" + text + "' (expected vanilla, cross or qb)");
}

void Config::validate() const {
    if (d == 0 || heads == 0 || m == 0) throw std::invalid_argument("attention: d, heads and m must be positive");
    if (d % heads != 0) throw std::invalid_argument(fmt::format("attention: d={} not divisible by heads={}", d, heads));
    if (color_index >= m) {
        throw std::invalid_argument(fmt::format("attention: color_index {} out of range for m={}", color_index, m));
    }
}

BlockWeights BlockWeights::random(const Config& cfg, Rng& rng) {
    cfg.validate();
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    auto draw = [&] {
        Tensor t({cfg.d, cfg.d});
        for (auto& x : t.data()) x = rng.uniform(-bound, bound);
        return t;
    };
    BlockWeights w;
    w.wq = draw();
    w.wk = draw();
    w.wv = draw();
    w.wo = draw();
    return w;
}

std::map<std::string, Tensor*> BlockWeights::named() {
    std::map<std::string, Tensor*> out{{"wq", &wq}, {"wk", &wk}, {"wv", &wv}, {"wo", &wo}};
    auto add = [&](std::optional<lora::Adapter>& a, const char* proj) {
        if (!a) return;
        for (auto& [name, t] : a->factors) out.emplace(fmt::format("lora_{}/{}", proj, name), &t);
    };
    add(lora_q, "q");
    add(lora_k, "k");
    add(lora_v, "v");
    return out;
}

BlockVars BlockWeights::on_tape(Tape& tape, bool trainable) const {
    return bind([&](const std::string&, const Tensor& t) { return trainable ? tape.leaf(t) : tape.constant(t); });
}

BlockVars BlockWeights::bind(const std::function<Var(const std::string&, const Tensor&)>& put) const {
    auto put_lora = [&](const std::optional<lora::Adapter>& a, const char* proj) -> std::optional<LoraVars> {
        if (!a) return std::nullopt;
        LoraVars lv{a->variant, {}};
        for (const auto& [name, t] : a->factors) lv.factors.emplace(name, put(fmt::format("lora_{}/{}", proj, name), t));
        return lv;
    };
    return BlockVars{put("wq", wq), put("wk", wk), put("wv", wv), put("wo", wo),
                     put_lora(lora_q, "q"), put_lora(lora_k, "k"), put_lora(lora_v, "v")};
}

Var forward(const Config& cfg, const BlockVars& w, Var x) {
    cfg.validate();
    const Shape& s = x.shape();
    if (s.size() != 3 || s[2] != cfg.d || s[0] % cfg.m != 0) {
        throw ShapeError(fmt::format("attention: input {} is not [G*{} x L x {}]", shape_string(s), cfg.m, cfg.d));
    }
    const bool qb = cfg.variant == Variant::QueryBroadcast;
    const bool cross = cfg.variant == Variant::CrossIntrinsic;
    const CoreLayout lay{s[0] / cfg.m, cfg.m, s[1], cfg.d, cfg.heads, cfg.head_dim(), cross ? cfg.m * s[1] : s[1],
                         qb, cross};

    Var q;
    if (qb && !w.lora_q) {
        q = project(ad::select_slices(x, cfg.m, cfg.color_index), w.wq);
    } else {
        q = with_delta(project(x, w.wq), w.lora_q, cfg, x);
        if (qb) q = ad::select_slices(q, cfg.m, cfg.color_index);
    }
    Var k = with_delta(project(x, w.wk), w.lora_k, cfg, x);
    Var v = with_delta(project(x, w.wv), w.lora_v, cfg, x);
    return project(attention_core(lay, q, k, v), w.wo);
}

Tensor forward(const Config& cfg, const BlockWeights& w, const Tensor& x) {
    Tape tape;
    return forward(cfg, w.on_tape(tape, false), tape.constant(x)).value();
}

std::uint64_t attention_flops(const Config& cfg, std::uint64_t L) {
    cfg.validate();
    const std::uint64_t M = cfg.m, d = cfg.d;
    const std::uint64_t proj = 2 * L * d * d;
    switch (cfg.variant) {
        case Variant::Vanilla:
        case Variant::CrossIntrinsic: return M * 4 * proj + score_value_flops(cfg, L);
        case Variant::QueryBroadcast: return (2 * M + 1) * proj + M * proj + score_value_flops(cfg, L);
    }
    return 0;
}

std::uint64_t score_value_flops(const Config& cfg, std::uint64_t L) {
    cfg.validate();
    const std::uint64_t M = cfg.m, d = cfg.d;
    const std::uint64_t keys = cfg.variant == Variant::CrossIntrinsic ? M * L : L;
    return M * 4 * L * keys * d;
}

std::uint64_t executed_macs() { return t_macs; }
void reset_executed_macs() { t_macs = 0; }

}  // namespace lumix::attention
