#include "lumix/lora.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/Core>
#include <fmt/format.h>

#include "lumix/contraction.hpp"

namespace lumix::lora {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using Idx = Eigen::Index;

ConstMatrixMap cmap(const double* p, std::size_t r, std::size_t c) {
    return ConstMatrixMap(p, static_cast<Idx>(r), static_cast<Idx>(c));
}
MatrixMap mmap(double* p, std::size_t r, std::size_t c) { return MatrixMap(p, static_cast<Idx>(r), static_cast<Idx>(c)); }

std::size_t diag_count(const Dims& d) { return std::min(d.m_in, d.n_out); }

void check_dims(const Variant& v, const Dims& d) {
    v.validate();
    if (d.m_in == 0 || d.n_out == 0 || d.d_in == 0 || d.d_out == 0) {
        throw std::invalid_argument("lora dims must be positive");
    }
    if (v.kind == Kind::Separate && d.m_in != d.n_out) {
        throw std::invalid_argument(
            fmt::format("separate lora is block-diagonal and needs M == N, got M={} N={}", d.m_in, d.n_out));
    }
}

}  // namespace

std::string to_string(Kind kind) {
    switch (kind) {
        case Kind::Separate: return "separate";
        case Kind::Fused: return "fused";
        case Kind::Hybrid: return "hybrid";
        case Kind::Tensor: return "tensor";
    }
    return "?";
}

Kind parse_kind(const std::string& text) {
    if (text == "separate" || text == "S") return Kind::Separate;
    if (text == "fused" || text == "F") return Kind::Fused;
    if (text == "hybrid" || text == "H") return Kind::Hybrid;
    if (text == "tensor" || text == "T") return Kind::Tensor;
    throw std::invalid_argument("unknown lora variant '" + text + "'");
}

void Variant::validate() const {
    if (rank == 0 || rank2 == 0) throw std::invalid_argument("lora ranks must be >= 1");
    if (kind == Kind::Hybrid && rank2 >= rank) {
        throw std::invalid_argument(
            fmt::format("hybrid lora needs off-diagonal rank < diagonal rank, got R1={} R2={}", rank, rank2));
    }
}

std::vector<std::pair<std::size_t, std::size_t>> hybrid_off_pairs(const Dims& dims) {
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t n = 0; n < dims.n_out; ++n)
        for (std::size_t m = 0; m < dims.m_in; ++m)
            if (n != m) pairs.emplace_back(n, m);
    return pairs;
}

std::vector<std::pair<std::string, Shape>> factor_shapes(const Variant& v, const Dims& d) {
    check_dims(v, d);
    switch (v.kind) {
        case Kind::Separate:
            return {{"A", {d.m_in, d.d_out, v.rank}}, {"B", {d.m_in, d.d_in, v.rank}}};
        case Kind::Fused:
            return {{"A", {d.n_out * d.d_out, v.rank}}, {"B", {d.m_in * d.d_in, v.rank}}};
        case Kind::Hybrid: {
            std::vector<std::pair<std::string, Shape>> out{{"A_diag", {diag_count(d), d.d_out, v.rank}},
                                                           {"B_diag", {diag_count(d), d.d_in, v.rank}}};
            const std::size_t p = hybrid_off_pairs(d).size();
            if (p > 0) {
                out.push_back({"A_off", {p, d.d_out, v.rank2}});
                out.push_back({"B_off", {p, d.d_in, v.rank2}});
            }
            return out;
        }
        case Kind::Tensor:
            return {{"A", {d.n_out, d.d_out, v.rank}},
                    {"B", {d.n_out, d.m_in, v.rank2}},
                    {"C", {d.n_out, d.d_in, v.rank, v.rank2}}};
    }
    return {};
}

Adapter Adapter::zeros(const Variant& variant, const Dims& dims) {
    Adapter a{variant, dims, {}};
    for (auto& [name, shape] : factor_shapes(variant, dims)) a.factors.emplace(name, Tensor(shape));
    return a;
}

Adapter Adapter::initialized(const Variant& variant, const Dims& dims, Rng& rng) {
    Adapter a = zeros(variant, dims);
    for (auto& [name, t] : a.factors) {
        double bound = 0.0;
        if (name[0] == 'A') {
            bound = 1.0 / std::sqrt(static_cast<double>(name == "A_off" ? variant.rank2 : variant.rank));
        } else if (name == "C") {
            bound = 1.0 / std::sqrt(static_cast<double>(dims.d_in));
        }
        if (bound > 0.0) {
            for (auto& x : t.data()) x = rng.uniform(-bound, bound);
        }
    }
    return a;
}

Adapter Adapter::random(const Variant& variant, const Dims& dims, Rng& rng, double scale) {
    Adapter a = zeros(variant, dims);
    for (auto& [name, t] : a.factors)
        for (auto& x : t.data()) x = rng.uniform(-scale, scale);
    return a;
}

const Tensor& Adapter::factor(const std::string& name) const {
    auto it = factors.find(name);
    if (it == factors.end()) throw std::out_of_range("adapter has no factor '" + name + "'");
    return it->second;
}

Tensor& Adapter::factor(const std::string& name) {
    auto it = factors.find(name);
    if (it == factors.end()) throw std::out_of_range("adapter has no factor '" + name + "'");
    return it->second;
}

Tensor apply(const Adapter& ad, const Tensor& h) {
    const Dims& d = ad.dims;
    if (h.rank() != 2 || h.extent(0) != d.m_in || h.extent(1) != d.d_in) {
        throw ShapeError(fmt::format("lora apply: input {} does not match adapter [{}x{}]", shape_string(h.shape()),
                                     d.m_in, d.d_in));
    }
    Tensor out({d.n_out, d.d_out});
    const std::size_t r = ad.variant.rank;
    switch (ad.variant.kind) {
        case Kind::Separate: {
            const Tensor& A = ad.factor("A");
            const Tensor& B = ad.factor("B");
            for (std::size_t m = 0; m < d.m_in; ++m) {
                RowMatrix z = cmap(h.raw() + m * d.d_in, 1, d.d_in) * cmap(B.raw() + m * d.d_in * r, d.d_in, r);
                mmap(out.raw() + m * d.d_out, 1, d.d_out).noalias() =
                    z * cmap(A.raw() + m * d.d_out * r, d.d_out, r).transpose();
            }
            break;
        }
        case Kind::Fused: {
            const Tensor& A = ad.factor("A");
            const Tensor& B = ad.factor("B");
            RowMatrix z = cmap(h.raw(), 1, d.m_in * d.d_in) * cmap(B.raw(), d.m_in * d.d_in, r);
            mmap(out.raw(), 1, d.n_out * d.d_out).noalias() = z * cmap(A.raw(), d.n_out * d.d_out, r).transpose();
            break;
        }
        case Kind::Hybrid: {
            auto add_pair = [&](const Tensor& A, const Tensor& B, std::size_t idx, std::size_t rank, std::size_t n,
                                std::size_t m) {
                RowMatrix z =
                    cmap(h.raw() + m * d.d_in, 1, d.d_in) * cmap(B.raw() + idx * d.d_in * rank, d.d_in, rank);
                mmap(out.raw() + n * d.d_out, 1, d.d_out).noalias() +=
                    z * cmap(A.raw() + idx * d.d_out * rank, d.d_out, rank).transpose();
            };
            for (std::size_t k = 0; k < diag_count(d); ++k) add_pair(ad.factor("A_diag"), ad.factor("B_diag"), k, r, k, k);
            const auto pairs = hybrid_off_pairs(d);
            for (std::size_t p = 0; p < pairs.size(); ++p) {
                add_pair(ad.factor("A_off"), ad.factor("B_off"), p, ad.variant.rank2, pairs[p].first, pairs[p].second);
            }
            break;
        }
        case Kind::Tensor:
            out = contract_tensor_lora_fused(ad.factor("A"), ad.factor("B"), ad.factor("C"), h);
            break;
    }
    return out;
}

Tensor materialize(const Adapter& ad) {
    const Dims& d = ad.dims;
    const std::size_t rows = d.n_out * d.d_out, cols = d.m_in * d.d_in;
    Tensor delta({rows, cols});
    auto block = [&](std::size_t n, std::size_t m) {
        return mmap(delta.raw(), rows, cols).block(static_cast<Idx>(n * d.d_out), static_cast<Idx>(m * d.d_in),
                                                   static_cast<Idx>(d.d_out), static_cast<Idx>(d.d_in));
    };
    const std::size_t r = ad.variant.rank;
    switch (ad.variant.kind) {
        case Kind::Separate: {
            const Tensor& A = ad.factor("A");
            const Tensor& B = ad.factor("B");
            for (std::size_t m = 0; m < d.m_in; ++m) {
                block(m, m) = cmap(A.raw() + m * d.d_out * r, d.d_out, r) *
                              cmap(B.raw() + m * d.d_in * r, d.d_in, r).transpose();
            }
            break;
        }
        case Kind::Fused:
            mmap(delta.raw(), rows, cols) = cmap(ad.factor("A").raw(), rows, r) * cmap(ad.factor("B").raw(), cols, r).transpose();
            break;
        case Kind::Hybrid: {
            for (std::size_t k = 0; k < diag_count(d); ++k) {
                block(k, k) = cmap(ad.factor("A_diag").raw() + k * d.d_out * r, d.d_out, r) *
                              cmap(ad.factor("B_diag").raw() + k * d.d_in * r, d.d_in, r).transpose();
            }
            const std::size_t r2 = ad.variant.rank2;
            const auto pairs = hybrid_off_pairs(d);
            for (std::size_t p = 0; p < pairs.size(); ++p) {
                block(pairs[p].first, pairs[p].second) =
                    cmap(ad.factor("A_off").raw() + p * d.d_out * r2, d.d_out, r2) *
                    cmap(ad.factor("B_off").raw() + p * d.d_in * r2, d.d_in, r2).transpose();
            }
            break;
        }
        case Kind::Tensor: {
            const Tensor& A = ad.factor("A");
            const Tensor& B = ad.factor("B");
            const Tensor& C = ad.factor("C");
            const std::size_t r1 = ad.variant.rank, r2 = ad.variant.rank2;
            // Δ[i, j, k, l] = Σ_{α1,α2} A[i,j,α1] B[i,k,α2] C[i,l,α1,α2]
            for (std::size_t i = 0; i < d.n_out; ++i) {
                for (std::size_t k = 0; k < d.m_in; ++k) {
                    // W[l, α1] = Σ_α2 B[i,k,α2] C[i,l,α1,α2]
                    RowMatrix w(static_cast<Idx>(d.d_in), static_cast<Idx>(r1));
                    for (std::size_t l = 0; l < d.d_in; ++l)
                        for (std::size_t a1 = 0; a1 < r1; ++a1) {
                            double acc = 0.0;
                            for (std::size_t a2 = 0; a2 < r2; ++a2)
                                acc += B[(i * d.m_in + k) * r2 + a2] * C[((i * d.d_in + l) * r1 + a1) * r2 + a2];
                            w(static_cast<Idx>(l), static_cast<Idx>(a1)) = acc;
                        }
                    block(i, k) = cmap(A.raw() + i * d.d_out * r1, d.d_out, r1) * w.transpose();
                }
            }
            break;
        }
    }
    return delta;
}

std::uint64_t param_count(const Variant& v, const Dims& d) {
    check_dims(v, d);
    const std::uint64_t r = v.rank, r2 = v.rank2;
    const std::uint64_t m = d.m_in, n = d.n_out, din = d.d_in, dout = d.d_out;
    switch (v.kind) {
        case Kind::Separate: return m * r * (din + dout);
        case Kind::Fused: return r * (m * din + n * dout);
        case Kind::Hybrid: {
            const std::uint64_t diag = std::min(m, n);
            return diag * r * (din + dout) + (m * n - diag) * r2 * (din + dout);
        }
        case Kind::Tensor: return n * dout * r + n * m * r2 + n * din * r * r2;
    }
    return 0;
}

std::uint64_t flops_count(const Variant& v, const Dims& d, std::uint64_t tokens, std::uint64_t projections) {
    check_dims(v, d);
    const std::uint64_t r = v.rank, r2 = v.rank2;
    const std::uint64_t m = d.m_in, n = d.n_out, din = d.d_in, dout = d.d_out;
    std::uint64_t per_token = 0;
    switch (v.kind) {
        case Kind::Separate: per_token = m * 2 * r * (din + dout); break;
        case Kind::Fused: per_token = 2 * r * (m * din + n * dout); break;
        case Kind::Hybrid: {
            const std::uint64_t diag = std::min(m, n);
            per_token = diag * 2 * r * (din + dout) + (m * n - diag) * 2 * r2 * (din + dout);
            break;
        }
        case Kind::Tensor: per_token = 2 * n * m * din * r * r2 + 2 * n * m * r * r2 + 2 * n * dout * r; break;
    }
    return per_token * tokens * projections;
}

namespace {

struct TokenLayout {
    std::size_t groups, tokens;
};

TokenLayout token_layout(const Tensor& x, const Dims& d) {
    if (x.rank() != 3 || x.extent(2) != d.d_in || x.extent(0) % d.m_in != 0) {
        throw ShapeError(fmt::format("lora: input {} does not match [G*{} x L x {}]", shape_string(x.shape()), d.m_in,
                                     d.d_in));
    }
    return {x.extent(0) / d.m_in, x.extent(1)};
}

Var factor_var(const std::map<std::string, Var>& factors, const std::string& name, const Shape& shape) {
    auto it = factors.find(name);
    if (it == factors.end()) throw std::invalid_argument("lora: missing factor Var '" + name + "'");
    if (it->second.shape() != shape) {
        throw ShapeError(fmt::format("lora: factor {} has shape {}, expected {}", name,
                                     shape_string(it->second.shape()), shape_string(shape)));
    }
    return it->second;
}

// One low-rank block: y_n += (x_m B) A^T, for every group.
struct LowRankTerm {
    std::size_t n, m;         // output / input stream
    std::size_t a_off, b_off; // element offsets into A / B
    std::size_t rank;
    std::size_t a_factor, b_factor;  // indices into the Var list
};

Var low_rank_sum(const Dims& d, const std::vector<Var>& vars, std::vector<LowRankTerm> terms, Var x) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.value();
    const auto lay = token_layout(xv, d);
    const std::size_t L = lay.tokens;
    Tensor out({lay.groups * d.n_out, L, d.d_out});
    for (std::size_t g = 0; g < lay.groups; ++g) {
        for (const auto& t : terms) {
            const double* xs = xv.raw() + (g * d.m_in + t.m) * L * d.d_in;
            double* ys = out.raw() + (g * d.n_out + t.n) * L * d.d_out;
            RowMatrix z = cmap(xs, L, d.d_in) * cmap(vars[t.b_factor].value().raw() + t.b_off, d.d_in, t.rank);
            mmap(ys, L, d.d_out).noalias() += z * cmap(vars[t.a_factor].value().raw() + t.a_off, d.d_out, t.rank).transpose();
        }
    }
    std::vector<Var> inputs = vars;
    inputs.push_back(x);
    return tape.record(std::move(out), inputs, [d, vars, terms = std::move(terms), x, lay](Tape& tp, const Tensor& g) {
        const Tensor& xv = tp.value(x);
        const std::size_t L = lay.tokens;
        Tensor* gx = tp.requires_grad(x) ? &tp.grad_buffer(x) : nullptr;
        for (std::size_t grp = 0; grp < lay.groups; ++grp) {
            for (const auto& t : terms) {
                const Var a = vars[t.a_factor], b = vars[t.b_factor];
                const auto A = cmap(tp.value(a).raw() + t.a_off, d.d_out, t.rank);
                const auto B = cmap(tp.value(b).raw() + t.b_off, d.d_in, t.rank);
                const auto X = cmap(xv.raw() + (grp * d.m_in + t.m) * L * d.d_in, L, d.d_in);
                const auto G = cmap(g.raw() + (grp * d.n_out + t.n) * L * d.d_out, L, d.d_out);
                RowMatrix z = X * B;
                RowMatrix dz = G * A;
                if (tp.requires_grad(a)) mmap(tp.grad_buffer(a).raw() + t.a_off, d.d_out, t.rank).noalias() += G.transpose() * z;
                if (tp.requires_grad(b)) mmap(tp.grad_buffer(b).raw() + t.b_off, d.d_in, t.rank).noalias() += X.transpose() * dz;
                if (gx) mmap(gx->raw() + (grp * d.m_in + t.m) * L * d.d_in, L, d.d_in).noalias() += dz * B.transpose();
            }
        }
    });
}

Var fused_tokens(const Variant& v, const Dims& d, Var A, Var B, Var x) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.value();
    const auto lay = token_layout(xv, d);
    const std::size_t L = lay.tokens, r = v.rank;
    Tensor out({lay.groups * d.n_out, L, d.d_out});
    for (std::size_t g = 0; g < lay.groups; ++g) {
        RowMatrix z = RowMatrix::Zero(static_cast<Idx>(L), static_cast<Idx>(r));
        for (std::size_t m = 0; m < d.m_in; ++m) {
            z.noalias() += cmap(xv.raw() + (g * d.m_in + m) * L * d.d_in, L, d.d_in) *
                           cmap(B.value().raw() + m * d.d_in * r, d.d_in, r);
        }
        for (std::size_t n = 0; n < d.n_out; ++n) {
            mmap(out.raw() + (g * d.n_out + n) * L * d.d_out, L, d.d_out).noalias() =
                z * cmap(A.value().raw() + n * d.d_out * r, d.d_out, r).transpose();
        }
    }
    return tape.record(std::move(out), {A, B, x}, [d, r, A, B, x, lay](Tape& tp, const Tensor& g) {
        const Tensor& xv = tp.value(x);
        const std::size_t L = lay.tokens;
        for (std::size_t grp = 0; grp < lay.groups; ++grp) {
            RowMatrix z = RowMatrix::Zero(static_cast<Idx>(L), static_cast<Idx>(r));
            for (std::size_t m = 0; m < d.m_in; ++m) {
                z.noalias() += cmap(xv.raw() + (grp * d.m_in + m) * L * d.d_in, L, d.d_in) *
                               cmap(tp.value(B).raw() + m * d.d_in * r, d.d_in, r);
            }
            RowMatrix dz = RowMatrix::Zero(static_cast<Idx>(L), static_cast<Idx>(r));
            for (std::size_t n = 0; n < d.n_out; ++n) {
                const auto G = cmap(g.raw() + (grp * d.n_out + n) * L * d.d_out, L, d.d_out);
                const auto An = cmap(tp.value(A).raw() + n * d.d_out * r, d.d_out, r);
                dz.noalias() += G * An;
                if (tp.requires_grad(A)) mmap(tp.grad_buffer(A).raw() + n * d.d_out * r, d.d_out, r).noalias() += G.transpose() * z;
            }
            for (std::size_t m = 0; m < d.m_in; ++m) {
                const auto X = cmap(xv.raw() + (grp * d.m_in + m) * L * d.d_in, L, d.d_in);
                const auto Bm = cmap(tp.value(B).raw() + m * d.d_in * r, d.d_in, r);
                if (tp.requires_grad(B)) mmap(tp.grad_buffer(B).raw() + m * d.d_in * r, d.d_in, r).noalias() += X.transpose() * dz;
                if (tp.requires_grad(x)) mmap(tp.grad_buffer(x).raw() + (grp * d.m_in + m) * L * d.d_in, L, d.d_in).noalias() += dz * Bm.transpose();
            }
        }
    });
}

Var tensor_tokens(const Variant& v, const Dims& d, Var A, Var B, Var C, Var x) {
    Tape& tape = *x.tape;
    const Tensor& xv = x.value();
    const auto lay = token_layout(xv, d);
    const std::size_t L = lay.tokens;
    const TensorLoraDims kd{d.n_out, d.m_in, d.d_in, d.d_out, v.rank, v.rank2};
    Tensor out({lay.groups * d.n_out, L, d.d_out});
    std::vector<double> h(d.m_in * d.d_in), y(d.n_out * d.d_out);
    for (std::size_t g = 0; g < lay.groups; ++g) {
        for (std::size_t l = 0; l < L; ++l) {
            for (std::size_t m = 0; m < d.m_in; ++m)
                std::copy_n(xv.raw() + ((g * d.m_in + m) * L + l) * d.d_in, d.d_in, h.data() + m * d.d_in);
            kernels::tensor_lora_fused<double>(kd, A.value().raw(), B.value().raw(), C.value().raw(), h.data(),
                                               y.data());
            for (std::size_t n = 0; n < d.n_out; ++n)
                std::copy_n(y.data() + n * d.d_out, d.d_out, out.raw() + ((g * d.n_out + n) * L + l) * d.d_out);
        }
    }
    return tape.record(std::move(out), {A, B, C, x}, [d, kd, A, B, C, x, lay](Tape& tp, const Tensor& g) {
        const Tensor& xv = tp.value(x);
        const Tensor& Av = tp.value(A);
        const Tensor& Bv = tp.value(B);
        const Tensor& Cv = tp.value(C);
        const std::size_t L = lay.tokens, r1 = kd.r1, r2 = kd.r2, rr = r1 * r2, ML = d.m_in * L;
        const bool gA = tp.requires_grad(A), gB = tp.requires_grad(B), gC = tp.requires_grad(C),
                   gX = tp.requires_grad(x);
        double* gBp = gB ? tp.grad_buffer(B).raw() : nullptr;
        for (std::size_t grp = 0; grp < lay.groups; ++grp) {
            // rows (m*L + l) of the group's stacked tokens
            const auto X = cmap(xv.raw() + grp * ML * d.d_in, ML, d.d_in);
            for (std::size_t n = 0; n < d.n_out; ++n) {
                const auto Cn = cmap(Cv.raw() + n * d.d_in * rr, d.d_in, rr);
                const auto An = cmap(Av.raw() + n * d.d_out * r1, d.d_out, r1);
                const auto G = cmap(g.raw() + (grp * d.n_out + n) * L * d.d_out, L, d.d_out);
                RowMatrix ch = X * Cn;  // [M*L, R1*R2]
                RowMatrix bch = RowMatrix::Zero(static_cast<Idx>(L), static_cast<Idx>(r1));
                for (std::size_t m = 0; m < d.m_in; ++m)
                    for (std::size_t l = 0; l < L; ++l)
                        for (std::size_t a1 = 0; a1 < r1; ++a1)
                            for (std::size_t a2 = 0; a2 < r2; ++a2)
                                bch(static_cast<Idx>(l), static_cast<Idx>(a1)) +=
                                    Bv[(n * d.m_in + m) * r2 + a2] *
                                    ch(static_cast<Idx>(m * L + l), static_cast<Idx>(a1 * r2 + a2));
                if (gA) mmap(tp.grad_buffer(A).raw() + n * d.d_out * r1, d.d_out, r1).noalias() += G.transpose() * bch;
                RowMatrix dbch = G * An;  // [L, R1]
                RowMatrix dch(static_cast<Idx>(ML), static_cast<Idx>(rr));
                for (std::size_t m = 0; m < d.m_in; ++m)
                    for (std::size_t l = 0; l < L; ++l)
                        for (std::size_t a1 = 0; a1 < r1; ++a1) {
                            const double db = dbch(static_cast<Idx>(l), static_cast<Idx>(a1));
                            for (std::size_t a2 = 0; a2 < r2; ++a2) {
                                const Idx row = static_cast<Idx>(m * L + l), col = static_cast<Idx>(a1 * r2 + a2);
                                dch(row, col) = db * Bv[(n * d.m_in + m) * r2 + a2];
                                if (gBp) gBp[(n * d.m_in + m) * r2 + a2] += db * ch(row, col);
                            }
                        }
                if (gC) mmap(tp.grad_buffer(C).raw() + n * d.d_in * rr, d.d_in, rr).noalias() += X.transpose() * dch;
                if (gX) mmap(tp.grad_buffer(x).raw() + grp * ML * d.d_in, ML, d.d_in).noalias() += dch * Cn.transpose();
            }
        }
    });
}

}  // namespace

Var apply_tokens(const Variant& v, const Dims& d, const std::map<std::string, Var>& factors, Var x) {
    const auto shapes = factor_shapes(v, d);
    std::vector<Var> vars;
    for (const auto& [name, shape] : shapes) vars.push_back(factor_var(factors, name, shape));
    if (x.tape == nullptr) throw GradError("lora: input Var has no tape");
    for (const auto& var : vars) {
        if (var.tape != x.tape) throw GradError("lora: factors and input recorded on different tapes");
    }
    token_layout(x.value(), d);
    const std::size_t r = v.rank;
    switch (v.kind) {
        case Kind::Separate: {
            std::vector<LowRankTerm> terms;
            for (std::size_t m = 0; m < d.m_in; ++m) terms.push_back({m, m, m * d.d_out * r, m * d.d_in * r, r, 0, 1});
            return low_rank_sum(d, vars, std::move(terms), x);
        }
        case Kind::Fused: return fused_tokens(v, d, vars[0], vars[1], x);
        case Kind::Hybrid: {
            std::vector<LowRankTerm> terms;
            for (std::size_t k = 0; k < diag_count(d); ++k) terms.push_back({k, k, k * d.d_out * r, k * d.d_in * r, r, 0, 1});
            const auto pairs = hybrid_off_pairs(d);
            const std::size_t r2 = v.rank2;
            for (std::size_t p = 0; p < pairs.size(); ++p) {
                terms.push_back({pairs[p].first, pairs[p].second, p * d.d_out * r2, p * d.d_in * r2, r2, 2, 3});
            }
            return low_rank_sum(d, vars, std::move(terms), x);
        }
        case Kind::Tensor: return tensor_tokens(v, d, vars[0], vars[1], vars[2], x);
    }
    throw std::logic_error("unreachable");
}

}  // namespace lumix::lora
