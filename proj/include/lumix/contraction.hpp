#pragma once

// Scalar-generic kernels behind the Tensor LoRA contractions. They are
// templates so the multiply-add count of the exact production loop nest can
// be tallied with an instrumented scalar type.

#include <cstddef>
#include <vector>

#include "lumix/tensor.hpp"

namespace lumix::kernels {

// Layouts: A[n][o][r], B[n][m][s], C[n][l][r][s], h[m][l], out[n][o].
template <typename T>
void tensor_lora_3step(const TensorLoraDims& dims, const T* a, const T* b, const T* c, const T* h, T* out) {
    const std::size_t n_out = dims.n_out, m_in = dims.m_in, d_in = dims.d_in, d_out = dims.d_out;
    const std::size_t r1 = dims.r1, r2 = dims.r2, rr = r1 * r2;

    // Ch = einsum('ndrs, md -> nmrs', C, h)
    std::vector<T> ch(n_out * m_in * rr, T(0));
    for (std::size_t n = 0; n < n_out; ++n) {
        for (std::size_t m = 0; m < m_in; ++m) {
            T* dst = ch.data() + (n * m_in + m) * rr;
            for (std::size_t l = 0; l < d_in; ++l) {
                const T hv = h[m * d_in + l];
                const T* src = c + (n * d_in + l) * rr;
                for (std::size_t k = 0; k < rr; ++k) dst[k] += src[k] * hv;
            }
        }
    }

    // BCh = einsum('nms, nmrs -> nr', B, Ch)
    std::vector<T> bch(n_out * r1, T(0));
    for (std::size_t n = 0; n < n_out; ++n) {
        for (std::size_t m = 0; m < m_in; ++m) {
            const T* chv = ch.data() + (n * m_in + m) * rr;
            for (std::size_t r = 0; r < r1; ++r) {
                for (std::size_t s = 0; s < r2; ++s) {
                    bch[n * r1 + r] += b[(n * m_in + m) * r2 + s] * chv[r * r2 + s];
                }
            }
        }
    }

    // ABCh = einsum('ndr, nr -> nd', A, BCh)
    for (std::size_t n = 0; n < n_out; ++n) {
        for (std::size_t o = 0; o < d_out; ++o) {
            T acc(0);
            for (std::size_t r = 0; r < r1; ++r) acc += a[(n * d_out + o) * r1 + r] * bch[n * r1 + r];
            out[n * d_out + o] = acc;
        }
    }
}

// einsum('ndrs, md, nms, ndr -> nd', C, h, B, A) as one loop nest. The only
// scratch is an R1*R2 accumulator reused for every (n, m).
template <typename T>
void tensor_lora_fused(const TensorLoraDims& dims, const T* a, const T* b, const T* c, const T* h, T* out) {
    const std::size_t n_out = dims.n_out, m_in = dims.m_in, d_in = dims.d_in, d_out = dims.d_out;
    const std::size_t r1 = dims.r1, r2 = dims.r2, rr = r1 * r2;

    std::vector<T> acc_rs(rr);
    std::vector<T> acc_r(r1);
    for (std::size_t n = 0; n < n_out; ++n) {
        for (std::size_t r = 0; r < r1; ++r) acc_r[r] = T(0);
        for (std::size_t m = 0; m < m_in; ++m) {
            for (std::size_t k = 0; k < rr; ++k) acc_rs[k] = T(0);
            for (std::size_t l = 0; l < d_in; ++l) {
                const T hv = h[m * d_in + l];
                const T* src = c + (n * d_in + l) * rr;
                for (std::size_t k = 0; k < rr; ++k) acc_rs[k] += src[k] * hv;
            }
            const T* bv = b + (n * m_in + m) * r2;
            for (std::size_t r = 0; r < r1; ++r) {
                for (std::size_t s = 0; s < r2; ++s) acc_r[r] += bv[s] * acc_rs[r * r2 + s];
            }
        }
        for (std::size_t o = 0; o < d_out; ++o) {
            T acc(0);
            for (std::size_t r = 0; r < r1; ++r) acc += a[(n * d_out + o) * r1 + r] * acc_r[r];
            out[n * d_out + o] = acc;
        }
    }
}

}  // namespace lumix::kernels
