#include "lumix/tensor.hpp"

#include <cmath>

#if defined(__AVX2__) && defined(__FMA__)
#include <immintrin.h>
#endif

namespace lumix {

namespace {

// Every output element is acc = fma(x[k], w[k], acc) for k = 0..K-1, whatever
// the tile it lands in, so rows never see their neighbours.
template <int R>
void scalar_columns(const double* x, std::size_t K, const double* w, std::size_t N, double* o, std::size_t j0) {
    for (std::size_t j = j0; j < N; ++j)
        for (int r = 0; r < R; ++r) {
            double acc = 0.0;
            for (std::size_t k = 0; k < K; ++k) acc = std::fma(x[r * K + k], w[k * N + j], acc);
            o[r * N + j] = acc;
        }
}

#if defined(__AVX2__) && defined(__FMA__)

template <int R, int C>
void tile(const double* x, std::size_t K, const double* w, std::size_t N, double* o) {
    __m256d acc[R][C];
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) acc[r][c] = _mm256_setzero_pd();
    for (std::size_t k = 0; k < K; ++k) {
        __m256d wk[C];
        for (int c = 0; c < C; ++c) wk[c] = _mm256_loadu_pd(w + k * N + 4 * c);
        for (int r = 0; r < R; ++r) {
            const __m256d a = _mm256_broadcast_sd(x + r * K + k);
            for (int c = 0; c < C; ++c) acc[r][c] = _mm256_fmadd_pd(a, wk[c], acc[r][c]);
        }
    }
    for (int r = 0; r < R; ++r)
        for (int c = 0; c < C; ++c) _mm256_storeu_pd(o + r * N + 4 * c, acc[r][c]);
}

template <int R>
void row_block(const double* x, std::size_t K, const double* w, std::size_t N, double* o) {
    std::size_t j = 0;
    for (; j + 8 <= N; j += 8) tile<R, 2>(x, K, w + j, N, o + j);
    for (; j + 4 <= N; j += 4) tile<R, 1>(x, K, w + j, N, o + j);
    scalar_columns<R>(x, K, w, N, o, j);
}

#else

template <int R>
void row_block(const double* x, std::size_t K, const double* w, std::size_t N, double* o) {
    scalar_columns<R>(x, K, w, N, o, 0);
}

#endif

}  // namespace

void rowwise_product(const double* x, const double* w, double* out, std::size_t rows, std::size_t k, std::size_t n) {
    std::size_t i = 0;
    for (; i + 6 <= rows; i += 6) row_block<6>(x + i * k, k, w, n, out + i * n);
    for (; i < rows; ++i) row_block<1>(x + i * k, k, w, n, out + i * n);
}

}  // namespace lumix
