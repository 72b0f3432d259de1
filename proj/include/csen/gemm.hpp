#pragma once

#include <cstdint>

namespace csen {

// Row-major GEMM kernels. The 4-row outer-product form keeps the inner loop
// over contiguous B/C rows, which the compiler vectorizes well. Accumulation
// order per output element is fixed, so results are bit-reproducible.

// C (m x n) = [beta ? C : 0] + A (m x k) * B (k x n)
template <typename S>
void gemm_nn(std::int64_t m, std::int64_t n, std::int64_t k,
             const S* a, const S* b, S* c, bool accumulate = false) {
    if (!accumulate) {
        for (std::int64_t i = 0; i < m * n; ++i) c[i] = S(0);
    }
    std::int64_t i = 0;
    for (; i + 4 <= m; i += 4) {
        for (std::int64_t p = 0; p < k; ++p) {
            const S a0 = a[(i + 0) * k + p];
            const S a1 = a[(i + 1) * k + p];
            const S a2 = a[(i + 2) * k + p];
            const S a3 = a[(i + 3) * k + p];
            const S* br = b + p * n;
            S* c0 = c + (i + 0) * n;
            S* c1 = c + (i + 1) * n;
            S* c2 = c + (i + 2) * n;
            S* c3 = c + (i + 3) * n;
            for (std::int64_t j = 0; j < n; ++j) {
                const S bv = br[j];
                c0[j] += a0 * bv;
                c1[j] += a1 * bv;
                c2[j] += a2 * bv;
                c3[j] += a3 * bv;
            }
        }
    }
    for (; i < m; ++i) {
        for (std::int64_t p = 0; p < k; ++p) {
            const S av = a[i * k + p];
            const S* br = b + p * n;
            S* cr = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// C (m x n) = [C +] A (m x k) * B^T, with B stored (n x k)
template <typename S>
void gemm_nt(std::int64_t m, std::int64_t n, std::int64_t k,
             const S* a, const S* b, S* c, bool accumulate = false) {
    for (std::int64_t i = 0; i < m; ++i) {
        const S* ar = a + i * k;
        S* cr = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) {
            const S* br = b + j * k;
            S acc = S(0);
            for (std::int64_t p = 0; p < k; ++p) acc += ar[p] * br[p];
            cr[j] = accumulate ? cr[j] + acc : acc;
        }
    }
}

// C (m x n) = [C +] A^T * B, with A stored (k x m), B stored (k x n)
template <typename S>
void gemm_tn(std::int64_t m, std::int64_t n, std::int64_t k,
             const S* a, const S* b, S* c, bool accumulate = false) {
    if (!accumulate) {
        for (std::int64_t i = 0; i < m * n; ++i) c[i] = S(0);
    }
    for (std::int64_t p = 0; p < k; ++p) {
        const S* ar = a + p * m;
        const S* br = b + p * n;
        for (std::int64_t i = 0; i < m; ++i) {
            const S av = ar[i];
            S* cr = c + i * n;
            for (std::int64_t j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

}  // namespace csen
