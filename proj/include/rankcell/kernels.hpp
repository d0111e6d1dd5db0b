#ifndef RANKCELL_KERNELS_HPP
#define RANKCELL_KERNELS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

/**
 * @file kernels.hpp
 *
 * @brief Dense kernels behind the transformer, in a serial reference form and an OpenMP form.
 *
 * Every output element is reduced by exactly one thread in a fixed order, so the parallel
 * kernels return bit-identical results to the serial ones for any thread count. The build
 * disables floating-point contraction, which keeps that true when the compiler vectorizes.
 *
 * Matrices are dense row-major spans; dimensions are passed explicitly.
 */

namespace rankcell::kernels {

namespace detail {

template<typename T>
inline T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
}

template<typename T>
inline T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2)));
    const T pdf = std::exp(T(-0.5) * x * x) * T(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
    return cdf + x * pdf;
}

template<typename T>
inline void layernorm_row(const T* x, const T* gain, const T* bias, T* y, T* mean_out, T* rstd_out, std::size_t n, T eps) {
    T mean = 0;
    for (std::size_t j = 0; j < n; ++j) {
        mean += x[j];
    }
    mean /= static_cast<T>(n);
    T var = 0;
    for (std::size_t j = 0; j < n; ++j) {
        const T d = x[j] - mean;
        var += d * d;
    }
    var /= static_cast<T>(n);
    const T rstd = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
        y[j] = (x[j] - mean) * rstd * gain[j] + bias[j];
    }
    *mean_out = mean;
    *rstd_out = rstd;
}

template<typename T>
inline void layernorm_backward_row(const T* dy, const T* x, const T* gain, T mean, T rstd, T* dx, std::size_t n) {
    T sum_dxhat = 0;
    T sum_dxhat_xhat = 0;
    for (std::size_t j = 0; j < n; ++j) {
        const T xhat = (x[j] - mean) * rstd;
        const T dxhat = dy[j] * gain[j];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
    }
    const T inv_n = T(1) / static_cast<T>(n);
    for (std::size_t j = 0; j < n; ++j) {
        const T xhat = (x[j] - mean) * rstd;
        const T dxhat = dy[j] * gain[j];
        dx[j] += rstd * (dxhat - sum_dxhat * inv_n - xhat * sum_dxhat_xhat * inv_n);
    }
}

/// Per-thread buffers for one (cell, head) pair: K^T, K, V, V^T and two length-`len` rows.
template<typename T>
struct AttentionScratch {
    std::vector<T> kt, k, v, vt, row, row2, dq, dk, dv;

    void resize(std::size_t len, std::size_t head_dim) {
        kt.resize(len * head_dim);
        k.resize(len * head_dim);
        v.resize(len * head_dim);
        vt.resize(len * head_dim);
        row.resize(len);
        row2.resize(len);
        dq.resize(head_dim);
        dk.resize(len * head_dim);
        dv.resize(len * head_dim);
    }
};

template<typename T>
inline void gather_head(const T* qkv, std::size_t len, std::size_t d_model, std::size_t head, std::size_t head_dim,
                        AttentionScratch<T>& s) {
    const std::size_t stride = 3 * d_model;
    const std::size_t ko = d_model + head * head_dim;
    const std::size_t vo = 2 * d_model + head * head_dim;
    for (std::size_t j = 0; j < len; ++j) {
        for (std::size_t e = 0; e < head_dim; ++e) {
            const T kv = qkv[j * stride + ko + e];
            const T vv = qkv[j * stride + vo + e];
            s.k[j * head_dim + e] = kv;
            s.kt[e * len + j] = kv;
            s.v[j * head_dim + e] = vv;
            s.vt[e * len + j] = vv;
        }
    }
}

/// One (cell, head) pair of masked softmax attention.
template<typename T>
inline void attention_pair(const T* qkv, const std::uint8_t* keep, T* probs, T* ctx, std::size_t len, std::size_t d_model,
                           std::size_t head, std::size_t head_dim, AttentionScratch<T>& s) {
    const std::size_t stride = 3 * d_model;
    const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
    const std::size_t qo = head * head_dim;
    gather_head(qkv, len, d_model, head, head_dim, s);
    for (std::size_t i = 0; i < len; ++i) {
        T* p = probs + i * len;
        const T* q = qkv + i * stride + qo;
        std::fill(p, p + len, T(0));
        for (std::size_t e = 0; e < head_dim; ++e) {
            const T qe = q[e];
            const T* kr = s.kt.data() + e * len;
            for (std::size_t j = 0; j < len; ++j) {
                p[j] += qe * kr[j];
            }
        }
        T max_s = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < len; ++j) {
            if (keep[j]) {
                p[j] *= scale;
                max_s = std::max(max_s, p[j]);
            }
        }
        T total = 0;
        for (std::size_t j = 0; j < len; ++j) {
            if (keep[j]) {
                p[j] = std::exp(p[j] - max_s);
                total += p[j];
            } else {
                p[j] = 0;
            }
        }
        T* out = ctx + i * d_model + qo;
        std::fill(out, out + head_dim, T(0));
        if (total > 0) {
            const T inv = T(1) / total;
            for (std::size_t j = 0; j < len; ++j) {
                p[j] *= inv;
                const T pj = p[j];
                const T* vr = s.v.data() + j * head_dim;
                for (std::size_t e = 0; e < head_dim; ++e) {
                    out[e] += pj * vr[e];
                }
            }
        }
    }
}

template<typename T>
inline void attention_backward_pair(const T* qkv, const std::uint8_t* keep, const T* probs, const T* dctx, T* dqkv,
                                    std::size_t len, std::size_t d_model, std::size_t head, std::size_t head_dim,
                                    AttentionScratch<T>& s) {
    const std::size_t stride = 3 * d_model;
    const T scale = T(1) / std::sqrt(static_cast<T>(head_dim));
    const std::size_t qo = head * head_dim;
    const std::size_t ko = d_model + head * head_dim;
    const std::size_t vo = 2 * d_model + head * head_dim;
    gather_head(qkv, len, d_model, head, head_dim, s);
    std::fill(s.dk.begin(), s.dk.end(), T(0));
    std::fill(s.dv.begin(), s.dv.end(), T(0));
    T* dp = s.row.data();
    T* ds = s.row2.data();
    for (std::size_t i = 0; i < len; ++i) {
        const T* p = probs + i * len;
        const T* dc = dctx + i * d_model + qo;
        std::fill(dp, dp + len, T(0));
        for (std::size_t e = 0; e < head_dim; ++e) {
            const T de = dc[e];
            const T* vr = s.vt.data() + e * len;
            for (std::size_t j = 0; j < len; ++j) {
                dp[j] += de * vr[j];
            }
        }
        T dot = 0;
        for (std::size_t j = 0; j < len; ++j) {
            dot += p[j] * dp[j];
        }
        for (std::size_t j = 0; j < len; ++j) {
            ds[j] = keep[j] ? p[j] * (dp[j] - dot) * scale : T(0);
        }
        const T* q = qkv + i * stride + qo;
        std::fill(s.dq.begin(), s.dq.end(), T(0));
        for (std::size_t j = 0; j < len; ++j) {
            const T pj = p[j];
            const T dsj = ds[j];
            const T* kr = s.k.data() + j * head_dim;
            T* dvr = s.dv.data() + j * head_dim;
            T* dkr = s.dk.data() + j * head_dim;
            for (std::size_t e = 0; e < head_dim; ++e) {
                dvr[e] += pj * dc[e];
                s.dq[e] += dsj * kr[e];
                dkr[e] += dsj * q[e];
            }
        }
        T* dq = dqkv + i * stride + qo;
        for (std::size_t e = 0; e < head_dim; ++e) {
            dq[e] += s.dq[e];
        }
    }
    for (std::size_t j = 0; j < len; ++j) {
        for (std::size_t e = 0; e < head_dim; ++e) {
            dqkv[j * stride + ko + e] += s.dk[j * head_dim + e];
            dqkv[j * stride + vo + e] += s.dv[j * head_dim + e];
        }
    }
}

}

namespace serial {

/// C = A B (or C += A B), A is m x k, B is k x n.
template<typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k, std::size_t n,
            bool accumulate = false) {
    if (!accumulate) {
        std::fill(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(m * n), T(0));
    }
    for (std::size_t i = 0; i < m; ++i) {
        T* ci = c.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[i * k + p];
            const T* bp = b.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                ci[j] += av * bp[j];
            }
        }
    }
}

/// C = A^T B (or C += A^T B), A is m x k, B is m x n, C is k x n.
template<typename T>
void matmul_at(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k, std::size_t n,
               bool accumulate = false) {
    if (!accumulate) {
        std::fill(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(k * n), T(0));
    }
    for (std::size_t r = 0; r < m; ++r) {
        const T* br = b.data() + r * n;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = a[r * k + p];
            T* cp = c.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                cp[j] += av * br[j];
            }
        }
    }
}

template<typename T>
void transpose(std::span<const T> a, std::span<T> out, std::size_t rows, std::size_t cols) {
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            out[j * rows + i] = a[i * cols + j];
        }
    }
}

/// C = A B^T, A is m x n, B is k x n, C is m x k.
template<typename T>
void matmul_bt(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t n, std::size_t k,
               bool accumulate = false) {
    std::vector<T> bt(n * k);
    transpose<T>(b, bt, k, n);
    matmul<T>(a, bt, c, m, n, k, accumulate);
}

template<typename T>
void add_row_vector(std::span<T> c, std::span<const T> v, std::size_t m, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        T* ci = c.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            ci[j] += v[j];
        }
    }
}

/// out += column sums of an m x n matrix.
template<typename T>
void add_column_sums(std::span<const T> a, std::span<T> out, std::size_t m, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const T* ai = a.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            out[j] += ai[j];
        }
    }
}

template<typename T>
void layernorm(std::span<const T> x, std::span<const T> gain, std::span<const T> bias, std::span<T> y, std::span<T> mean,
               std::span<T> rstd, std::size_t m, std::size_t n, T eps) {
    for (std::size_t i = 0; i < m; ++i) {
        detail::layernorm_row(x.data() + i * n, gain.data(), bias.data(), y.data() + i * n, &mean[i], &rstd[i], n, eps);
    }
}

/// dx += input gradient; dgain, dbias accumulate.
template<typename T>
void layernorm_backward(std::span<const T> dy, std::span<const T> x, std::span<const T> gain, std::span<const T> mean,
                        std::span<const T> rstd, std::span<T> dx, std::span<T> dgain, std::span<T> dbias, std::size_t m,
                        std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        detail::layernorm_backward_row(dy.data() + i * n, x.data() + i * n, gain.data(), mean[i], rstd[i], dx.data() + i * n, n);
    }
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const T xhat = (x[i * n + j] - mean[i]) * rstd[i];
            dgain[j] += dy[i * n + j] * xhat;
            dbias[j] += dy[i * n + j];
        }
    }
}

template<typename T>
void gelu(std::span<const T> x, std::span<T> y) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        y[i] = detail::gelu(x[i]);
    }
}

/// dx = dy * gelu'(x).
template<typename T>
void gelu_backward(std::span<const T> x, std::span<const T> dy, std::span<T> dx) {
    for (std::size_t i = 0; i < x.size(); ++i) {
        dx[i] = dy[i] * detail::gelu_grad(x[i]);
    }
}

/**
 * Multi-head attention over `batch` rows of `len` positions. `qkv` is (batch*len) x 3d with
 * query, key and value blocks; `keep` marks real (non-pad) positions. Writes softmax
 * probabilities (batch x heads x len x len, zero on padded keys) and the context (batch*len) x d.
 */
template<typename T>
void attention(std::span<const T> qkv, std::span<const std::uint8_t> keep, std::span<T> probs, std::span<T> ctx,
               std::size_t batch, std::size_t len, std::size_t d_model, std::size_t heads) {
    const std::size_t head_dim = d_model / heads;
    detail::AttentionScratch<T> scratch;
    scratch.resize(len, head_dim);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            detail::attention_pair(qkv.data() + b * len * 3 * d_model, keep.data() + b * len,
                                   probs.data() + (b * heads + h) * len * len, ctx.data() + b * len * d_model, len, d_model, h,
                                   head_dim, scratch);
        }
    }
}

/// Accumulates into `dqkv` (which must be zeroed by the caller).
template<typename T>
void attention_backward(std::span<const T> qkv, std::span<const std::uint8_t> keep, std::span<const T> probs,
                        std::span<const T> dctx, std::span<T> dqkv, std::size_t batch, std::size_t len, std::size_t d_model,
                        std::size_t heads) {
    const std::size_t head_dim = d_model / heads;
    detail::AttentionScratch<T> scratch;
    scratch.resize(len, head_dim);
    for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
            detail::attention_backward_pair(qkv.data() + b * len * 3 * d_model, keep.data() + b * len,
                                            probs.data() + (b * heads + h) * len * len, dctx.data() + b * len * d_model,
                                            dqkv.data() + b * len * 3 * d_model, len, d_model, h, head_dim, scratch);
        }
    }
}

}

namespace parallel {

/// Same contract and results as `serial::matmul`; rows are processed four at a time across threads.
template<typename T>
void matmul(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k, std::size_t n,
            bool accumulate = false) {
    const auto blocks = static_cast<std::ptrdiff_t>((m + 3) / 4);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t blk = 0; blk < blocks; ++blk) {
        const std::size_t i0 = static_cast<std::size_t>(blk) * 4;
        const std::size_t rows = std::min<std::size_t>(4, m - i0);
        T* c0 = c.data() + i0 * n;
        if (!accumulate) {
            std::fill(c0, c0 + rows * n, T(0));
        }
        if (rows == 4) {
            T* c1 = c0 + n;
            T* c2 = c1 + n;
            T* c3 = c2 + n;
            const T* a0 = a.data() + i0 * k;
            for (std::size_t p = 0; p < k; ++p) {
                const T v0 = a0[p], v1 = a0[k + p], v2 = a0[2 * k + p], v3 = a0[3 * k + p];
                const T* bp = b.data() + p * n;
                for (std::size_t j = 0; j < n; ++j) {
                    const T bv = bp[j];
                    c0[j] += v0 * bv;
                    c1[j] += v1 * bv;
                    c2[j] += v2 * bv;
                    c3[j] += v3 * bv;
                }
            }
        } else {
            for (std::size_t r = 0; r < rows; ++r) {
                T* ci = c0 + r * n;
                const T* ai = a.data() + (i0 + r) * k;
                for (std::size_t p = 0; p < k; ++p) {
                    const T av = ai[p];
                    const T* bp = b.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) {
                        ci[j] += av * bp[j];
                    }
                }
            }
        }
    }
}

/// Same contract and results as `serial::matmul_at`: A is transposed once, then each output row
/// accumulates over input rows in ascending order inside the blocked matmul.
template<typename T>
void matmul_at(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t k, std::size_t n,
               bool accumulate = false) {
    std::vector<T> at(m * k);
    serial::transpose<T>(a, at, m, k);
    matmul<T>(at, b, c, k, m, n, accumulate);
}

template<typename T>
void transpose(std::span<const T> a, std::span<T> out, std::size_t rows, std::size_t cols) {
    serial::transpose<T>(a, out, rows, cols);
}

template<typename T>
void matmul_bt(std::span<const T> a, std::span<const T> b, std::span<T> c, std::size_t m, std::size_t n, std::size_t k,
               bool accumulate = false) {
    std::vector<T> bt(n * k);
    serial::transpose<T>(b, bt, k, n);
    matmul<T>(a, bt, c, m, n, k, accumulate);
}

template<typename T>
void add_row_vector(std::span<T> c, std::span<const T> v, std::size_t m, std::size_t n) {
    const auto mm = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < mm; ++i) {
        T* ci = c.data() + static_cast<std::size_t>(i) * n;
        for (std::size_t j = 0; j < n; ++j) {
            ci[j] += v[j];
        }
    }
}

template<typename T>
void add_column_sums(std::span<const T> a, std::span<T> out, std::size_t m, std::size_t n) {
    serial::add_column_sums<T>(a, out, m, n);
}

template<typename T>
void layernorm(std::span<const T> x, std::span<const T> gain, std::span<const T> bias, std::span<T> y, std::span<T> mean,
               std::span<T> rstd, std::size_t m, std::size_t n, T eps) {
    const auto mm = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < mm; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        detail::layernorm_row(x.data() + i * n, gain.data(), bias.data(), y.data() + i * n, &mean[i], &rstd[i], n, eps);
    }
}

template<typename T>
void layernorm_backward(std::span<const T> dy, std::span<const T> x, std::span<const T> gain, std::span<const T> mean,
                        std::span<const T> rstd, std::span<T> dx, std::span<T> dgain, std::span<T> dbias, std::size_t m,
                        std::size_t n) {
    const auto mm = static_cast<std::ptrdiff_t>(m);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < mm; ++ii) {
        const auto i = static_cast<std::size_t>(ii);
        detail::layernorm_backward_row(dy.data() + i * n, x.data() + i * n, gain.data(), mean[i], rstd[i], dx.data() + i * n, n);
    }
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const T xhat = (x[i * n + j] - mean[i]) * rstd[i];
            dgain[j] += dy[i * n + j] * xhat;
            dbias[j] += dy[i * n + j];
        }
    }
}

template<typename T>
void gelu(std::span<const T> x, std::span<T> y) {
    const auto n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        y[static_cast<std::size_t>(i)] = detail::gelu(x[static_cast<std::size_t>(i)]);
    }
}

template<typename T>
void gelu_backward(std::span<const T> x, std::span<const T> dy, std::span<T> dx) {
    const auto n = static_cast<std::ptrdiff_t>(x.size());
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
        const auto u = static_cast<std::size_t>(i);
        dx[u] = dy[u] * detail::gelu_grad(x[u]);
    }
}

template<typename T>
void attention(std::span<const T> qkv, std::span<const std::uint8_t> keep, std::span<T> probs, std::span<T> ctx,
               std::size_t batch, std::size_t len, std::size_t d_model, std::size_t heads) {
    const std::size_t head_dim = d_model / heads;
    const auto pairs = static_cast<std::ptrdiff_t>(batch * heads);
#pragma omp parallel
    {
        detail::AttentionScratch<T> scratch;
        scratch.resize(len, head_dim);
#pragma omp for schedule(dynamic, 1)
        for (std::ptrdiff_t bh = 0; bh < pairs; ++bh) {
            const std::size_t b = static_cast<std::size_t>(bh) / heads;
            const std::size_t h = static_cast<std::size_t>(bh) % heads;
            detail::attention_pair(qkv.data() + b * len * 3 * d_model, keep.data() + b * len,
                                   probs.data() + (b * heads + h) * len * len, ctx.data() + b * len * d_model, len, d_model, h,
                                   head_dim, scratch);
        }
    }
}

template<typename T>
void attention_backward(std::span<const T> qkv, std::span<const std::uint8_t> keep, std::span<const T> probs,
                        std::span<const T> dctx, std::span<T> dqkv, std::size_t batch, std::size_t len, std::size_t d_model,
                        std::size_t heads) {
    const std::size_t head_dim = d_model / heads;
    const auto pairs = static_cast<std::ptrdiff_t>(batch * heads);
#pragma omp parallel
    {
        detail::AttentionScratch<T> scratch;
        scratch.resize(len, head_dim);
#pragma omp for schedule(dynamic, 1)
        for (std::ptrdiff_t bh = 0; bh < pairs; ++bh) {
            const std::size_t b = static_cast<std::size_t>(bh) / heads;
            const std::size_t h = static_cast<std::size_t>(bh) % heads;
            detail::attention_backward_pair(qkv.data() + b * len * 3 * d_model, keep.data() + b * len,
                                            probs.data() + (b * heads + h) * len * len, dctx.data() + b * len * d_model,
                                            dqkv.data() + b * len * 3 * d_model, len, d_model, h, head_dim, scratch);
        }
    }
}

}

}

#endif
