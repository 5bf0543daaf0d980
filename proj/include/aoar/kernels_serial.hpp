#pragma once

// Plain reference kernels. Same contracts as kernels.hpp, written as the
// textbook loops with no tiling, threading or fused arithmetic. Tests compare
// the optimized kernels against these; the benchmark measures both.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <vector>

#include "aoar/kernels.hpp"

namespace aoar::kernels::serial {

template <class T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            T s = accumulate ? c[i * n + j] : T{};
            for (int p = 0; p < k; ++p) {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
}

template <class T>
void matmul_at_b(const T* a, const T* b, T* c, int m, int k, int n) {
    for (int r = 0; r < k; ++r) {
        for (int j = 0; j < n; ++j) {
            T s = c[r * n + j];
            for (int p = 0; p < m; ++p) {
                s += a[p * k + r] * b[p * n + j];
            }
            c[r * n + j] = s;
        }
    }
}

template <class T>
void matmul_a_bt(const T* a, const T* b, T* c, int m, int n, int k, bool accumulate = false) {
    for (int i = 0; i < m; ++i) {
        for (int r = 0; r < k; ++r) {
            T s = accumulate ? c[i * k + r] : T{};
            for (int j = 0; j < n; ++j) {
                s += a[i * n + j] * b[r * n + j];
            }
            c[i * k + r] = s;
        }
    }
}

template <class T>
void layernorm_forward(const T* x, const T* gain, const T* bias, T* y, T* xhat, T* rstd, int rows, int cols) {
    for (int i = 0; i < rows; ++i) {
        T mean = 0;
        for (int j = 0; j < cols; ++j) mean += x[i * cols + j];
        mean /= cols;
        T var = 0;
        for (int j = 0; j < cols; ++j) var += (x[i * cols + j] - mean) * (x[i * cols + j] - mean);
        var /= cols;
        rstd[i] = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEps));
        for (int j = 0; j < cols; ++j) {
            xhat[i * cols + j] = (x[i * cols + j] - mean) * rstd[i];
            y[i * cols + j] = xhat[i * cols + j] * gain[j] + bias[j];
        }
    }
}

template <class T>
void layernorm_backward(const T* dxhat, const T* xhat, const T* rstd, T* dx, int rows, int cols) {
    for (int i = 0; i < rows; ++i) {
        T mg = 0;
        T mgh = 0;
        for (int j = 0; j < cols; ++j) {
            mg += dxhat[i * cols + j];
            mgh += dxhat[i * cols + j] * xhat[i * cols + j];
        }
        mg /= cols;
        mgh /= cols;
        for (int j = 0; j < cols; ++j) {
            dx[i * cols + j] += rstd[i] * (dxhat[i * cols + j] - mg - xhat[i * cols + j] * mgh);
        }
    }
}

template <class T>
void attention_forward(const AttentionArgs<T>& a, T* out, std::ptrdiff_t out_stride, T* probs) {
    const T scale = T(1) / std::sqrt(static_cast<T>(a.head_dim));
    std::vector<T> w(static_cast<std::size_t>(a.n_key));
    for (int h = 0; h < a.heads; ++h) {
        for (int i = 0; i < a.n_query; ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            for (int j = 0; j < a.n_key; ++j) {
                if (!a.mask[i * a.n_key + j]) continue;
                T s = 0;
                for (int d = 0; d < a.head_dim; ++d) {
                    s += a.q[i * a.q_stride + h * a.head_dim + d] * a.k[j * a.kv_stride + h * a.head_dim + d];
                }
                w[j] = s * scale;
                mx = std::max(mx, w[j]);
            }
            T sum = 0;
            for (int j = 0; j < a.n_key; ++j) {
                w[j] = a.mask[i * a.n_key + j] ? std::exp(w[j] - mx) : T{};
                sum += w[j];
            }
            for (int d = 0; d < a.head_dim; ++d) {
                T acc = 0;
                for (int j = 0; j < a.n_key; ++j) acc += w[j] / sum * a.v[j * a.kv_stride + h * a.head_dim + d];
                out[i * out_stride + h * a.head_dim + d] = acc;
            }
            if (probs) {
                for (int j = 0; j < a.n_key; ++j) probs[(h * a.n_query + i) * a.n_key + j] = w[j] / sum;
            }
        }
    }
}

template <class T>
void attention_backward(const AttentionArgs<T>& a, const T* probs, const T* dout, std::ptrdiff_t dout_stride, T* dq,
                        T* dk, T* dv) {
    const T scale = T(1) / std::sqrt(static_cast<T>(a.head_dim));
    std::vector<T> dp(static_cast<std::size_t>(a.n_key));
    for (int h = 0; h < a.heads; ++h) {
        for (int i = 0; i < a.n_query; ++i) {
            const T* p = probs + (h * a.n_query + i) * a.n_key;
            T inner = 0;
            for (int j = 0; j < a.n_key; ++j) {
                T s = 0;
                for (int d = 0; d < a.head_dim; ++d) {
                    s += dout[i * dout_stride + h * a.head_dim + d] * a.v[j * a.kv_stride + h * a.head_dim + d];
                }
                dp[j] = s;
                inner += p[j] * s;
            }
            for (int j = 0; j < a.n_key; ++j) {
                if (!a.mask[i * a.n_key + j]) continue;
                const T ds = p[j] * (dp[j] - inner) * scale;
                for (int d = 0; d < a.head_dim; ++d) {
                    dq[i * a.q_stride + h * a.head_dim + d] += ds * a.k[j * a.kv_stride + h * a.head_dim + d];
                    dk[j * a.kv_stride + h * a.head_dim + d] += ds * a.q[i * a.q_stride + h * a.head_dim + d];
                    dv[j * a.kv_stride + h * a.head_dim + d] += p[j] * dout[i * dout_stride + h * a.head_dim + d];
                }
            }
        }
    }
}

}  // namespace aoar::kernels::serial
