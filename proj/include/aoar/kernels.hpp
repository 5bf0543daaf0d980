#pragma once

// OpenMP kernels used by the transformer. Every kernel here parallelizes over
// output rows or (head, row) pairs only; each output element is reduced in a
// fixed sequential order, so the value computed for a row never depends on
// how many other rows share the call. The cached and full-recompute decoding
// paths rely on that to produce bit-identical logits.
//
// Straightforward reference versions live in kernels_serial.hpp and are used
// by the tests and the kernel benchmark.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <type_traits>
#include <vector>

#include <omp.h>

namespace aoar::kernels {

// Deterministic mode keeps every reduction serial. When it is off, reductions
// over long token axes may be split across threads and summed afterwards.
void set_deterministic(bool on);
bool deterministic();

namespace detail {

template <class T>
struct VecOf;
template <>
struct VecOf<float> {
    typedef float type __attribute__((vector_size(64)));  // one 512-bit register
    typedef float unaligned __attribute__((vector_size(64), aligned(4), may_alias));
};
template <>
struct VecOf<double> {
    typedef double type __attribute__((vector_size(64)));
    typedef double unaligned __attribute__((vector_size(64), aligned(8), may_alias));
};
template <class T>
using Vec = typename VecOf<T>::type;
template <class T>
inline constexpr int kLanes = 64 / static_cast<int>(sizeof(T));
inline constexpr int kTileVecs = 4;
template <class T>
inline constexpr int kTileCols = kTileVecs * kLanes<T>;  // 64 floats, 32 doubles
inline constexpr int kTileRows = 6;

inline constexpr std::int64_t kParallelFlops = 1 << 16;

template <class T>
inline Vec<T> load(const T* p) {
    return *reinterpret_cast<const typename VecOf<T>::unaligned*>(p);
}

template <class T>
inline void store(T* p, const Vec<T>& v) {
    *reinterpret_cast<typename VecOf<T>::unaligned*>(p) = v;
}

// Cache blocking of the packed GEMM: depth is consumed in kDepthBlock chunks,
// rows in kRowBlock chunks per packed A block.
inline constexpr int kDepthBlock = 256;
inline constexpr int kRowBlock = 120;

// acc[r][j] (+)= sum_p a[p][r] * b[p][j] over one depth chunk of packed
// panels, one fused multiply-add per p in ascending order.
// The 6 x 4 accumulators are spelled out as scalars of vector type: GCC keeps
// an array of them in memory across the depth loop.
#define AOAR_ROWS(X) X(0) X(1) X(2) X(3) X(4) X(5)
template <class T, bool LoadC>
inline void micro_core(int depth, const T* __restrict ap, const T* __restrict bp, T* __restrict c, std::ptrdiff_t ldc) {
    constexpr int L = kLanes<T>;
    constexpr int MR = kTileRows;
    constexpr int NR = kTileCols<T>;
    static_assert(MR == 6 && kTileVecs == 4);
#define AOAR_INIT(r)                                               \
    Vec<T> c##r##0 = LoadC ? load(c + r * ldc) : Vec<T>{};         \
    Vec<T> c##r##1 = LoadC ? load(c + r * ldc + L) : Vec<T>{};     \
    Vec<T> c##r##2 = LoadC ? load(c + r * ldc + 2 * L) : Vec<T>{}; \
    Vec<T> c##r##3 = LoadC ? load(c + r * ldc + 3 * L) : Vec<T>{};
    AOAR_ROWS(AOAR_INIT)
#undef AOAR_INIT
    for (int p = 0; p < depth; ++p) {
        const T* bq = bp + static_cast<std::ptrdiff_t>(p) * NR;
        const Vec<T> b0 = load(bq), b1 = load(bq + L), b2 = load(bq + 2 * L), b3 = load(bq + 3 * L);
        const T* aq = ap + static_cast<std::ptrdiff_t>(p) * MR;
#define AOAR_FMA(r)                  \
    {                                \
        const T av = aq[r];          \
        c##r##0 = av * b0 + c##r##0; \
        c##r##1 = av * b1 + c##r##1; \
        c##r##2 = av * b2 + c##r##2; \
        c##r##3 = av * b3 + c##r##3; \
    }
        AOAR_ROWS(AOAR_FMA)
#undef AOAR_FMA
    }
#define AOAR_STORE(r)                    \
    store(c + r * ldc, c##r##0);         \
    store(c + r * ldc + L, c##r##1);     \
    store(c + r * ldc + 2 * L, c##r##2); \
    store(c + r * ldc + 3 * L, c##r##3);
    AOAR_ROWS(AOAR_STORE)
#undef AOAR_STORE
}
#undef AOAR_ROWS

// Partial tiles run through a full-size scratch tile. Padding lanes hold
// zeros, so every stored element sees exactly the same operations whatever
// the tile shape.
template <class T>
inline void micro_packed(int depth, const T* ap, const T* bp, T* c, std::ptrdiff_t ldc, bool load_c, int rows,
                         int cols) {
    constexpr int MR = kTileRows;
    constexpr int NR = kTileCols<T>;
    if (rows == MR && cols == NR) {
        if (load_c) {
            micro_core<T, true>(depth, ap, bp, c, ldc);
        } else {
            micro_core<T, false>(depth, ap, bp, c, ldc);
        }
        return;
    }
    alignas(64) T edge[MR * NR] = {};
    if (load_c) {
        for (int r = 0; r < rows; ++r) {
            std::copy_n(c + r * ldc, cols, edge + r * NR);
        }
    }
    micro_core<T, true>(depth, ap, bp, edge, NR);
    for (int r = 0; r < rows; ++r) {
        std::copy_n(edge + r * NR, cols, c + r * ldc);
    }
}

// ap[panel][p][r] = A(i0 + panel * MR + r, p0 + p), zero past the last row.
template <class T>
void pack_a(const T* a, std::ptrdiff_t a_row, std::ptrdiff_t a_depth, int i0, int rows, int p0, int depth, T* ap) {
    constexpr int MR = kTileRows;
    const int panels = (rows + MR - 1) / MR;
    for (int q = 0; q < panels; ++q) {
        T* dst = ap + static_cast<std::ptrdiff_t>(q) * depth * MR;
        const int r_count = std::min(MR, rows - q * MR);
        for (int p = 0; p < depth; ++p) {
            const T* src = a + static_cast<std::ptrdiff_t>(i0 + q * MR) * a_row + static_cast<std::ptrdiff_t>(p0 + p) * a_depth;
            int r = 0;
            for (; r < r_count; ++r) {
                dst[p * MR + r] = src[r * a_row];
            }
            for (; r < MR; ++r) {
                dst[p * MR + r] = T{};
            }
        }
    }
}

// bp[panel][p][j] = B(p0 + p, panel * NR + j), zero past the last column.
template <class T>
void pack_b(const T* b, std::ptrdiff_t b_depth, std::ptrdiff_t b_col, int n, int p0, int depth, T* bp, int panel) {
    constexpr int NR = kTileCols<T>;
    T* dst = bp + static_cast<std::ptrdiff_t>(panel) * depth * NR;
    const int j0 = panel * NR;
    const int cols = std::min(NR, n - j0);
    for (int p = 0; p < depth; ++p) {
        const T* src = b + static_cast<std::ptrdiff_t>(p0 + p) * b_depth + static_cast<std::ptrdiff_t>(j0) * b_col;
        T* row = dst + p * NR;
        if (b_col == 1) {
            std::copy_n(src, cols, row);
        } else {
            for (int j = 0; j < cols; ++j) {
                row[j] = src[j * b_col];
            }
        }
        std::fill(row + cols, row + NR, T{});
    }
}

template <class T>
std::vector<T>& scratch(int slot) {
    thread_local std::vector<T> buf[2];
    return buf[slot];
}

// C[m x n] (+)= A B with A(r, p) = a[r * a_row + p * a_depth] and
// B(p, j) = b[p * b_depth + j * b_col]. Each element is one sequential chain
// of fused multiply-adds over p = 0..depth-1, independent of m, n and of how
// the work is split across threads.
template <class T>
void gemm(int m, int depth, int n, const T* a, std::ptrdiff_t a_row, std::ptrdiff_t a_depth, const T* b,
          std::ptrdiff_t b_depth, std::ptrdiff_t b_col, T* c, std::ptrdiff_t ldc, bool accumulate) {
    if (m == 0 || n == 0) {
        return;
    }
    constexpr int MR = kTileRows;
    constexpr int NR = kTileCols<T>;
    if (depth == 0) {
        if (!accumulate) {
            for (int i = 0; i < m; ++i) {
                std::fill_n(c + i * ldc, n, T{});
            }
        }
        return;
    }
    const int col_panels = (n + NR - 1) / NR;
    const int row_blocks = (m + kRowBlock - 1) / kRowBlock;
    const bool parallel =
        !omp_in_parallel() && static_cast<std::int64_t>(m) * n * depth >= kParallelFlops && omp_get_max_threads() > 1;
    std::vector<T>& bp = scratch<T>(0);
    for (int p0 = 0; p0 < depth; p0 += kDepthBlock) {
        const int kc = std::min(kDepthBlock, depth - p0);
        const bool load_c = accumulate || p0 > 0;
        bp.resize(static_cast<std::size_t>(col_panels) * kc * NR);
#pragma omp parallel for schedule(static) if (parallel)
        for (int q = 0; q < col_panels; ++q) {
            pack_b(b, b_depth, b_col, n, p0, kc, bp.data(), q);
        }
        const T* bpack = bp.data();
#pragma omp parallel for schedule(static) if (parallel)
        for (int ib = 0; ib < row_blocks; ++ib) {
            const int i0 = ib * kRowBlock;
            const int rows = std::min(kRowBlock, m - i0);
            std::vector<T>& ap = scratch<T>(1);
            ap.resize(static_cast<std::size_t>(kRowBlock) * kc);
            pack_a(a, a_row, a_depth, i0, rows, p0, kc, ap.data());
            for (int q = 0; q < col_panels; ++q) {
                const int j0 = q * NR;
                const int cols = std::min(NR, n - j0);
                const T* bq = bpack + static_cast<std::ptrdiff_t>(q) * kc * NR;
                for (int r0 = 0; r0 < rows; r0 += MR) {
                    micro_packed(kc, ap.data() + static_cast<std::ptrdiff_t>(r0) * kc, bq,
                                 c + static_cast<std::ptrdiff_t>(i0 + r0) * ldc + j0, ldc, load_c,
                                 std::min(MR, rows - r0), cols);
                }
            }
        }
    }
}

// Dot product with one partial sum per vector lane, combined pairwise at the
// end. The association is fixed, so results are reproducible and the loop
// vectorizes without -ffast-math.
template <class T>
inline T dot(const T* x, const T* y, int n) {
    constexpr int L = kLanes<T>;
    Vec<T> acc{};
    int i = 0;
    for (; i + L <= n; i += L) {
        acc = load(x + i) * load(y + i) + acc;
    }
    T part[L];
    std::memcpy(part, &acc, sizeof(acc));
    for (int l = 0; i < n; ++i, ++l) {
        part[l] = std::fma(x[i], y[i], part[l]);
    }
    for (int w = L / 2; w > 0; w /= 2) {
        for (int l = 0; l < w; ++l) {
            part[l] += part[l + w];
        }
    }
    return part[0];
}

template <class T>
inline void axpy(T alpha, const T* x, T* y, int n) {
    constexpr int L = kLanes<T>;
    int i = 0;
    for (; i + L <= n; i += L) {
        store(y + i, alpha * load(x + i) + load(y + i));
    }
    for (; i < n; ++i) {
        y[i] = std::fma(alpha, x[i], y[i]);
    }
}

}  // namespace detail

// C[m x n] = A[m x k] * B[k x n]  (or C += when accumulate).
template <class T>
void matmul(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate = false) {
    detail::gemm<T>(m, k, n, a, k, 1, b, n, 1, c, n, accumulate);
}

// C[k x n] += A[m x k]^T * B[m x n]. Used for weight gradients; the sum runs
// over the m (token) axis.
template <class T>
void matmul_at_b(const T* a, const T* b, T* c, int m, int k, int n) {
    const int threads = omp_get_max_threads();
    const int row_blocks = (k + detail::kTileRows - 1) / detail::kTileRows;
    if (deterministic() || threads == 1 || row_blocks >= threads || m < 2 * threads) {
        detail::gemm<T>(k, m, n, a, 1, k, b, n, 1, c, n, true);
        return;
    }
    // Few output rows and a long token axis: split the token axis.
    std::vector<std::vector<T>> partial(static_cast<std::size_t>(threads));
#pragma omp parallel num_threads(threads)
    {
        const int t = omp_get_thread_num();
        const int chunk = (m + threads - 1) / threads;
        const int lo = std::min(m, t * chunk);
        const int hi = std::min(m, lo + chunk);
        auto& buf = partial[static_cast<std::size_t>(t)];
        buf.assign(static_cast<std::size_t>(k) * n, T{});
        if (hi > lo) {
            detail::gemm<T>(k, hi - lo, n, a + static_cast<std::ptrdiff_t>(lo) * k, 1, k,
                            b + static_cast<std::ptrdiff_t>(lo) * n, n, 1, buf.data(), n, true);
        }
    }
    for (const auto& buf : partial) {
        for (std::size_t i = 0; i < buf.size(); ++i) {
            c[i] += buf[i];
        }
    }
}

template <class T>
void transpose(const T* a, T* out, int rows, int cols) {
    for (int i = 0; i < rows; ++i) {
        for (int j = 0; j < cols; ++j) {
            out[static_cast<std::size_t>(j) * rows + i] = a[static_cast<std::size_t>(i) * cols + j];
        }
    }
}

// C[m x k] = A[m x n] * B[k x n]^T.
template <class T>
void matmul_a_bt(const T* a, const T* b, T* c, int m, int n, int k, bool accumulate = false) {
    detail::gemm<T>(m, n, k, a, n, 1, b, 1, n, c, k, accumulate);
}

template <class T>
void add_bias(T* x, const T* bias, int rows, int cols) {
#pragma omp parallel for schedule(static) if (static_cast<std::int64_t>(rows) * cols >= detail::kParallelFlops)
    for (int i = 0; i < rows; ++i) {
        T* r = x + static_cast<std::size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) {
            r[j] += bias[j];
        }
    }
}

// out[j] += sum_i x[i][j], rows summed in order.
template <class T>
void column_sums(const T* x, T* out, int rows, int cols) {
    for (int i = 0; i < rows; ++i) {
        const T* r = x + static_cast<std::size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) {
            out[j] += r[j];
        }
    }
}

inline constexpr double kLayerNormEps = 1e-5;

// y = xhat * gain + bias; xhat and rstd are kept for the backward pass.
template <class T>
void layernorm_forward(const T* x, const T* gain, const T* bias, T* y, T* xhat, T* rstd, int rows, int cols) {
#pragma omp parallel for schedule(static) if (static_cast<std::int64_t>(rows) * cols >= detail::kParallelFlops)
    for (int i = 0; i < rows; ++i) {
        const T* xr = x + static_cast<std::size_t>(i) * cols;
        double mean = 0.0;
        for (int j = 0; j < cols; ++j) {
            mean += xr[j];
        }
        mean /= cols;
        double var = 0.0;
        for (int j = 0; j < cols; ++j) {
            const double d = xr[j] - mean;
            var += d * d;
        }
        var /= cols;
        const double rs = 1.0 / std::sqrt(var + kLayerNormEps);
        rstd[i] = static_cast<T>(rs);
        T* hr = xhat + static_cast<std::size_t>(i) * cols;
        T* yr = y + static_cast<std::size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) {
            hr[j] = static_cast<T>((xr[j] - mean) * rs);
            yr[j] = hr[j] * gain[j] + bias[j];
        }
    }
}

// Given dxhat (gradient w.r.t. the normalized value), adds dx to `dx`.
template <class T>
void layernorm_backward(const T* dxhat, const T* xhat, const T* rstd, T* dx, int rows, int cols) {
#pragma omp parallel for schedule(static) if (static_cast<std::int64_t>(rows) * cols >= detail::kParallelFlops)
    for (int i = 0; i < rows; ++i) {
        const T* g = dxhat + static_cast<std::size_t>(i) * cols;
        const T* h = xhat + static_cast<std::size_t>(i) * cols;
        double mg = 0.0;
        double mgh = 0.0;
        for (int j = 0; j < cols; ++j) {
            mg += g[j];
            mgh += static_cast<double>(g[j]) * h[j];
        }
        mg /= cols;
        mgh /= cols;
        T* d = dx + static_cast<std::size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) {
            d[j] += static_cast<T>(rstd[i] * (g[j] - mg - h[j] * mgh));
        }
    }
}

// tanh-approximated GELU.
template <class T>
inline T gelu(T x) {
    constexpr T c = static_cast<T>(0.7978845608028654);
    constexpr T k = static_cast<T>(0.044715);
    return T(0.5) * x * (T(1) + std::tanh(c * (x + k * x * x * x)));
}

template <class T>
inline T gelu_grad(T x) {
    constexpr T c = static_cast<T>(0.7978845608028654);
    constexpr T k = static_cast<T>(0.044715);
    const T u = c * (x + k * x * x * x);
    const T th = std::tanh(u);
    const T du = c * (T(1) + T(3) * k * x * x);
    return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

namespace detail {

typedef std::int32_t VecI32 __attribute__((vector_size(64)));

// exp on 16 floats: range reduction by ln 2 and a degree-6 polynomial, within
// 2 ulp of expf over the clamped range.
inline Vec<float> exp_vec(Vec<float> x) {
    const Vec<float> hi = Vec<float>{} + 88.3762626647949f;
    const Vec<float> lo = Vec<float>{} - 87.3365447505531f;
    x = x > hi ? hi : x;
    x = x < lo ? lo : x;
    const Vec<float> magic = Vec<float>{} + 12582912.0f;  // 1.5 * 2^23 rounds to nearest
    const Vec<float> n = (x * 1.44269504088896341f + magic) - magic;
    Vec<float> r = x - n * 0.693359375f;
    r = r - n * -2.12194440e-4f;
    Vec<float> p = Vec<float>{} + 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    const Vec<float> e = p * (r * r) + r + 1.0f;
    const VecI32 bits = (__builtin_convertvector(n, VecI32) + 127) << 23;
    return e * (Vec<float>)bits;
}

inline Vec<float> tanh_vec(Vec<float> u) { return 1.0f - 2.0f / (exp_vec(u + u) + 1.0f); }

// Applies f to 16-float chunks; the tail goes through a zero-padded chunk so
// every element sees the same instructions wherever it sits in the buffer.
template <class F>
void map_chunks(std::size_t n, F&& f) {
    constexpr std::size_t L = kLanes<float>;
    const std::size_t full = n / L * L;
    const std::int64_t chunks = static_cast<std::int64_t>(full / L);
#pragma omp parallel for schedule(static) if (n >= static_cast<std::size_t>(kParallelFlops))
    for (std::int64_t c = 0; c < chunks; ++c) {
        f(static_cast<std::size_t>(c) * L, L);
    }
    if (full < n) {
        f(full, n - full);
    }
}

inline Vec<float> load_partial(const float* p, std::size_t count) {
    if (count == kLanes<float>) {
        return load(p);
    }
    alignas(64) float buf[kLanes<float>] = {};
    std::copy_n(p, count, buf);
    return load(buf);
}

inline void store_partial(float* p, const Vec<float>& v, std::size_t count) {
    if (count == kLanes<float>) {
        store(p, v);
        return;
    }
    alignas(64) float buf[kLanes<float>];
    store(buf, v);
    std::copy_n(buf, count, p);
}

}  // namespace detail

template <class T>
void gelu_forward(const T* x, T* y, std::size_t n) {
    if constexpr (std::is_same_v<T, float>) {
        detail::map_chunks(n, [&](std::size_t i, std::size_t count) {
            const auto v = detail::load_partial(x + i, count);
            const auto u = 0.7978845608028654f * (v + 0.044715f * v * v * v);
            detail::store_partial(y + i, 0.5f * v * (1.0f + detail::tanh_vec(u)), count);
        });
    } else {
#pragma omp parallel for schedule(static) if (n >= static_cast<std::size_t>(detail::kParallelFlops))
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = gelu(x[i]);
        }
    }
}

// dx = dy * gelu'(x), in place on dy.
template <class T>
void gelu_backward(const T* x, T* dy, std::size_t n) {
    if constexpr (std::is_same_v<T, float>) {
        detail::map_chunks(n, [&](std::size_t i, std::size_t count) {
            const auto v = detail::load_partial(x + i, count);
            const auto u = 0.7978845608028654f * (v + 0.044715f * v * v * v);
            const auto th = detail::tanh_vec(u);
            const auto du = 0.7978845608028654f * (1.0f + 3.0f * 0.044715f * v * v);
            const auto g = 0.5f * (1.0f + th) + 0.5f * v * (1.0f - th * th) * du;
            detail::store_partial(dy + i, detail::load_partial(dy + i, count) * g, count);
        });
    } else {
#pragma omp parallel for schedule(static) if (n >= static_cast<std::size_t>(detail::kParallelFlops))
        for (std::size_t i = 0; i < n; ++i) {
            dy[i] *= gelu_grad(x[i]);
        }
    }
}

// Multi-head scaled dot-product attention over an explicit visibility mask.
// Query i of head h reads q[i * q_stride + h * head_dim]; keys and values use
// kv_stride. mask[i * n_key + j] != 0 lets query i attend to key j. Keys are
// visited in key_order when given (all n_key indices), otherwise ascending.
template <class T>
struct AttentionArgs {
    int heads = 1;
    int head_dim = 1;
    int n_query = 0;
    int n_key = 0;
    const T* q = nullptr;
    std::ptrdiff_t q_stride = 0;
    const T* k = nullptr;
    const T* v = nullptr;
    std::ptrdiff_t kv_stride = 0;
    const std::uint8_t* mask = nullptr;
    const int* key_order = nullptr;
};

// out[i * out_stride + h * head_dim] receives the attended values. When probs
// is non-null it receives [heads][n_query][n_key] attention weights (zero where
// masked). Scores come from the packed GEMM, so each one is a fixed chain over
// head_dim; the softmax sum and the value sum run over the allowed keys in
// key_order (ascending when null).
template <class T>
void attention_forward(const AttentionArgs<T>& a, T* out, std::ptrdiff_t out_stride, T* probs) {
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(a.head_dim)));
    const std::int64_t work = static_cast<std::int64_t>(a.heads) * a.n_query * a.n_key * a.head_dim;
    const std::size_t plane = static_cast<std::size_t>(a.n_query) * a.n_key;
#pragma omp parallel for schedule(static) if (work >= detail::kParallelFlops)
    for (int h = 0; h < a.heads; ++h) {
        std::vector<T> score(plane);
        std::vector<T> weight(plane, T{});
        std::vector<T> values;
        detail::gemm<T>(a.n_query, a.head_dim, a.n_key, a.q + h * a.head_dim, a.q_stride, 1, a.k + h * a.head_dim, 1,
                        a.kv_stride, score.data(), a.n_key, false);
        for (int i = 0; i < a.n_query; ++i) {
            const std::uint8_t* mrow = a.mask + static_cast<std::size_t>(i) * a.n_key;
            T* srow = score.data() + static_cast<std::size_t>(i) * a.n_key;
            T* wrow = weight.data() + static_cast<std::size_t>(i) * a.n_key;
            T mx = -std::numeric_limits<T>::infinity();
            for (int j = 0; j < a.n_key; ++j) {
                if (mrow[j]) {
                    mx = std::max(mx, srow[j] * scale);
                }
            }
            T sum = 0;
            for (int t = 0; t < a.n_key; ++t) {
                const int j = a.key_order ? a.key_order[t] : t;
                if (mrow[j]) {
                    const T e = std::exp(srow[j] * scale - mx);
                    srow[j] = e;
                    sum += e;
                }
            }
            const T inv = T(1) / sum;
            for (int j = 0; j < a.n_key; ++j) {
                wrow[j] = mrow[j] ? srow[j] * inv : T{};
            }
            if (probs) {
                std::copy_n(wrow, a.n_key, probs + static_cast<std::size_t>(h) * plane + static_cast<std::size_t>(i) * a.n_key);
            }
        }
        const T* v = a.v + h * a.head_dim;
        std::ptrdiff_t v_stride = a.kv_stride;
        if (a.key_order) {
            // Permute keys into key_order so the value sum runs in that order.
            std::vector<T> permuted(plane);
            values.resize(static_cast<std::size_t>(a.n_key) * a.head_dim);
            for (int t = 0; t < a.n_key; ++t) {
                const int j = a.key_order[t];
                std::copy_n(a.v + j * a.kv_stride + h * a.head_dim, a.head_dim,
                            values.data() + static_cast<std::size_t>(t) * a.head_dim);
                for (int i = 0; i < a.n_query; ++i) {
                    permuted[static_cast<std::size_t>(i) * a.n_key + t] = weight[static_cast<std::size_t>(i) * a.n_key + j];
                }
            }
            weight.swap(permuted);
            v = values.data();
            v_stride = a.head_dim;
        }
        detail::gemm<T>(a.n_query, a.n_key, a.head_dim, weight.data(), a.n_key, 1, v, v_stride, 1,
                        out + h * a.head_dim, out_stride, false);
    }
}

// Backward of attention_forward given the stored probabilities. dq, dk and dv
// are accumulated (+=) using the same strides as q, k and v.
template <class T>
void attention_backward(const AttentionArgs<T>& a, const T* probs, const T* dout, std::ptrdiff_t dout_stride, T* dq,
                        T* dk, T* dv) {
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(a.head_dim)));
    const std::size_t plane = static_cast<std::size_t>(a.n_query) * a.n_key;
    const std::int64_t work = static_cast<std::int64_t>(a.heads) * a.n_query * a.n_key * a.head_dim;
#pragma omp parallel for schedule(static) if (work >= detail::kParallelFlops)
    for (int h = 0; h < a.heads; ++h) {
        const T* p = probs + static_cast<std::size_t>(h) * plane;
        const std::ptrdiff_t off = h * a.head_dim;
        std::vector<T> ds(plane);
        // dP = dout V^T, then dS = P * (dP - <P, dP>) * scale.
        detail::gemm<T>(a.n_query, a.head_dim, a.n_key, dout + off, dout_stride, 1, a.v + off, 1, a.kv_stride, ds.data(),
                        a.n_key, false);
        for (int i = 0; i < a.n_query; ++i) {
            const T* prow = p + static_cast<std::size_t>(i) * a.n_key;
            T* srow = ds.data() + static_cast<std::size_t>(i) * a.n_key;
            const std::uint8_t* mrow = a.mask + static_cast<std::size_t>(i) * a.n_key;
            T inner = 0;
            for (int j = 0; j < a.n_key; ++j) {
                if (mrow[j]) {
                    inner += prow[j] * srow[j];
                }
            }
            for (int j = 0; j < a.n_key; ++j) {
                srow[j] = mrow[j] ? prow[j] * (srow[j] - inner) * scale : T{};
            }
        }
        // dq += dS K, dk += dS^T q, dv += P^T dout.
        detail::gemm<T>(a.n_query, a.n_key, a.head_dim, ds.data(), a.n_key, 1, a.k + off, a.kv_stride, 1, dq + off,
                        a.q_stride, true);
        detail::gemm<T>(a.n_key, a.n_query, a.head_dim, ds.data(), 1, a.n_key, a.q + off, a.q_stride, 1, dk + off,
                        a.kv_stride, true);
        detail::gemm<T>(a.n_key, a.n_query, a.head_dim, p, 1, a.n_key, dout + off, dout_stride, 1, dv + off,
                        a.kv_stride, true);
    }
}

}  // namespace aoar::kernels
