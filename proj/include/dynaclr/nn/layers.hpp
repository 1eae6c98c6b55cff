#pragma once

// Per-sample layer kernels with explicit backward passes. Feature maps are
// channels-last: a map of H x W positions with C channels is a row-major
// [H*W, C] matrix.

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Core>

namespace dynaclr::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<Mat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const Mat<T>>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <class T>
using RowMap = Eigen::Map<RowVec<T>>;
template <class T>
using ConstRowMap = Eigen::Map<const RowVec<T>>;

// ------------------------------------------------------------ linear

/// y[n, out] = x[n, in] * w[in, out] + b[out]
template <class T>
void linear_forward(const T* x, int n, int in, const T* w, const T* b, int out, T* y) {
    MatMap<T> Y(y, n, out);
    Y.noalias() = ConstMatMap<T>(x, n, in) * ConstMatMap<T>(w, in, out);
    Y.rowwise() += ConstRowMap<T>(b, out);
}

/// Accumulates dw, db; writes dx when non-null.
template <class T>
void linear_backward(const T* x, int n, int in, const T* w, int out, const T* dy, T* dx, T* dw, T* db) {
    ConstMatMap<T> DY(dy, n, out);
    MatMap<T>(dw, in, out).noalias() += ConstMatMap<T>(x, n, in).transpose() * DY;
    std::vector<T> col(static_cast<std::size_t>(out), T(0));
    for (int r = 0; r < n; ++r) {
        const T* row = dy + static_cast<std::size_t>(r) * out;
        for (int c = 0; c < out; ++c) col[c] += row[c];
    }
    for (int c = 0; c < out; ++c) db[c] += col[c];
    if (dx) MatMap<T>(dx, n, in).noalias() = DY * ConstMatMap<T>(w, in, out).transpose();
}

// ------------------------------------------------------------ layer norm

inline constexpr double layer_norm_eps = 1e-6;

/// Normalizes each row over its c channels. Stores xhat and 1/sigma per row.
template <class T>
void layer_norm_forward(const T* x, int n, int c, const T* gamma, const T* beta, T* y, T* xhat, T* rstd) {
    for (int i = 0; i < n; ++i) {
        const T* xr = x + static_cast<std::size_t>(i) * c;
        T mean = 0;
        for (int k = 0; k < c; ++k) mean += xr[k];
        mean /= c;
        T var = 0;
        for (int k = 0; k < c; ++k) var += (xr[k] - mean) * (xr[k] - mean);
        var /= c;
        const T r = T(1) / std::sqrt(var + static_cast<T>(layer_norm_eps));
        rstd[i] = r;
        T* hr = xhat + static_cast<std::size_t>(i) * c;
        T* yr = y + static_cast<std::size_t>(i) * c;
        for (int k = 0; k < c; ++k) {
            hr[k] = (xr[k] - mean) * r;
            yr[k] = hr[k] * gamma[k] + beta[k];
        }
    }
}

template <class T>
void layer_norm_backward(const T* xhat, const T* rstd, int n, int c, const T* gamma, const T* dy, T* dx, T* dgamma,
                         T* dbeta) {
    std::vector<T> dxh(static_cast<std::size_t>(c));
    for (int i = 0; i < n; ++i) {
        const T* hr = xhat + static_cast<std::size_t>(i) * c;
        const T* dyr = dy + static_cast<std::size_t>(i) * c;
        T* dxr = dx + static_cast<std::size_t>(i) * c;
        T sum = 0, dot = 0;
        for (int k = 0; k < c; ++k) {
            dgamma[k] += dyr[k] * hr[k];
            dbeta[k] += dyr[k];
            dxh[k] = dyr[k] * gamma[k];
            sum += dxh[k];
            dot += dxh[k] * hr[k];
        }
        const T r = rstd[i] / c;
        for (int k = 0; k < c; ++k) dxr[k] = r * (c * dxh[k] - sum - hr[k] * dot);
    }
}

// ------------------------------------------------------------ activations

template <class T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * static_cast<T>(0.7071067811865476)));
}

template <class T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * static_cast<T>(0.7071067811865476)));
    const T pdf = static_cast<T>(0.3989422804014327) * std::exp(T(-0.5) * x * x);
    return cdf + x * pdf;
}

// ------------------------------------------------------------ depthwise conv

/// 'same'-padded depthwise k x k convolution on an [h*w, c] map; weights are [k, k, c].
template <class T>
void depthwise_forward(const T* x, int h, int w, int c, const T* weight, const T* bias, int k, T* y) {
    const int pad = k / 2;
    for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx) {
            T* out = y + (static_cast<std::size_t>(yy) * w + xx) * c;
            for (int ch = 0; ch < c; ++ch) out[ch] = bias[ch];
            for (int ky = 0; ky < k; ++ky) {
                const int sy = yy + ky - pad;
                if (sy < 0 || sy >= h) continue;
                for (int kx = 0; kx < k; ++kx) {
                    const int sx = xx + kx - pad;
                    if (sx < 0 || sx >= w) continue;
                    const T* in = x + (static_cast<std::size_t>(sy) * w + sx) * c;
                    const T* wk = weight + (static_cast<std::size_t>(ky) * k + kx) * c;
                    for (int ch = 0; ch < c; ++ch) out[ch] += in[ch] * wk[ch];
                }
            }
        }
}

/// Accumulates dw, db and dx.
template <class T>
void depthwise_backward(const T* x, int h, int w, int c, const T* weight, int k, const T* dy, T* dx, T* dw, T* db) {
    const int pad = k / 2;
    for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx) {
            const T* g = dy + (static_cast<std::size_t>(yy) * w + xx) * c;
            for (int ch = 0; ch < c; ++ch) db[ch] += g[ch];
            for (int ky = 0; ky < k; ++ky) {
                const int sy = yy + ky - pad;
                if (sy < 0 || sy >= h) continue;
                for (int kx = 0; kx < k; ++kx) {
                    const int sx = xx + kx - pad;
                    if (sx < 0 || sx >= w) continue;
                    const std::size_t pos = (static_cast<std::size_t>(sy) * w + sx) * c;
                    const std::size_t woff = (static_cast<std::size_t>(ky) * k + kx) * c;
                    for (int ch = 0; ch < c; ++ch) {
                        dw[woff + ch] += g[ch] * x[pos + ch];
                        dx[pos + ch] += g[ch] * weight[woff + ch];
                    }
                }
            }
        }
}

// ------------------------------------------------------------ patchify

/// Gathers non-overlapping k x k windows of an [h*w, c] map into rows of
/// [(h/k)*(w/k), k*k*c], ordered (ky, kx, c).
template <class T>
void patchify_gather(const T* x, int h, int w, int c, int k, T* cols) {
    const int ho = h / k, wo = w / k;
    for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
            T* row = cols + (static_cast<std::size_t>(oy) * wo + ox) * k * k * c;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    const T* src = x + (static_cast<std::size_t>(oy * k + ky) * w + (ox * k + kx)) * c;
                    std::copy(src, src + c, row + (static_cast<std::size_t>(ky) * k + kx) * c);
                }
        }
}

template <class T>
void patchify_scatter(const T* dcols, int h, int w, int c, int k, T* dx) {
    const int ho = h / k, wo = w / k;
    for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
            const T* row = dcols + (static_cast<std::size_t>(oy) * wo + ox) * k * k * c;
            for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx) {
                    T* dst = dx + (static_cast<std::size_t>(oy * k + ky) * w + (ox * k + kx)) * c;
                    const T* src = row + (static_cast<std::size_t>(ky) * k + kx) * c;
                    for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
                }
        }
}

}  // namespace dynaclr::nn
