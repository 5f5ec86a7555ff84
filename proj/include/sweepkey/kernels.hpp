#pragma once

// Raw compute kernels. Every kernel computes each output element with a
// fixed sequential reduction order, so the OpenMP versions are bit-identical
// to the serial reference regardless of thread count. The serial namespace
// is kept as the reference implementation for tests and the benchmark tool.

#include <cmath>
#include <cstddef>

namespace sweepkey::kernels {

using std::size_t;
using ssize = std::ptrdiff_t;

// ---------------------------------------------------------------------------
// Serial reference implementations.
// ---------------------------------------------------------------------------
namespace serial {

// C(m x n) = A(m x k) * B(k x n), row-major.
template <class T>
void matmul_nn(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
    for (size_t i = 0; i < m; ++i) {
        T* crow = c + i * n;
        for (size_t j = 0; j < n; ++j) crow[j] = T(0);
        const T* arow = a + i * k;
        for (size_t kk = 0; kk < k; ++kk) {
            const T aik = arow[kk];
            const T* brow = b + kk * n;
            for (size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

template <class T>
void transpose(const T* a, T* out, size_t rows, size_t cols) {
    for (size_t i = 0; i < rows; ++i)
        for (size_t j = 0; j < cols; ++j)
            out[j * rows + i] = a[i * cols + j];
}

// out[t,d] = sum_i w[i,d] * x[t-i,d], zero left padding. w is kxdw with
// dw == d (depthwise) or dw == 1 (shared profile across channels).
template <class T>
void conv1d_causal_fwd(const T* x, const T* w, T* out,
                       size_t tn, size_t d, size_t k, size_t dw) {
    for (size_t t = 0; t < tn; ++t) {
        for (size_t c = 0; c < d; ++c) {
            T acc = T(0);
            const size_t imax = (t + 1 < k) ? t + 1 : k;
            for (size_t i = 0; i < imax; ++i)
                acc += w[i * dw + (dw == 1 ? 0 : c)] * x[(t - i) * d + c];
            out[t * d + c] = acc;
        }
    }
}

// dx[s,d] = sum_i w[i,d] * dout[s+i,d]
template <class T>
void conv1d_causal_bwd_input(const T* dout, const T* w, T* dx,
                             size_t tn, size_t d, size_t k, size_t dw) {
    for (size_t s = 0; s < tn; ++s) {
        for (size_t c = 0; c < d; ++c) {
            T acc = T(0);
            const size_t imax = (s + k <= tn) ? k : tn - s;
            for (size_t i = 0; i < imax; ++i)
                acc += w[i * dw + (dw == 1 ? 0 : c)] * dout[(s + i) * d + c];
            dx[s * d + c] = acc;
        }
    }
}

// dw[i,c] = sum_t dout[t,c] * x[t-i,c]; shared profile sums over channels too.
template <class T>
void conv1d_causal_bwd_weight(const T* dout, const T* x, T* dwgt,
                              size_t tn, size_t d, size_t k, size_t dw) {
    if (dw == 1) {
        for (size_t i = 0; i < k; ++i) {
            T acc = T(0);
            for (size_t t = i; t < tn; ++t)
                for (size_t c = 0; c < d; ++c)
                    acc += dout[t * d + c] * x[(t - i) * d + c];
            dwgt[i] = acc;
        }
    } else {
        for (size_t i = 0; i < k; ++i) {
            for (size_t c = 0; c < d; ++c) {
                T acc = T(0);
                for (size_t t = i; t < tn; ++t)
                    acc += dout[t * d + c] * x[(t - i) * d + c];
                dwgt[i * d + c] = acc;
            }
        }
    }
}

template <class T>
void softmax_rows(const T* x, T* out, size_t rows, size_t cols) {
    for (size_t i = 0; i < rows; ++i) {
        const T* xr = x + i * cols;
        T* yr = out + i * cols;
        T mx = xr[0];
        for (size_t j = 1; j < cols; ++j) mx = xr[j] > mx ? xr[j] : mx;
        T sum = T(0);
        for (size_t j = 0; j < cols; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        const T inv = T(1) / sum;
        for (size_t j = 0; j < cols; ++j) yr[j] *= inv;
    }
}

// Row-wise layer norm with affine; also writes 1/sqrt(var+eps) per row for
// the backward pass.
template <class T>
void layernorm_rows_fwd(const T* x, const T* gamma, const T* beta, T* out,
                        T* inv_std, size_t rows, size_t cols, T eps) {
    for (size_t i = 0; i < rows; ++i) {
        const T* xr = x + i * cols;
        T* yr = out + i * cols;
        T mean = T(0);
        for (size_t j = 0; j < cols; ++j) mean += xr[j];
        mean /= T(cols);
        T var = T(0);
        for (size_t j = 0; j < cols; ++j) {
            const T dv = xr[j] - mean;
            var += dv * dv;
        }
        var /= T(cols);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[i] = is;
        for (size_t j = 0; j < cols; ++j)
            yr[j] = (xr[j] - mean) * is * gamma[j] + beta[j];
    }
}

// Multi-head attention over `blocks` independent token blocks of length p.
// q,k,v are (blocks*p) x dim with dim = heads*hd. probs stores the softmax
// matrices, laid out (blocks*heads) x p x p, consumed by the backward kernel.
template <class T>
void attention_fwd(const T* q, const T* k, const T* v, T* out, T* probs,
                   size_t blocks, size_t p, size_t heads, size_t hd) {
    const size_t dim = heads * hd;
    const T scale = T(1) / std::sqrt(T(hd));
    for (size_t b = 0; b < blocks; ++b) {
        for (size_t h = 0; h < heads; ++h) {
            const size_t row0 = b * p;
            const size_t off = h * hd;
            T* pr = probs + (b * heads + h) * p * p;
            for (size_t i = 0; i < p; ++i) {
                const T* qi = q + (row0 + i) * dim + off;
                T* si = pr + i * p;
                for (size_t j = 0; j < p; ++j) {
                    const T* kj = k + (row0 + j) * dim + off;
                    T acc = T(0);
                    for (size_t e = 0; e < hd; ++e) acc += qi[e] * kj[e];
                    si[j] = acc * scale;
                }
                T mx = si[0];
                for (size_t j = 1; j < p; ++j) mx = si[j] > mx ? si[j] : mx;
                T sum = T(0);
                for (size_t j = 0; j < p; ++j) {
                    si[j] = std::exp(si[j] - mx);
                    sum += si[j];
                }
                const T inv = T(1) / sum;
                for (size_t j = 0; j < p; ++j) si[j] *= inv;
                T* oi = out + (row0 + i) * dim + off;
                for (size_t e = 0; e < hd; ++e) oi[e] = T(0);
                for (size_t j = 0; j < p; ++j) {
                    const T sij = si[j];
                    const T* vj = v + (row0 + j) * dim + off;
                    for (size_t e = 0; e < hd; ++e) oi[e] += sij * vj[e];
                }
            }
        }
    }
}

template <class T>
void attention_bwd(const T* q, const T* k, const T* v, const T* probs,
                   const T* dout, T* dq, T* dk, T* dv,
                   size_t blocks, size_t p, size_t heads, size_t hd) {
    const size_t dim = heads * hd;
    const T scale = T(1) / std::sqrt(T(hd));
    for (size_t b = 0; b < blocks; ++b) {
        for (size_t h = 0; h < heads; ++h) {
            const size_t row0 = b * p;
            const size_t off = h * hd;
            const T* pr = probs + (b * heads + h) * p * p;
            // dv[j] = sum_i probs[i,j] * dout[i]
            for (size_t j = 0; j < p; ++j) {
                T* dvj = dv + (row0 + j) * dim + off;
                for (size_t e = 0; e < hd; ++e) {
                    T acc = T(0);
                    for (size_t i = 0; i < p; ++i)
                        acc += pr[i * p + j] * dout[(row0 + i) * dim + off + e];
                    dvj[e] = acc;
                }
            }
            // dscores then dq, dk
            for (size_t i = 0; i < p; ++i) {
                const T* doi = dout + (row0 + i) * dim + off;
                const T* si = pr + i * p;
                // da[j] = dout_i . v_j ; row softmax backward
                T dot = T(0);
                for (size_t j = 0; j < p; ++j) {
                    const T* vj = v + (row0 + j) * dim + off;
                    T da = T(0);
                    for (size_t e = 0; e < hd; ++e) da += doi[e] * vj[e];
                    dot += da * si[j];
                }
                T* dqi = dq + (row0 + i) * dim + off;
                for (size_t e = 0; e < hd; ++e) dqi[e] = T(0);
                for (size_t j = 0; j < p; ++j) {
                    const T* vj = v + (row0 + j) * dim + off;
                    T da = T(0);
                    for (size_t e = 0; e < hd; ++e) da += doi[e] * vj[e];
                    const T ds = si[j] * (da - dot) * scale;
                    const T* kj = k + (row0 + j) * dim + off;
                    T* dkj = dk + (row0 + j) * dim + off;
                    for (size_t e = 0; e < hd; ++e) {
                        dqi[e] += ds * kj[e];
                        dkj[e] += ds * q[(row0 + i) * dim + off + e];
                    }
                }
            }
        }
    }
}

template <class T, class F>
void map_unary(const T* x, T* out, size_t n, F f) {
    for (size_t i = 0; i < n; ++i) out[i] = f(x[i]);
}

template <class T, class F>
void map_binary(const T* a, const T* b, T* out, size_t n, F f) {
    for (size_t i = 0; i < n; ++i) out[i] = f(a[i], b[i]);
}

} // namespace serial

// ---------------------------------------------------------------------------
// OpenMP versions. Parallel only across independent output elements; each
// element keeps the serial reduction order.
// ---------------------------------------------------------------------------

template <class T>
void matmul_nn(const T* a, const T* b, T* c, size_t m, size_t k, size_t n) {
#pragma omp parallel for schedule(static)
    for (ssize i = 0; i < static_cast<ssize>(m); ++i) {
        T* crow = c + static_cast<size_t>(i) * n;
        for (size_t j = 0; j < n; ++j) crow[j] = T(0);
        const T* arow = a + static_cast<size_t>(i) * k;
        for (size_t kk = 0; kk < k; ++kk) {
            const T aik = arow[kk];
            const T* brow = b + kk * n;
            for (size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
}

template <class T>
void transpose(const T* a, T* out, size_t rows, size_t cols) {
#pragma omp parallel for schedule(static)
    for (ssize i = 0; i < static_cast<ssize>(rows); ++i)
        for (size_t j = 0; j < cols; ++j)
            out[j * rows + static_cast<size_t>(i)] = a[static_cast<size_t>(i) * cols + j];
}

template <class T>
void conv1d_causal_fwd(const T* x, const T* w, T* out,
                       size_t tn, size_t d, size_t k, size_t dw) {
#pragma omp parallel for schedule(static)
    for (ssize t = 0; t < static_cast<ssize>(tn); ++t) {
        const size_t tt = static_cast<size_t>(t);
        for (size_t c = 0; c < d; ++c) {
            T acc = T(0);
            const size_t imax = (tt + 1 < k) ? tt + 1 : k;
            for (size_t i = 0; i < imax; ++i)
                acc += w[i * dw + (dw == 1 ? 0 : c)] * x[(tt - i) * d + c];
            out[tt * d + c] = acc;
        }
    }
}

template <class T>
void conv1d_causal_bwd_input(const T* dout, const T* w, T* dx,
                             size_t tn, size_t d, size_t k, size_t dw) {
#pragma omp parallel for schedule(static)
    for (ssize s = 0; s < static_cast<ssize>(tn); ++s) {
        const size_t ss = static_cast<size_t>(s);
        for (size_t c = 0; c < d; ++c) {
            T acc = T(0);
            const size_t imax = (ss + k <= tn) ? k : tn - ss;
            for (size_t i = 0; i < imax; ++i)
                acc += w[i * dw + (dw == 1 ? 0 : c)] * dout[(ss + i) * d + c];
            dx[ss * d + c] = acc;
        }
    }
}

template <class T>
void conv1d_causal_bwd_weight(const T* dout, const T* x, T* dwgt,
                              size_t tn, size_t d, size_t k, size_t dw) {
    if (dw == 1) {
        // Few outputs; reduction order over (t, c) must stay fixed.
        serial::conv1d_causal_bwd_weight(dout, x, dwgt, tn, d, k, dw);
        return;
    }
#pragma omp parallel for collapse(2) schedule(static)
    for (ssize i = 0; i < static_cast<ssize>(k); ++i) {
        for (ssize c = 0; c < static_cast<ssize>(d); ++c) {
            const size_t ii = static_cast<size_t>(i), cc = static_cast<size_t>(c);
            T acc = T(0);
            for (size_t t = ii; t < tn; ++t)
                acc += dout[t * d + cc] * x[(t - ii) * d + cc];
            dwgt[ii * d + cc] = acc;
        }
    }
}

template <class T>
void softmax_rows(const T* x, T* out, size_t rows, size_t cols) {
#pragma omp parallel for schedule(static)
    for (ssize i = 0; i < static_cast<ssize>(rows); ++i) {
        const T* xr = x + static_cast<size_t>(i) * cols;
        T* yr = out + static_cast<size_t>(i) * cols;
        T mx = xr[0];
        for (size_t j = 1; j < cols; ++j) mx = xr[j] > mx ? xr[j] : mx;
        T sum = T(0);
        for (size_t j = 0; j < cols; ++j) {
            yr[j] = std::exp(xr[j] - mx);
            sum += yr[j];
        }
        const T inv = T(1) / sum;
        for (size_t j = 0; j < cols; ++j) yr[j] *= inv;
    }
}

template <class T>
void layernorm_rows_fwd(const T* x, const T* gamma, const T* beta, T* out,
                        T* inv_std, size_t rows, size_t cols, T eps) {
#pragma omp parallel for schedule(static)
    for (ssize i = 0; i < static_cast<ssize>(rows); ++i) {
        const size_t ii = static_cast<size_t>(i);
        const T* xr = x + ii * cols;
        T* yr = out + ii * cols;
        T mean = T(0);
        for (size_t j = 0; j < cols; ++j) mean += xr[j];
        mean /= T(cols);
        T var = T(0);
        for (size_t j = 0; j < cols; ++j) {
            const T dv = xr[j] - mean;
            var += dv * dv;
        }
        var /= T(cols);
        const T is = T(1) / std::sqrt(var + eps);
        inv_std[ii] = is;
        for (size_t j = 0; j < cols; ++j)
            yr[j] = (xr[j] - mean) * is * gamma[j] + beta[j];
    }
}

template <class T>
void attention_fwd(const T* q, const T* k, const T* v, T* out, T* probs,
                   size_t blocks, size_t p, size_t heads, size_t hd) {
    const size_t dim = heads * hd;
    const T scale = T(1) / std::sqrt(T(hd));
#pragma omp parallel for collapse(2) schedule(static)
    for (ssize b = 0; b < static_cast<ssize>(blocks); ++b) {
        for (ssize h = 0; h < static_cast<ssize>(heads); ++h) {
            const size_t row0 = static_cast<size_t>(b) * p;
            const size_t off = static_cast<size_t>(h) * hd;
            T* pr = probs + (static_cast<size_t>(b) * heads + static_cast<size_t>(h)) * p * p;
            for (size_t i = 0; i < p; ++i) {
                const T* qi = q + (row0 + i) * dim + off;
                T* si = pr + i * p;
                for (size_t j = 0; j < p; ++j) {
                    const T* kj = k + (row0 + j) * dim + off;
                    T acc = T(0);
                    for (size_t e = 0; e < hd; ++e) acc += qi[e] * kj[e];
                    si[j] = acc * scale;
                }
                T mx = si[0];
                for (size_t j = 1; j < p; ++j) mx = si[j] > mx ? si[j] : mx;
                T sum = T(0);
                for (size_t j = 0; j < p; ++j) {
                    si[j] = std::exp(si[j] - mx);
                    sum += si[j];
                }
                const T inv = T(1) / sum;
                for (size_t j = 0; j < p; ++j) si[j] *= inv;
                T* oi = out + (row0 + i) * dim + off;
                for (size_t e = 0; e < hd; ++e) oi[e] = T(0);
                for (size_t j = 0; j < p; ++j) {
                    const T sij = si[j];
                    const T* vj = v + (row0 + j) * dim + off;
                    for (size_t e = 0; e < hd; ++e) oi[e] += sij * vj[e];
                }
            }
        }
    }
}

template <class T>
void attention_bwd(const T* q, const T* k, const T* v, const T* probs,
                   const T* dout, T* dq, T* dk, T* dv,
                   size_t blocks, size_t p, size_t heads, size_t hd) {
#pragma omp parallel for collapse(2) schedule(static)
    for (ssize b = 0; b < static_cast<ssize>(blocks); ++b) {
        for (ssize h = 0; h < static_cast<ssize>(heads); ++h) {
            // One (block, head) slice owns its rows of dq/dk/dv; delegate to
            // the serial kernel on that slice to keep the reduction order.
            const size_t dim = heads * hd;
            const size_t row0 = static_cast<size_t>(b) * p;
            const size_t off = static_cast<size_t>(h) * hd;
            const T scale = T(1) / std::sqrt(T(hd));
            const T* pr = probs + (static_cast<size_t>(b) * heads + static_cast<size_t>(h)) * p * p;
            for (size_t j = 0; j < p; ++j) {
                T* dvj = dv + (row0 + j) * dim + off;
                for (size_t e = 0; e < hd; ++e) {
                    T acc = T(0);
                    for (size_t i = 0; i < p; ++i)
                        acc += pr[i * p + j] * dout[(row0 + i) * dim + off + e];
                    dvj[e] = acc;
                }
            }
            for (size_t i = 0; i < p; ++i) {
                const T* doi = dout + (row0 + i) * dim + off;
                const T* si = pr + i * p;
                T dot = T(0);
                for (size_t j = 0; j < p; ++j) {
                    const T* vj = v + (row0 + j) * dim + off;
                    T da = T(0);
                    for (size_t e = 0; e < hd; ++e) da += doi[e] * vj[e];
                    dot += da * si[j];
                }
                T* dqi = dq + (row0 + i) * dim + off;
                for (size_t e = 0; e < hd; ++e) dqi[e] = T(0);
                for (size_t j = 0; j < p; ++j) {
                    const T* vj = v + (row0 + j) * dim + off;
                    T da = T(0);
                    for (size_t e = 0; e < hd; ++e) da += doi[e] * vj[e];
                    const T ds = si[j] * (da - dot) * scale;
                    const T* kj = k + (row0 + j) * dim + off;
                    T* dkj = dk + (row0 + j) * dim + off;
                    for (size_t e = 0; e < hd; ++e) {
                        dqi[e] += ds * kj[e];
                        dkj[e] += ds * q[(row0 + i) * dim + off + e];
                    }
                }
            }
        }
    }
}

template <class T, class F>
void map_unary(const T* x, T* out, size_t n, F f) {
#pragma omp parallel for schedule(static)
    for (ssize i = 0; i < static_cast<ssize>(n); ++i)
        out[static_cast<size_t>(i)] = f(x[static_cast<size_t>(i)]);
}

template <class T, class F>
void map_binary(const T* a, const T* b, T* out, size_t n, F f) {
#pragma omp parallel for schedule(static)
    for (ssize i = 0; i < static_cast<ssize>(n); ++i)
        out[static_cast<size_t>(i)] = f(a[static_cast<size_t>(i)], b[static_cast<size_t>(i)]);
}

// Column sums of an (rows x cols) matrix; parallel across columns, ordered
// over rows. Used for bias and affine-parameter gradients.
template <class T>
void colsum(const T* x, T* out, size_t rows, size_t cols) {
#pragma omp parallel for schedule(static)
    for (ssize j = 0; j < static_cast<ssize>(cols); ++j) {
        const size_t jj = static_cast<size_t>(j);
        T acc = T(0);
        for (size_t i = 0; i < rows; ++i) acc += x[i * cols + jj];
        out[jj] = acc;
    }
}

} // namespace sweepkey::kernels
