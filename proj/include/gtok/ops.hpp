#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "gtok/rng.hpp"
#include "gtok/tape.hpp"
#include "gtok/tensor.hpp"

namespace gtok {
namespace detail {

/// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::int64_t M, std::int64_t K, std::int64_t N) {
    for (std::int64_t i = 0; i < M; ++i) {
        const T* arow = a + i * K;
        T* crow = c + i * N;
        for (std::int64_t k = 0; k < K; ++k) {
            const T av = arow[k];
            const T* brow = b + k * N;
            for (std::int64_t j = 0; j < N; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C[M,K] += A[M,N] * B[K,N]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::int64_t M, std::int64_t N, std::int64_t K) {
    for (std::int64_t i = 0; i < M; ++i) {
        const T* arow = a + i * N;
        T* crow = c + i * K;
        for (std::int64_t k = 0; k < K; ++k) {
            const T* brow = b + k * N;
            T acc = T(0);
            for (std::int64_t j = 0; j < N; ++j) {
                acc += arow[j] * brow[j];
            }
            crow[k] += acc;
        }
    }
}

/// C[K,N] += A[M,K]^T * B[M,N]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::int64_t M, std::int64_t K, std::int64_t N) {
    for (std::int64_t i = 0; i < M; ++i) {
        const T* arow = a + i * K;
        const T* brow = b + i * N;
        for (std::int64_t k = 0; k < K; ++k) {
            const T av = arow[k];
            T* crow = c + k * N;
            for (std::int64_t j = 0; j < N; ++j) {
                crow[j] += av * brow[j];
            }
        }
    }
}

inline std::int64_t conv_out_len(std::int64_t L, std::int64_t K, std::int64_t stride, std::int64_t pad_l,
                                 std::int64_t pad_r, std::int64_t dilation) {
    const std::int64_t span = dilation * (K - 1) + 1;
    const std::int64_t padded = L + pad_l + pad_r;
    if (padded < span) {
        return 0;
    }
    return (padded - span) / stride + 1;
}

/// cols[(c*K + k), l] = x[c, l*stride + k*dilation - pad_l], zero outside.
template <typename T>
void im2col(const T* x, std::int64_t C, std::int64_t L, std::int64_t K, std::int64_t stride, std::int64_t pad_l,
            std::int64_t dilation, std::int64_t Lout, T* cols) {
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t k = 0; k < K; ++k) {
            T* dst = cols + (c * K + k) * Lout;
            const std::int64_t off = k * dilation - pad_l;
            for (std::int64_t l = 0; l < Lout; ++l) {
                const std::int64_t pos = l * stride + off;
                dst[l] = (pos >= 0 && pos < L) ? x[c * L + pos] : T(0);
            }
        }
    }
}

/// x[c, l*stride + k*dilation - pad_l] += cols[(c*K + k), l], dropping writes
/// that land in the padding.
template <typename T>
void col2im_add(const T* cols, std::int64_t C, std::int64_t L, std::int64_t K, std::int64_t stride,
                std::int64_t pad_l, std::int64_t dilation, std::int64_t Lcols, T* x) {
    for (std::int64_t c = 0; c < C; ++c) {
        for (std::int64_t k = 0; k < K; ++k) {
            const T* src = cols + (c * K + k) * Lcols;
            const std::int64_t off = k * dilation - pad_l;
            for (std::int64_t l = 0; l < Lcols; ++l) {
                const std::int64_t pos = l * stride + off;
                if (pos >= 0 && pos < L) {
                    x[c * L + pos] += src[l];
                }
            }
        }
    }
}

}  // namespace detail

namespace ops {

template <typename T>
Var add(Tape<T>& t, Var a, Var b) {
    const Tensor<T>& av = t.val(a);
    const Tensor<T>& bv = t.val(b);
    detail::require(av.same_shape(bv),
                    "add: shape mismatch " + detail::shape_str(av.shape()) + " vs " + detail::shape_str(bv.shape()));
    Tensor<T> y = av;
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        y[i] += bv[i];
    }
    return t.record(std::move(y), {a, b}, [a, b](Tape<T>& tp, const Tensor<T>& g) {
        tp.accumulate(a, g);
        tp.accumulate(b, g);
    });
}

template <typename T>
Var sub(Tape<T>& t, Var a, Var b) {
    const Tensor<T>& av = t.val(a);
    const Tensor<T>& bv = t.val(b);
    detail::require(av.same_shape(bv),
                    "sub: shape mismatch " + detail::shape_str(av.shape()) + " vs " + detail::shape_str(bv.shape()));
    Tensor<T> y = av;
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        y[i] -= bv[i];
    }
    return t.record(std::move(y), {a, b}, [a, b](Tape<T>& tp, const Tensor<T>& g) {
        tp.accumulate(a, g);
        Tensor<T> ng = g;
        for (std::int64_t i = 0; i < ng.numel(); ++i) {
            ng[i] = -ng[i];
        }
        tp.accumulate(b, ng);
    });
}

template <typename T>
Var mul(Tape<T>& t, Var a, Var b) {
    const Tensor<T>& av = t.val(a);
    const Tensor<T>& bv = t.val(b);
    detail::require(av.same_shape(bv),
                    "mul: shape mismatch " + detail::shape_str(av.shape()) + " vs " + detail::shape_str(bv.shape()));
    Tensor<T> y = av;
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        y[i] *= bv[i];
    }
    return t.record(std::move(y), {a, b}, [a, b](Tape<T>& tp, const Tensor<T>& g) {
        const Tensor<T>& avv = tp.val(a);
        const Tensor<T>& bvv = tp.val(b);
        Tensor<T> ga = g;
        Tensor<T> gb = g;
        for (std::int64_t i = 0; i < g.numel(); ++i) {
            ga[i] *= bvv[i];
            gb[i] *= avv[i];
        }
        tp.accumulate(a, ga);
        tp.accumulate(b, gb);
    });
}

template <typename T>
Var scale(Tape<T>& t, Var a, double s) {
    Tensor<T> y = t.val(a);
    const T sv = static_cast<T>(s);
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        y[i] *= sv;
    }
    return t.record(std::move(y), {a}, [a, sv](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> ga = g;
        for (std::int64_t i = 0; i < ga.numel(); ++i) {
            ga[i] *= sv;
        }
        tp.accumulate(a, ga);
    });
}

/// Elementwise multiply of every row of x [N,W] by a fixed weight vector [W].
/// The weights are data (dataset statistics), not parameters.
template <typename T>
Var scale_cols(Tape<T>& t, Var x, const Tensor<T>& w) {
    const Tensor<T>& xv = t.val(x);
    detail::require(xv.rank() == 2 && w.numel() == xv.dim(1), "scale_cols: want [N,W] and weights [W], got " +
                                                                  detail::shape_str(xv.shape()) + " and " +
                                                                  detail::shape_str(w.shape()));
    Tensor<T> y = xv;
    const std::int64_t N = xv.dim(0), W = xv.dim(1);
    for (std::int64_t i = 0; i < N; ++i) {
        for (std::int64_t j = 0; j < W; ++j) {
            y.at(i, j) *= w[j];
        }
    }
    return t.record(std::move(y), {x}, [x, w, N, W](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> gx = g;
        for (std::int64_t i = 0; i < N; ++i) {
            for (std::int64_t j = 0; j < W; ++j) {
                gx.at(i, j) *= w[j];
            }
        }
        tp.accumulate(x, gx);
    });
}

template <typename T>
Var relu(Tape<T>& t, Var a) {
    Tensor<T> y = t.val(a);
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        y[i] = y[i] > T(0) ? y[i] : T(0);
    }
    return t.record(std::move(y), {a}, [a](Tape<T>& tp, const Tensor<T>& g) {
        const Tensor<T>& xv = tp.val(a);
        Tensor<T> gx = g;
        for (std::int64_t i = 0; i < gx.numel(); ++i) {
            if (xv[i] <= T(0)) {
                gx[i] = T(0);
            }
        }
        tp.accumulate(a, gx);
    });
}

template <typename T>
Var leaky_relu(Tape<T>& t, Var a, double slope) {
    const T s = static_cast<T>(slope);
    Tensor<T> y = t.val(a);
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        if (y[i] < T(0)) {
            y[i] *= s;
        }
    }
    return t.record(std::move(y), {a}, [a, s](Tape<T>& tp, const Tensor<T>& g) {
        const Tensor<T>& xv = tp.val(a);
        Tensor<T> gx = g;
        for (std::int64_t i = 0; i < gx.numel(); ++i) {
            if (xv[i] < T(0)) {
                gx[i] *= s;
            }
        }
        tp.accumulate(a, gx);
    });
}

/// Inverted dropout. Identity in evaluation mode or at p == 0; no rng draw
/// happens in either case.
template <typename T>
Var dropout(Tape<T>& t, Var a, double p, bool training, Rng* rng) {
    if (!training || p <= 0.0) {
        return a;
    }
    detail::require(p < 1.0, "dropout: p must be < 1");
    detail::require(rng != nullptr, "dropout: rng required in training mode");
    Tensor<T> y = t.val(a);
    std::vector<std::uint8_t> keep(static_cast<std::size_t>(y.numel()));
    const T inv = static_cast<T>(1.0 / (1.0 - p));
    for (std::int64_t i = 0; i < y.numel(); ++i) {
        keep[static_cast<std::size_t>(i)] = rng->uniform() >= p ? 1 : 0;
        y[i] = keep[static_cast<std::size_t>(i)] ? y[i] * inv : T(0);
    }
    return t.record(std::move(y), {a}, [a, keep = std::move(keep), inv](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> gx = g;
        for (std::int64_t i = 0; i < gx.numel(); ++i) {
            gx[i] = keep[static_cast<std::size_t>(i)] ? gx[i] * inv : T(0);
        }
        tp.accumulate(a, gx);
    });
}

template <typename T>
Var sum_all(Tape<T>& t, Var a) {
    const Tensor<T>& xv = t.val(a);
    double acc = 0.0;
    for (std::int64_t i = 0; i < xv.numel(); ++i) {
        acc += static_cast<double>(xv[i]);
    }
    return t.record(Tensor<T>::scalar(static_cast<T>(acc)), {a}, [a](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> gx(tp.val(a).shape(), g[0]);
        tp.accumulate(a, gx);
    });
}

template <typename T>
Var mean_all(Tape<T>& t, Var a) {
    const std::int64_t n = t.val(a).numel();
    Var s = sum_all(t, a);
    return scale(t, s, 1.0 / static_cast<double>(n));
}

template <typename T>
Var reshape(Tape<T>& t, Var a, Shape shape) {
    Tensor<T> y = t.val(a).reshaped(std::move(shape));
    return t.record(std::move(y), {a}, [a](Tape<T>& tp, const Tensor<T>& g) {
        tp.accumulate(a, g.reshaped(tp.val(a).shape()));
    });
}

/// Rows [start, start+len) along axis 0.
template <typename T>
Var slice_rows(Tape<T>& t, Var a, std::int64_t start, std::int64_t len) {
    const Tensor<T>& xv = t.val(a);
    detail::require(xv.rank() >= 1 && start >= 0 && len >= 1 && start + len <= xv.dim(0),
                    "slice_rows: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                        ") out of bounds for " + detail::shape_str(xv.shape()));
    const std::int64_t rowsz = xv.numel() / xv.dim(0);
    Shape oshape = xv.shape();
    oshape[0] = len;
    Tensor<T> y(oshape);
    std::copy(xv.data() + start * rowsz, xv.data() + (start + len) * rowsz, y.data());
    return t.record(std::move(y), {a}, [a, start, rowsz](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> gx(tp.val(a).shape());
        std::copy(g.data(), g.data() + g.numel(), gx.data() + start * rowsz);
        tp.accumulate(a, gx);
    });
}

/// Concatenation of two rank-2 tensors along axis 0 or 1.
template <typename T>
Var concat(Tape<T>& t, Var a, Var b, int axis) {
    const Tensor<T>& av = t.val(a);
    const Tensor<T>& bv = t.val(b);
    detail::require(av.rank() == 2 && bv.rank() == 2 && (axis == 0 || axis == 1),
                    "concat: want two rank-2 tensors and axis 0 or 1");
    if (axis == 0) {
        detail::require(av.dim(1) == bv.dim(1), "concat: column mismatch " + detail::shape_str(av.shape()) + " vs " +
                                                    detail::shape_str(bv.shape()));
        Tensor<T> y({av.dim(0) + bv.dim(0), av.dim(1)});
        std::copy(av.data(), av.data() + av.numel(), y.data());
        std::copy(bv.data(), bv.data() + bv.numel(), y.data() + av.numel());
        const std::int64_t na = av.numel();
        return t.record(std::move(y), {a, b}, [a, b, na](Tape<T>& tp, const Tensor<T>& g) {
            Tensor<T> ga(tp.val(a).shape());
            Tensor<T> gb(tp.val(b).shape());
            std::copy(g.data(), g.data() + na, ga.data());
            std::copy(g.data() + na, g.data() + g.numel(), gb.data());
            tp.accumulate(a, ga);
            tp.accumulate(b, gb);
        });
    }
    detail::require(av.dim(0) == bv.dim(0),
                    "concat: row mismatch " + detail::shape_str(av.shape()) + " vs " + detail::shape_str(bv.shape()));
    const std::int64_t N = av.dim(0), Wa = av.dim(1), Wb = bv.dim(1);
    Tensor<T> y({N, Wa + Wb});
    for (std::int64_t i = 0; i < N; ++i) {
        std::copy(av.data() + i * Wa, av.data() + (i + 1) * Wa, y.data() + i * (Wa + Wb));
        std::copy(bv.data() + i * Wb, bv.data() + (i + 1) * Wb, y.data() + i * (Wa + Wb) + Wa);
    }
    return t.record(std::move(y), {a, b}, [a, b, N, Wa, Wb](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> ga({N, Wa});
        Tensor<T> gb({N, Wb});
        for (std::int64_t i = 0; i < N; ++i) {
            std::copy(g.data() + i * (Wa + Wb), g.data() + i * (Wa + Wb) + Wa, ga.data() + i * Wa);
            std::copy(g.data() + i * (Wa + Wb) + Wa, g.data() + (i + 1) * (Wa + Wb), gb.data() + i * Wb);
        }
        tp.accumulate(a, ga);
        tp.accumulate(b, gb);
    });
}

/// Rank-2 transpose.
template <typename T>
Var transpose(Tape<T>& t, Var a) {
    const Tensor<T>& xv = t.val(a);
    detail::require(xv.rank() == 2, "transpose: want rank 2, got " + detail::shape_str(xv.shape()));
    const std::int64_t N = xv.dim(0), W = xv.dim(1);
    Tensor<T> y({W, N});
    for (std::int64_t i = 0; i < N; ++i) {
        for (std::int64_t j = 0; j < W; ++j) {
            y.at(j, i) = xv.at(i, j);
        }
    }
    return t.record(std::move(y), {a}, [a, N, W](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> gx({N, W});
        for (std::int64_t j = 0; j < W; ++j) {
            for (std::int64_t i = 0; i < N; ++i) {
                gx.at(i, j) = g.at(j, i);
            }
        }
        tp.accumulate(a, gx);
    });
}

template <typename T>
Var matmul(Tape<T>& t, Var a, Var b) {
    const Tensor<T>& av = t.val(a);
    const Tensor<T>& bv = t.val(b);
    detail::require(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0),
                    "matmul: incompatible shapes " + detail::shape_str(av.shape()) + " x " +
                        detail::shape_str(bv.shape()));
    const std::int64_t M = av.dim(0), K = av.dim(1), N = bv.dim(1);
    Tensor<T> y({M, N});
    detail::gemm_nn(av.data(), bv.data(), y.data(), M, K, N);
    return t.record(std::move(y), {a, b}, [a, b, M, K, N](Tape<T>& tp, const Tensor<T>& g) {
        const Tensor<T>& avv = tp.val(a);
        const Tensor<T>& bvv = tp.val(b);
        if (tp.requires_grad(a)) {
            Tensor<T> ga({M, K});
            detail::gemm_nt(g.data(), bvv.data(), ga.data(), M, N, K);
            tp.accumulate(a, ga);
        }
        if (tp.requires_grad(b)) {
            Tensor<T> gb({K, N});
            detail::gemm_tn(avv.data(), g.data(), gb.data(), M, K, N);
            tp.accumulate(b, gb);
        }
    });
}

/// x [N,W] + b [W] broadcast over rows.
template <typename T>
Var bias_add(Tape<T>& t, Var x, Var b) {
    const Tensor<T>& xv = t.val(x);
    const Tensor<T>& bv = t.val(b);
    detail::require(xv.rank() == 2 && bv.numel() == xv.dim(1), "bias_add: want [N,W] and [W], got " +
                                                                   detail::shape_str(xv.shape()) + " and " +
                                                                   detail::shape_str(bv.shape()));
    const std::int64_t N = xv.dim(0), W = xv.dim(1);
    Tensor<T> y = xv;
    for (std::int64_t i = 0; i < N; ++i) {
        for (std::int64_t j = 0; j < W; ++j) {
            y.at(i, j) += bv[j];
        }
    }
    return t.record(std::move(y), {x, b}, [x, b, N, W](Tape<T>& tp, const Tensor<T>& g) {
        tp.accumulate(x, g);
        if (tp.requires_grad(b)) {
            Tensor<T> gb(tp.val(b).shape());
            for (std::int64_t i = 0; i < N; ++i) {
                for (std::int64_t j = 0; j < W; ++j) {
                    gb[j] += g.at(i, j);
                }
            }
            tp.accumulate(b, gb);
        }
    });
}

/// x [N,in] * w [in,out] (+ b [out] when valid).
template <typename T>
Var linear(Tape<T>& t, Var x, Var w, Var b) {
    Var y = matmul(t, x, w);
    if (b.valid()) {
        y = bias_add(t, y, b);
    }
    return y;
}

struct ConvSpec {
    std::int64_t stride = 1;
    std::int64_t pad_l = 0;
    std::int64_t pad_r = 0;
    std::int64_t dilation = 1;
};

/// 1-D convolution, x [Cin,L], w [Cout,Cin,K], optional b [Cout]. Zero
/// padding, implemented as im2col plus one matmul.
template <typename T>
Var conv1d(Tape<T>& t, Var x, Var w, Var b, const ConvSpec& sp) {
    const Tensor<T>& xv = t.val(x);
    const Tensor<T>& wv = t.val(w);
    detail::require(xv.rank() == 2 && wv.rank() == 3 && xv.dim(0) == wv.dim(1),
                    "conv1d: want x [Cin,L], w [Cout,Cin,K], got " + detail::shape_str(xv.shape()) + " and " +
                        detail::shape_str(wv.shape()));
    detail::require(sp.stride >= 1 && sp.dilation >= 1 && sp.pad_l >= 0 && sp.pad_r >= 0, "conv1d: bad spec");
    const std::int64_t Cin = xv.dim(0), L = xv.dim(1);
    const std::int64_t Cout = wv.dim(0), K = wv.dim(2);
    const std::int64_t Lout = detail::conv_out_len(L, K, sp.stride, sp.pad_l, sp.pad_r, sp.dilation);
    detail::require(Lout >= 1, "conv1d: empty output for L=" + std::to_string(L) + " K=" + std::to_string(K));

    Tensor<T> cols({Cin * K, Lout});
    detail::im2col(xv.data(), Cin, L, K, sp.stride, sp.pad_l, sp.dilation, Lout, cols.data());
    Tensor<T> y({Cout, Lout});
    detail::gemm_nn(wv.data(), cols.data(), y.data(), Cout, Cin * K, Lout);
    if (b.valid()) {
        const Tensor<T>& bv = t.val(b);
        detail::require(bv.numel() == Cout, "conv1d: bias size mismatch");
        for (std::int64_t c = 0; c < Cout; ++c) {
            for (std::int64_t l = 0; l < Lout; ++l) {
                y.at(c, l) += bv[c];
            }
        }
    }
    return t.record(std::move(y), {x, w, b},
                    [x, w, b, sp, Cin, L, Cout, K, Lout](Tape<T>& tp, const Tensor<T>& g) {
                        const Tensor<T>& xvv = tp.val(x);
                        const Tensor<T>& wvv = tp.val(w);
                        if (tp.requires_grad(w)) {
                            Tensor<T> cols({Cin * K, Lout});
                            detail::im2col(xvv.data(), Cin, L, K, sp.stride, sp.pad_l, sp.dilation, Lout, cols.data());
                            Tensor<T> gw({Cout, Cin, K});
                            detail::gemm_nt(g.data(), cols.data(), gw.data(), Cout, Lout, Cin * K);
                            tp.accumulate(w, gw);
                        }
                        if (tp.requires_grad(x)) {
                            Tensor<T> gcols({Cin * K, Lout});
                            detail::gemm_tn(wvv.data(), g.data(), gcols.data(), Cout, Cin * K, Lout);
                            Tensor<T> gx({Cin, L});
                            detail::col2im_add(gcols.data(), Cin, L, K, sp.stride, sp.pad_l, sp.dilation, Lout,
                                               gx.data());
                            tp.accumulate(x, gx);
                        }
                        if (b.valid() && tp.requires_grad(b)) {
                            Tensor<T> gb({Cout});
                            for (std::int64_t c = 0; c < Cout; ++c) {
                                for (std::int64_t l = 0; l < Lout; ++l) {
                                    gb[c] += g.at(c, l);
                                }
                            }
                            tp.accumulate(b, gb);
                        }
                    });
}

/// Transposed 1-D convolution, x [Cin,L], w [Cin,Cout,K], optional b [Cout].
/// Output length (L-1)*stride + K - 2*pad.
template <typename T>
Var conv1d_transpose(Tape<T>& t, Var x, Var w, Var b, std::int64_t stride, std::int64_t pad) {
    const Tensor<T>& xv = t.val(x);
    const Tensor<T>& wv = t.val(w);
    detail::require(xv.rank() == 2 && wv.rank() == 3 && xv.dim(0) == wv.dim(0),
                    "conv1d_transpose: want x [Cin,L], w [Cin,Cout,K], got " + detail::shape_str(xv.shape()) +
                        " and " + detail::shape_str(wv.shape()));
    const std::int64_t Cin = xv.dim(0), L = xv.dim(1);
    const std::int64_t Cout = wv.dim(1), K = wv.dim(2);
    const std::int64_t Lout = (L - 1) * stride + K - 2 * pad;
    detail::require(Lout >= 1, "conv1d_transpose: empty output");

    Tensor<T> grid({Cout * K, L});
    detail::gemm_tn(wv.data(), xv.data(), grid.data(), Cin, Cout * K, L);
    Tensor<T> y({Cout, Lout});
    detail::col2im_add(grid.data(), Cout, Lout, K, stride, pad, 1, L, y.data());
    if (b.valid()) {
        const Tensor<T>& bv = t.val(b);
        detail::require(bv.numel() == Cout, "conv1d_transpose: bias size mismatch");
        for (std::int64_t c = 0; c < Cout; ++c) {
            for (std::int64_t l = 0; l < Lout; ++l) {
                y.at(c, l) += bv[c];
            }
        }
    }
    return t.record(std::move(y), {x, w, b},
                    [x, w, b, stride, pad, Cin, L, Cout, K, Lout](Tape<T>& tp, const Tensor<T>& g) {
                        const Tensor<T>& xvv = tp.val(x);
                        const Tensor<T>& wvv = tp.val(w);
                        Tensor<T> gcols({Cout * K, L});
                        detail::im2col(g.data(), Cout, Lout, K, stride, pad, 1, L, gcols.data());
                        if (tp.requires_grad(x)) {
                            Tensor<T> gx({Cin, L});
                            detail::gemm_nn(wvv.data(), gcols.data(), gx.data(), Cin, Cout * K, L);
                            tp.accumulate(x, gx);
                        }
                        if (tp.requires_grad(w)) {
                            Tensor<T> gw({Cin, Cout, K});
                            detail::gemm_nt(xvv.data(), gcols.data(), gw.data(), Cin, L, Cout * K);
                            tp.accumulate(w, gw);
                        }
                        if (b.valid() && tp.requires_grad(b)) {
                            Tensor<T> gb({Cout});
                            for (std::int64_t c = 0; c < Cout; ++c) {
                                for (std::int64_t l = 0; l < Lout; ++l) {
                                    gb[c] += g.at(c, l);
                                }
                            }
                            tp.accumulate(b, gb);
                        }
                    });
}

/// Mean pooling over consecutive rows of x [L,C].
template <typename T>
Var avg_pool_rows(Tape<T>& t, Var x, std::int64_t k, std::int64_t stride) {
    const Tensor<T>& xv = t.val(x);
    detail::require(xv.rank() == 2 && k >= 1 && stride >= 1 && xv.dim(0) >= k,
                    "avg_pool_rows: bad pooling of " + detail::shape_str(xv.shape()));
    const std::int64_t L = xv.dim(0), C = xv.dim(1);
    const std::int64_t Lout = (L - k) / stride + 1;
    Tensor<T> y({Lout, C});
    const T inv = static_cast<T>(1.0 / static_cast<double>(k));
    for (std::int64_t l = 0; l < Lout; ++l) {
        for (std::int64_t i = 0; i < k; ++i) {
            const T* row = xv.data() + (l * stride + i) * C;
            for (std::int64_t c = 0; c < C; ++c) {
                y.at(l, c) += row[c];
            }
        }
        for (std::int64_t c = 0; c < C; ++c) {
            y.at(l, c) *= inv;
        }
    }
    return t.record(std::move(y), {x}, [x, k, stride, L, C, Lout, inv](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> gx({L, C});
        for (std::int64_t l = 0; l < Lout; ++l) {
            for (std::int64_t i = 0; i < k; ++i) {
                T* row = gx.data() + (l * stride + i) * C;
                for (std::int64_t c = 0; c < C; ++c) {
                    row[c] += g.at(l, c) * inv;
                }
            }
        }
        tp.accumulate(x, gx);
    });
}

/// Layer norm over the last axis of x [N,W] with affine gamma, beta [W].
template <typename T>
Var layer_norm(Tape<T>& t, Var x, Var gamma, Var beta, double eps = 1e-5) {
    const Tensor<T>& xv = t.val(x);
    const Tensor<T>& gv = t.val(gamma);
    detail::require(xv.rank() == 2 && gv.numel() == xv.dim(1) && t.val(beta).numel() == xv.dim(1),
                    "layer_norm: want x [N,W], gamma/beta [W], got " + detail::shape_str(xv.shape()));
    const std::int64_t N = xv.dim(0), W = xv.dim(1);
    Tensor<T> y({N, W});
    Tensor<T> xhat({N, W});
    std::vector<T> invstd(static_cast<std::size_t>(N));
    const Tensor<T>& bv = t.val(beta);
    for (std::int64_t i = 0; i < N; ++i) {
        double mean = 0.0;
        for (std::int64_t j = 0; j < W; ++j) {
            mean += static_cast<double>(xv.at(i, j));
        }
        mean /= static_cast<double>(W);
        double var = 0.0;
        for (std::int64_t j = 0; j < W; ++j) {
            const double d = static_cast<double>(xv.at(i, j)) - mean;
            var += d * d;
        }
        var /= static_cast<double>(W);
        const T is = static_cast<T>(1.0 / std::sqrt(var + eps));
        invstd[static_cast<std::size_t>(i)] = is;
        for (std::int64_t j = 0; j < W; ++j) {
            const T xh = (xv.at(i, j) - static_cast<T>(mean)) * is;
            xhat.at(i, j) = xh;
            y.at(i, j) = gv[j] * xh + bv[j];
        }
    }
    return t.record(std::move(y), {x, gamma, beta},
                    [x, gamma, beta, xhat = std::move(xhat), invstd = std::move(invstd), N,
                     W](Tape<T>& tp, const Tensor<T>& g) {
                        const Tensor<T>& gv = tp.val(gamma);
                        if (tp.requires_grad(gamma)) {
                            Tensor<T> gg({W});
                            for (std::int64_t i = 0; i < N; ++i) {
                                for (std::int64_t j = 0; j < W; ++j) {
                                    gg[j] += g.at(i, j) * xhat.at(i, j);
                                }
                            }
                            tp.accumulate(gamma, gg);
                        }
                        if (tp.requires_grad(beta)) {
                            Tensor<T> gb({W});
                            for (std::int64_t i = 0; i < N; ++i) {
                                for (std::int64_t j = 0; j < W; ++j) {
                                    gb[j] += g.at(i, j);
                                }
                            }
                            tp.accumulate(beta, gb);
                        }
                        if (tp.requires_grad(x)) {
                            Tensor<T> gx({N, W});
                            for (std::int64_t i = 0; i < N; ++i) {
                                double sum_d = 0.0, sum_dx = 0.0;
                                for (std::int64_t j = 0; j < W; ++j) {
                                    const double d = static_cast<double>(g.at(i, j) * gv[j]);
                                    sum_d += d;
                                    sum_dx += d * static_cast<double>(xhat.at(i, j));
                                }
                                const double m1 = sum_d / static_cast<double>(W);
                                const double m2 = sum_dx / static_cast<double>(W);
                                const T is = invstd[static_cast<std::size_t>(i)];
                                for (std::int64_t j = 0; j < W; ++j) {
                                    const double d = static_cast<double>(g.at(i, j) * gv[j]);
                                    gx.at(i, j) = static_cast<T>(
                                        (d - m1 - static_cast<double>(xhat.at(i, j)) * m2) * static_cast<double>(is));
                                }
                            }
                            tp.accumulate(x, gx);
                        }
                    });
}

/// Group norm over x [C,L]; statistics per group of C/groups channels.
template <typename T>
Var group_norm(Tape<T>& t, Var x, std::int64_t groups, Var gamma, Var beta, double eps = 1e-6) {
    const Tensor<T>& xv = t.val(x);
    detail::require(xv.rank() == 2, "group_norm: want [C,L], got " + detail::shape_str(xv.shape()));
    const std::int64_t C = xv.dim(0), L = xv.dim(1);
    detail::require(groups >= 1 && C % groups == 0,
                    "group_norm: C=" + std::to_string(C) + " not divisible by groups=" + std::to_string(groups));
    detail::require(t.val(gamma).numel() == C && t.val(beta).numel() == C, "group_norm: affine size mismatch");
    const std::int64_t gc = C / groups;
    const std::int64_t m = gc * L;
    const Tensor<T>& gv = t.val(gamma);
    const Tensor<T>& bv = t.val(beta);
    Tensor<T> y({C, L});
    Tensor<T> xhat({C, L});
    std::vector<T> invstd(static_cast<std::size_t>(groups));
    for (std::int64_t g0 = 0; g0 < groups; ++g0) {
        const std::int64_t c0 = g0 * gc;
        double mean = 0.0;
        for (std::int64_t c = c0; c < c0 + gc; ++c) {
            for (std::int64_t l = 0; l < L; ++l) {
                mean += static_cast<double>(xv.at(c, l));
            }
        }
        mean /= static_cast<double>(m);
        double var = 0.0;
        for (std::int64_t c = c0; c < c0 + gc; ++c) {
            for (std::int64_t l = 0; l < L; ++l) {
                const double d = static_cast<double>(xv.at(c, l)) - mean;
                var += d * d;
            }
        }
        var /= static_cast<double>(m);
        const T is = static_cast<T>(1.0 / std::sqrt(var + eps));
        invstd[static_cast<std::size_t>(g0)] = is;
        for (std::int64_t c = c0; c < c0 + gc; ++c) {
            for (std::int64_t l = 0; l < L; ++l) {
                const T xh = (xv.at(c, l) - static_cast<T>(mean)) * is;
                xhat.at(c, l) = xh;
                y.at(c, l) = gv[c] * xh + bv[c];
            }
        }
    }
    return t.record(std::move(y), {x, gamma, beta},
                    [x, gamma, beta, xhat = std::move(xhat), invstd = std::move(invstd), groups, gc, L, C,
                     m](Tape<T>& tp, const Tensor<T>& g) {
                        const Tensor<T>& gv = tp.val(gamma);
                        if (tp.requires_grad(gamma)) {
                            Tensor<T> gg({C});
                            for (std::int64_t c = 0; c < C; ++c) {
                                for (std::int64_t l = 0; l < L; ++l) {
                                    gg[c] += g.at(c, l) * xhat.at(c, l);
                                }
                            }
                            tp.accumulate(gamma, gg);
                        }
                        if (tp.requires_grad(beta)) {
                            Tensor<T> gb({C});
                            for (std::int64_t c = 0; c < C; ++c) {
                                for (std::int64_t l = 0; l < L; ++l) {
                                    gb[c] += g.at(c, l);
                                }
                            }
                            tp.accumulate(beta, gb);
                        }
                        if (tp.requires_grad(x)) {
                            Tensor<T> gx({C, L});
                            for (std::int64_t g0 = 0; g0 < groups; ++g0) {
                                const std::int64_t c0 = g0 * gc;
                                double sum_d = 0.0, sum_dx = 0.0;
                                for (std::int64_t c = c0; c < c0 + gc; ++c) {
                                    for (std::int64_t l = 0; l < L; ++l) {
                                        const double d = static_cast<double>(g.at(c, l) * gv[c]);
                                        sum_d += d;
                                        sum_dx += d * static_cast<double>(xhat.at(c, l));
                                    }
                                }
                                const double m1 = sum_d / static_cast<double>(m);
                                const double m2 = sum_dx / static_cast<double>(m);
                                const double is = static_cast<double>(invstd[static_cast<std::size_t>(g0)]);
                                for (std::int64_t c = c0; c < c0 + gc; ++c) {
                                    for (std::int64_t l = 0; l < L; ++l) {
                                        const double d = static_cast<double>(g.at(c, l) * gv[c]);
                                        gx.at(c, l) = static_cast<T>(
                                            (d - m1 - static_cast<double>(xhat.at(c, l)) * m2) * is);
                                    }
                                }
                            }
                            tp.accumulate(x, gx);
                        }
                    });
}

/// Batch norm over x [C,L] (statistics per channel across positions, the
/// per-sample layout used throughout). Running statistics live outside the
/// tape and are updated in place during training.
template <typename T>
Var batch_norm1d(Tape<T>& t, Var x, Var gamma, Var beta, Tensor<T>& running_mean, Tensor<T>& running_var,
                 double momentum, double eps, bool training) {
    const Tensor<T>& xv = t.val(x);
    detail::require(xv.rank() == 2, "batch_norm1d: want [C,L], got " + detail::shape_str(xv.shape()));
    const std::int64_t C = xv.dim(0), L = xv.dim(1);
    detail::require(t.val(gamma).numel() == C && t.val(beta).numel() == C && running_mean.numel() == C &&
                        running_var.numel() == C,
                    "batch_norm1d: channel size mismatch");
    const Tensor<T>& gv = t.val(gamma);
    const Tensor<T>& bv = t.val(beta);
    Tensor<T> y({C, L});
    if (!training) {
        std::vector<T> sc(static_cast<std::size_t>(C));
        for (std::int64_t c = 0; c < C; ++c) {
            sc[static_cast<std::size_t>(c)] =
                static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps));
            for (std::int64_t l = 0; l < L; ++l) {
                y.at(c, l) = gv[c] * (xv.at(c, l) - running_mean[c]) * sc[static_cast<std::size_t>(c)] + bv[c];
            }
        }
        Tensor<T> rm = running_mean;
        return t.record(std::move(y), {x, gamma, beta},
                        [x, gamma, beta, sc = std::move(sc), rm = std::move(rm), C, L](Tape<T>& tp,
                                                                                       const Tensor<T>& g) {
                            const Tensor<T>& gv = tp.val(gamma);
                            const Tensor<T>& xvv = tp.val(x);
                            if (tp.requires_grad(x)) {
                                Tensor<T> gx({C, L});
                                for (std::int64_t c = 0; c < C; ++c) {
                                    const T k = gv[c] * sc[static_cast<std::size_t>(c)];
                                    for (std::int64_t l = 0; l < L; ++l) {
                                        gx.at(c, l) = g.at(c, l) * k;
                                    }
                                }
                                tp.accumulate(x, gx);
                            }
                            if (tp.requires_grad(gamma)) {
                                Tensor<T> gg({C});
                                for (std::int64_t c = 0; c < C; ++c) {
                                    for (std::int64_t l = 0; l < L; ++l) {
                                        gg[c] += g.at(c, l) * (xvv.at(c, l) - rm[c]) * sc[static_cast<std::size_t>(c)];
                                    }
                                }
                                tp.accumulate(gamma, gg);
                            }
                            if (tp.requires_grad(beta)) {
                                Tensor<T> gb({C});
                                for (std::int64_t c = 0; c < C; ++c) {
                                    for (std::int64_t l = 0; l < L; ++l) {
                                        gb[c] += g.at(c, l);
                                    }
                                }
                                tp.accumulate(beta, gb);
                            }
                        });
    }

    detail::require(L >= 2, "batch_norm1d: need at least 2 positions in training mode");
    Tensor<T> xhat({C, L});
    std::vector<T> invstd(static_cast<std::size_t>(C));
    for (std::int64_t c = 0; c < C; ++c) {
        double mean = 0.0;
        for (std::int64_t l = 0; l < L; ++l) {
            mean += static_cast<double>(xv.at(c, l));
        }
        mean /= static_cast<double>(L);
        double var = 0.0;
        for (std::int64_t l = 0; l < L; ++l) {
            const double d = static_cast<double>(xv.at(c, l)) - mean;
            var += d * d;
        }
        var /= static_cast<double>(L);
        const T is = static_cast<T>(1.0 / std::sqrt(var + eps));
        invstd[static_cast<std::size_t>(c)] = is;
        for (std::int64_t l = 0; l < L; ++l) {
            const T xh = (xv.at(c, l) - static_cast<T>(mean)) * is;
            xhat.at(c, l) = xh;
            y.at(c, l) = gv[c] * xh + bv[c];
        }
        const double unbiased = var * static_cast<double>(L) / static_cast<double>(L - 1);
        running_mean[c] = static_cast<T>((1.0 - momentum) * static_cast<double>(running_mean[c]) + momentum * mean);
        running_var[c] = static_cast<T>((1.0 - momentum) * static_cast<double>(running_var[c]) + momentum * unbiased);
    }
    return t.record(std::move(y), {x, gamma, beta},
                    [x, gamma, beta, xhat = std::move(xhat), invstd = std::move(invstd), C,
                     L](Tape<T>& tp, const Tensor<T>& g) {
                        const Tensor<T>& gv = tp.val(gamma);
                        if (tp.requires_grad(gamma)) {
                            Tensor<T> gg({C});
                            for (std::int64_t c = 0; c < C; ++c) {
                                for (std::int64_t l = 0; l < L; ++l) {
                                    gg[c] += g.at(c, l) * xhat.at(c, l);
                                }
                            }
                            tp.accumulate(gamma, gg);
                        }
                        if (tp.requires_grad(beta)) {
                            Tensor<T> gb({C});
                            for (std::int64_t c = 0; c < C; ++c) {
                                for (std::int64_t l = 0; l < L; ++l) {
                                    gb[c] += g.at(c, l);
                                }
                            }
                            tp.accumulate(beta, gb);
                        }
                        if (tp.requires_grad(x)) {
                            Tensor<T> gx({C, L});
                            for (std::int64_t c = 0; c < C; ++c) {
                                double sum_d = 0.0, sum_dx = 0.0;
                                for (std::int64_t l = 0; l < L; ++l) {
                                    const double d = static_cast<double>(g.at(c, l) * gv[c]);
                                    sum_d += d;
                                    sum_dx += d * static_cast<double>(xhat.at(c, l));
                                }
                                const double m1 = sum_d / static_cast<double>(L);
                                const double m2 = sum_dx / static_cast<double>(L);
                                const double is = static_cast<double>(invstd[static_cast<std::size_t>(c)]);
                                for (std::int64_t l = 0; l < L; ++l) {
                                    const double d = static_cast<double>(g.at(c, l) * gv[c]);
                                    gx.at(c, l) =
                                        static_cast<T>((d - m1 - static_cast<double>(xhat.at(c, l)) * m2) * is);
                                }
                            }
                            tp.accumulate(x, gx);
                        }
                    });
}

/// Softmax over the last axis (rank 1 or 2). Entries of -inf get probability
/// exactly zero.
template <typename T>
Var softmax(Tape<T>& t, Var x) {
    const Tensor<T>& xv = t.val(x);
    detail::require(xv.rank() == 1 || xv.rank() == 2, "softmax: want rank 1 or 2");
    const std::int64_t N = xv.rank() == 2 ? xv.dim(0) : 1;
    const std::int64_t W = xv.rank() == 2 ? xv.dim(1) : xv.dim(0);
    Tensor<T> y(xv.shape());
    for (std::int64_t i = 0; i < N; ++i) {
        const T* row = xv.data() + i * W;
        T* out = y.data() + i * W;
        T mx = row[0];
        for (std::int64_t j = 1; j < W; ++j) {
            mx = std::max(mx, row[j]);
        }
        detail::require(std::isfinite(static_cast<double>(mx)), "softmax: row with no finite entry");
        double denom = 0.0;
        for (std::int64_t j = 0; j < W; ++j) {
            const double e = std::exp(static_cast<double>(row[j] - mx));
            out[j] = static_cast<T>(e);
            denom += e;
        }
        const T inv = static_cast<T>(1.0 / denom);
        for (std::int64_t j = 0; j < W; ++j) {
            out[j] *= inv;
        }
    }
    Tensor<T> ysave = y;
    return t.record(std::move(y), {x}, [x, ysave = std::move(ysave), N, W](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> gx(ysave.shape());
        for (std::int64_t i = 0; i < N; ++i) {
            double acc = 0.0;
            for (std::int64_t j = 0; j < W; ++j) {
                acc += static_cast<double>(g.data()[i * W + j]) * static_cast<double>(ysave.data()[i * W + j]);
            }
            for (std::int64_t j = 0; j < W; ++j) {
                const std::int64_t o = i * W + j;
                gx.data()[o] = ysave.data()[o] * (g.data()[o] - static_cast<T>(acc));
            }
        }
        tp.accumulate(x, gx);
    });
}

/// Log-softmax over the last axis (rank 1 or 2).
template <typename T>
Var log_softmax(Tape<T>& t, Var x) {
    const Tensor<T>& xv = t.val(x);
    detail::require(xv.rank() == 1 || xv.rank() == 2, "log_softmax: want rank 1 or 2");
    const std::int64_t N = xv.rank() == 2 ? xv.dim(0) : 1;
    const std::int64_t W = xv.rank() == 2 ? xv.dim(1) : xv.dim(0);
    Tensor<T> y(xv.shape());
    for (std::int64_t i = 0; i < N; ++i) {
        const T* row = xv.data() + i * W;
        T* out = y.data() + i * W;
        T mx = row[0];
        for (std::int64_t j = 1; j < W; ++j) {
            mx = std::max(mx, row[j]);
        }
        detail::require(std::isfinite(static_cast<double>(mx)), "log_softmax: row with no finite entry");
        double denom = 0.0;
        for (std::int64_t j = 0; j < W; ++j) {
            denom += std::exp(static_cast<double>(row[j] - mx));
        }
        const T lse = mx + static_cast<T>(std::log(denom));
        for (std::int64_t j = 0; j < W; ++j) {
            out[j] = row[j] - lse;
        }
    }
    Tensor<T> ysave = y;
    return t.record(std::move(y), {x}, [x, ysave = std::move(ysave), N, W](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> gx(ysave.shape());
        for (std::int64_t i = 0; i < N; ++i) {
            double acc = 0.0;
            for (std::int64_t j = 0; j < W; ++j) {
                acc += static_cast<double>(g.data()[i * W + j]);
            }
            for (std::int64_t j = 0; j < W; ++j) {
                const std::int64_t o = i * W + j;
                gx.data()[o] =
                    g.data()[o] - static_cast<T>(std::exp(static_cast<double>(ysave.data()[o])) * acc);
            }
        }
        tp.accumulate(x, gx);
    });
}

/// Rows of a table [V,E] selected by ids; rows at padding_idx receive no
/// gradient (the padding embedding is frozen).
template <typename T>
Var embedding(Tape<T>& t, Var table, const std::vector<std::int64_t>& ids, std::int64_t padding_idx = -1) {
    const Tensor<T>& tv = t.val(table);
    detail::require(tv.rank() == 2, "embedding: table must be [V,E]");
    const std::int64_t V = tv.dim(0), E = tv.dim(1);
    const std::int64_t n = static_cast<std::int64_t>(ids.size());
    detail::require(n >= 1, "embedding: empty id list");
    Tensor<T> y({n, E});
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t id = ids[static_cast<std::size_t>(i)];
        detail::require(id >= 0 && id < V, "embedding: id " + std::to_string(id) + " out of range [0," +
                                               std::to_string(V) + ")");
        std::copy(tv.data() + id * E, tv.data() + (id + 1) * E, y.data() + i * E);
    }
    return t.record(std::move(y), {table}, [table, ids, padding_idx, E, n](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> gt(tp.val(table).shape());
        for (std::int64_t i = 0; i < n; ++i) {
            const std::int64_t id = ids[static_cast<std::size_t>(i)];
            if (id == padding_idx) {
                continue;
            }
            T* dst = gt.data() + id * E;
            const T* src = g.data() + i * E;
            for (std::int64_t j = 0; j < E; ++j) {
                dst[j] += src[j];
            }
        }
        tp.accumulate(table, gt);
    });
}

/// y[i] = x[i, ids[i]] for x [N,C]; used for per-target log probabilities.
template <typename T>
Var gather_rows(Tape<T>& t, Var x, const std::vector<std::int64_t>& ids) {
    const Tensor<T>& xv = t.val(x);
    detail::require(xv.rank() == 2 && static_cast<std::int64_t>(ids.size()) == xv.dim(0),
                    "gather_rows: want [N,C] and N ids");
    const std::int64_t N = xv.dim(0), C = xv.dim(1);
    Tensor<T> y({N});
    for (std::int64_t i = 0; i < N; ++i) {
        const std::int64_t id = ids[static_cast<std::size_t>(i)];
        detail::require(id >= 0 && id < C, "gather_rows: id out of range");
        y[i] = xv.at(i, id);
    }
    return t.record(std::move(y), {x}, [x, ids, N, C](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> gx({N, C});
        for (std::int64_t i = 0; i < N; ++i) {
            gx.at(i, ids[static_cast<std::size_t>(i)]) = g[i];
        }
        tp.accumulate(x, gx);
    });
}

/// Copies x and pins one column to -inf. The pinned column's input logit
/// receives zero gradient.
template <typename T>
Var mask_column(Tape<T>& t, Var x, std::int64_t col) {
    const Tensor<T>& xv = t.val(x);
    detail::require(xv.rank() == 2 && col >= 0 && col < xv.dim(1), "mask_column: bad column");
    const std::int64_t N = xv.dim(0), W = xv.dim(1);
    Tensor<T> y = xv;
    for (std::int64_t i = 0; i < N; ++i) {
        y.at(i, col) = -std::numeric_limits<T>::infinity();
    }
    return t.record(std::move(y), {x}, [x, col, N](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> gx = g;
        for (std::int64_t i = 0; i < N; ++i) {
            gx.at(i, col) = T(0);
        }
        tp.accumulate(x, gx);
    });
}

/// y[b*D + d] = sum_{d'<d} x[b*D + d'] for x [B*D, W]; row d = 0 of every
/// block is zero. Builds the depth-transformer inputs from token embeddings.
template <typename T>
Var shifted_block_cumsum(Tape<T>& t, Var x, std::int64_t D) {
    const Tensor<T>& xv = t.val(x);
    detail::require(xv.rank() == 2 && D >= 1 && xv.dim(0) % D == 0, "shifted_block_cumsum: rows not divisible by D");
    const std::int64_t B = xv.dim(0) / D, W = xv.dim(1);
    Tensor<T> y({B * D, W});
    for (std::int64_t b = 0; b < B; ++b) {
        for (std::int64_t d = 1; d < D; ++d) {
            const T* prev = y.data() + (b * D + d - 1) * W;
            const T* xr = xv.data() + (b * D + d - 1) * W;
            T* out = y.data() + (b * D + d) * W;
            for (std::int64_t j = 0; j < W; ++j) {
                out[j] = prev[j] + xr[j];
            }
        }
    }
    return t.record(std::move(y), {x}, [x, B, D, W](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> gx({B * D, W});
        for (std::int64_t b = 0; b < B; ++b) {
            std::vector<T> suffix(static_cast<std::size_t>(W), T(0));
            for (std::int64_t d = D - 1; d >= 0; --d) {
                T* out = gx.data() + (b * D + d) * W;
                const T* gr = g.data() + (b * D + d) * W;
                for (std::int64_t j = 0; j < W; ++j) {
                    out[j] = suffix[static_cast<std::size_t>(j)];
                    suffix[static_cast<std::size_t>(j)] += gr[j];
                }
            }
        }
        tp.accumulate(x, gx);
    });
}

/// Spreads h [B,W] into [B*D, W] with h[b] at row b*D and zeros elsewhere.
template <typename T>
Var expand_rows_strided(Tape<T>& t, Var h, std::int64_t D) {
    const Tensor<T>& hv = t.val(h);
    detail::require(hv.rank() == 2 && D >= 1, "expand_rows_strided: want [B,W]");
    const std::int64_t B = hv.dim(0), W = hv.dim(1);
    Tensor<T> y({B * D, W});
    for (std::int64_t b = 0; b < B; ++b) {
        std::copy(hv.data() + b * W, hv.data() + (b + 1) * W, y.data() + b * D * W);
    }
    return t.record(std::move(y), {h}, [h, B, D, W](Tape<T>& tp, const Tensor<T>& g) {
        Tensor<T> gh({B, W});
        for (std::int64_t b = 0; b < B; ++b) {
            std::copy(g.data() + b * D * W, g.data() + (b * D + 1) * W, gh.data() + b * W);
        }
        tp.accumulate(h, gh);
    });
}

enum class AttnMask { none, causal, block_causal };

/// Masked multi-head scaled dot-product attention. q, k, v are already
/// projected, shape [S,W] with W = heads * head_dim. causal masks j > i;
/// block_causal additionally restricts attention to the block of `block`
/// consecutive rows containing i (independent causal sequences laid out
/// back to back). Masked scores are -inf so masked probabilities are exactly
/// zero. attn_drop applies to the attention weights in training mode.
template <typename T>
Var attention(Tape<T>& t, Var q, Var k, Var v, std::int64_t heads, AttnMask mask, std::int64_t block,
              double attn_drop, bool training, Rng* rng) {
    const Tensor<T>& qv = t.val(q);
    const Tensor<T>& kv = t.val(k);
    const Tensor<T>& vv = t.val(v);
    detail::require(qv.rank() == 2 && kv.rank() == 2 && vv.rank() == 2, "attention: want rank-2 q, k, v");
    detail::require(qv.same_shape(kv) && qv.same_shape(vv), "attention: q, k, v must share shape, got " +
                                                                detail::shape_str(qv.shape()) + ", " +
                                                                detail::shape_str(kv.shape()) + ", " +
                                                                detail::shape_str(vv.shape()));
    const std::int64_t S = qv.dim(0), W = qv.dim(1);
    detail::require(heads >= 1 && W % heads == 0, "attention: width " + std::to_string(W) +
                                                      " not divisible by heads " + std::to_string(heads));
    if (mask == AttnMask::block_causal) {
        detail::require(block >= 1 && S % block == 0, "attention: rows not divisible by block");
    }
    const std::int64_t hd = W / heads;
    const T sc = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));
    const bool drop = training && attn_drop > 0.0;
    detail::require(!drop || rng != nullptr, "attention: rng required for attention dropout");
    const T dinv = drop ? static_cast<T>(1.0 / (1.0 - attn_drop)) : T(1);

    auto allowed = [mask, block](std::int64_t i, std::int64_t j) {
        switch (mask) {
            case AttnMask::none:
                return true;
            case AttnMask::causal:
                return j <= i;
            case AttnMask::block_causal:
                return j <= i && j / block == i / block;
        }
        return true;
    };

    Tensor<T> y({S, W});
    // per head: probabilities after softmax (pre dropout) and the keep mask
    std::vector<Tensor<T>> probs(static_cast<std::size_t>(heads));
    std::vector<std::vector<std::uint8_t>> keeps(static_cast<std::size_t>(heads));
    for (std::int64_t h = 0; h < heads; ++h) {
        Tensor<T>& P = probs[static_cast<std::size_t>(h)];
        P = Tensor<T>({S, S});
        const std::int64_t c0 = h * hd;
        for (std::int64_t i = 0; i < S; ++i) {
            T mx = -std::numeric_limits<T>::infinity();
            for (std::int64_t j = 0; j < S; ++j) {
                if (!allowed(i, j)) {
                    P.at(i, j) = -std::numeric_limits<T>::infinity();
                    continue;
                }
                T dot = T(0);
                const T* qi = qv.data() + i * W + c0;
                const T* kj = kv.data() + j * W + c0;
                for (std::int64_t d = 0; d < hd; ++d) {
                    dot += qi[d] * kj[d];
                }
                dot *= sc;
                P.at(i, j) = dot;
                mx = std::max(mx, dot);
            }
            double denom = 0.0;
            for (std::int64_t j = 0; j < S; ++j) {
                const double e = std::isfinite(static_cast<double>(P.at(i, j)))
                                     ? std::exp(static_cast<double>(P.at(i, j) - mx))
                                     : 0.0;
                P.at(i, j) = static_cast<T>(e);
                denom += e;
            }
            const T inv = static_cast<T>(1.0 / denom);
            for (std::int64_t j = 0; j < S; ++j) {
                P.at(i, j) *= inv;
            }
        }
        std::vector<std::uint8_t>& keep = keeps[static_cast<std::size_t>(h)];
        if (drop) {
            keep.resize(static_cast<std::size_t>(S * S));
            for (std::int64_t i = 0; i < S * S; ++i) {
                keep[static_cast<std::size_t>(i)] = rng->uniform() >= attn_drop ? 1 : 0;
            }
        }
        for (std::int64_t i = 0; i < S; ++i) {
            T* out = y.data() + i * W + c0;
            for (std::int64_t j = 0; j < S; ++j) {
                T p = P.at(i, j);
                if (drop) {
                    p = keep[static_cast<std::size_t>(i * S + j)] ? p * dinv : T(0);
                }
                if (p == T(0)) {
                    continue;
                }
                const T* vj = vv.data() + j * W + c0;
                for (std::int64_t d = 0; d < hd; ++d) {
                    out[d] += p * vj[d];
                }
            }
        }
    }
    return t.record(
        std::move(y), {q, k, v},
        [q, k, v, heads, probs = std::move(probs), keeps = std::move(keeps), S, W, hd, sc, drop,
         dinv](Tape<T>& tp, const Tensor<T>& g) {
            const Tensor<T>& qvv = tp.val(q);
            const Tensor<T>& kvv = tp.val(k);
            const Tensor<T>& vvv = tp.val(v);
            Tensor<T> gq({S, W});
            Tensor<T> gk({S, W});
            Tensor<T> gv({S, W});
            for (std::int64_t h = 0; h < heads; ++h) {
                const Tensor<T>& P = probs[static_cast<std::size_t>(h)];
                const std::vector<std::uint8_t>* keep =
                    drop ? &keeps[static_cast<std::size_t>(h)] : nullptr;
                const std::int64_t c0 = h * hd;
                // dressed probabilities (after dropout) for dV; dP through the
                // same mask
                Tensor<T> dP({S, S});
                for (std::int64_t i = 0; i < S; ++i) {
                    const T* gi = g.data() + i * W + c0;
                    for (std::int64_t j = 0; j < S; ++j) {
                        T p = P.at(i, j);
                        if (keep) {
                            p = (*keep)[static_cast<std::size_t>(i * S + j)] ? p * dinv : T(0);
                        }
                        if (p != T(0)) {
                            T* gvj = gv.data() + j * W + c0;
                            const T* vj = vvv.data() + j * W + c0;
                            T dot = T(0);
                            for (std::int64_t d = 0; d < hd; ++d) {
                                gvj[d] += p * gi[d];
                                dot += gi[d] * vj[d];
                            }
                            dP.at(i, j) = keep ? ((*keep)[static_cast<std::size_t>(i * S + j)] ? dot * dinv : T(0))
                                               : dot;
                        } else if (keep && P.at(i, j) != T(0)) {
                            dP.at(i, j) = T(0);
                        }
                    }
                }
                // softmax backward per row: dS = P * (dP - sum(dP * P))
                for (std::int64_t i = 0; i < S; ++i) {
                    double acc = 0.0;
                    for (std::int64_t j = 0; j < S; ++j) {
                        acc += static_cast<double>(dP.at(i, j)) * static_cast<double>(P.at(i, j));
                    }
                    const T* qi = qvv.data() + i * W + c0;
                    T* gqi = gq.data() + i * W + c0;
                    for (std::int64_t j = 0; j < S; ++j) {
                        const T ds = P.at(i, j) * (dP.at(i, j) - static_cast<T>(acc));
                        if (ds == T(0)) {
                            continue;
                        }
                        const T dss = ds * sc;
                        const T* kj = kvv.data() + j * W + c0;
                        T* gkj = gk.data() + j * W + c0;
                        for (std::int64_t d = 0; d < hd; ++d) {
                            gqi[d] += dss * kj[d];
                            gkj[d] += dss * qi[d];
                        }
                    }
                }
            }
            tp.accumulate(q, gq);
            tp.accumulate(k, gk);
            tp.accumulate(v, gv);
        });
}

/// Identity value, zero gradient flow. Implements sg[.].
template <typename T>
Var stop_gradient(Tape<T>& t, Var a) {
    return t.constant(t.val(a));
}

/// Straight-through estimator: forward value is `value`, backward passes the
/// incoming gradient unchanged to grad_path. Shapes must agree.
template <typename T>
Var straight_through(Tape<T>& t, Var grad_path, Tensor<T> value) {
    detail::require(t.val(grad_path).same_shape(value), "straight_through: value shape " +
                                                            detail::shape_str(value.shape()) +
                                                            " does not match path shape " +
                                                            detail::shape_str(t.val(grad_path).shape()));
    return t.record(std::move(value), {grad_path},
                    [grad_path](Tape<T>& tp, const Tensor<T>& g) { tp.accumulate(grad_path, g); });
}

}  // namespace ops
}  // namespace gtok
