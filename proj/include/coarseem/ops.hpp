#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "coarseem/tensor.hpp"

namespace coarseem {

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

inline void check_finite(const Tensor& t, const char* op) {
    for (double v : t.values()) {
        if (!std::isfinite(v))
            throw std::runtime_error(std::string(op) + ": non-finite value in result");
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                        shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    Tensor out(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
    detail::check_finite(out, "add");
    if (auto* tape = Tape::active(); tape && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([ad = a.impl(), bd = b.impl(), od = out.impl()] {
            if (od->grad.empty()) return;
            if (ad->requires_grad) {
                ad->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
            }
            if (bd->requires_grad) {
                bd->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i) bd->grad[i] += od->grad[i];
            }
        });
    }
    return out;
}

inline Tensor add(const Tensor& a, double s) {
    Tensor out(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + s;
    detail::check_finite(out, "add");
    if (auto* tape = Tape::active(); tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([ad = a.impl(), od = out.impl()] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    Tensor out(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
    detail::check_finite(out, "sub");
    if (auto* tape = Tape::active(); tape && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([ad = a.impl(), bd = b.impl(), od = out.impl()] {
            if (od->grad.empty()) return;
            if (ad->requires_grad) {
                ad->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += od->grad[i];
            }
            if (bd->requires_grad) {
                bd->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i) bd->grad[i] -= od->grad[i];
            }
        });
    }
    return out;
}

inline Tensor sub(const Tensor& a, double s) { return add(a, -s); }

inline Tensor sub(double s, const Tensor& a) {
    Tensor out(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = s - av[i];
    detail::check_finite(out, "sub");
    if (auto* tape = Tape::active(); tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([ad = a.impl(), od = out.impl()] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] -= od->grad[i];
        });
    }
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    Tensor out(a.shape());
    const auto& av = a.values();
    const auto& bv = b.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
    detail::check_finite(out, "mul");
    if (auto* tape = Tape::active(); tape && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([ad = a.impl(), bd = b.impl(), od = out.impl()] {
            if (od->grad.empty()) return;
            if (ad->requires_grad) {
                ad->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i)
                    ad->grad[i] += od->grad[i] * bd->value[i];
            }
            if (bd->requires_grad) {
                bd->ensure_grad();
                for (std::size_t i = 0; i < od->grad.size(); ++i)
                    bd->grad[i] += od->grad[i] * ad->value[i];
            }
        });
    }
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * c;
    detail::check_finite(out, "scale");
    if (auto* tape = Tape::active(); tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([ad = a.impl(), od = out.impl(), c] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i) ad->grad[i] += c * od->grad[i];
        });
    }
    return out;
}

inline Tensor relu(const Tensor& a) {
    Tensor out(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > 0.0 ? av[i] : 0.0;
    if (auto* tape = Tape::active(); tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([ad = a.impl(), od = out.impl()] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i)
                if (ad->value[i] > 0.0) ad->grad[i] += od->grad[i];
        });
    }
    return out;
}

inline Tensor exp(const Tensor& a) {
    Tensor out(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::exp(av[i]);
    detail::check_finite(out, "exp");
    if (auto* tape = Tape::active(); tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([ad = a.impl(), od = out.impl()] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i)
                ad->grad[i] += od->grad[i] * od->value[i];
        });
    }
    return out;
}

inline Tensor log(const Tensor& a) {
    Tensor out(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        if (!(av[i] > 0.0)) throw std::invalid_argument("log: non-positive input");
        ov[i] = std::log(av[i]);
    }
    if (auto* tape = Tape::active(); tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([ad = a.impl(), od = out.impl()] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i)
                ad->grad[i] += od->grad[i] / ad->value[i];
        });
    }
    return out;
}

// Subgradient 0 at 0, matching the Laplace-loss convention.
inline Tensor abs(const Tensor& a) {
    Tensor out(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::fabs(av[i]);
    if (auto* tape = Tape::active(); tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([ad = a.impl(), od = out.impl()] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i) {
                double x = ad->value[i];
                if (x > 0.0)
                    ad->grad[i] += od->grad[i];
                else if (x < 0.0)
                    ad->grad[i] -= od->grad[i];
            }
        });
    }
    return out;
}

inline Tensor sigmoid(const Tensor& a) {
    Tensor out(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) {
        double x = av[i];
        if (x >= 0.0) {
            ov[i] = 1.0 / (1.0 + std::exp(-x));
        } else {
            double e = std::exp(x);
            ov[i] = e / (1.0 + e);
        }
    }
    if (auto* tape = Tape::active(); tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([ad = a.impl(), od = out.impl()] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i) {
                double y = od->value[i];
                ad->grad[i] += od->grad[i] * y * (1.0 - y);
            }
        });
    }
    return out;
}

// max(a, c); gradient passes only where a > c.
inline Tensor clamp_min(const Tensor& a, double c) {
    Tensor out(a.shape());
    const auto& av = a.values();
    auto& ov = out.values();
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > c ? av[i] : c;
    if (auto* tape = Tape::active(); tape && a.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([ad = a.impl(), od = out.impl(), c] {
            if (od->grad.empty()) return;
            ad->ensure_grad();
            for (std::size_t i = 0; i < od->grad.size(); ++i)
                if (ad->value[i] > c) ad->grad[i] += od->grad[i];
        });
    }
    return out;
}

enum class EwKind { Add, Sub, Mul, Scale, Relu, Exp, Log, Abs };

inline Tensor elementwise(EwKind kind, const Tensor& a, const Tensor& b) {
    switch (kind) {
        case EwKind::Add: return add(a, b);
        case EwKind::Sub: return sub(a, b);
        case EwKind::Mul: return mul(a, b);
        default: throw std::invalid_argument("elementwise: kind is not a binary tensor op");
    }
}

inline Tensor elementwise(EwKind kind, const Tensor& a, double s = 0.0) {
    switch (kind) {
        case EwKind::Add: return add(a, s);
        case EwKind::Sub: return sub(a, s);
        case EwKind::Mul:
        case EwKind::Scale: return scale(a, s);
        case EwKind::Relu: return relu(a);
        case EwKind::Exp: return exp(a);
        case EwKind::Log: return log(a);
        case EwKind::Abs: return abs(a);
    }
    throw std::invalid_argument("elementwise: unknown kind");
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require(a.ndim() == 2 && b.ndim() == 2, "matmul: operands must be 2-D");
    detail::require(a.dim(1) == b.dim(0), "matmul: inner dimensions disagree: " +
                                              shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    const std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
    Tensor out(Shape{M, N});
    const double* A = a.values().data();
    const double* B = b.values().data();
    double* C = out.values().data();
    for (std::int64_t m = 0; m < M; ++m) {
        double* crow = C + m * N;
        for (std::int64_t k = 0; k < K; ++k) {
            const double av = A[m * K + k];
            const double* brow = B + k * N;
            for (std::int64_t n = 0; n < N; ++n) crow[n] += av * brow[n];
        }
    }
    detail::check_finite(out, "matmul");
    if (auto* tape = Tape::active(); tape && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([ad = a.impl(), bd = b.impl(), od = out.impl(), M, K, N] {
            if (od->grad.empty()) return;
            const double* dC = od->grad.data();
            if (ad->requires_grad) {
                ad->ensure_grad();
                double* dA = ad->grad.data();
                const double* B = bd->value.data();
                for (std::int64_t m = 0; m < M; ++m)
                    for (std::int64_t k = 0; k < K; ++k) {
                        double acc = 0.0;
                        for (std::int64_t n = 0; n < N; ++n) acc += dC[m * N + n] * B[k * N + n];
                        dA[m * K + k] += acc;
                    }
            }
            if (bd->requires_grad) {
                bd->ensure_grad();
                double* dB = bd->grad.data();
                const double* A = ad->value.data();
                for (std::int64_t m = 0; m < M; ++m)
                    for (std::int64_t k = 0; k < K; ++k) {
                        const double av = A[m * K + k];
                        for (std::int64_t n = 0; n < N; ++n) dB[k * N + n] += av * dC[m * N + n];
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv2d (cross-correlation, NCHW)
// ---------------------------------------------------------------------------

namespace detail {

struct ConvDims {
    std::int64_t N, Cin, H, W, Cout, kh, kw, outH, outW;
    int stride, pad;
};

inline ConvDims conv_dims(const Tensor& input, const Tensor& kernel, const Tensor& bias,
                          int stride, int pad) {
    require(input.ndim() == 4, "conv2d: input must be N x C x H x W");
    require(kernel.ndim() == 4, "conv2d: kernel must be Cout x Cin x kh x kw");
    require(stride >= 1, "conv2d: stride must be positive");
    require(pad >= 0, "conv2d: pad must be non-negative");
    ConvDims d;
    d.N = input.dim(0);
    d.Cin = input.dim(1);
    d.H = input.dim(2);
    d.W = input.dim(3);
    d.Cout = kernel.dim(0);
    d.kh = kernel.dim(2);
    d.kw = kernel.dim(3);
    d.stride = stride;
    d.pad = pad;
    require(kernel.dim(1) == d.Cin, "conv2d: channel mismatch (kernel Cin " +
                                        std::to_string(kernel.dim(1)) + ", input Cin " +
                                        std::to_string(d.Cin) + ")");
    require(bias.ndim() == 1 && bias.dim(0) == d.Cout, "conv2d: bias must have Cout entries");
    const std::int64_t hn = d.H + 2 * pad - d.kh;
    const std::int64_t wn = d.W + 2 * pad - d.kw;
    require(hn >= 0 && wn >= 0 && hn % stride == 0 && wn % stride == 0,
            "conv2d: non-integral output size");
    d.outH = hn / stride + 1;
    d.outW = wn / stride + 1;
    return d;
}

// Valid output range [lo, hi) such that o*stride + k - pad stays inside [0, extent).
inline void conv_range(std::int64_t k, std::int64_t extent, std::int64_t out_extent, int stride,
                       int pad, std::int64_t& lo, std::int64_t& hi) {
    const std::int64_t off = k - pad;
    lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
    const std::int64_t top = extent - 1 - off;
    hi = top < 0 ? 0 : std::min<std::int64_t>(out_extent, top / stride + 1);
    if (hi < lo) hi = lo;
}

}  // namespace detail

inline Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, int stride,
                     int pad) {
    const auto d = detail::conv_dims(input, kernel, bias, stride, pad);
    Tensor out(Shape{d.N, d.Cout, d.outH, d.outW});
    const double* in = input.values().data();
    const double* ker = kernel.values().data();
    const double* bs = bias.values().data();
    double* dst = out.values().data();
    const std::int64_t inPlane = d.H * d.W;
    const std::int64_t outPlane = d.outH * d.outW;
    for (std::int64_t n = 0; n < d.N; ++n) {
        const double* inB = in + n * d.Cin * inPlane;
        double* outB = dst + n * d.Cout * outPlane;
        for (std::int64_t oc = 0; oc < d.Cout; ++oc) {
            double* plane = outB + oc * outPlane;
            const double bv = bs[oc];
            for (std::int64_t i = 0; i < outPlane; ++i) plane[i] = bv;
            for (std::int64_t ic = 0; ic < d.Cin; ++ic) {
                const double* inP = inB + ic * inPlane;
                const double* wBase = ker + ((oc * d.Cin + ic) * d.kh) * d.kw;
                for (std::int64_t r = 0; r < d.kh; ++r) {
                    std::int64_t oh_lo, oh_hi;
                    detail::conv_range(r, d.H, d.outH, stride, pad, oh_lo, oh_hi);
                    for (std::int64_t c = 0; c < d.kw; ++c) {
                        const double wv = wBase[r * d.kw + c];
                        std::int64_t ow_lo, ow_hi;
                        detail::conv_range(c, d.W, d.outW, stride, pad, ow_lo, ow_hi);
                        for (std::int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                            const std::int64_t ih = oh * stride + r - pad;
                            const double* src = inP + ih * d.W + (ow_lo * stride + c - pad);
                            double* drow = plane + oh * d.outW + ow_lo;
                            const std::int64_t cnt = ow_hi - ow_lo;
                            if (stride == 1) {
                                for (std::int64_t i = 0; i < cnt; ++i) drow[i] += wv * src[i];
                            } else {
                                for (std::int64_t i = 0; i < cnt; ++i)
                                    drow[i] += wv * src[i * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    detail::check_finite(out, "conv2d");
    if (auto* tape = Tape::active();
        tape && (input.requires_grad() || kernel.requires_grad() || bias.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([id = input.impl(), kd = kernel.impl(), bd = bias.impl(), od = out.impl(),
                      d] {
            if (od->grad.empty()) return;
            const double* dOut = od->grad.data();
            const std::int64_t inPlane = d.H * d.W;
            const std::int64_t outPlane = d.outH * d.outW;
            if (bd->requires_grad) {
                bd->ensure_grad();
                double* dB = bd->grad.data();
                for (std::int64_t oc = 0; oc < d.Cout; ++oc) {
                    double acc = 0.0;
                    for (std::int64_t n = 0; n < d.N; ++n) {
                        const double* plane = dOut + (n * d.Cout + oc) * outPlane;
                        for (std::int64_t i = 0; i < outPlane; ++i) acc += plane[i];
                    }
                    dB[oc] += acc;
                }
            }
            if (kd->requires_grad) {
                kd->ensure_grad();
                double* dK = kd->grad.data();
                const double* in = id->value.data();
                for (std::int64_t oc = 0; oc < d.Cout; ++oc)
                    for (std::int64_t ic = 0; ic < d.Cin; ++ic)
                        for (std::int64_t r = 0; r < d.kh; ++r) {
                            std::int64_t oh_lo, oh_hi;
                            detail::conv_range(r, d.H, d.outH, d.stride, d.pad, oh_lo, oh_hi);
                            for (std::int64_t c = 0; c < d.kw; ++c) {
                                std::int64_t ow_lo, ow_hi;
                                detail::conv_range(c, d.W, d.outW, d.stride, d.pad, ow_lo, ow_hi);
                                double acc = 0.0;
                                for (std::int64_t n = 0; n < d.N; ++n) {
                                    const double* gPlane = dOut + (n * d.Cout + oc) * outPlane;
                                    const double* inP = in + (n * d.Cin + ic) * inPlane;
                                    for (std::int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                                        const std::int64_t ih = oh * d.stride + r - d.pad;
                                        const double* src =
                                            inP + ih * d.W + (ow_lo * d.stride + c - d.pad);
                                        const double* grow = gPlane + oh * d.outW + ow_lo;
                                        const std::int64_t cnt = ow_hi - ow_lo;
                                        if (d.stride == 1) {
                                            for (std::int64_t i = 0; i < cnt; ++i)
                                                acc += grow[i] * src[i];
                                        } else {
                                            for (std::int64_t i = 0; i < cnt; ++i)
                                                acc += grow[i] * src[i * d.stride];
                                        }
                                    }
                                }
                                dK[((oc * d.Cin + ic) * d.kh + r) * d.kw + c] += acc;
                            }
                        }
            }
            if (id->requires_grad) {
                id->ensure_grad();
                double* dIn = id->grad.data();
                const double* ker = kd->value.data();
                for (std::int64_t n = 0; n < d.N; ++n) {
                    double* dInB = dIn + n * d.Cin * inPlane;
                    const double* gB = dOut + n * d.Cout * outPlane;
                    for (std::int64_t oc = 0; oc < d.Cout; ++oc) {
                        const double* gPlane = gB + oc * outPlane;
                        for (std::int64_t ic = 0; ic < d.Cin; ++ic) {
                            double* dInP = dInB + ic * inPlane;
                            const double* wBase = ker + ((oc * d.Cin + ic) * d.kh) * d.kw;
                            for (std::int64_t r = 0; r < d.kh; ++r) {
                                std::int64_t oh_lo, oh_hi;
                                detail::conv_range(r, d.H, d.outH, d.stride, d.pad, oh_lo, oh_hi);
                                for (std::int64_t c = 0; c < d.kw; ++c) {
                                    const double wv = wBase[r * d.kw + c];
                                    std::int64_t ow_lo, ow_hi;
                                    detail::conv_range(c, d.W, d.outW, d.stride, d.pad, ow_lo,
                                                       ow_hi);
                                    for (std::int64_t oh = oh_lo; oh < oh_hi; ++oh) {
                                        const std::int64_t ih = oh * d.stride + r - d.pad;
                                        double* drow =
                                            dInP + ih * d.W + (ow_lo * d.stride + c - d.pad);
                                        const double* grow = gPlane + oh * d.outW + ow_lo;
                                        const std::int64_t cnt = ow_hi - ow_lo;
                                        if (d.stride == 1) {
                                            for (std::int64_t i = 0; i < cnt; ++i)
                                                drow[i] += wv * grow[i];
                                        } else {
                                            for (std::int64_t i = 0; i < cnt; ++i)
                                                drow[i * d.stride] += wv * grow[i];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// upsample_nearest
// ---------------------------------------------------------------------------

inline Tensor upsample_nearest(const Tensor& input, int factor) {
    detail::require(input.ndim() == 4, "upsample_nearest: input must be 4-D");
    detail::require(factor >= 1, "upsample_nearest: factor must be >= 1");
    const std::int64_t N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
    const std::int64_t f = factor;
    Tensor out(Shape{N, C, H * f, W * f});
    const double* in = input.values().data();
    double* dst = out.values().data();
    const std::int64_t oW = W * f;
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
        const double* inP = in + nc * H * W;
        double* outP = dst + nc * H * f * oW;
        for (std::int64_t h = 0; h < H; ++h)
            for (std::int64_t r = 0; r < f; ++r) {
                double* row = outP + (h * f + r) * oW;
                const double* src = inP + h * W;
                for (std::int64_t w = 0; w < W; ++w) {
                    const double v = src[w];
                    for (std::int64_t c = 0; c < f; ++c) row[w * f + c] = v;
                }
            }
    }
    if (auto* tape = Tape::active(); tape && input.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([id = input.impl(), od = out.impl(), N, C, H, W, f] {
            if (od->grad.empty()) return;
            id->ensure_grad();
            const double* g = od->grad.data();
            double* dIn = id->grad.data();
            const std::int64_t oW = W * f;
            for (std::int64_t nc = 0; nc < N * C; ++nc) {
                const double* gP = g + nc * H * f * oW;
                double* dP = dIn + nc * H * W;
                for (std::int64_t h = 0; h < H; ++h)
                    for (std::int64_t r = 0; r < f; ++r) {
                        const double* row = gP + (h * f + r) * oW;
                        double* drow = dP + h * W;
                        for (std::int64_t w = 0; w < W; ++w) {
                            double acc = 0.0;
                            for (std::int64_t c = 0; c < f; ++c) acc += row[w * f + c];
                            drow[w] += acc;
                        }
                    }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// softmax / log-softmax over the channel axis of NCHW
// ---------------------------------------------------------------------------

inline Tensor softmax_channel(const Tensor& logits) {
    detail::require(logits.ndim() == 4, "softmax_channel: input must be N x C x H x W");
    const std::int64_t N = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    const std::int64_t P = H * W;
    Tensor out(logits.shape());
    const double* x = logits.values().data();
    double* y = out.values().data();
    for (std::int64_t n = 0; n < N; ++n) {
        const double* xb = x + n * C * P;
        double* yb = y + n * C * P;
        for (std::int64_t p = 0; p < P; ++p) {
            double m = xb[p];
            for (std::int64_t c = 1; c < C; ++c) m = std::max(m, xb[c * P + p]);
            double s = 0.0;
            for (std::int64_t c = 0; c < C; ++c) {
                const double e = std::exp(xb[c * P + p] - m);
                yb[c * P + p] = e;
                s += e;
            }
            const double inv = 1.0 / s;
            for (std::int64_t c = 0; c < C; ++c) yb[c * P + p] *= inv;
        }
    }
    if (auto* tape = Tape::active(); tape && logits.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([xd = logits.impl(), od = out.impl(), N, C, P] {
            if (od->grad.empty()) return;
            xd->ensure_grad();
            const double* y = od->value.data();
            const double* dy = od->grad.data();
            double* dx = xd->grad.data();
            for (std::int64_t n = 0; n < N; ++n) {
                const double* yb = y + n * C * P;
                const double* gb = dy + n * C * P;
                double* db = dx + n * C * P;
                for (std::int64_t p = 0; p < P; ++p) {
                    double dot = 0.0;
                    for (std::int64_t c = 0; c < C; ++c) dot += gb[c * P + p] * yb[c * P + p];
                    for (std::int64_t c = 0; c < C; ++c)
                        db[c * P + p] += yb[c * P + p] * (gb[c * P + p] - dot);
                }
            }
        });
    }
    return out;
}

inline Tensor log_softmax_channel(const Tensor& logits) {
    detail::require(logits.ndim() == 4, "log_softmax_channel: input must be N x C x H x W");
    const std::int64_t N = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
    const std::int64_t P = H * W;
    Tensor out(logits.shape());
    const double* x = logits.values().data();
    double* y = out.values().data();
    for (std::int64_t n = 0; n < N; ++n) {
        const double* xb = x + n * C * P;
        double* yb = y + n * C * P;
        for (std::int64_t p = 0; p < P; ++p) {
            double m = xb[p];
            for (std::int64_t c = 1; c < C; ++c) m = std::max(m, xb[c * P + p]);
            double s = 0.0;
            for (std::int64_t c = 0; c < C; ++c) s += std::exp(xb[c * P + p] - m);
            const double lse = m + std::log(s);
            for (std::int64_t c = 0; c < C; ++c) yb[c * P + p] = xb[c * P + p] - lse;
        }
    }
    if (auto* tape = Tape::active(); tape && logits.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([xd = logits.impl(), od = out.impl(), N, C, P] {
            if (od->grad.empty()) return;
            xd->ensure_grad();
            const double* y = od->value.data();
            const double* dy = od->grad.data();
            double* dx = xd->grad.data();
            for (std::int64_t n = 0; n < N; ++n) {
                const double* yb = y + n * C * P;
                const double* gb = dy + n * C * P;
                double* db = dx + n * C * P;
                for (std::int64_t p = 0; p < P; ++p) {
                    double gsum = 0.0;
                    for (std::int64_t c = 0; c < C; ++c) gsum += gb[c * P + p];
                    for (std::int64_t c = 0; c < C; ++c)
                        db[c * P + p] += gb[c * P + p] - std::exp(yb[c * P + p]) * gsum;
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

enum class ReduceKind { Sum, Mean };

// Reduces over `axes` (all axes when empty); reduced dimensions are dropped.
// Result is a {1}-shaped scalar when everything is reduced.
inline Tensor reduce(ReduceKind kind, const Tensor& t, std::vector<std::size_t> axes = {}) {
    const std::size_t nd = t.ndim();
    std::vector<bool> red(nd, false);
    if (axes.empty()) {
        red.assign(nd, true);
    } else {
        for (std::size_t a : axes) {
            detail::require(a < nd, "reduce: axis out of range");
            red[a] = true;
        }
    }
    Shape out_shape;
    std::int64_t count = 1;
    for (std::size_t i = 0; i < nd; ++i) {
        if (red[i])
            count *= t.dim(i);
        else
            out_shape.push_back(t.dim(i));
    }
    if (out_shape.empty()) out_shape = {1};
    const double inv = kind == ReduceKind::Mean ? 1.0 / static_cast<double>(count) : 1.0;

    Tensor out(out_shape);
    auto& ov = out.values();
    const auto& tv = t.values();
    const Shape& ts = t.shape();

    // Precompute the output stride contributed by each input axis.
    std::vector<std::int64_t> out_stride(nd, 0);
    {
        std::int64_t s = 1;
        for (std::size_t i = nd; i-- > 0;) {
            if (!red[i]) {
                out_stride[i] = s;
                s *= ts[i];
            }
        }
    }
    std::vector<std::int64_t> idx(nd, 0);
    std::int64_t out_i = 0;
    for (std::size_t flat = 0; flat < tv.size(); ++flat) {
        ov[static_cast<std::size_t>(out_i)] += tv[flat] * inv;
        for (std::size_t i = nd; i-- > 0;) {
            idx[i]++;
            out_i += out_stride[i];
            if (idx[i] < ts[i]) break;
            out_i -= out_stride[i] * ts[i];
            idx[i] = 0;
        }
    }
    detail::check_finite(out, "reduce");
    if (auto* tape = Tape::active(); tape && t.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([td = t.impl(), od = out.impl(), out_stride, ts, nd, inv] {
            if (od->grad.empty()) return;
            td->ensure_grad();
            const double* g = od->grad.data();
            double* dt = td->grad.data();
            std::vector<std::int64_t> idx(nd, 0);
            std::int64_t out_i = 0;
            for (std::size_t flat = 0; flat < td->value.size(); ++flat) {
                dt[flat] += g[static_cast<std::size_t>(out_i)] * inv;
                for (std::size_t i = nd; i-- > 0;) {
                    idx[i]++;
                    out_i += out_stride[i];
                    if (idx[i] < ts[i]) break;
                    out_i -= out_stride[i] * ts[i];
                    idx[i] = 0;
                }
            }
        });
    }
    return out;
}

inline Tensor reduce_sum(const Tensor& t, std::vector<std::size_t> axes = {}) {
    return reduce(ReduceKind::Sum, t, std::move(axes));
}
inline Tensor reduce_mean(const Tensor& t, std::vector<std::size_t> axes = {}) {
    return reduce(ReduceKind::Mean, t, std::move(axes));
}

// ---------------------------------------------------------------------------
// Channel concat / slice (NCHW)
// ---------------------------------------------------------------------------

inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
    detail::require(a.ndim() == 4 && b.ndim() == 4, "concat_channels: inputs must be 4-D");
    detail::require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
                    "concat_channels: N/H/W mismatch");
    const std::int64_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1), P = a.dim(2) * a.dim(3);
    Tensor out(Shape{N, Ca + Cb, a.dim(2), a.dim(3)});
    const double* av = a.values().data();
    const double* bv = b.values().data();
    double* ov = out.values().data();
    for (std::int64_t n = 0; n < N; ++n) {
        std::copy(av + n * Ca * P, av + (n + 1) * Ca * P, ov + n * (Ca + Cb) * P);
        std::copy(bv + n * Cb * P, bv + (n + 1) * Cb * P, ov + n * (Ca + Cb) * P + Ca * P);
    }
    if (auto* tape = Tape::active(); tape && (a.requires_grad() || b.requires_grad())) {
        out.set_requires_grad(true);
        tape->record([ad = a.impl(), bd = b.impl(), od = out.impl(), N, Ca, Cb, P] {
            if (od->grad.empty()) return;
            const double* g = od->grad.data();
            if (ad->requires_grad) {
                ad->ensure_grad();
                double* da = ad->grad.data();
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t i = 0; i < Ca * P; ++i)
                        da[n * Ca * P + i] += g[n * (Ca + Cb) * P + i];
            }
            if (bd->requires_grad) {
                bd->ensure_grad();
                double* db = bd->grad.data();
                for (std::int64_t n = 0; n < N; ++n)
                    for (std::int64_t i = 0; i < Cb * P; ++i)
                        db[n * Cb * P + i] += g[n * (Ca + Cb) * P + Ca * P + i];
            }
        });
    }
    return out;
}

// Channels [c0, c1) of an NCHW tensor.
inline Tensor slice_channels(const Tensor& t, std::int64_t c0, std::int64_t c1) {
    detail::require(t.ndim() == 4, "slice_channels: input must be 4-D");
    detail::require(0 <= c0 && c0 < c1 && c1 <= t.dim(1), "slice_channels: bad channel range");
    const std::int64_t N = t.dim(0), C = t.dim(1), P = t.dim(2) * t.dim(3), Cs = c1 - c0;
    Tensor out(Shape{N, Cs, t.dim(2), t.dim(3)});
    const double* tv = t.values().data();
    double* ov = out.values().data();
    for (std::int64_t n = 0; n < N; ++n)
        std::copy(tv + (n * C + c0) * P, tv + (n * C + c1) * P, ov + n * Cs * P);
    if (auto* tape = Tape::active(); tape && t.requires_grad()) {
        out.set_requires_grad(true);
        tape->record([td = t.impl(), od = out.impl(), N, C, P, c0, Cs] {
            if (od->grad.empty()) return;
            td->ensure_grad();
            const double* g = od->grad.data();
            double* dt = td->grad.data();
            for (std::int64_t n = 0; n < N; ++n)
                for (std::int64_t i = 0; i < Cs * P; ++i)
                    dt[(n * C + c0) * P + i] += g[n * Cs * P + i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Non-differentiable helpers
// ---------------------------------------------------------------------------

// Per-pixel argmax over channels: N x C x H x W probabilities -> N*H*W labels.
inline std::vector<std::uint8_t> argmax_channel(const Tensor& probs) {
    detail::require(probs.ndim() == 4, "argmax_channel: input must be 4-D");
    const std::int64_t N = probs.dim(0), C = probs.dim(1), P = probs.dim(2) * probs.dim(3);
    std::vector<std::uint8_t> labels(static_cast<std::size_t>(N * P));
    const double* v = probs.values().data();
    for (std::int64_t n = 0; n < N; ++n) {
        const double* b = v + n * C * P;
        for (std::int64_t p = 0; p < P; ++p) {
            std::int64_t best = 0;
            double bv = b[p];
            for (std::int64_t c = 1; c < C; ++c) {
                const double x = b[c * P + p];
                if (x > bv) {
                    bv = x;
                    best = c;
                }
            }
            labels[static_cast<std::size_t>(n * P + p)] = static_cast<std::uint8_t>(best);
        }
    }
    return labels;
}

// Constant one-hot tensor (N x C x H x W) from per-pixel labels.
inline Tensor one_hot(const std::vector<std::uint8_t>& labels, std::int64_t N, std::int64_t C,
                      std::int64_t H, std::int64_t W) {
    detail::require(static_cast<std::int64_t>(labels.size()) == N * H * W,
                    "one_hot: label count mismatch");
    Tensor out(Shape{N, C, H, W});
    double* v = out.values().data();
    const std::int64_t P = H * W;
    for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t p = 0; p < P; ++p) {
            const std::uint8_t k = labels[static_cast<std::size_t>(n * P + p)];
            detail::require(k < C, "one_hot: label out of range");
            v[(n * C + k) * P + p] = 1.0;
        }
    return out;
}

}  // namespace coarseem
