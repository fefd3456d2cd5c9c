#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tsfusion/tensor.hpp"

// Differentiable primitives. Every function computes its value eagerly and,
// when a tape is active and an operand requires gradient, records a backward
// closure. Broadcasting is limited to add_bias; everything else requires
// matching shapes.

namespace tsfusion {

using Rng = std::mt19937_64;

/// Boolean mask for softmax_rows; a nonzero entry excludes that position.
using Mask = std::vector<std::uint8_t>;

namespace detail {

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                             shape_str(t.shape()));
    }
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

// C[m×n] += op(A) · op(B), row-major, with optional transposes.
inline void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
                     bool trans_a, bool trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double av = trans_a ? a[p * m + i] : a[i * k + p];
            if (av == 0.0) continue;
            if (!trans_b) {
                const double* brow = b + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            } else {
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
            }
        }
    }
}

// View of a shape as outer × axis × inner around one axis.
struct AxisSplit {
    std::size_t outer = 1, axis = 1, inner = 1;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
    AxisSplit s;
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    s.axis = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

} // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<double> out(m * n, 0.0);
    detail::gemm_acc(a.data().data(), b.data().data(), out.data(), m, k, n, false, false);
    Tensor c({m, n}, std::move(out));
    auto ai = a.impl(), bi = b.impl();
    detail::record("matmul", {a, b}, c, [ai, bi, m, k, n](std::span<const double> g) {
        if (ai->requires_grad) {
            std::vector<double> da(m * k, 0.0);
            detail::gemm_acc(g.data(), bi->data.data(), da.data(), m, n, k, false, true);
            ai->accumulate(da);
        }
        if (bi->requires_grad) {
            std::vector<double> db(k * n, 0.0);
            detail::gemm_acc(ai->data.data(), g.data(), db.data(), k, m, n, true, false);
            bi->accumulate(db);
        }
    });
    return c;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    Tensor c(a.shape(), std::move(out));
    auto ai = a.impl(), bi = b.impl();
    detail::record("add", {a, b}, c, [ai, bi](std::span<const double> g) {
        ai->accumulate(g);
        bi->accumulate(g);
    });
    return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    Tensor c(a.shape(), std::move(out));
    auto ai = a.impl(), bi = b.impl();
    detail::record("sub", {a, b}, c, [ai, bi](std::span<const double> g) {
        ai->accumulate(g);
        if (bi->requires_grad) {
            std::vector<double> neg(g.begin(), g.end());
            for (auto& v : neg) v = -v;
            bi->accumulate(neg);
        }
    });
    return c;
}

/// Hadamard product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    Tensor c(a.shape(), std::move(out));
    auto ai = a.impl(), bi = b.impl();
    detail::record("mul", {a, b}, c, [ai, bi](std::span<const double> g) {
        const std::size_t n = g.size();
        if (ai->requires_grad) {
            std::vector<double> da(n);
            for (std::size_t i = 0; i < n; ++i) da[i] = g[i] * bi->data[i];
            ai->accumulate(da);
        }
        if (bi->requires_grad) {
            std::vector<double> db(n);
            for (std::size_t i = 0; i < n; ++i) db[i] = g[i] * ai->data[i];
            bi->accumulate(db);
        }
    });
    return c;
}

/// scale * x + shift, elementwise.
inline Tensor affine(const Tensor& x, double scale, double shift) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * x[i] + shift;
    Tensor c(x.shape(), std::move(out));
    auto xi = x.impl();
    detail::record("affine", {x}, c, [xi, scale](std::span<const double> g) {
        std::vector<double> dx(g.begin(), g.end());
        for (auto& v : dx) v *= scale;
        xi->accumulate(dx);
    });
    return c;
}

inline Tensor scale(const Tensor& x, double s) { return affine(x, s, 0.0); }
inline Tensor one_minus(const Tensor& x) { return affine(x, -1.0, 1.0); }

/// Adds a length-n vector to every row of an m×n matrix.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    detail::require_rank(x, 2, "add_bias");
    if (bias.numel() != x.dim(1)) {
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match columns of " +
                             shape_str(x.shape()));
    }
    const std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[i * n + j] + bias[j];
    Tensor c(x.shape(), std::move(out));
    auto xi = x.impl(), bi = bias.impl();
    detail::record("add_bias", {x, bias}, c, [xi, bi, m, n](std::span<const double> g) {
        xi->accumulate(g);
        if (bi->requires_grad) {
            std::vector<double> db(n, 0.0);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) db[j] += g[i * n + j];
            bi->accumulate(db);
        }
    });
    return c;
}

inline double sigmoid_scalar(double v) {
    if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
    double e = std::exp(v);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_scalar(x[i]);
    Tensor c(x.shape(), std::move(out));
    auto xi = x.impl();
    auto ci = c.impl();
    // Captures the output weakly: it owns this closure through the tape node.
    std::weak_ptr<detail::TensorImpl> cw = ci;
    detail::record("sigmoid", {x}, c, [xi, cw](std::span<const double> g) {
        auto co = cw.lock();
        std::vector<double> dx(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) {
            double s = co->data[i];
            dx[i] = g[i] * s * (1.0 - s);
        }
        xi->accumulate(dx);
    });
    return c;
}

inline Tensor relu(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    Tensor c(x.shape(), std::move(out));
    auto xi = x.impl();
    detail::record("relu", {x}, c, [xi](std::span<const double> g) {
        std::vector<double> dx(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] = xi->data[i] > 0.0 ? g[i] : 0.0;
        xi->accumulate(dx);
    });
    return c;
}

inline Tensor sum(const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor c = Tensor::scalar(s);
    auto xi = x.impl();
    detail::record("sum", {x}, c, [xi](std::span<const double> g) {
        std::vector<double> dx(xi->data.size(), g[0]);
        xi->accumulate(dx);
    });
    return c;
}

inline Tensor mean(const Tensor& x) {
    if (x.numel() == 0) throw DimensionError("mean of empty tensor");
    return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

/// Row-wise softmax with max subtraction. Masked entries behave as -inf and
/// come out exactly zero.
inline Tensor softmax_rows(const Tensor& x, const Mask* mask = nullptr) {
    detail::require_rank(x, 2, "softmax_rows");
    const std::size_t n = x.dim(0), m = x.dim(1);
    if (mask && mask->size() != x.numel()) {
        throw DimensionError("softmax_rows: mask size " + std::to_string(mask->size()) + " vs " + shape_str(x.shape()));
    }
    std::vector<double> out(x.numel(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        std::size_t open = 0;
        for (std::size_t j = 0; j < m; ++j) {
            if (mask && (*mask)[i * m + j]) continue;
            mx = std::max(mx, x[i * m + j]);
            ++open;
        }
        if (open == 0) throw NumericError("softmax_rows: row " + std::to_string(i) + " is fully masked");
        // Non-finite logits fall through and yield NaN, which the caller sees
        // as a non-finite loss.
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            if (mask && (*mask)[i * m + j]) continue;
            out[i * m + j] = std::exp(x[i * m + j] - mx);
            z += out[i * m + j];
        }
        for (std::size_t j = 0; j < m; ++j) out[i * m + j] /= z;
    }
    Tensor c(x.shape(), std::move(out));
    auto xi = x.impl();
    std::weak_ptr<detail::TensorImpl> cw = c.impl();
    detail::record("softmax_rows", {x}, c, [xi, cw, n, m](std::span<const double> g) {
        auto co = cw.lock();
        const auto& y = co->data;
        std::vector<double> dx(n * m);
        for (std::size_t i = 0; i < n; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < m; ++j) dot += y[i * m + j] * g[i * m + j];
            for (std::size_t j = 0; j < m; ++j) dx[i * m + j] = y[i * m + j] * (g[i * m + j] - dot);
        }
        xi->accumulate(dx);
    });
    return c;
}

inline Tensor transpose(const Tensor& x) {
    detail::require_rank(x, 2, "transpose");
    const std::size_t m = x.dim(0), n = x.dim(1);
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = x[i * n + j];
    Tensor c({n, m}, std::move(out));
    auto xi = x.impl();
    detail::record("transpose", {x}, c, [xi, m, n](std::span<const double> g) {
        std::vector<double> dx(m * n);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) dx[i * n + j] = g[j * m + i];
        xi->accumulate(dx);
    });
    return c;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    Tensor c(std::move(shape), x.vec());
    auto xi = x.impl();
    detail::record("reshape", {x}, c, [xi](std::span<const double> g) { xi->accumulate(g); });
    return c;
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) throw DimensionError("concat: axis out of range for " + shape_str(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
        if (!ok) throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(first));
        out_shape[axis] += s[axis];
        widths.push_back(s[axis]);
    }
    auto split = detail::split_at(out_shape, axis);
    std::vector<double> out(shape_numel(out_shape));
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& src = parts[k].vec();
        const std::size_t w = widths[k];
        for (std::size_t o = 0; o < split.outer; ++o)
            std::copy_n(src.begin() + o * w * split.inner, w * split.inner,
                        out.begin() + (o * split.axis + offset) * split.inner);
        offset += w;
    }
    Tensor c(out_shape, std::move(out));
    std::vector<std::shared_ptr<detail::TensorImpl>> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    detail::record("concat", parts, c, [impls, widths, split](std::span<const double> g) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < impls.size(); ++k) {
            const std::size_t w = widths[k];
            if (impls[k]->requires_grad) {
                std::vector<double> dx(split.outer * w * split.inner);
                for (std::size_t o = 0; o < split.outer; ++o)
                    std::copy_n(g.begin() + (o * split.axis + off) * split.inner, w * split.inner,
                                dx.begin() + o * w * split.inner);
                impls[k]->accumulate(dx);
            }
            off += w;
        }
    });
    return c;
}

/// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
    if (axis >= x.rank() || begin > end || end > x.dim(axis)) {
        throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                             std::to_string(axis) + " of " + shape_str(x.shape()));
    }
    auto split = detail::split_at(x.shape(), axis);
    const std::size_t w = end - begin;
    Shape out_shape = x.shape();
    out_shape[axis] = w;
    std::vector<double> out(split.outer * w * split.inner);
    const auto& src = x.vec();
    for (std::size_t o = 0; o < split.outer; ++o)
        std::copy_n(src.begin() + (o * split.axis + begin) * split.inner, w * split.inner,
                    out.begin() + o * w * split.inner);
    Tensor c(out_shape, std::move(out));
    auto xi = x.impl();
    detail::record("slice", {x}, c, [xi, split, begin, w](std::span<const double> g) {
        std::vector<double> dx(xi->data.size(), 0.0);
        for (std::size_t o = 0; o < split.outer; ++o)
            std::copy_n(g.begin() + o * w * split.inner, w * split.inner,
                        dx.begin() + (o * split.axis + begin) * split.inner);
        xi->accumulate(dx);
    });
    return c;
}

/// Valid (unpadded) 1-D convolution along the last axis.
/// x: [nodes × in_ch × time], kernel: [out_ch × in_ch × width]
/// out[n, o, t] = Σ_c Σ_w kernel[o, c, w] · x[n, c, t + w], so output t only
/// sees inputs t .. t + width - 1 and never anything later.
inline Tensor causal_conv1d(const Tensor& x, const Tensor& kernel) {
    detail::require_rank(x, 3, "causal_conv1d");
    detail::require_rank(kernel, 3, "causal_conv1d kernel");
    const std::size_t nodes = x.dim(0), cin = x.dim(1), time = x.dim(2);
    const std::size_t cout = kernel.dim(0), width = kernel.dim(2);
    if (kernel.dim(1) != cin) {
        throw DimensionError("causal_conv1d: kernel " + shape_str(kernel.shape()) + " expects " +
                             std::to_string(kernel.dim(1)) + " input channels, input " + shape_str(x.shape()));
    }
    if (width == 0 || time < width) {
        throw InsufficientHistoryError("causal_conv1d: " + std::to_string(time) + " time steps < kernel width " +
                                       std::to_string(width));
    }
    const std::size_t tout = time - width + 1;
    std::vector<double> out(nodes * cout * tout, 0.0);
    const double* xd = x.data().data();
    const double* kd = kernel.data().data();
    for (std::size_t n = 0; n < nodes; ++n)
        for (std::size_t o = 0; o < cout; ++o) {
            double* orow = out.data() + (n * cout + o) * tout;
            for (std::size_t c = 0; c < cin; ++c) {
                const double* xrow = xd + (n * cin + c) * time;
                const double* krow = kd + (o * cin + c) * width;
                for (std::size_t w = 0; w < width; ++w) {
                    const double kv = krow[w];
                    for (std::size_t t = 0; t < tout; ++t) orow[t] += kv * xrow[t + w];
                }
            }
        }
    Tensor c({nodes, cout, tout}, std::move(out));
    auto xi = x.impl(), ki = kernel.impl();
    detail::record("causal_conv1d", {x, kernel}, c,
                   [xi, ki, nodes, cin, time, cout, width, tout](std::span<const double> g) {
                       std::vector<double> dx(xi->requires_grad ? xi->data.size() : 0, 0.0);
                       std::vector<double> dk(ki->requires_grad ? ki->data.size() : 0, 0.0);
                       for (std::size_t n = 0; n < nodes; ++n)
                           for (std::size_t o = 0; o < cout; ++o) {
                               const double* grow = g.data() + (n * cout + o) * tout;
                               for (std::size_t c = 0; c < cin; ++c)
                                   for (std::size_t w = 0; w < width; ++w) {
                                       const std::size_t kidx = (o * cin + c) * width + w;
                                       const std::size_t xbase = (n * cin + c) * time + w;
                                       if (!dx.empty()) {
                                           const double kv = ki->data[kidx];
                                           for (std::size_t t = 0; t < tout; ++t) dx[xbase + t] += kv * grow[t];
                                       }
                                       if (!dk.empty()) {
                                           double acc = 0.0;
                                           for (std::size_t t = 0; t < tout; ++t) acc += xi->data[xbase + t] * grow[t];
                                           dk[kidx] += acc;
                                       }
                                   }
                           }
                       if (!dx.empty()) xi->accumulate(dx);
                       if (!dk.empty()) ki->accumulate(dk);
                   });
    return c;
}

/// Channel mixing for [nodes × channels × time] blocks:
/// out[n, d, t] = Σ_c x[n, c, t] · w[c, d].
inline Tensor mix_channels(const Tensor& x, const Tensor& w) {
    detail::require_rank(x, 3, "mix_channels");
    detail::require_rank(w, 2, "mix_channels weight");
    const std::size_t nodes = x.dim(0), cin = x.dim(1), time = x.dim(2), cout = w.dim(1);
    if (w.dim(0) != cin) {
        throw DimensionError("mix_channels: weight " + shape_str(w.shape()) + " vs input " + shape_str(x.shape()));
    }
    std::vector<double> out(nodes * cout * time, 0.0);
    for (std::size_t n = 0; n < nodes; ++n)
        for (std::size_t c = 0; c < cin; ++c) {
            const double* xrow = x.data().data() + (n * cin + c) * time;
            for (std::size_t d = 0; d < cout; ++d) {
                const double wv = w[c * cout + d];
                double* orow = out.data() + (n * cout + d) * time;
                for (std::size_t t = 0; t < time; ++t) orow[t] += wv * xrow[t];
            }
        }
    Tensor c({nodes, cout, time}, std::move(out));
    auto xi = x.impl(), wi = w.impl();
    detail::record("mix_channels", {x, w}, c, [xi, wi, nodes, cin, time, cout](std::span<const double> g) {
        std::vector<double> dx(xi->requires_grad ? xi->data.size() : 0, 0.0);
        std::vector<double> dw(wi->requires_grad ? wi->data.size() : 0, 0.0);
        for (std::size_t n = 0; n < nodes; ++n)
            for (std::size_t c = 0; c < cin; ++c)
                for (std::size_t d = 0; d < cout; ++d) {
                    const double* grow = g.data() + (n * cout + d) * time;
                    const std::size_t xbase = (n * cin + c) * time;
                    if (!dx.empty()) {
                        const double wv = wi->data[c * cout + d];
                        for (std::size_t t = 0; t < time; ++t) dx[xbase + t] += wv * grow[t];
                    }
                    if (!dw.empty()) {
                        double acc = 0.0;
                        for (std::size_t t = 0; t < time; ++t) acc += xi->data[xbase + t] * grow[t];
                        dw[c * cout + d] += acc;
                    }
                }
        if (!dx.empty()) xi->accumulate(dx);
        if (!dw.empty()) wi->accumulate(dw);
    });
    return c;
}

/// Row lookup: out[i, :] = table[index[i], :].
inline Tensor gather_rows(const Tensor& table, const std::vector<std::size_t>& index) {
    detail::require_rank(table, 2, "gather_rows");
    const std::size_t rows = table.dim(0), d = table.dim(1);
    std::vector<double> out(index.size() * d);
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= rows) {
            throw DimensionError("gather_rows: index " + std::to_string(index[i]) + " outside table of " +
                                 std::to_string(rows) + " rows");
        }
        std::copy_n(table.data().begin() + index[i] * d, d, out.begin() + i * d);
    }
    Tensor c({index.size(), d}, std::move(out));
    auto ti = table.impl();
    detail::record("gather_rows", {table}, c, [ti, index, d](std::span<const double> g) {
        std::vector<double> dt(ti->data.size(), 0.0);
        for (std::size_t i = 0; i < index.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) dt[index[i] * d + j] += g[i * d + j];
        ti->accumulate(dt);
    });
    return c;
}

/// Running statistics for batch normalization over the rows of an n×d input.
struct BatchNormState {
    std::vector<double> running_mean;
    std::vector<double> running_var;
    double momentum = 0.9;

    explicit BatchNormState(std::size_t d = 0) : running_mean(d, 0.0), running_var(d, 1.0) {}
};

enum class NormMode {
    train,          // batch statistics, running stats updated
    train_frozen,   // batch statistics, running stats untouched
    eval,           // running statistics
};

/// Batch normalization over the row (node) axis of x [n×d], followed by the
/// per-column affine gamma, beta. Variance is the biased estimate.
inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                         NormMode mode, double eps = 1e-5) {
    detail::require_rank(x, 2, "batch_norm");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (gamma.numel() != d || beta.numel() != d || state.running_mean.size() != d) {
        throw DimensionError("batch_norm: parameter width does not match input " + shape_str(x.shape()));
    }
    std::vector<double> mu(d, 0.0), inv_std(d, 0.0);
    if (mode == NormMode::eval) {
        for (std::size_t j = 0; j < d; ++j) {
            mu[j] = state.running_mean[j];
            inv_std[j] = 1.0 / std::sqrt(state.running_var[j] + eps);
        }
    } else {
        std::vector<double> var(d, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) mu[j] += x[i * d + j];
        for (auto& v : mu) v /= static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                double c = x[i * d + j] - mu[j];
                var[j] += c * c;
            }
        for (std::size_t j = 0; j < d; ++j) {
            var[j] /= static_cast<double>(n);
            inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
        }
        if (mode == NormMode::train) {
            for (std::size_t j = 0; j < d; ++j) {
                state.running_mean[j] = state.momentum * state.running_mean[j] + (1.0 - state.momentum) * mu[j];
                state.running_var[j] = state.momentum * state.running_var[j] + (1.0 - state.momentum) * var[j];
            }
        }
    }
    std::vector<double> xhat(n * d), out(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (x[i * d + j] - mu[j]) * inv_std[j];
            out[i * d + j] = gamma[j] * xhat[i * d + j] + beta[j];
        }
    Tensor c(x.shape(), std::move(out));
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
    const bool batch_stats = mode != NormMode::eval;
    detail::record("batch_norm", {x, gamma, beta}, c,
                   [xi, gi, bi, xhat = std::move(xhat), inv_std, n, d, batch_stats](std::span<const double> g) {
                       if (gi->requires_grad || bi->requires_grad) {
                           std::vector<double> dg(d, 0.0), db(d, 0.0);
                           for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < d; ++j) {
                                   dg[j] += g[i * d + j] * xhat[i * d + j];
                                   db[j] += g[i * d + j];
                               }
                           gi->accumulate(dg);
                           bi->accumulate(db);
                       }
                       if (!xi->requires_grad) return;
                       std::vector<double> dx(n * d);
                       for (std::size_t j = 0; j < d; ++j) {
                           const double gj = gi->data[j];
                           if (!batch_stats) {
                               for (std::size_t i = 0; i < n; ++i) dx[i * d + j] = g[i * d + j] * gj * inv_std[j];
                               continue;
                           }
                           double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                           for (std::size_t i = 0; i < n; ++i) {
                               const double dxh = g[i * d + j] * gj;
                               mean_dxhat += dxh;
                               mean_dxhat_xhat += dxh * xhat[i * d + j];
                           }
                           mean_dxhat /= static_cast<double>(n);
                           mean_dxhat_xhat /= static_cast<double>(n);
                           for (std::size_t i = 0; i < n; ++i) {
                               const double dxh = g[i * d + j] * gj;
                               dx[i * d + j] = inv_std[j] * (dxh - mean_dxhat - xhat[i * d + j] * mean_dxhat_xhat);
                           }
                       }
                       xi->accumulate(dx);
                   });
    return c;
}

/// Per-row normalization of x [n×d] followed by the per-column affine gamma, beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    detail::require_rank(x, 2, "layer_norm");
    const std::size_t n = x.dim(0), d = x.dim(1);
    if (gamma.numel() != d || beta.numel() != d) {
        throw DimensionError("layer_norm: parameter width does not match input " + shape_str(x.shape()));
    }
    std::vector<double> xhat(n * d), out(n * d), inv_std(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mu = 0.0, var = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += x[i * d + j];
        mu /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) {
            double c = x[i * d + j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (x[i * d + j] - mu) * inv_std[i];
            out[i * d + j] = gamma[j] * xhat[i * d + j] + beta[j];
        }
    }
    Tensor c(x.shape(), std::move(out));
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
    detail::record("layer_norm", {x, gamma, beta}, c,
                   [xi, gi, bi, xhat = std::move(xhat), inv_std = std::move(inv_std), n, d](std::span<const double> g) {
                       if (gi->requires_grad || bi->requires_grad) {
                           std::vector<double> dg(d, 0.0), db(d, 0.0);
                           for (std::size_t i = 0; i < n; ++i)
                               for (std::size_t j = 0; j < d; ++j) {
                                   dg[j] += g[i * d + j] * xhat[i * d + j];
                                   db[j] += g[i * d + j];
                               }
                           gi->accumulate(dg);
                           bi->accumulate(db);
                       }
                       if (!xi->requires_grad) return;
                       std::vector<double> dx(n * d);
                       for (std::size_t i = 0; i < n; ++i) {
                           double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                           for (std::size_t j = 0; j < d; ++j) {
                               const double dxh = g[i * d + j] * gi->data[j];
                               mean_dxhat += dxh;
                               mean_dxhat_xhat += dxh * xhat[i * d + j];
                           }
                           mean_dxhat /= static_cast<double>(d);
                           mean_dxhat_xhat /= static_cast<double>(d);
                           for (std::size_t j = 0; j < d; ++j) {
                               const double dxh = g[i * d + j] * gi->data[j];
                               dx[i * d + j] = inv_std[i] * (dxh - mean_dxhat - xhat[i * d + j] * mean_dxhat_xhat);
                           }
                       }
                       xi->accumulate(dx);
                   });
    return c;
}

/// Inverted dropout: kept entries are divided by keep_prob at train time so
/// that evaluation is the identity. Returns x itself when inactive.
inline Tensor dropout(const Tensor& x, double keep_prob, Rng& rng, bool training) {
    if (keep_prob <= 0.0 || keep_prob > 1.0) {
        throw ConfigError("dropout: keep probability must lie in (0, 1], got " + std::to_string(keep_prob));
    }
    if (!training || keep_prob == 1.0) return x;
    std::bernoulli_distribution keep(keep_prob);
    std::vector<double> factor(x.numel());
    for (auto& f : factor) f = keep(rng) ? 1.0 / keep_prob : 0.0;
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor[i];
    Tensor c(x.shape(), std::move(out));
    auto xi = x.impl();
    detail::record("dropout", {x}, c, [xi, factor = std::move(factor)](std::span<const double> g) {
        std::vector<double> dx(g.size());
        for (std::size_t i = 0; i < g.size(); ++i) dx[i] = g[i] * factor[i];
        xi->accumulate(dx);
    });
    return c;
}

/// Mean of squared elementwise differences.
inline Tensor mse_loss(const Tensor& prediction, const Tensor& target) {
    detail::require_same_shape(prediction, target, "mse_loss");
    auto diff = sub(prediction, target);
    return mean(mul(diff, diff));
}

} // namespace tsfusion
