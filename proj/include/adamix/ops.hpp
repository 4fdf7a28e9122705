#pragma once

// Differentiable tensor ops. Each op computes its forward value eagerly and,
// when an input is tracked, records a rule that accumulates input gradients
// from the output gradient.

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "adamix/errors.hpp"
#include "adamix/tensor.hpp"

namespace adamix {

/// Lower bound applied to probabilities before taking logs in the
/// cross-entropy and KL losses.
inline constexpr double kProbabilityFloor = 1e-12;

namespace detail {

inline std::string mismatch(const char* op, const Tensor& a, const Tensor& b) {
    return std::string(op) + ": dimension mismatch between " + shape_str(a.shape()) + " and " + shape_str(b.shape());
}

inline std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
    const int r = static_cast<int>(rank);
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw IndexError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    return static_cast<std::size_t>(a);
}

/// out[rows x n] += a[rows x k] * b[k x n]
inline void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> out, std::size_t rows,
                    std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < rows; ++i) {
        double* o = out.data() + i * n;
        const double* ai = a.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            const double* bp = b.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) o[j] += av * bp[j];
        }
    }
}

/// out[rows x n] += a[rows x k] * b[n x k]^T
inline void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> out, std::size_t rows,
                    std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < rows; ++i) {
        const double* ai = a.data() + i * k;
        double* o = out.data() + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* bj = b.data() + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            o[j] += s;
        }
    }
}

/// out[k x n] += a[rows x k]^T * b[rows x n]
inline void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> out, std::size_t rows,
                    std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < rows; ++i) {
        const double* ai = a.data() + i * k;
        const double* bi = b.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            if (av == 0.0) continue;
            double* o = out.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) o[j] += av * bi[j];
        }
    }
}

}  // namespace detail

/// a[..., k] x b[k, n] -> [..., n]. Leading dimensions of `a` are batched rows.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
        throw DimensionError(detail::mismatch("matmul", a, b));
    }
    const std::size_t k = b.dim(0), n = b.dim(1), rows = a.numel() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<double> out(rows * n, 0.0);
    detail::gemm_nn(a.data(), b.data(), out, rows, k, n);
    return detail::make_result(std::move(out_shape), std::move(out), {a, b}, "matmul",
                               [a, b, rows, k, n](std::span<const double> g) {
                                   if (a.requires_grad()) detail::gemm_nt(g, b.data(), detail::grad_buffer(a), rows, n, k);
                                   if (b.requires_grad()) detail::gemm_tn(a.data(), g, detail::grad_buffer(b), rows, k, n);
                               });
}

/// a[..., k] x b[n, k]^T -> [..., n]; the layout of a linear layer weight.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(1)) {
        throw DimensionError(detail::mismatch("matmul_nt", a, b));
    }
    const std::size_t k = b.dim(1), n = b.dim(0), rows = a.numel() / k;
    Shape out_shape = a.shape();
    out_shape.back() = n;
    std::vector<double> out(rows * n, 0.0);
    detail::gemm_nt(a.data(), b.data(), out, rows, k, n);
    return detail::make_result(std::move(out_shape), std::move(out), {a, b}, "matmul_nt",
                               [a, b, rows, k, n](std::span<const double> g) {
                                   if (a.requires_grad()) detail::gemm_nn(g, b.data(), detail::grad_buffer(a), rows, n, k);
                                   if (b.requires_grad()) detail::gemm_tn(g, a.data(), detail::grad_buffer(b), rows, n, k);
                               });
}

/// Batched product over the leading dimension: a[G, m, k] x b[G, k, n], or
/// x b[G, n, k]^T when `transpose_b` is set.
inline Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
        a.dim(2) != (transpose_b ? b.dim(2) : b.dim(1))) {
        throw DimensionError(detail::mismatch("bmm", a, b));
    }
    const std::size_t groups = a.dim(0), m = a.dim(1), k = a.dim(2);
    const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
    std::vector<double> out(groups * m * n, 0.0);
    auto slice = [](std::span<const double> s, std::size_t g, std::size_t size) { return s.subspan(g * size, size); };
    auto mslice = [](std::span<double> s, std::size_t g, std::size_t size) { return s.subspan(g * size, size); };
    for (std::size_t g = 0; g < groups; ++g) {
        if (transpose_b) {
            detail::gemm_nt(slice(a.data(), g, m * k), slice(b.data(), g, n * k), mslice(out, g, m * n), m, k, n);
        } else {
            detail::gemm_nn(slice(a.data(), g, m * k), slice(b.data(), g, k * n), mslice(out, g, m * n), m, k, n);
        }
    }
    return detail::make_result(
        {groups, m, n}, std::move(out), {a, b}, "bmm", [a, b, groups, m, k, n, transpose_b, slice, mslice](std::span<const double> g) {
            for (std::size_t i = 0; i < groups; ++i) {
                auto gi = slice(g, i, m * n);
                if (a.requires_grad()) {
                    auto ga = mslice(detail::grad_buffer(a), i, m * k);
                    if (transpose_b) {
                        detail::gemm_nn(gi, slice(b.data(), i, n * k), ga, m, n, k);
                    } else {
                        detail::gemm_nt(gi, slice(b.data(), i, k * n), ga, m, n, k);
                    }
                }
                if (b.requires_grad()) {
                    if (transpose_b) {
                        detail::gemm_tn(gi, slice(a.data(), i, m * k), mslice(detail::grad_buffer(b), i, n * k), m, n, k);
                    } else {
                        detail::gemm_tn(slice(a.data(), i, m * k), gi, mslice(detail::grad_buffer(b), i, k * n), m, k, n);
                    }
                }
            }
        });
}

/// Elementwise sum. `b` may also match a trailing suffix of `a`'s shape, in
/// which case it is broadcast over the leading dimensions (bias add).
inline Tensor add(const Tensor& a, const Tensor& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    const bool suffix = sb.size() <= sa.size() && std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
    if (!suffix) throw DimensionError(detail::mismatch("add", a, b));
    const std::size_t inner = b.numel(), outer = a.numel() / inner;
    std::vector<double> out(a.values());
    for (std::size_t i = 0; i < outer; ++i) {
        for (std::size_t j = 0; j < inner; ++j) out[i * inner + j] += b.data()[j];
    }
    return detail::make_result(sa, std::move(out), {a, b}, "add", [a, b, outer, inner](std::span<const double> g) {
        if (a.requires_grad()) {
            auto& ga = detail::grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& gb = detail::grad_buffer(b);
            for (std::size_t i = 0; i < outer; ++i) {
                for (std::size_t j = 0; j < inner; ++j) gb[j] += g[i * inner + j];
            }
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimensionError(detail::mismatch("sub", a, b));
    std::vector<double> out(a.values());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.data()[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, "sub", [a, b](std::span<const double> g) {
        if (a.requires_grad()) {
            auto& ga = detail::grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (b.requires_grad()) {
            auto& gb = detail::grad_buffer(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

/// Elementwise (Hadamard) product of equal shapes.
inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw DimensionError(detail::mismatch("mul", a, b));
    std::vector<double> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, "mul", [a, b](std::span<const double> g) {
        if (a.requires_grad()) {
            auto& ga = detail::grad_buffer(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
        }
        if (b.requires_grad()) {
            auto& gb = detail::grad_buffer(b);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double factor) {
    std::vector<double> out(a.values());
    for (double& v : out) v *= factor;
    return detail::make_result(a.shape(), std::move(out), {a}, "scale", [a, factor](std::span<const double> g) {
        auto& ga = detail::grad_buffer(a);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
    });
}

/// Exact GeLU: 0.5 * x * (1 + erf(x / sqrt 2)).
inline Tensor gelu(const Tensor& x) {
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double v = x.data()[i];
        out[i] = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    }
    return detail::make_result(x.shape(), std::move(out), {x}, "gelu", [x](std::span<const double> g) {
        auto& gx = detail::grad_buffer(x);
        constexpr double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double v = x.data()[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            gx[i] += g[i] * (cdf + v * pdf);
        }
    });
}

/// Softmax along `axis` with max subtraction.
inline Tensor softmax(const Tensor& z, int axis = -1) {
    const std::size_t ax = detail::normalize_axis(axis, z.rank(), "softmax");
    const Shape& shape = z.shape();
    const std::size_t len = shape[ax];
    std::size_t inner = 1;
    for (std::size_t i = ax + 1; i < shape.size(); ++i) inner *= shape[i];
    const std::size_t outer = z.numel() / (len * inner);
    std::vector<double> out(z.numel());
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t l = 0; l < len; ++l) mx = std::max(mx, z.data()[base + l * inner]);
            double total = 0.0;
            for (std::size_t l = 0; l < len; ++l) {
                const double e = std::exp(z.data()[base + l * inner] - mx);
                out[base + l * inner] = e;
                total += e;
            }
            for (std::size_t l = 0; l < len; ++l) out[base + l * inner] /= total;
        }
    }
    Tensor result = detail::make_result(shape, std::move(out), {z}, "softmax", nullptr);
    if (result.is_leaf()) return result;
    const detail::TensorImpl* y = result.impl();
    result.impl()->node->backward = [z, y, outer, inner, len](std::span<const double> g) {
        auto& gz = detail::grad_buffer(z);
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double dot = 0.0;
                for (std::size_t l = 0; l < len; ++l) dot += g[base + l * inner] * y->data[base + l * inner];
                for (std::size_t l = 0; l < len; ++l) {
                    const std::size_t idx = base + l * inner;
                    gz[idx] += y->data[idx] * (g[idx] - dot);
                }
            }
        }
    };
    return result;
}

/// Per-row normalization over the last dimension followed by an affine map.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    const std::size_t n = x.shape().back();
    if (gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != n || bias.dim(0) != n) {
        throw DimensionError(detail::mismatch("layer_norm", x, gain));
    }
    const std::size_t rows = x.numel() / n;
    std::vector<double> out(x.numel()), xhat(x.numel()), rstd(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * n;
        double mean = 0.0;
        for (std::size_t j = 0; j < n; ++j) mean += xr[j];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<double>(n);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[r * n + j] = (xr[j] - mean) * rstd[r];
            out[r * n + j] = xhat[r * n + j] * gain.data()[j] + bias.data()[j];
        }
    }
    return detail::make_result(
        x.shape(), std::move(out), {x, gain, bias}, "layer_norm",
        [x, gain, bias, rows, n, xhat = std::move(xhat), rstd = std::move(rstd)](std::span<const double> g) {
            if (gain.requires_grad()) {
                auto& gg = detail::grad_buffer(gain);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < n; ++j) gg[j] += g[r * n + j] * xhat[r * n + j];
            }
            if (bias.requires_grad()) {
                auto& gb = detail::grad_buffer(bias);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
            }
            if (!x.requires_grad()) return;
            auto& gx = detail::grad_buffer(x);
            const double inv_n = 1.0 / static_cast<double>(n);
            for (std::size_t r = 0; r < rows; ++r) {
                double mean_g = 0.0, mean_gx = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double gh = g[r * n + j] * gain.data()[j];
                    mean_g += gh;
                    mean_gx += gh * xhat[r * n + j];
                }
                mean_g *= inv_n;
                mean_gx *= inv_n;
                for (std::size_t j = 0; j < n; ++j) {
                    const double gh = g[r * n + j] * gain.data()[j];
                    gx[r * n + j] += rstd[r] * (gh - mean_g - xhat[r * n + j] * mean_gx);
                }
            }
        });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    }
    return detail::make_result(std::move(shape), x.values(), {x}, "reshape", [x](std::span<const double> g) {
        auto& gx = detail::grad_buffer(x);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
}

/// Reorders axes: output axis i is input axis `axes[i]`.
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
    const std::size_t rank = x.rank();
    if (axes.size() != rank) throw DimensionError("permute: expected " + std::to_string(rank) + " axes");
    std::vector<bool> seen(rank, false);
    for (std::size_t a : axes) {
        if (a >= rank || seen[a]) throw IndexError("permute: invalid axis permutation");
        seen[a] = true;
    }
    std::vector<std::size_t> in_strides(rank, 1);
    for (std::size_t i = rank - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * x.dim(i);
    Shape out_shape(rank);
    std::vector<std::size_t> strides(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        out_shape[i] = x.dim(axes[i]);
        strides[i] = in_strides[axes[i]];
    }
    // Source offset of every output element, walking output indices in order.
    std::vector<std::size_t> source(x.numel());
    std::vector<std::size_t> index(rank, 0);
    std::size_t offset = 0;
    for (std::size_t flat = 0; flat < source.size(); ++flat) {
        source[flat] = offset;
        for (std::size_t d = rank; d-- > 0;) {
            ++index[d];
            offset += strides[d];
            if (index[d] < out_shape[d]) break;
            offset -= strides[d] * out_shape[d];
            index[d] = 0;
        }
    }
    std::vector<double> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[source[i]];
    return detail::make_result(std::move(out_shape), std::move(out), {x}, "permute",
                               [x, source = std::move(source)](std::span<const double> g) {
                                   auto& gx = detail::grad_buffer(x);
                                   for (std::size_t i = 0; i < g.size(); ++i) gx[source[i]] += g[i];
                               });
}

inline Tensor transpose(const Tensor& x) {
    if (x.rank() != 2) throw DimensionError("transpose: expected a matrix, got " + shape_str(x.shape()));
    return permute(x, {1, 0});
}

/// Picks one slice along `axis`, removing that axis.
inline Tensor select(const Tensor& x, int axis, std::size_t index) {
    const std::size_t ax = detail::normalize_axis(axis, x.rank(), "select");
    if (index >= x.dim(ax)) throw IndexError("select: index " + std::to_string(index) + " out of range");
    std::size_t inner = 1;
    for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
    const std::size_t len = x.dim(ax), outer = x.numel() / (len * inner);
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
    if (out_shape.empty()) out_shape.push_back(1);
    std::vector<double> out(outer * inner);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < inner; ++j) out[o * inner + j] = x.data()[(o * len + index) * inner + j];
    return detail::make_result(std::move(out_shape), std::move(out), {x}, "select",
                               [x, outer, inner, len, index](std::span<const double> g) {
                                   auto& gx = detail::grad_buffer(x);
                                   for (std::size_t o = 0; o < outer; ++o)
                                       for (std::size_t j = 0; j < inner; ++j)
                                           gx[(o * len + index) * inner + j] += g[o * inner + j];
                               });
}

/// Row lookup: table[V, d] gathered at `ids`, shaped `leading` + [d].
inline Tensor embedding(const Tensor& table, std::span<const int> ids, Shape leading) {
    if (table.rank() != 2) throw DimensionError("embedding: table must be a matrix");
    if (shape_numel(leading) != ids.size()) throw DimensionError("embedding: id count does not match " + shape_str(leading));
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    std::vector<double> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw DataError("token id " + std::to_string(ids[i]) + " out of range for vocabulary of " + std::to_string(vocab));
        }
        std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    leading.push_back(d);
    return detail::make_result(std::move(leading), std::move(out), {table}, "embedding",
                               [table, ids = std::vector<int>(ids.begin(), ids.end()), d](std::span<const double> g) {
                                   auto& gt = detail::grad_buffer(table);
                                   for (std::size_t i = 0; i < ids.size(); ++i)
                                       for (std::size_t j = 0; j < d; ++j) gt[static_cast<std::size_t>(ids[i]) * d + j] += g[i * d + j];
                               });
}

inline Tensor sum(const Tensor& x) {
    double total = 0.0;
    for (double v : x.data()) total += v;
    return detail::make_result({1}, {total}, {x}, "sum", [x](std::span<const double> g) {
        auto& gx = detail::grad_buffer(x);
        for (double& v : gx) v += g[0];
    });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Same values, cut from the tape.
inline Tensor detach(const Tensor& x) { return x.detach(); }

namespace detail {

/// Row-wise log-softmax values of a [B x C] buffer.
inline std::vector<double> log_softmax_rows(std::span<const double> z, std::size_t rows, std::size_t cols) {
    std::vector<double> out(z.size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* zr = z.data() + r * cols;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, zr[c]);
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) total += std::exp(zr[c] - mx);
        const double lse = mx + std::log(total);
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = zr[c] - lse;
    }
    return out;
}

}  // namespace detail

/// Mean over the batch of -log softmax(logits)[label], with the probability
/// clamped at kProbabilityFloor.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> labels) {
    if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [B x C], got " + shape_str(logits.shape()));
    const std::size_t rows = logits.dim(0), cols = logits.dim(1);
    if (labels.size() != rows) throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= cols) {
            throw IndexError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(cols) + ")");
        }
    }
    const double log_floor = std::log(kProbabilityFloor);
    std::vector<double> logp = detail::log_softmax_rows(logits.data(), rows, cols);
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) total -= std::max(logp[r * cols + static_cast<std::size_t>(labels[r])], log_floor);
    total /= static_cast<double>(rows);
    return detail::make_result(
        {1}, {total}, {logits}, "cross_entropy",
        [logits, labels = std::vector<int>(labels.begin(), labels.end()), logp = std::move(logp), rows, cols, log_floor](std::span<const double> g) {
            auto& gl = detail::grad_buffer(logits);
            const double s = g[0] / static_cast<double>(rows);
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t y = static_cast<std::size_t>(labels[r]);
                if (logp[r * cols + y] < log_floor) continue;
                for (std::size_t c = 0; c < cols; ++c) {
                    gl[r * cols + c] += s * (std::exp(logp[r * cols + c]) - (c == y ? 1.0 : 0.0));
                }
            }
        });
}

/// Mean over the batch of KL(softmax(logits_p) || softmax(logits_q)), with
/// both probability vectors clamped at kProbabilityFloor inside the logs.
inline Tensor kl_divergence(const Tensor& logits_p, const Tensor& logits_q) {
    if (logits_p.rank() != 2 || logits_p.shape() != logits_q.shape()) {
        throw DimensionError(detail::mismatch("kl_divergence", logits_p, logits_q));
    }
    const std::size_t rows = logits_p.dim(0), cols = logits_p.dim(1);
    const std::vector<double> lsp = detail::log_softmax_rows(logits_p.data(), rows, cols);
    const std::vector<double> lsq = detail::log_softmax_rows(logits_q.data(), rows, cols);
    std::vector<double> p(lsp.size()), q(lsq.size()), lp(lsp.size()), lq(lsq.size());
    const double log_floor = std::log(kProbabilityFloor);
    double total = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        p[i] = std::exp(lsp[i]);
        q[i] = std::exp(lsq[i]);
        lp[i] = std::max(lsp[i], log_floor);
        lq[i] = std::max(lsq[i], log_floor);
        total += p[i] * (lp[i] - lq[i]);
    }
    total /= static_cast<double>(rows);
    return detail::make_result(
        {1}, {total}, {logits_p, logits_q}, "kl_divergence",
        [logits_p, logits_q, p = std::move(p), q = std::move(q), lp = std::move(lp), lq = std::move(lq), lsp, lsq, rows, cols,
         log_floor](std::span<const double> g) {
            const double s = g[0] / static_cast<double>(rows);
            std::vector<double> dv(cols);
            // Chain dKL/dprob through the softmax Jacobian: dz = prob * (dv - <prob, dv>).
            auto through_softmax = [&](const std::vector<double>& prob, std::vector<double>& grad, std::size_t r) {
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c) dot += prob[r * cols + c] * dv[c];
                for (std::size_t c = 0; c < cols; ++c) grad[r * cols + c] += s * prob[r * cols + c] * (dv[c] - dot);
            };
            for (std::size_t r = 0; r < rows; ++r) {
                if (logits_p.requires_grad()) {
                    for (std::size_t c = 0; c < cols; ++c) {
                        const std::size_t i = r * cols + c;
                        dv[c] = lp[i] - lq[i] + (lsp[i] >= log_floor ? 1.0 : 0.0);
                    }
                    through_softmax(p, detail::grad_buffer(logits_p), r);
                }
                if (logits_q.requires_grad()) {
                    for (std::size_t c = 0; c < cols; ++c) {
                        const std::size_t i = r * cols + c;
                        dv[c] = lsq[i] >= log_floor ? -p[i] / q[i] : 0.0;
                    }
                    through_softmax(q, detail::grad_buffer(logits_q), r);
                }
            }
        });
}

}  // namespace adamix
