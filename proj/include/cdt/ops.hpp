#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>

#include "cdt/tensor.hpp"

namespace cdt {

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapM = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapM = Eigen::Map<const RowMat<T>>;
template <typename T>
using MapA = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using CMapA = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;

template <typename T>
bool want_grad(Tape<T>* tape, std::initializer_list<const TensorPtr<T>*> ins) {
    if (!tape) return false;
    for (const auto* in : ins) {
        if ((*in)->requires_grad) return true;
    }
    return false;
}

template <typename T>
TensorPtr<T> fresh(std::vector<std::size_t> shape, bool requires_grad) {
    auto t = std::make_shared<TensorData<T>>();
    t->shape = std::move(shape);
    t->v.resize(shape_numel(t->shape));
    t->requires_grad = requires_grad;
    return t;
}

// True when small's shape equals the trailing dims of big's shape.
inline bool is_suffix_shape(const std::vector<std::size_t>& big,
                            const std::vector<std::size_t>& small) {
    if (small.size() > big.size()) return false;
    const std::size_t off = big.size() - small.size();
    for (std::size_t i = 0; i < small.size(); ++i) {
        if (big[off + i] != small[i]) return false;
    }
    return true;
}

}  // namespace detail

// ---- elementwise and structural ops ----------------------------------------

// a + b. b may have a shape equal to a trailing suffix of a's shape, in which
// case it broadcasts over the leading dims (used for bias terms).
template <typename T>
TensorPtr<T> add(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    const bool same = a->shape == b->shape;
    if (!same && !detail::is_suffix_shape(a->shape, b->shape))
        throw ShapeError("add: shape " + detail::shape_str(b->shape) +
                         " is not a trailing suffix of " + detail::shape_str(a->shape));
    const std::size_t bn = b->numel();
    const bool rec = detail::want_grad(tape, {&a, &b});
    auto out = detail::fresh<T>(a->shape, rec);
    const std::size_t n = a->numel();
    for (std::size_t i = 0; i < n; ++i) out->v[i] = a->v[i] + b->v[i % bn];
    if (rec) {
        tape->record("add", {a, b}, out, [a, b, out, bn, n] {
            if (a->requires_grad) {
                for (std::size_t i = 0; i < n; ++i) a->g[i] += out->g[i];
            }
            if (b->requires_grad) {
                for (std::size_t i = 0; i < n; ++i) b->g[i % bn] += out->g[i];
            }
        });
    }
    return out;
}

// Elementwise product; shapes must match exactly.
template <typename T>
TensorPtr<T> mul(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    if (a->shape != b->shape)
        throw ShapeError("mul: shapes " + detail::shape_str(a->shape) + " vs " +
                         detail::shape_str(b->shape));
    const bool rec = detail::want_grad(tape, {&a, &b});
    auto out = detail::fresh<T>(a->shape, rec);
    const std::size_t n = a->numel();
    for (std::size_t i = 0; i < n; ++i) out->v[i] = a->v[i] * b->v[i];
    if (rec) {
        tape->record("mul", {a, b}, out, [a, b, out, n] {
            if (a->requires_grad) {
                for (std::size_t i = 0; i < n; ++i) a->g[i] += out->g[i] * b->v[i];
            }
            if (b->requires_grad) {
                for (std::size_t i = 0; i < n; ++i) b->g[i] += out->g[i] * a->v[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> scale(Tape<T>* tape, const TensorPtr<T>& x, T c) {
    const bool rec = detail::want_grad(tape, {&x});
    auto out = detail::fresh<T>(x->shape, rec);
    const std::size_t n = x->numel();
    for (std::size_t i = 0; i < n; ++i) out->v[i] = c * x->v[i];
    if (rec) {
        tape->record("scale", {x}, out, [x, out, c, n] {
            if (x->requires_grad) {
                for (std::size_t i = 0; i < n; ++i) x->g[i] += c * out->g[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> sub(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    return add(tape, a, scale(tape, b, T(-1)));
}

template <typename T>
TensorPtr<T> reshape(Tape<T>* tape, const TensorPtr<T>& x, std::vector<std::size_t> shape) {
    if (detail::shape_numel(shape) != x->numel())
        throw ShapeError("reshape: numel mismatch " + detail::shape_str(x->shape) + " -> " +
                         detail::shape_str(shape));
    const bool rec = detail::want_grad(tape, {&x});
    auto out = detail::fresh<T>(std::move(shape), rec);
    out->v = x->v;
    if (rec) {
        tape->record("reshape", {x}, out, [x, out] {
            if (x->requires_grad) {
                for (std::size_t i = 0; i < x->numel(); ++i) x->g[i] += out->g[i];
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> sum_all(Tape<T>* tape, const TensorPtr<T>& x) {
    const bool rec = detail::want_grad(tape, {&x});
    auto out = detail::fresh<T>({1}, rec);
    double acc = 0.0;
    for (const T v : x->v) acc += static_cast<double>(v);
    out->v[0] = static_cast<T>(acc);
    if (rec) {
        tape->record("sum_all", {x}, out, [x, out] {
            if (x->requires_grad) {
                const T dy = out->g[0];
                for (std::size_t i = 0; i < x->numel(); ++i) x->g[i] += dy;
            }
        });
    }
    return out;
}

// ---- matmul -----------------------------------------------------------------

// Supported shapes: [m,k]x[k,n] -> [m,n]; [B,m,k]x[k,n] -> [B,m,n] (shared
// right operand); [B,m,k]x[B,k,n] -> [B,m,n]. No other broadcasting.
template <typename T>
TensorPtr<T> matmul(Tape<T>* tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    const auto bad = [&] {
        return ShapeError("matmul: incompatible shapes " + detail::shape_str(a->shape) +
                          " x " + detail::shape_str(b->shape));
    };
    std::size_t batch, m, k, n;
    bool shared_b;
    if (a->rank() == 2 && b->rank() == 2) {
        batch = 1;
        m = a->dim(0);
        k = a->dim(1);
        if (b->dim(0) != k) throw bad();
        n = b->dim(1);
        shared_b = true;
    } else if (a->rank() == 3 && b->rank() == 2) {
        batch = a->dim(0);
        m = a->dim(1);
        k = a->dim(2);
        if (b->dim(0) != k) throw bad();
        n = b->dim(1);
        shared_b = true;
    } else if (a->rank() == 3 && b->rank() == 3) {
        batch = a->dim(0);
        if (b->dim(0) != batch || b->dim(1) != a->dim(2)) throw bad();
        m = a->dim(1);
        k = a->dim(2);
        n = b->dim(2);
        shared_b = false;
    } else {
        throw bad();
    }
    std::vector<std::size_t> oshape =
        a->rank() == 2 ? std::vector<std::size_t>{m, n} : std::vector<std::size_t>{batch, m, n};
    const bool rec = detail::want_grad(tape, {&a, &b});
    auto out = detail::fresh<T>(std::move(oshape), rec);
    for (std::size_t bi = 0; bi < batch; ++bi) {
        detail::CMapM<T> A(a->v.data() + bi * m * k, m, k);
        detail::CMapM<T> B(b->v.data() + (shared_b ? 0 : bi * k * n), k, n);
        detail::MapM<T> C(out->v.data() + bi * m * n, m, n);
        C.noalias() = A * B;
    }
    if (rec) {
        tape->record("matmul", {a, b}, out, [a, b, out, batch, m, k, n, shared_b] {
            for (std::size_t bi = 0; bi < batch; ++bi) {
                detail::CMapM<T> A(a->v.data() + bi * m * k, m, k);
                detail::CMapM<T> B(b->v.data() + (shared_b ? 0 : bi * k * n), k, n);
                detail::CMapM<T> dC(out->g.data() + bi * m * n, m, n);
                if (a->requires_grad) {
                    detail::MapM<T> dA(a->g.data() + bi * m * k, m, k);
                    dA.noalias() += dC * B.transpose();
                }
                if (b->requires_grad) {
                    detail::MapM<T> dB(b->g.data() + (shared_b ? 0 : bi * k * n), k, n);
                    dB.noalias() += A.transpose() * dC;
                }
            }
        });
    }
    return out;
}

template <typename T>
TensorPtr<T> transpose2d(Tape<T>* tape, const TensorPtr<T>& x) {
    if (x->rank() != 2) throw ShapeError("transpose2d: rank-2 required, got " +
                                         detail::shape_str(x->shape));
    const std::size_t m = x->dim(0), n = x->dim(1);
    const bool rec = detail::want_grad(tape, {&x});
    auto out = detail::fresh<T>({n, m}, rec);
    detail::CMapM<T> X(x->v.data(), m, n);
    detail::MapM<T> O(out->v.data(), n, m);
    O = X.transpose();
    if (rec) {
        tape->record("transpose2d", {x}, out, [x, out, m, n] {
            if (!x->requires_grad) return;
            detail::MapM<T> dX(x->g.data(), m, n);
            detail::CMapM<T> dO(out->g.data(), n, m);
            dX += dO.transpose();
        });
    }
    return out;
}

// Columns [c0, c1) of a rank-2 tensor.
template <typename T>
TensorPtr<T> slice_cols(Tape<T>* tape, const TensorPtr<T>& x, std::size_t c0, std::size_t c1) {
    if (x->rank() != 2) throw ShapeError("slice_cols: rank-2 required");
    const std::size_t m = x->dim(0), n = x->dim(1);
    if (!(c0 < c1 && c1 <= n))
        throw ShapeError("slice_cols: invalid range [" + std::to_string(c0) + "," +
                         std::to_string(c1) + ") for " + detail::shape_str(x->shape));
    const std::size_t w = c1 - c0;
    const bool rec = detail::want_grad(tape, {&x});
    auto out = detail::fresh<T>({m, w}, rec);
    for (std::size_t i = 0; i < m; ++i)
        std::memcpy(out->v.data() + i * w, x->v.data() + i * n + c0, w * sizeof(T));
    if (rec) {
        tape->record("slice_cols", {x}, out, [x, out, m, n, w, c0] {
            if (!x->requires_grad) return;
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < w; ++j) x->g[i * n + c0 + j] += out->g[i * w + j];
        });
    }
    return out;
}

// Horizontal concatenation of rank-2 tensors with equal row counts.
template <typename T>
TensorPtr<T> concat_cols(Tape<T>* tape, const std::vector<TensorPtr<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t m = parts[0]->dim(0);
    std::size_t n = 0;
    bool rec = false;
    for (const auto& p : parts) {
        if (p->rank() != 2 || p->dim(0) != m)
            throw ShapeError("concat_cols: incompatible part " + detail::shape_str(p->shape));
        n += p->dim(1);
        if (tape && p->requires_grad) rec = true;
    }
    auto out = detail::fresh<T>({m, n}, rec);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p->dim(1);
        for (std::size_t i = 0; i < m; ++i)
            std::memcpy(out->v.data() + i * n + off, p->v.data() + i * w, w * sizeof(T));
        off += w;
    }
    if (rec) {
        std::vector<TensorPtr<T>> ins = parts;
        tape->record("concat_cols", ins, out, [parts, out, m, n] {
            std::size_t off = 0;
            for (const auto& p : parts) {
                const std::size_t w = p->dim(1);
                if (p->requires_grad) {
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < w; ++j)
                            p->g[i * w + j] += out->g[i * n + off + j];
                }
                off += w;
            }
        });
    }
    return out;
}

// ---- nonlinear ops ----------------------------------------------------------

// Numerically stable softmax along `axis`; rows sum to exactly the rounded
// sum of normalized terms (1 within float rounding).
template <typename T>
TensorPtr<T> softmax(Tape<T>* tape, const TensorPtr<T>& x, std::size_t axis) {
    if (axis >= x->rank())
        throw ShapeError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         detail::shape_str(x->shape));
    std::size_t outer = 1, inner = 1;
    const std::size_t L = x->dim(axis);
    for (std::size_t i = 0; i < axis; ++i) outer *= x->dim(i);
    for (std::size_t i = axis + 1; i < x->rank(); ++i) inner *= x->dim(i);
    const bool rec = detail::want_grad(tape, {&x});
    auto out = detail::fresh<T>(x->shape, rec);
    if (inner == 1) {
        for (std::size_t o = 0; o < outer; ++o) {
            detail::CMapA<T> xi(x->v.data() + o * L, L);
            detail::MapA<T> yi(out->v.data() + o * L, L);
            const T mx = xi.maxCoeff();
            yi = (xi - mx).exp();
            yi /= yi.sum();
        }
    } else {
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * L * inner + in;
                T mx = x->v[base];
                for (std::size_t l = 1; l < L; ++l) mx = std::max(mx, x->v[base + l * inner]);
                T s = 0;
                for (std::size_t l = 0; l < L; ++l) {
                    const T e = std::exp(x->v[base + l * inner] - mx);
                    out->v[base + l * inner] = e;
                    s += e;
                }
                for (std::size_t l = 0; l < L; ++l) out->v[base + l * inner] /= s;
            }
        }
    }
    if (rec) {
        tape->record("softmax", {x}, out, [x, out, outer, L, inner] {
            if (!x->requires_grad) return;
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * L * inner + in;
                    T dot = 0;
                    for (std::size_t l = 0; l < L; ++l)
                        dot += out->g[base + l * inner] * out->v[base + l * inner];
                    for (std::size_t l = 0; l < L; ++l) {
                        const std::size_t i = base + l * inner;
                        x->g[i] += out->v[i] * (out->g[i] - dot);
                    }
                }
            }
        });
    }
    return out;
}

// LayerNorm over the last dim with learned gain/bias.
template <typename T>
TensorPtr<T> layer_norm(Tape<T>* tape, const TensorPtr<T>& x, const TensorPtr<T>& gain,
                        const TensorPtr<T>& bias, T eps = T(1e-5)) {
    if (x->rank() == 0) throw ShapeError("layer_norm: rank >= 1 required");
    const std::size_t D = x->shape.back();
    if (gain->numel() != D || bias->numel() != D)
        throw ShapeError("layer_norm: gain/bias must have " + std::to_string(D) + " elements");
    const std::size_t rows = x->numel() / D;
    const bool rec = detail::want_grad(tape, {&x, &gain, &bias});
    auto out = detail::fresh<T>(x->shape, rec);
    auto mean = std::make_shared<std::vector<T>>(rows);
    auto istd = std::make_shared<std::vector<T>>(rows);
    detail::CMapA<T> gm(gain->v.data(), D);
    detail::CMapA<T> bm(bias->v.data(), D);
    for (std::size_t r = 0; r < rows; ++r) {
        detail::CMapA<T> xi(x->v.data() + r * D, D);
        detail::MapA<T> yi(out->v.data() + r * D, D);
        const T mu = xi.mean();
        const T var = (xi - mu).square().mean();
        const T inv = T(1) / std::sqrt(var + eps);
        (*mean)[r] = mu;
        (*istd)[r] = inv;
        yi = ((xi - mu) * inv) * gm + bm;
    }
    if (rec) {
        tape->record("layer_norm", {x, gain, bias}, out, [x, gain, bias, out, mean, istd, rows, D] {
            detail::CMapA<T> gm(gain->v.data(), D);
            for (std::size_t r = 0; r < rows; ++r) {
                detail::CMapA<T> xi(x->v.data() + r * D, D);
                detail::CMapA<T> dy(out->g.data() + r * D, D);
                const T mu = (*mean)[r];
                const T inv = (*istd)[r];
                Eigen::Array<T, Eigen::Dynamic, 1> xhat = (xi - mu) * inv;
                if (gain->requires_grad) {
                    detail::MapA<T> dg(gain->g.data(), D);
                    dg += dy * xhat;
                }
                if (bias->requires_grad) {
                    detail::MapA<T> db(bias->g.data(), D);
                    db += dy;
                }
                if (x->requires_grad) {
                    Eigen::Array<T, Eigen::Dynamic, 1> dxh = dy * gm;
                    const T m1 = dxh.mean();
                    const T m2 = (dxh * xhat).mean();
                    detail::MapA<T> dx(x->g.data() + r * D, D);
                    dx += inv * (dxh - m1 - xhat * m2);
                }
            }
        });
    }
    return out;
}

// GELU, tanh approximation: 0.5x(1 + tanh(sqrt(2/pi)(x + 0.044715 x^3))).
// Constants follow the approximation introduced with the original GELU paper.
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

template <typename T>
TensorPtr<T> gelu(Tape<T>* tape, const TensorPtr<T>& x) {
    const bool rec = detail::want_grad(tape, {&x});
    auto out = detail::fresh<T>(x->shape, rec);
    const std::size_t n = x->numel();
    auto tanh_u = std::make_shared<std::vector<T>>(n);
    for (std::size_t i = 0; i < n; ++i) {
        const T xi = x->v[i];
        const T u = static_cast<T>(kGeluC) * (xi + static_cast<T>(kGeluA) * xi * xi * xi);
        const T t = std::tanh(u);
        (*tanh_u)[i] = t;
        out->v[i] = T(0.5) * xi * (T(1) + t);
    }
    if (rec) {
        tape->record("gelu", {x}, out, [x, out, tanh_u, n] {
            if (!x->requires_grad) return;
            for (std::size_t i = 0; i < n; ++i) {
                const T xi = x->v[i];
                const T t = (*tanh_u)[i];
                const T du = static_cast<T>(kGeluC) *
                             (T(1) + T(3) * static_cast<T>(kGeluA) * xi * xi);
                const T d = T(0.5) * (T(1) + t) + T(0.5) * xi * (T(1) - t * t) * du;
                x->g[i] += out->g[i] * d;
            }
        });
    }
    return out;
}

// Inverted dropout. Eval mode or p == 0 returns the input tensor unchanged
// (bitwise identity). Keep-probability scaling happens at train time only.
template <typename T>
TensorPtr<T> dropout(Tape<T>* tape, const TensorPtr<T>& x, double p, bool training,
                     RngStream* rng) {
    if (p < 0.0 || p >= 1.0)
        throw ContractError("dropout: p must be in [0,1), got " + std::to_string(p));
    if (!training || p == 0.0) return x;
    if (!rng) throw ContractError("dropout: rng required in training mode");
    const std::size_t n = x->numel();
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    auto mask = std::make_shared<std::vector<T>>(n);
    const bool rec = detail::want_grad(tape, {&x});
    auto out = detail::fresh<T>(x->shape, rec);
    for (std::size_t i = 0; i < n; ++i) {
        const T m = rng->uniform() >= p ? keep_scale : T(0);
        (*mask)[i] = m;
        out->v[i] = x->v[i] * m;
    }
    if (rec) {
        tape->record("dropout", {x}, out, [x, out, mask, n] {
            if (!x->requires_grad) return;
            for (std::size_t i = 0; i < n; ++i) x->g[i] += out->g[i] * (*mask)[i];
        });
    }
    return out;
}

// ---- multi-head attention ----------------------------------------------------

template <typename T>
struct MhaParams {
    TensorPtr<T> wq, bq, wk, bk, wv, bv, wo, bo;
};

template <typename T>
struct MhaResult {
    TensorPtr<T> out;      // [Lq, d]
    TensorPtr<T> weights;  // [H, Lq, Lk], post-softmax, pre-dropout, detached
};

// Scaled dot-product attention with per-head scale 1/sqrt(d/H). Attention
// dropout is applied after the softmax; the returned weight bundle is taken
// before dropout so extracted maps are deterministic in eval and train mode.
template <typename T>
MhaResult<T> multi_head_attention(Tape<T>* tape, const TensorPtr<T>& q_in,
                                  const TensorPtr<T>& k_in, const TensorPtr<T>& v_in,
                                  const MhaParams<T>& p, std::size_t heads, double dropout_p,
                                  bool training, RngStream* rng) {
    if (q_in->rank() != 2 || k_in->rank() != 2 || v_in->rank() != 2)
        throw ShapeError("multi_head_attention: rank-2 inputs required");
    const std::size_t Lq = q_in->dim(0), d = q_in->dim(1);
    const std::size_t Lk = k_in->dim(0);
    if (k_in->dim(1) != d || v_in->dim(1) != d || v_in->dim(0) != Lk)
        throw ShapeError("multi_head_attention: q " + detail::shape_str(q_in->shape) + ", k " +
                         detail::shape_str(k_in->shape) + ", v " +
                         detail::shape_str(v_in->shape) + " are inconsistent");
    if (heads == 0 || d % heads != 0)
        throw ConfigError("multi_head_attention: model dim " + std::to_string(d) +
                          " not divisible by heads " + std::to_string(heads));
    const std::size_t dh = d / heads;
    const T att_scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

    const auto proj = [&](const TensorPtr<T>& x, const TensorPtr<T>& w, const TensorPtr<T>& b) {
        return add(tape, matmul(tape, x, w), b);
    };
    auto Q = proj(q_in, p.wq, p.bq);
    auto K = proj(k_in, p.wk, p.bk);
    auto V = proj(v_in, p.wv, p.bv);

    auto weights = zeros<T>({heads, Lq, Lk});
    std::vector<TensorPtr<T>> head_outs(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        auto Qh = slice_cols(tape, Q, h * dh, (h + 1) * dh);
        auto Kh = slice_cols(tape, K, h * dh, (h + 1) * dh);
        auto Vh = slice_cols(tape, V, h * dh, (h + 1) * dh);
        auto S = scale(tape, matmul(tape, Qh, transpose2d(tape, Kh)), att_scale);
        auto A = softmax(tape, S, 1);
        std::memcpy(weights->v.data() + h * Lq * Lk, A->v.data(), Lq * Lk * sizeof(T));
        auto A_used = dropout(tape, A, dropout_p, training, rng);
        head_outs[h] = matmul(tape, A_used, Vh);
    }
    auto O = concat_cols(tape, head_outs);
    auto out = proj(O, p.wo, p.bo);
    return {out, weights};
}

// ---- finite differences -------------------------------------------------------

// Central finite differences of a scalar function of x, element by element.
// f must be deterministic; x is restored on exit.
template <typename T>
TensorPtr<T> finite_difference_gradient(const std::function<T(const TensorPtr<T>&)>& f,
                                        const TensorPtr<T>& x, T h) {
    if (!(h > T(0))) throw ContractError("finite_difference_gradient: h must be > 0");
    auto grad = zeros<T>(x->shape);
    for (std::size_t i = 0; i < x->numel(); ++i) {
        const T orig = x->v[i];
        x->v[i] = orig + h;
        const T fp = f(x);
        x->v[i] = orig - h;
        const T fm = f(x);
        x->v[i] = orig;
        grad->v[i] = (fp - fm) / (T(2) * h);
    }
    return grad;
}

}  // namespace cdt
