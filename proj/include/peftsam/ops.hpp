#pragma once

#include "peftsam/tape.hpp"

namespace peftsam {

// ---------------------------------------------------------------------------
// gemm kernels (row-major)
// ---------------------------------------------------------------------------

// C(m,n) += A(m,k) * B(k,n)
template <class T>
void gemm_nn(int64_t m, int64_t n, int64_t k, const T* A, const T* B, T* C) {
    for (int64_t i = 0; i < m; ++i) {
        T* c = C + i * n;
        const T* a = A + i * k;
        for (int64_t p = 0; p < k; ++p) {
            T av = a[p];
            const T* b = B + p * n;
            for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// C(m,n) += A(m,k) * B(n,k)^T
template <class T>
void gemm_nt(int64_t m, int64_t n, int64_t k, const T* A, const T* B, T* C) {
    for (int64_t i = 0; i < m; ++i) {
        const T* a = A + i * k;
        T* c = C + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* b = B + j * k;
            T acc = 0;
            for (int64_t p = 0; p < k; ++p) acc += a[p] * b[p];
            c[j] += acc;
        }
    }
}

// C(k,n) += A(m,k)^T * B(m,n)
template <class T>
void gemm_tn(int64_t m, int64_t n, int64_t k, const T* A, const T* B, T* C) {
    for (int64_t p = 0; p < m; ++p) {
        const T* a = A + p * k;
        const T* b = B + p * n;
        for (int64_t i = 0; i < k; ++i) {
            T av = a[i];
            T* c = C + i * n;
            for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
        }
    }
}

// ---------------------------------------------------------------------------
// broadcasting helpers
// ---------------------------------------------------------------------------

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
    size_t nd = std::max(a.size(), b.size());
    Shape out(nd);
    for (size_t i = 0; i < nd; ++i) {
        int64_t ae = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        int64_t be = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        require(ae == be || ae == 1 || be == 1,
                std::string(op) + ": shapes not broadcastable " + shape_str(a) + " vs " + shape_str(b));
        out[i] = std::max(ae, be);
    }
    return out;
}

inline std::vector<int64_t> bcast_strides(const Shape& s, const Shape& out) {
    std::vector<int64_t> st(out.size(), 0);
    int64_t stride = 1;
    for (size_t i = 0; i < s.size(); ++i) {
        size_t si = s.size() - 1 - i;
        size_t oi = out.size() - 1 - i;
        st[oi] = (s[si] == 1 && out[oi] != 1) ? 0 : stride;
        stride *= s[si];
    }
    return st;
}

/// Odometer iteration over `oshape`, calling f(offa, offb, offo).
template <class F>
void bcast_for_each(const Shape& oshape, const std::vector<int64_t>& sa, const std::vector<int64_t>& sb,
                    F&& f) {
    size_t nd = oshape.size();
    if (numel(oshape) == 0) return;
    std::vector<int64_t> idx(nd, 0);
    int64_t offa = 0, offb = 0, offo = 0;
    for (;;) {
        f(offa, offb, offo);
        ++offo;
        int64_t d = static_cast<int64_t>(nd) - 1;
        for (; d >= 0; --d) {
            ++idx[d];
            offa += sa[d];
            offb += sb[d];
            if (idx[d] < oshape[d]) break;
            offa -= sa[d] * oshape[d];
            offb -= sb[d] * oshape[d];
            idx[d] = 0;
        }
        if (d < 0) break;
    }
}

// ---------------------------------------------------------------------------
// elementwise binary ops with broadcasting
// ---------------------------------------------------------------------------

enum class BinOp { Add, Sub, Mul, Div };

template <class T>
TensorPtr<T> binary(Tape<T>& tp, BinOp kind, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    const char* name = kind == BinOp::Add ? "add" : kind == BinOp::Sub ? "sub" : kind == BinOp::Mul ? "mul" : "div";
    Shape oshape = broadcast_shape(name, a->shape, b->shape);
    auto out = make_tensor<T>(oshape);
    bool same = a->shape == oshape && b->shape == oshape;
    auto sa = bcast_strides(a->shape, oshape);
    auto sb = bcast_strides(b->shape, oshape);
    const T* pa = a->data.data();
    const T* pb = b->data.data();
    T* po = out->data.data();
    int64_t n = out->size();
    auto apply = [kind](T x, T y) -> T {
        switch (kind) {
            case BinOp::Add: return x + y;
            case BinOp::Sub: return x - y;
            case BinOp::Mul: return x * y;
            case BinOp::Div: return x / y;
        }
        return T(0);
    };
    if (same) {
        for (int64_t i = 0; i < n; ++i) po[i] = apply(pa[i], pb[i]);
    } else {
        bcast_for_each(oshape, sa, sb, [&](int64_t ia, int64_t ib, int64_t io) { po[io] = apply(pa[ia], pb[ib]); });
    }
    bool ng = a->requires_grad || b->requires_grad;
    out->requires_grad = ng;
    int64_t saved = 0;
    if (kind == BinOp::Mul) saved = (a->requires_grad ? b->nbytes() : 0) + (b->requires_grad ? a->nbytes() : 0);
    if (kind == BinOp::Div) saved = a->nbytes() + b->nbytes();
    tp.record(name, ng, out, saved, [=]() {
        if (a->requires_grad) a->ensure_grad();
        if (b->requires_grad) b->ensure_grad();
        const T* go = out->grad.data();
        T* ga = a->requires_grad ? a->grad.data() : nullptr;
        T* gb = b->requires_grad ? b->grad.data() : nullptr;
        const T* da = a->data.data();
        const T* db = b->data.data();
        auto step = [&](int64_t ia, int64_t ib, int64_t io) {
            T g = go[io];
            switch (kind) {
                case BinOp::Add:
                    if (ga) ga[ia] += g;
                    if (gb) gb[ib] += g;
                    break;
                case BinOp::Sub:
                    if (ga) ga[ia] += g;
                    if (gb) gb[ib] -= g;
                    break;
                case BinOp::Mul:
                    if (ga) ga[ia] += g * db[ib];
                    if (gb) gb[ib] += g * da[ia];
                    break;
                case BinOp::Div:
                    if (ga) ga[ia] += g / db[ib];
                    if (gb) gb[ib] -= g * da[ia] / (db[ib] * db[ib]);
                    break;
            }
        };
        if (same) {
            for (int64_t i = 0; i < n; ++i) step(i, i, i);
        } else {
            bcast_for_each(oshape, sa, sb, step);
        }
    });
    return out;
}

template <class T> TensorPtr<T> add(Tape<T>& tp, const TensorPtr<T>& a, const TensorPtr<T>& b) { return binary(tp, BinOp::Add, a, b); }
template <class T> TensorPtr<T> sub(Tape<T>& tp, const TensorPtr<T>& a, const TensorPtr<T>& b) { return binary(tp, BinOp::Sub, a, b); }
template <class T> TensorPtr<T> mul(Tape<T>& tp, const TensorPtr<T>& a, const TensorPtr<T>& b) { return binary(tp, BinOp::Mul, a, b); }
template <class T> TensorPtr<T> div(Tape<T>& tp, const TensorPtr<T>& a, const TensorPtr<T>& b) { return binary(tp, BinOp::Div, a, b); }

/// out = c * x
template <class T>
TensorPtr<T> scale(Tape<T>& tp, const TensorPtr<T>& x, T c) {
    auto out = make_tensor<T>(x->shape);
    int64_t n = x->size();
    for (int64_t i = 0; i < n; ++i) out->data[i] = c * x->data[i];
    out->requires_grad = x->requires_grad;
    tp.record("scale", x->requires_grad, out, 0, [=]() {
        x->ensure_grad();
        for (int64_t i = 0; i < n; ++i) x->grad[i] += c * out->grad[i];
    });
    return out;
}

/// out = x + c
template <class T>
TensorPtr<T> add_const(Tape<T>& tp, const TensorPtr<T>& x, T c) {
    auto out = make_tensor<T>(x->shape);
    int64_t n = x->size();
    for (int64_t i = 0; i < n; ++i) out->data[i] = x->data[i] + c;
    out->requires_grad = x->requires_grad;
    tp.record("add_const", x->requires_grad, out, 0, [=]() {
        x->ensure_grad();
        for (int64_t i = 0; i < n; ++i) x->grad[i] += out->grad[i];
    });
    return out;
}

// ---------------------------------------------------------------------------
// unary activations
// ---------------------------------------------------------------------------

template <class T>
TensorPtr<T> relu(Tape<T>& tp, const TensorPtr<T>& x) {
    auto out = make_tensor<T>(x->shape);
    int64_t n = x->size();
    for (int64_t i = 0; i < n; ++i) out->data[i] = x->data[i] > 0 ? x->data[i] : T(0);
    out->requires_grad = x->requires_grad;
    tp.record("relu", x->requires_grad, out, x->nbytes(), [=]() {
        x->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            if (x->data[i] > 0) x->grad[i] += out->grad[i];
    });
    return out;
}

template <class T>
TensorPtr<T> gelu(Tape<T>& tp, const TensorPtr<T>& x) {
    auto out = make_tensor<T>(x->shape);
    int64_t n = x->size();
    const T inv_sqrt2 = T(0.7071067811865476);
    for (int64_t i = 0; i < n; ++i) {
        T v = x->data[i];
        out->data[i] = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
    }
    out->requires_grad = x->requires_grad;
    tp.record("gelu", x->requires_grad, out, x->nbytes(), [=]() {
        x->ensure_grad();
        const T inv_sqrt_2pi = T(0.3989422804014327);
        for (int64_t i = 0; i < n; ++i) {
            T v = x->data[i];
            T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
            x->grad[i] += out->grad[i] * (cdf + v * pdf);
        }
    });
    return out;
}

template <class T>
TensorPtr<T> sigmoid(Tape<T>& tp, const TensorPtr<T>& x) {
    auto out = make_tensor<T>(x->shape);
    int64_t n = x->size();
    for (int64_t i = 0; i < n; ++i) {
        T v = x->data[i];
        out->data[i] = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
    }
    out->requires_grad = x->requires_grad;
    tp.record("sigmoid", x->requires_grad, out, out->nbytes(), [=]() {
        x->ensure_grad();
        for (int64_t i = 0; i < n; ++i) {
            T s = out->data[i];
            x->grad[i] += out->grad[i] * s * (T(1) - s);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// matmul (leading batch dims must match exactly)
// ---------------------------------------------------------------------------

template <class T>
TensorPtr<T> matmul(Tape<T>& tp, const TensorPtr<T>& a, const TensorPtr<T>& b) {
    require(a->ndim() >= 2 && b->ndim() >= 2 && a->ndim() == b->ndim(),
            "matmul: rank mismatch " + shape_str(a->shape) + " x " + shape_str(b->shape));
    size_t nd = a->shape.size();
    for (size_t i = 0; i + 2 < nd; ++i)
        require(a->shape[i] == b->shape[i],
                "matmul: batch dim mismatch " + shape_str(a->shape) + " x " + shape_str(b->shape));
    int64_t m = a->shape[nd - 2], k = a->shape[nd - 1];
    require(b->shape[nd - 2] == k,
            "matmul: inner dim mismatch " + shape_str(a->shape) + " x " + shape_str(b->shape));
    int64_t n = b->shape[nd - 1];
    Shape oshape(a->shape.begin(), a->shape.end() - 2);
    int64_t batch = numel(oshape);
    oshape.push_back(m);
    oshape.push_back(n);
    auto out = make_tensor<T>(oshape);
    for (int64_t bb = 0; bb < batch; ++bb)
        gemm_nn(m, n, k, a->data.data() + bb * m * k, b->data.data() + bb * k * n, out->data.data() + bb * m * n);
    bool ng = a->requires_grad || b->requires_grad;
    out->requires_grad = ng;
    int64_t saved = (a->requires_grad ? b->nbytes() : 0) + (b->requires_grad ? a->nbytes() : 0);
    tp.record("matmul", ng, out, saved, [=]() {
        const T* go = out->grad.data();
        if (a->requires_grad) {
            a->ensure_grad();
            for (int64_t bb = 0; bb < batch; ++bb)
                gemm_nt(m, k, n, go + bb * m * n, b->data.data() + bb * k * n, a->grad.data() + bb * m * k);
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t bb = 0; bb < batch; ++bb)
                gemm_tn(m, n, k, a->data.data() + bb * m * k, go + bb * m * n, b->grad.data() + bb * k * n);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// layout ops
// ---------------------------------------------------------------------------

template <class T>
TensorPtr<T> reshape(Tape<T>& tp, const TensorPtr<T>& x, Shape s) {
    require(numel(s) == x->size(), "reshape: cannot reshape " + shape_str(x->shape) + " to " + shape_str(s));
    auto out = make_tensor<T>(std::move(s));
    out->data = x->data;
    out->requires_grad = x->requires_grad;
    int64_t n = x->size();
    tp.record("reshape", x->requires_grad, out, 0, [=]() {
        x->ensure_grad();
        for (int64_t i = 0; i < n; ++i) x->grad[i] += out->grad[i];
    });
    return out;
}

template <class T>
TensorPtr<T> permute(Tape<T>& tp, const TensorPtr<T>& x, const std::vector<int64_t>& perm) {
    size_t nd = x->shape.size();
    require(perm.size() == nd, "permute: bad permutation for " + shape_str(x->shape));
    Shape oshape(nd);
    for (size_t i = 0; i < nd; ++i) oshape[i] = x->shape[perm[i]];
    std::vector<int64_t> xstr(nd, 1);
    for (int64_t i = static_cast<int64_t>(nd) - 2; i >= 0; --i) xstr[i] = xstr[i + 1] * x->shape[i + 1];
    std::vector<int64_t> pstr(nd);  // stride in x per output dim
    for (size_t i = 0; i < nd; ++i) pstr[i] = xstr[perm[i]];
    auto out = make_tensor<T>(oshape);
    std::vector<int64_t> idx(nd, 0);
    int64_t xi = 0;
    int64_t n = out->size();
    for (int64_t o = 0; o < n; ++o) {
        out->data[o] = x->data[xi];
        for (int64_t d = static_cast<int64_t>(nd) - 1; d >= 0; --d) {
            ++idx[d];
            xi += pstr[d];
            if (idx[d] < oshape[d]) break;
            xi -= pstr[d] * oshape[d];
            idx[d] = 0;
        }
    }
    out->requires_grad = x->requires_grad;
    tp.record("permute", x->requires_grad, out, 0, [=]() {
        x->ensure_grad();
        std::vector<int64_t> id2(nd, 0);
        int64_t xj = 0;
        for (int64_t o = 0; o < n; ++o) {
            x->grad[xj] += out->grad[o];
            for (int64_t d = static_cast<int64_t>(nd) - 1; d >= 0; --d) {
                ++id2[d];
                xj += pstr[d];
                if (id2[d] < oshape[d]) break;
                xj -= pstr[d] * oshape[d];
                id2[d] = 0;
            }
        }
    });
    return out;
}

template <class T>
TensorPtr<T> slice(Tape<T>& tp, const TensorPtr<T>& x, int64_t dim, int64_t start, int64_t len) {
    require(dim >= 0 && dim < x->ndim() && start >= 0 && start + len <= x->shape[dim],
            "slice: out of range on " + shape_str(x->shape));
    Shape oshape = x->shape;
    oshape[dim] = len;
    int64_t inner = 1;
    for (int64_t i = dim + 1; i < x->ndim(); ++i) inner *= x->shape[i];
    int64_t outer = 1;
    for (int64_t i = 0; i < dim; ++i) outer *= x->shape[i];
    int64_t xd = x->shape[dim];
    auto out = make_tensor<T>(oshape);
    for (int64_t o = 0; o < outer; ++o)
        std::copy_n(x->data.data() + (o * xd + start) * inner, len * inner, out->data.data() + o * len * inner);
    out->requires_grad = x->requires_grad;
    tp.record("slice", x->requires_grad, out, 0, [=]() {
        x->ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
            const T* g = out->grad.data() + o * len * inner;
            T* xg = x->grad.data() + (o * xd + start) * inner;
            for (int64_t i = 0; i < len * inner; ++i) xg[i] += g[i];
        }
    });
    return out;
}

template <class T>
TensorPtr<T> concat(Tape<T>& tp, const std::vector<TensorPtr<T>>& xs, int64_t dim) {
    require(!xs.empty(), "concat: empty input list");
    Shape oshape = xs[0]->shape;
    for (size_t i = 1; i < xs.size(); ++i) {
        require(xs[i]->ndim() == xs[0]->ndim(), "concat: rank mismatch");
        for (int64_t d = 0; d < xs[0]->ndim(); ++d)
            if (d != dim)
                require(xs[i]->shape[d] == xs[0]->shape[d],
                        "concat: shape mismatch " + shape_str(xs[i]->shape) + " vs " + shape_str(xs[0]->shape));
        oshape[dim] += xs[i]->shape[dim];
    }
    int64_t inner = 1;
    for (int64_t i = dim + 1; i < xs[0]->ndim(); ++i) inner *= xs[0]->shape[i];
    int64_t outer = 1;
    for (int64_t i = 0; i < dim; ++i) outer *= xs[0]->shape[i];
    auto out = make_tensor<T>(oshape);
    int64_t od = oshape[dim];
    int64_t off = 0;
    bool ng = false;
    for (const auto& x : xs) ng = ng || x->requires_grad;
    std::vector<int64_t> offsets;
    for (const auto& x : xs) {
        int64_t xd = x->shape[dim];
        for (int64_t o = 0; o < outer; ++o)
            std::copy_n(x->data.data() + o * xd * inner, xd * inner, out->data.data() + (o * od + off) * inner);
        offsets.push_back(off);
        off += xd;
    }
    out->requires_grad = ng;
    tp.record("concat", ng, out, 0, [=]() {
        for (size_t xi = 0; xi < xs.size(); ++xi) {
            const auto& x = xs[xi];
            if (!x->requires_grad) continue;
            x->ensure_grad();
            int64_t xd = x->shape[dim];
            for (int64_t o = 0; o < outer; ++o) {
                const T* g = out->grad.data() + (o * od + offsets[xi]) * inner;
                T* xg = x->grad.data() + o * xd * inner;
                for (int64_t i = 0; i < xd * inner; ++i) xg[i] += g[i];
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <class T>
TensorPtr<T> sum_all(Tape<T>& tp, const TensorPtr<T>& x) {
    auto out = make_tensor<T>(Shape{1});
    T acc = 0;
    for (T v : x->data) acc += v;
    out->data[0] = acc;
    out->requires_grad = x->requires_grad;
    tp.record("sum", x->requires_grad, out, 0, [=]() {
        x->ensure_grad();
        T g = out->grad[0];
        for (auto& v : x->grad) v += g;
    });
    return out;
}

template <class T>
TensorPtr<T> mean_all(Tape<T>& tp, const TensorPtr<T>& x) {
    auto out = make_tensor<T>(Shape{1});
    T acc = 0;
    for (T v : x->data) acc += v;
    int64_t n = x->size();
    out->data[0] = acc / static_cast<T>(n);
    out->requires_grad = x->requires_grad;
    tp.record("mean", x->requires_grad, out, 0, [=]() {
        x->ensure_grad();
        T g = out->grad[0] / static_cast<T>(n);
        for (auto& v : x->grad) v += g;
    });
    return out;
}

template <class T>
TensorPtr<T> max_all(Tape<T>& tp, const TensorPtr<T>& x) {
    require(x->size() > 0, "max: empty tensor");
    int64_t arg = 0;
    for (int64_t i = 1; i < x->size(); ++i)
        if (x->data[i] > x->data[arg]) arg = i;
    auto out = make_tensor<T>(Shape{1});
    out->data[0] = x->data[arg];
    out->requires_grad = x->requires_grad;
    tp.record("max", x->requires_grad, out, 8, [=]() {
        x->ensure_grad();
        x->grad[arg] += out->grad[0];
    });
    return out;
}

// ---------------------------------------------------------------------------
// normalization & softmax
// ---------------------------------------------------------------------------

/// Normalizes over the last dimension: (x - mean) / sqrt(var + eps).
/// Affine scale/shift is applied by the caller with broadcast mul/add.
template <class T>
TensorPtr<T> layer_norm_normalize(Tape<T>& tp, const TensorPtr<T>& x, T eps = T(1e-6)) {
    int64_t d = x->shape.back();
    int64_t rows = x->size() / d;
    auto out = make_tensor<T>(x->shape);
    auto rstd = std::make_shared<std::vector<T>>(rows);
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x->data.data() + r * d;
        T* yr = out->data.data() + r * d;
        T mean = 0;
        for (int64_t i = 0; i < d; ++i) mean += xr[i];
        mean /= static_cast<T>(d);
        T var = 0;
        for (int64_t i = 0; i < d; ++i) {
            T c = xr[i] - mean;
            var += c * c;
        }
        var /= static_cast<T>(d);
        T rs = T(1) / std::sqrt(var + eps);
        (*rstd)[r] = rs;
        for (int64_t i = 0; i < d; ++i) yr[i] = (xr[i] - mean) * rs;
    }
    out->requires_grad = x->requires_grad;
    int64_t saved = out->nbytes() + rows * static_cast<int64_t>(sizeof(T));
    tp.record("layernorm", x->requires_grad, out, saved, [=]() {
        x->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const T* xhat = out->data.data() + r * d;
            const T* g = out->grad.data() + r * d;
            T* xg = x->grad.data() + r * d;
            T rs = (*rstd)[r];
            T gm = 0, gx = 0;
            for (int64_t i = 0; i < d; ++i) {
                gm += g[i];
                gx += g[i] * xhat[i];
            }
            gm /= static_cast<T>(d);
            gx /= static_cast<T>(d);
            for (int64_t i = 0; i < d; ++i) xg[i] += rs * (g[i] - gm - xhat[i] * gx);
        }
    });
    return out;
}

/// Softmax over the last dimension.
template <class T>
TensorPtr<T> softmax(Tape<T>& tp, const TensorPtr<T>& x) {
    int64_t d = x->shape.back();
    int64_t rows = x->size() / d;
    auto out = make_tensor<T>(x->shape);
    for (int64_t r = 0; r < rows; ++r) {
        const T* xr = x->data.data() + r * d;
        T* yr = out->data.data() + r * d;
        T mx = xr[0];
        for (int64_t i = 1; i < d; ++i) mx = std::max(mx, xr[i]);
        T s = 0;
        for (int64_t i = 0; i < d; ++i) {
            yr[i] = std::exp(xr[i] - mx);
            s += yr[i];
        }
        for (int64_t i = 0; i < d; ++i) yr[i] /= s;
    }
    out->requires_grad = x->requires_grad;
    tp.record("softmax", x->requires_grad, out, out->nbytes(), [=]() {
        x->ensure_grad();
        for (int64_t r = 0; r < rows; ++r) {
            const T* y = out->data.data() + r * d;
            const T* g = out->grad.data() + r * d;
            T* xg = x->grad.data() + r * d;
            T dot = 0;
            for (int64_t i = 0; i < d; ++i) dot += g[i] * y[i];
            for (int64_t i = 0; i < d; ++i) xg[i] += y[i] * (g[i] - dot);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// 2-d convolution ops (CHW layout, no batch dim)
// ---------------------------------------------------------------------------

template <class T>
TensorPtr<T> conv2d(Tape<T>& tp, const TensorPtr<T>& x, const TensorPtr<T>& w, const TensorPtr<T>& b,
                    int64_t stride, int64_t pad) {
    require(x->ndim() == 3 && w->ndim() == 4, "conv2d: expected CHW input and OIHW weight, got " +
                                                  shape_str(x->shape) + " / " + shape_str(w->shape));
    int64_t ci = x->shape[0], h = x->shape[1], ww = x->shape[2];
    int64_t co = w->shape[0], kh = w->shape[2], kw = w->shape[3];
    require(w->shape[1] == ci, "conv2d: channel mismatch " + shape_str(x->shape) + " / " + shape_str(w->shape));
    require(!b || b->size() == co, "conv2d: bias size mismatch");
    int64_t oh = (h + 2 * pad - kh) / stride + 1;
    int64_t ow = (ww + 2 * pad - kw) / stride + 1;
    require(oh > 0 && ow > 0, "conv2d: empty output for input " + shape_str(x->shape));
    auto out = make_tensor<T>(Shape{co, oh, ow});
    for (int64_t oc = 0; oc < co; ++oc) {
        T bias = b ? b->data[oc] : T(0);
        for (int64_t oy = 0; oy < oh; ++oy)
            for (int64_t ox = 0; ox < ow; ++ox) {
                T acc = bias;
                for (int64_t ic = 0; ic < ci; ++ic) {
                    const T* xp = x->data.data() + ic * h * ww;
                    const T* wp = w->data.data() + ((oc * ci + ic) * kh) * kw;
                    for (int64_t ky = 0; ky < kh; ++ky) {
                        int64_t iy = oy * stride - pad + ky;
                        if (iy < 0 || iy >= h) continue;
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            int64_t ix = ox * stride - pad + kx;
                            if (ix < 0 || ix >= ww) continue;
                            acc += xp[iy * ww + ix] * wp[ky * kw + kx];
                        }
                    }
                }
                out->data[(oc * oh + oy) * ow + ox] = acc;
            }
    }
    bool ng = x->requires_grad || w->requires_grad || (b && b->requires_grad);
    out->requires_grad = ng;
    int64_t saved = (x->requires_grad ? w->nbytes() : 0) + (w->requires_grad ? x->nbytes() : 0);
    tp.record("conv2d", ng, out, saved, [=]() {
        if (x->requires_grad) x->ensure_grad();
        if (w->requires_grad) w->ensure_grad();
        if (b && b->requires_grad) b->ensure_grad();
        for (int64_t oc = 0; oc < co; ++oc)
            for (int64_t oy = 0; oy < oh; ++oy)
                for (int64_t ox = 0; ox < ow; ++ox) {
                    T g = out->grad[(oc * oh + oy) * ow + ox];
                    if (g == T(0)) continue;
                    if (b && b->requires_grad) b->grad[oc] += g;
                    for (int64_t ic = 0; ic < ci; ++ic) {
                        for (int64_t ky = 0; ky < kh; ++ky) {
                            int64_t iy = oy * stride - pad + ky;
                            if (iy < 0 || iy >= h) continue;
                            for (int64_t kx = 0; kx < kw; ++kx) {
                                int64_t ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= ww) continue;
                                int64_t xoff = (ic * h + iy) * ww + ix;
                                int64_t woff = ((oc * ci + ic) * kh + ky) * kw + kx;
                                if (x->requires_grad) x->grad[xoff] += g * w->data[woff];
                                if (w->requires_grad) w->grad[woff] += g * x->data[xoff];
                            }
                        }
                    }
                }
    });
    return out;
}

/// Transposed 2-d convolution with kernel 2, stride 2 (exact 2x upsampling).
/// weight layout (Cin, Cout, 2, 2).
template <class T>
TensorPtr<T> conv_transpose2d(Tape<T>& tp, const TensorPtr<T>& x, const TensorPtr<T>& w,
                              const TensorPtr<T>& b) {
    require(x->ndim() == 3 && w->ndim() == 4 && w->shape[2] == 2 && w->shape[3] == 2,
            "conv_transpose2d: expected CHW input and (Cin,Cout,2,2) weight, got " + shape_str(x->shape) +
                " / " + shape_str(w->shape));
    int64_t ci = x->shape[0], h = x->shape[1], ww = x->shape[2];
    require(w->shape[0] == ci, "conv_transpose2d: channel mismatch");
    int64_t co = w->shape[1];
    int64_t oh = h * 2, ow = ww * 2;
    auto out = make_tensor<T>(Shape{co, oh, ow});
    if (b) {
        require(b->size() == co, "conv_transpose2d: bias size mismatch");
        for (int64_t oc = 0; oc < co; ++oc)
            std::fill_n(out->data.data() + oc * oh * ow, oh * ow, b->data[oc]);
    }
    for (int64_t ic = 0; ic < ci; ++ic)
        for (int64_t iy = 0; iy < h; ++iy)
            for (int64_t ix = 0; ix < ww; ++ix) {
                T v = x->data[(ic * h + iy) * ww + ix];
                for (int64_t oc = 0; oc < co; ++oc) {
                    const T* wp = w->data.data() + (ic * co + oc) * 4;
                    T* op = out->data.data() + (oc * oh + 2 * iy) * ow + 2 * ix;
                    op[0] += v * wp[0];
                    op[1] += v * wp[1];
                    op[ow] += v * wp[2];
                    op[ow + 1] += v * wp[3];
                }
            }
    bool ng = x->requires_grad || w->requires_grad || (b && b->requires_grad);
    out->requires_grad = ng;
    int64_t saved = (x->requires_grad ? w->nbytes() : 0) + (w->requires_grad ? x->nbytes() : 0);
    tp.record("conv_transpose2d", ng, out, saved, [=]() {
        if (x->requires_grad) x->ensure_grad();
        if (w->requires_grad) w->ensure_grad();
        if (b && b->requires_grad) b->ensure_grad();
        if (b && b->requires_grad)
            for (int64_t oc = 0; oc < co; ++oc) {
                T acc = 0;
                const T* g = out->grad.data() + oc * oh * ow;
                for (int64_t i = 0; i < oh * ow; ++i) acc += g[i];
                b->grad[oc] += acc;
            }
        for (int64_t ic = 0; ic < ci; ++ic)
            for (int64_t iy = 0; iy < h; ++iy)
                for (int64_t ix = 0; ix < ww; ++ix) {
                    T xv = x->data[(ic * h + iy) * ww + ix];
                    T xg = 0;
                    for (int64_t oc = 0; oc < co; ++oc) {
                        const T* wp = w->data.data() + (ic * co + oc) * 4;
                        const T* gp = out->grad.data() + (oc * oh + 2 * iy) * ow + 2 * ix;
                        if (x->requires_grad)
                            xg += wp[0] * gp[0] + wp[1] * gp[1] + wp[2] * gp[ow] + wp[3] * gp[ow + 1];
                        if (w->requires_grad) {
                            T* wg = w->grad.data() + (ic * co + oc) * 4;
                            wg[0] += xv * gp[0];
                            wg[1] += xv * gp[1];
                            wg[2] += xv * gp[ow];
                            wg[3] += xv * gp[ow + 1];
                        }
                    }
                    if (x->requires_grad) x->grad[(ic * h + iy) * ww + ix] += xg;
                }
    });
    return out;
}

// ---------------------------------------------------------------------------
// upsampling (CHW)
// ---------------------------------------------------------------------------

template <class T>
TensorPtr<T> upsample_nearest(Tape<T>& tp, const TensorPtr<T>& x, int64_t factor) {
    require(x->ndim() == 3, "upsample_nearest: expected CHW input, got " + shape_str(x->shape));
    int64_t c = x->shape[0], h = x->shape[1], w = x->shape[2];
    int64_t oh = h * factor, ow = w * factor;
    auto out = make_tensor<T>(Shape{c, oh, ow});
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t oy = 0; oy < oh; ++oy)
            for (int64_t ox = 0; ox < ow; ++ox)
                out->data[(ch * oh + oy) * ow + ox] = x->data[(ch * h + oy / factor) * w + ox / factor];
    out->requires_grad = x->requires_grad;
    tp.record("upsample_nearest", x->requires_grad, out, 0, [=]() {
        x->ensure_grad();
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t oy = 0; oy < oh; ++oy)
                for (int64_t ox = 0; ox < ow; ++ox)
                    x->grad[(ch * h + oy / factor) * w + ox / factor] += out->grad[(ch * oh + oy) * ow + ox];
    });
    return out;
}

template <class T>
TensorPtr<T> upsample_bilinear(Tape<T>& tp, const TensorPtr<T>& x, int64_t oh, int64_t ow) {
    require(x->ndim() == 3, "upsample_bilinear: expected CHW input, got " + shape_str(x->shape));
    int64_t c = x->shape[0], h = x->shape[1], w = x->shape[2];
    auto out = make_tensor<T>(Shape{c, oh, ow});
    T sy = static_cast<T>(h) / static_cast<T>(oh);
    T sx = static_cast<T>(w) / static_cast<T>(ow);
    // precompute sample positions (align_corners = false)
    std::vector<int64_t> y0(oh), x0(ow);
    std::vector<T> wy(oh), wx(ow);
    for (int64_t oy = 0; oy < oh; ++oy) {
        T src = (static_cast<T>(oy) + T(0.5)) * sy - T(0.5);
        src = std::max(T(0), std::min(src, static_cast<T>(h - 1)));
        y0[oy] = std::min<int64_t>(static_cast<int64_t>(src), h - 1);
        wy[oy] = src - static_cast<T>(y0[oy]);
    }
    for (int64_t ox = 0; ox < ow; ++ox) {
        T src = (static_cast<T>(ox) + T(0.5)) * sx - T(0.5);
        src = std::max(T(0), std::min(src, static_cast<T>(w - 1)));
        x0[ox] = std::min<int64_t>(static_cast<int64_t>(src), w - 1);
        wx[ox] = src - static_cast<T>(x0[ox]);
    }
    auto at = [&](const T* p, int64_t yy, int64_t xx) { return p[yy * w + xx]; };
    for (int64_t ch = 0; ch < c; ++ch) {
        const T* xp = x->data.data() + ch * h * w;
        T* op = out->data.data() + ch * oh * ow;
        for (int64_t oy = 0; oy < oh; ++oy) {
            int64_t ya = y0[oy], yb = std::min(ya + 1, h - 1);
            T fy = wy[oy];
            for (int64_t ox = 0; ox < ow; ++ox) {
                int64_t xa = x0[ox], xb = std::min(xa + 1, w - 1);
                T fx = wx[ox];
                op[oy * ow + ox] = (T(1) - fy) * ((T(1) - fx) * at(xp, ya, xa) + fx * at(xp, ya, xb)) +
                                   fy * ((T(1) - fx) * at(xp, yb, xa) + fx * at(xp, yb, xb));
            }
        }
    }
    out->requires_grad = x->requires_grad;
    tp.record("upsample_bilinear", x->requires_grad, out, 0, [=]() {
        x->ensure_grad();
        for (int64_t ch = 0; ch < c; ++ch) {
            T* xg = x->grad.data() + ch * h * w;
            const T* og = out->grad.data() + ch * oh * ow;
            for (int64_t oy = 0; oy < oh; ++oy) {
                int64_t ya = y0[oy], yb = std::min(ya + 1, h - 1);
                T fy = wy[oy];
                for (int64_t ox = 0; ox < ow; ++ox) {
                    int64_t xa = x0[ox], xb = std::min(xa + 1, w - 1);
                    T fx = wx[ox];
                    T g = og[oy * ow + ox];
                    xg[ya * w + xa] += g * (T(1) - fy) * (T(1) - fx);
                    xg[ya * w + xb] += g * (T(1) - fy) * fx;
                    xg[yb * w + xa] += g * fy * (T(1) - fx);
                    xg[yb * w + xb] += g * fy * fx;
                }
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// dropout & losses
// ---------------------------------------------------------------------------

/// Active only when the tape is in training mode and carries an rng.
template <class T>
TensorPtr<T> dropout(Tape<T>& tp, const TensorPtr<T>& x, double p) {
    if (!tp.training || tp.dropout_rng == nullptr || p <= 0.0) return x;
    int64_t n = x->size();
    auto mask = std::make_shared<std::vector<uint8_t>>(n);
    T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    auto out = make_tensor<T>(x->shape);
    for (int64_t i = 0; i < n; ++i) {
        bool keep = tp.dropout_rng->uniform() >= p;
        (*mask)[i] = keep;
        out->data[i] = keep ? x->data[i] * keep_scale : T(0);
    }
    out->requires_grad = x->requires_grad;
    tp.record("dropout", x->requires_grad, out, n, [=]() {
        x->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            if ((*mask)[i]) x->grad[i] += out->grad[i] * keep_scale;
    });
    return out;
}

/// Numerically stable mean binary cross-entropy on logits; `target` carries no
/// gradient.
template <class T>
TensorPtr<T> bce_with_logits(Tape<T>& tp, const TensorPtr<T>& z, const TensorPtr<T>& target) {
    require(z->shape == target->shape,
            "bce_with_logits: shape mismatch " + shape_str(z->shape) + " vs " + shape_str(target->shape));
    int64_t n = z->size();
    auto out = make_tensor<T>(Shape{1});
    T acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        T zv = z->data[i], t = target->data[i];
        acc += std::max(zv, T(0)) - zv * t + std::log1p(std::exp(-std::abs(zv)));
    }
    out->data[0] = acc / static_cast<T>(n);
    out->requires_grad = z->requires_grad;
    tp.record("bce_with_logits", z->requires_grad, out, z->nbytes(), [=]() {
        z->ensure_grad();
        T g = out->grad[0] / static_cast<T>(n);
        for (int64_t i = 0; i < n; ++i) {
            T zv = z->data[i];
            T s = zv >= 0 ? T(1) / (T(1) + std::exp(-zv)) : std::exp(zv) / (T(1) + std::exp(zv));
            z->grad[i] += g * (s - target->data[i]);
        }
    });
    return out;
}

}  // namespace peftsam
