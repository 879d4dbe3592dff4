#pragma once

#include "peftsam/ops.hpp"

namespace peftsam {

/// Named model parameter with role labels used by selective PEFT and the
/// parameter counter.
template <class T>
struct Param {
    std::string name;
    TensorPtr<T> t;
    bool is_bias = false;
    bool is_norm = false;
    bool is_attn = false;
    bool decoder_side = false;  // prompt encoder / mask decoder / instance head
    int block_index = -1;       // encoder block index, -1 elsewhere
    bool is_adapter = false;    // introduced by an additive PEFT method
};

template <class T>
using ParamList = std::vector<Param<T>>;

/// Truncated normal (clipped at 2 sigma), the usual ViT init.
template <class T>
void init_trunc_normal(TensorPtr<T>& t, Rng& rng, double std) {
    for (auto& v : t->data) {
        double x;
        do {
            x = rng.normal(0.0, std);
        } while (std::abs(x) > 2 * std);
        v = static_cast<T>(x);
    }
}

template <class T>
void init_normal(TensorPtr<T>& t, Rng& rng, double mean, double std) {
    for (auto& v : t->data) v = static_cast<T>(rng.normal(mean, std));
}

template <class T>
struct Linear {
    TensorPtr<T> w;  // (in, out)
    TensorPtr<T> b;  // (out) or null
    int64_t in = 0, out = 0;

    Linear() = default;
    Linear(int64_t in_, int64_t out_, bool bias, Rng& rng, double std = 0.02) : in(in_), out(out_) {
        w = make_tensor<T>(Shape{in, out});
        init_trunc_normal(w, rng, std);
        if (bias) b = make_tensor<T>(Shape{out});
    }

    TensorPtr<T> forward(Tape<T>& tp, const TensorPtr<T>& x) const {
        auto y = matmul(tp, x, w);
        if (b) y = add(tp, y, b);
        return y;
    }
};

template <class T>
struct LayerNorm {
    TensorPtr<T> g, b;  // (d)

    LayerNorm() = default;
    explicit LayerNorm(int64_t d) {
        g = make_tensor<T>(Shape{d}, T(1));
        b = make_tensor<T>(Shape{d}, T(0));
    }

    TensorPtr<T> forward(Tape<T>& tp, const TensorPtr<T>& x) const {
        auto xn = layer_norm_normalize(tp, x);
        return add(tp, mul(tp, xn, g), b);
    }
};

template <class T>
struct Conv2d {
    TensorPtr<T> w;  // (Cout, Cin, kh, kw)
    TensorPtr<T> b;  // (Cout) or null
    int64_t stride = 1, pad = 0;

    Conv2d() = default;
    Conv2d(int64_t cin, int64_t cout, int64_t k, int64_t stride_, int64_t pad_, bool bias, Rng& rng)
        : stride(stride_), pad(pad_) {
        w = make_tensor<T>(Shape{cout, cin, k, k});
        double std = std::sqrt(2.0 / static_cast<double>(cin * k * k));
        init_normal(w, rng, 0.0, std);
        if (bias) b = make_tensor<T>(Shape{cout});
    }

    TensorPtr<T> forward(Tape<T>& tp, const TensorPtr<T>& x) const { return conv2d(tp, x, w, b, stride, pad); }
};

template <class T>
struct ConvT2d {
    TensorPtr<T> w;  // (Cin, Cout, 2, 2)
    TensorPtr<T> b;

    ConvT2d() = default;
    ConvT2d(int64_t cin, int64_t cout, Rng& rng) {
        w = make_tensor<T>(Shape{cin, cout, 2, 2});
        double std = std::sqrt(2.0 / static_cast<double>(cin * 4));
        init_normal(w, rng, 0.0, std);
        b = make_tensor<T>(Shape{cout});
    }

    TensorPtr<T> forward(Tape<T>& tp, const TensorPtr<T>& x) const { return conv_transpose2d(tp, x, w, b); }
};

}  // namespace peftsam
