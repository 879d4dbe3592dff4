#pragma once

#include "peftsam/nn.hpp"
#include "peftsam/quant.hpp"

namespace peftsam {

/// Low-rank adapter: effective weight = W_frozen + alpha * A * B.
/// A is (d_in, r), B is (r, d_out); B starts at zero so the adapted layer is
/// identity-neutral at init.
template <class T>
struct LoraAdapter {
    TensorPtr<T> A, B;
    T alpha = T(1);

    LoraAdapter() = default;
    LoraAdapter(int64_t d_in, int64_t d_out, int64_t r, T alpha_, Rng& rng) : alpha(alpha_) {
        A = make_tensor<T>(Shape{d_in, r});
        init_normal(A, rng, 0.0, 0.02);
        B = make_tensor<T>(Shape{r, d_out});
        A->requires_grad = true;
        B->requires_grad = true;
    }

    int64_t rank() const { return A->shape[1]; }
};

template <class T>
TensorPtr<T> lora_delta(Tape<T>& tp, const TensorPtr<T>& x, const LoraAdapter<T>& ad) {
    return scale(tp, matmul(tp, matmul(tp, x, ad.A), ad.B), ad.alpha);
}

template <class T>
TensorPtr<T> lora_forward(Tape<T>& tp, const TensorPtr<T>& x, const Linear<T>& lin, const LoraAdapter<T>& ad) {
    return add(tp, lin.forward(tp, x), lora_delta(tp, x, ad));
}

/// Dense materialization W_frozen + alpha*A*B (pure data, no tape).
template <class T>
TensorPtr<T> merge_lora(const TensorPtr<T>& w, const LoraAdapter<T>& ad) {
    require(w->ndim() == 2 && w->shape[0] == ad.A->shape[0] && w->shape[1] == ad.B->shape[1],
            "merge_lora: shape mismatch " + shape_str(w->shape) + " vs adapter " + shape_str(ad.A->shape) +
                "x" + shape_str(ad.B->shape));
    auto merged = make_tensor<T>(w->shape);
    merged->data = w->data;
    int64_t d_in = w->shape[0], d_out = w->shape[1], r = ad.rank();
    // merged += alpha * A(d_in,r) * B(r,d_out)
    for (int64_t i = 0; i < d_in; ++i)
        for (int64_t p = 0; p < r; ++p) {
            T a = ad.alpha * ad.A->data[i * r + p];
            if (a == T(0)) continue;
            for (int64_t j = 0; j < d_out; ++j) merged->data[i * d_out + j] += a * ad.B->data[p * d_out + j];
        }
    return merged;
}

/// FacT factors: delta W = U * Sigma * V^T, with U and V shared across all
/// blocks; each (block, target) owns its own Sigma.
template <class T>
struct FactStore {
    TensorPtr<T> U, V;  // (d, r)
    T alpha = T(1);
    double dropout = 0.1;

    FactStore() = default;
    FactStore(int64_t d, int64_t r, Rng& rng) {
        U = make_tensor<T>(Shape{d, r});
        init_normal(U, rng, 0.0, 0.02);
        V = make_tensor<T>(Shape{d, r});
        init_normal(V, rng, 0.0, 0.02);
        U->requires_grad = true;
        V->requires_grad = true;
    }
};

template <class T>
TensorPtr<T> fact_delta(Tape<T>& tp, const TensorPtr<T>& x, const FactStore<T>& store, const TensorPtr<T>& sigma) {
    require(sigma != nullptr, "fact_delta: no Sigma registered for this block/target");
    auto h = matmul(tp, x, store.U);
    h = dropout(tp, h, store.dropout);
    h = matmul(tp, h, sigma);
    auto vt = permute(tp, store.V, {1, 0});
    return scale(tp, matmul(tp, h, vt), store.alpha);
}

template <class T>
TensorPtr<T> fact_forward(Tape<T>& tp, const TensorPtr<T>& x, const Linear<T>& lin, const FactStore<T>& store,
                          const TensorPtr<T>& sigma) {
    return add(tp, lin.forward(tp, x), fact_delta(tp, x, store, sigma));
}

/// Bottleneck module in parallel to the MLP; its output is scaled by alpha and
/// added to the MLP output. Up projection starts at zero.
template <class T>
struct AdaptFormerModule {
    Linear<T> down, up;
    TensorPtr<T> alpha;  // single scalar; trainable when "learned"
    bool alpha_learned = false;
    double drop = 0.0;

    AdaptFormerModule() = default;
    AdaptFormerModule(int64_t d, int64_t proj, T alpha_val, bool learned, double dropout_p, Rng& rng)
        : down(d, proj, true, rng), up(proj, d, true, rng), alpha_learned(learned), drop(dropout_p) {
        std::fill(up.w->data.begin(), up.w->data.end(), T(0));
        down.w->requires_grad = down.b->requires_grad = true;
        up.w->requires_grad = up.b->requires_grad = true;
        alpha = make_tensor<T>(Shape{1}, alpha_val);
        alpha->requires_grad = learned;
    }

    TensorPtr<T> branch(Tape<T>& tp, const TensorPtr<T>& x) const {
        auto a = relu(tp, down.forward(tp, x));
        a = dropout(tp, a, drop);
        a = up.forward(tp, a);
        return mul(tp, a, alpha);
    }
};

template <class T>
TensorPtr<T> adaptformer_forward(Tape<T>& tp, const TensorPtr<T>& x, const Linear<T>& fc1, const Linear<T>& fc2,
                                 const AdaptFormerModule<T>& mod) {
    auto mlp = fc2.forward(tp, gelu(tp, fc1.forward(tp, x)));
    return add(tp, mlp, mod.branch(tp, x));
}

/// Scale-shift pair for one instrumented layer output: y' = gamma .* y + beta.
template <class T>
struct SsfPair {
    TensorPtr<T> gamma, beta;  // (channels)

    SsfPair() = default;
    explicit SsfPair(int64_t channels) {
        gamma = make_tensor<T>(Shape{channels}, T(1));
        beta = make_tensor<T>(Shape{channels}, T(0));
        gamma->requires_grad = true;
        beta->requires_grad = true;
    }
};

template <class T>
TensorPtr<T> ssf_apply(Tape<T>& tp, const TensorPtr<T>& y, const SsfPair<T>& p) {
    return add(tp, mul(tp, y, p.gamma), p.beta);
}

/// Scale-shift on the outputs of norm1, qkv, attn_proj, norm2, mlp_fc1, mlp_fc2.
template <class T>
struct SsfBlock {
    SsfPair<T> norm1, qkv, proj, norm2, fc1, fc2;

    SsfBlock() = default;
    SsfBlock(int64_t d, int64_t mlp_hidden)
        : norm1(d), qkv(3 * d), proj(d), norm2(d), fc1(mlp_hidden), fc2(d) {}
};

/// Everything PEFT can attach to one transformer block.
template <class T>
struct BlockAdapters {
    // LoRA, scope classic (q and v thirds of the fused qkv)
    std::shared_ptr<LoraAdapter<T>> lora_q, lora_v;
    // LoRA, scope all
    std::shared_ptr<LoraAdapter<T>> lora_qkv, lora_proj, lora_fc1, lora_fc2;
    // FacT (shared store; per-block sigmas on q and v)
    std::shared_ptr<FactStore<T>> fact;
    TensorPtr<T> fact_sig_q, fact_sig_v;
    std::shared_ptr<AdaptFormerModule<T>> adaptformer;
    std::shared_ptr<SsfBlock<T>> ssf;
    // QLoRA: 4-bit frozen weights replacing the dense linear weights
    std::shared_ptr<QuantizedLinear<T>> q_qkv, q_proj, q_fc1, q_fc2;

    bool any() const {
        return lora_q || lora_v || lora_qkv || lora_proj || lora_fc1 || lora_fc2 || fact || adaptformer ||
               ssf || q_qkv;
    }
};

}  // namespace peftsam
