#pragma once

#include "peftsam/adapters.hpp"

namespace peftsam {

struct VitConfig {
    int64_t image_size = 64;
    int64_t patch_size = 8;
    int64_t embed_dim = 64;   // d
    int64_t depth = 4;        // L
    int64_t heads = 4;
    int64_t mlp_ratio = 4;
    int64_t neck_dim = 32;
    int64_t in_channels = 1;

    void validate() const {
        require(image_size > 0 && patch_size > 0 && image_size % patch_size == 0,
                "VitConfig: image_size must be a multiple of patch_size");
        require(embed_dim % heads == 0, "VitConfig: embed_dim must be divisible by heads");
        require(depth >= 1, "VitConfig: depth must be >= 1");
    }
    int64_t grid() const { return image_size / patch_size; }
    int64_t seq_len() const { return grid() * grid(); }
    int64_t mlp_hidden() const { return mlp_ratio * embed_dim; }
};

/// SAM's ViT-B shape (used for parameter counting only).
inline VitConfig vit_b_shape() {
    VitConfig c;
    c.image_size = 1024;
    c.patch_size = 16;
    c.embed_dim = 768;
    c.depth = 12;
    c.heads = 12;
    c.mlp_ratio = 4;
    c.neck_dim = 256;
    c.in_channels = 3;
    return c;
}

/// Pre-norm transformer block with fused-QKV attention, plus whatever PEFT
/// attachments apply_peft installed.
template <class T>
struct Block {
    LayerNorm<T> norm1, norm2;
    Linear<T> qkv, proj, fc1, fc2;
    BlockAdapters<T> ad;

    Block() = default;
    Block(const VitConfig& cfg, Rng& rng)
        : norm1(cfg.embed_dim),
          norm2(cfg.embed_dim),
          qkv(cfg.embed_dim, 3 * cfg.embed_dim, true, rng),
          proj(cfg.embed_dim, cfg.embed_dim, true, rng),
          fc1(cfg.embed_dim, cfg.mlp_hidden(), true, rng),
          fc2(cfg.mlp_hidden(), cfg.embed_dim, true, rng) {}

    static TensorPtr<T> lin_fwd(Tape<T>& tp, const Linear<T>& lin,
                                const std::shared_ptr<QuantizedLinear<T>>& q, const TensorPtr<T>& x) {
        if (q) {
            auto y = matmul(tp, x, q->dequantize());
            if (lin.b) y = add(tp, y, lin.b);
            return y;
        }
        return lin.forward(tp, x);
    }

    TensorPtr<T> forward(Tape<T>& tp, const TensorPtr<T>& x, int64_t heads) const {
        int64_t s = x->shape[0], d = x->shape[1];
        int64_t dh = d / heads;

        auto xn = norm1.forward(tp, x);
        if (ad.ssf) xn = ssf_apply(tp, xn, ad.ssf->norm1);
        auto h = lin_fwd(tp, qkv, ad.q_qkv, xn);
        if (ad.lora_qkv) h = add(tp, h, lora_delta(tp, xn, *ad.lora_qkv));
        if (ad.lora_q || ad.lora_v || ad.fact_sig_q || ad.fact_sig_v) {
            auto zero = make_tensor<T>(Shape{s, d});
            TensorPtr<T> dq = zero, dv = zero;
            if (ad.lora_q) dq = lora_delta(tp, xn, *ad.lora_q);
            if (ad.lora_v) dv = lora_delta(tp, xn, *ad.lora_v);
            if (ad.fact_sig_q) dq = fact_delta(tp, xn, *ad.fact, ad.fact_sig_q);
            if (ad.fact_sig_v) dv = fact_delta(tp, xn, *ad.fact, ad.fact_sig_v);
            h = add(tp, h, concat<T>(tp, {dq, zero, dv}, 1));
        }
        if (ad.ssf) h = ssf_apply(tp, h, ad.ssf->qkv);

        auto split_heads = [&](const TensorPtr<T>& t) {
            return permute(tp, reshape(tp, t, Shape{s, heads, dh}), {1, 0, 2});  // (H, S, Dh)
        };
        auto q = split_heads(slice(tp, h, 1, 0, d));
        auto k = split_heads(slice(tp, h, 1, d, d));
        auto v = split_heads(slice(tp, h, 1, 2 * d, d));
        q = scale(tp, q, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
        auto attn = softmax(tp, matmul(tp, q, permute(tp, k, {0, 2, 1})));
        auto av = matmul(tp, attn, v);                                      // (H, S, Dh)
        av = reshape(tp, permute(tp, av, {1, 0, 2}), Shape{s, d});          // (S, d)
        auto o = lin_fwd(tp, proj, ad.q_proj, av);
        if (ad.lora_proj) o = add(tp, o, lora_delta(tp, av, *ad.lora_proj));
        if (ad.ssf) o = ssf_apply(tp, o, ad.ssf->proj);
        auto x1 = add(tp, x, o);

        auto x1n = norm2.forward(tp, x1);
        if (ad.ssf) x1n = ssf_apply(tp, x1n, ad.ssf->norm2);
        auto m = lin_fwd(tp, fc1, ad.q_fc1, x1n);
        if (ad.lora_fc1) m = add(tp, m, lora_delta(tp, x1n, *ad.lora_fc1));
        if (ad.ssf) m = ssf_apply(tp, m, ad.ssf->fc1);
        m = gelu(tp, m);
        auto m2 = lin_fwd(tp, fc2, ad.q_fc2, m);
        if (ad.lora_fc2) m2 = add(tp, m2, lora_delta(tp, m, *ad.lora_fc2));
        if (ad.ssf) m2 = ssf_apply(tp, m2, ad.ssf->fc2);
        if (ad.adaptformer) m2 = add(tp, m2, ad.adaptformer->branch(tp, x1n));
        return add(tp, x1, m2);
    }
};

template <class T>
struct VitEncoder {
    using scalar_t = T;

    VitConfig cfg;
    Conv2d<T> patch;
    TensorPtr<T> pos;  // (S, d)
    std::vector<Block<T>> blocks;
    Conv2d<T> neck1, neck2;
    LayerNorm<T> neck_ln1, neck_ln2;
    std::shared_ptr<FactStore<T>> fact;  // shared across blocks when FacT is applied

    VitEncoder() = default;
    VitEncoder(const VitConfig& c, Rng& rng) : cfg(c) {
        cfg.validate();
        patch = Conv2d<T>(cfg.in_channels, cfg.embed_dim, cfg.patch_size, cfg.patch_size, 0, true, rng);
        pos = make_tensor<T>(Shape{cfg.seq_len(), cfg.embed_dim});
        init_trunc_normal(pos, rng, 0.02);
        for (int64_t i = 0; i < cfg.depth; ++i) blocks.emplace_back(cfg, rng);
        neck1 = Conv2d<T>(cfg.embed_dim, cfg.neck_dim, 1, 1, 0, false, rng);
        neck2 = Conv2d<T>(cfg.neck_dim, cfg.neck_dim, 3, 1, 1, false, rng);
        neck_ln1 = LayerNorm<T>(cfg.neck_dim);
        neck_ln2 = LayerNorm<T>(cfg.neck_dim);
    }

    /// image (C,H,W) -> tokens (S,d) with positional term added.
    TensorPtr<T> patch_embed(Tape<T>& tp, const TensorPtr<T>& image) const {
        require(image->ndim() == 3 && image->shape[0] == cfg.in_channels && image->shape[1] == cfg.image_size &&
                    image->shape[2] == cfg.image_size,
                "patch_embed: image shape " + shape_str(image->shape) + " does not match config");
        RegionGuard<T> rg(tp, "patch-embed");
        auto f = patch.forward(tp, image);  // (d, G, G)
        int64_t g = cfg.grid();
        auto tok = permute(tp, reshape(tp, f, Shape{cfg.embed_dim, g * g}), {1, 0});  // (S, d)
        return add(tp, tok, pos);
    }

    /// Channel-wise layer norm on a (C,G,G) feature map.
    TensorPtr<T> channel_ln(Tape<T>& tp, const TensorPtr<T>& f, const LayerNorm<T>& ln) const {
        int64_t c = f->shape[0], g1 = f->shape[1], g2 = f->shape[2];
        auto rows = permute(tp, reshape(tp, f, Shape{c, g1 * g2}), {1, 0});
        rows = ln.forward(tp, rows);
        return reshape(tp, permute(tp, rows, {1, 0}), Shape{c, g1, g2});
    }

    /// image -> (neck_dim, G, G) feature map.
    TensorPtr<T> forward(Tape<T>& tp, const TensorPtr<T>& image) const {
        auto x = patch_embed(tp, image);
        for (size_t i = 0; i < blocks.size(); ++i) {
            RegionGuard<T> rg(tp, "encoder-block-" + std::to_string(i));
            x = blocks[i].forward(tp, x, cfg.heads);
            for (T v : x->data)
                if (!std::isfinite(v)) fail("encode_image: NaN detected in encoder-block-" + std::to_string(i));
        }
        RegionGuard<T> rg(tp, "neck");
        int64_t g = cfg.grid();
        auto f = reshape(tp, permute(tp, x, {1, 0}), Shape{cfg.embed_dim, g, g});
        f = neck1.forward(tp, f);
        f = channel_ln(tp, f, neck_ln1);
        f = neck2.forward(tp, f);
        f = channel_ln(tp, f, neck_ln2);
        return f;
    }

    void collect_params(ParamList<T>& out) const {
        auto push = [&](const std::string& name, const TensorPtr<T>& t, bool bias, bool norm, bool attn,
                        int blk, bool adapter = false) {
            if (!t) return;
            out.push_back(Param<T>{name, t, bias, norm, attn, false, blk, adapter});
        };
        push("enc.patch.w", patch.w, false, false, false, -1);
        push("enc.patch.b", patch.b, true, false, false, -1);
        push("enc.pos", pos, false, false, false, -1);
        if (fact) {
            push("enc.fact.U", fact->U, false, false, false, -1, true);
            push("enc.fact.V", fact->V, false, false, false, -1, true);
        }
        for (size_t i = 0; i < blocks.size(); ++i) {
            const auto& b = blocks[i];
            int bi = static_cast<int>(i);
            std::string p = "enc.block" + std::to_string(i) + ".";
            push(p + "norm1.g", b.norm1.g, false, true, false, bi);
            push(p + "norm1.b", b.norm1.b, false, true, false, bi);
            if (!b.ad.q_qkv) push(p + "qkv.w", b.qkv.w, false, false, true, bi);
            push(p + "qkv.b", b.qkv.b, true, false, true, bi);
            if (!b.ad.q_proj) push(p + "proj.w", b.proj.w, false, false, true, bi);
            push(p + "proj.b", b.proj.b, true, false, true, bi);
            push(p + "norm2.g", b.norm2.g, false, true, false, bi);
            push(p + "norm2.b", b.norm2.b, false, true, false, bi);
            if (!b.ad.q_fc1) push(p + "fc1.w", b.fc1.w, false, false, false, bi);
            push(p + "fc1.b", b.fc1.b, true, false, false, bi);
            if (!b.ad.q_fc2) push(p + "fc2.w", b.fc2.w, false, false, false, bi);
            push(p + "fc2.b", b.fc2.b, true, false, false, bi);
            auto push_lora = [&](const char* tag, const std::shared_ptr<LoraAdapter<T>>& la) {
                if (!la) return;
                push(p + "lora_" + tag + ".A", la->A, false, false, false, bi, true);
                push(p + "lora_" + tag + ".B", la->B, false, false, false, bi, true);
            };
            push_lora("q", b.ad.lora_q);
            push_lora("v", b.ad.lora_v);
            push_lora("qkv", b.ad.lora_qkv);
            push_lora("proj", b.ad.lora_proj);
            push_lora("fc1", b.ad.lora_fc1);
            push_lora("fc2", b.ad.lora_fc2);
            push(p + "fact.sig_q", b.ad.fact_sig_q, false, false, false, bi, true);
            push(p + "fact.sig_v", b.ad.fact_sig_v, false, false, false, bi, true);
            if (b.ad.adaptformer) {
                push(p + "adaptformer.down.w", b.ad.adaptformer->down.w, false, false, false, bi, true);
                push(p + "adaptformer.down.b", b.ad.adaptformer->down.b, false, false, false, bi, true);
                push(p + "adaptformer.up.w", b.ad.adaptformer->up.w, false, false, false, bi, true);
                push(p + "adaptformer.up.b", b.ad.adaptformer->up.b, false, false, false, bi, true);
                push(p + "adaptformer.alpha", b.ad.adaptformer->alpha, false, false, false, bi, true);
            }
            if (b.ad.ssf) {
                auto push_ssf = [&](const char* tag, const SsfPair<T>& sp) {
                    push(p + "ssf." + tag + ".g", sp.gamma, false, false, false, bi, true);
                    push(p + "ssf." + tag + ".b", sp.beta, false, false, false, bi, true);
                };
                push_ssf("norm1", b.ad.ssf->norm1);
                push_ssf("qkv", b.ad.ssf->qkv);
                push_ssf("proj", b.ad.ssf->proj);
                push_ssf("norm2", b.ad.ssf->norm2);
                push_ssf("fc1", b.ad.ssf->fc1);
                push_ssf("fc2", b.ad.ssf->fc2);
            }
        }
        push("enc.neck1.w", neck1.w, false, false, false, -1);
        push("enc.neck_ln1.g", neck_ln1.g, false, true, false, -1);
        push("enc.neck_ln1.b", neck_ln1.b, false, true, false, -1);
        push("enc.neck2.w", neck2.w, false, false, false, -1);
        push("enc.neck_ln2.g", neck_ln2.g, false, true, false, -1);
        push("enc.neck_ln2.b", neck_ln2.b, false, true, false, -1);
    }
};

}  // namespace peftsam
