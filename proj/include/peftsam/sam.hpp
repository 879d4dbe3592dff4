#pragma once

#include "peftsam/instanceseg.hpp"
#include "peftsam/peft.hpp"

namespace peftsam {

struct PromptSet {
    std::vector<std::pair<int64_t, int64_t>> positive_points;  // (row, col)
    std::vector<std::pair<int64_t, int64_t>> negative_points;
    bool has_box = false;
    int64_t box_r0 = 0, box_c0 = 0, box_r1 = 0, box_c1 = 0;

    void set_box(int64_t r0, int64_t c0, int64_t r1, int64_t c1) {
        has_box = true;
        box_r0 = r0;
        box_c0 = c0;
        box_r1 = r1;
        box_c1 = c1;
    }
    int64_t token_count() const {
        return static_cast<int64_t>(positive_points.size() + negative_points.size()) + (has_box ? 2 : 0);
    }
};

/// Sinusoidal encoding of normalized (y, x); first half encodes y, second x.
template <class T>
std::vector<T> sincos_pe(double y, double x, int64_t dim) {
    require(dim % 4 == 0, "sincos_pe: dim must be divisible by 4");
    std::vector<T> pe(static_cast<size_t>(dim));
    int64_t quarter = dim / 4;
    constexpr double two_pi = 6.283185307179586;
    for (int64_t i = 0; i < quarter; ++i) {
        double f = two_pi * static_cast<double>(int64_t(1) << (i % 16));
        pe[static_cast<size_t>(2 * i)] = static_cast<T>(std::sin(y * f));
        pe[static_cast<size_t>(2 * i + 1)] = static_cast<T>(std::cos(y * f));
        pe[static_cast<size_t>(2 * quarter + 2 * i)] = static_cast<T>(std::sin(x * f));
        pe[static_cast<size_t>(2 * quarter + 2 * i + 1)] = static_cast<T>(std::cos(x * f));
    }
    return pe;
}

/// Points and boxes -> tokens: sinusoidal position code plus a learned label
/// embedding (positive / negative / box corner A / box corner B).
template <class T>
struct PromptEncoder {
    int64_t dim = 0;
    TensorPtr<T> pos_label, neg_label, box_a_label, box_b_label;  // (1, dim)

    PromptEncoder() = default;
    PromptEncoder(int64_t dim_, Rng& rng) : dim(dim_) {
        auto mk = [&] {
            auto t = make_tensor<T>(Shape{1, dim});
            init_trunc_normal(t, rng, 0.02);
            return t;
        };
        pos_label = mk();
        neg_label = mk();
        box_a_label = mk();
        box_b_label = mk();
    }

    TensorPtr<T> encode(Tape<T>& tp, const PromptSet& ps, int64_t image_h, int64_t image_w) const {
        require(ps.token_count() > 0, "encode_prompts: empty prompt set");
        auto check = [&](int64_t r, int64_t c) {
            require(r >= 0 && r < image_h && c >= 0 && c < image_w,
                    "encode_prompts: coordinate (" + std::to_string(r) + "," + std::to_string(c) +
                        ") outside " + std::to_string(image_h) + "x" + std::to_string(image_w) + " image");
        };
        auto token = [&](int64_t r, int64_t c, const TensorPtr<T>& label) {
            check(r, c);
            auto pe = make_tensor<T>(Shape{1, dim});
            pe->data = sincos_pe<T>(static_cast<double>(r) / static_cast<double>(image_h),
                                    static_cast<double>(c) / static_cast<double>(image_w), dim);
            return add(tp, pe, label);
        };
        std::vector<TensorPtr<T>> toks;
        for (auto& [r, c] : ps.positive_points) toks.push_back(token(r, c, pos_label));
        for (auto& [r, c] : ps.negative_points) toks.push_back(token(r, c, neg_label));
        if (ps.has_box) {
            require(ps.box_r0 <= ps.box_r1 && ps.box_c0 <= ps.box_c1,
                    "encode_prompts: box corners out of order");
            toks.push_back(token(ps.box_r0, ps.box_c0, box_a_label));
            toks.push_back(token(ps.box_r1, ps.box_c1, box_b_label));
        }
        return toks.size() == 1 ? toks[0] : concat(tp, toks, 0);
    }
};

template <class T>
struct CrossAttention {
    Linear<T> wq, wk, wv, wo;
    int64_t heads = 1;

    CrossAttention() = default;
    CrossAttention(int64_t dim, int64_t heads_, Rng& rng)
        : wq(dim, dim, true, rng), wk(dim, dim, true, rng), wv(dim, dim, true, rng),
          wo(dim, dim, true, rng), heads(heads_) {}

    TensorPtr<T> forward(Tape<T>& tp, const TensorPtr<T>& qx, const TensorPtr<T>& kx) const {
        int64_t nq = qx->shape[0], nk = kx->shape[0], d = qx->shape[1], dh = d / heads;
        auto split = [&](const TensorPtr<T>& t, int64_t n) {
            return permute(tp, reshape(tp, t, Shape{n, heads, dh}), {1, 0, 2});
        };
        auto q = split(wq.forward(tp, qx), nq);
        auto k = split(wk.forward(tp, kx), nk);
        auto v = split(wv.forward(tp, kx), nk);
        q = scale(tp, q, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh))));
        auto a = softmax(tp, matmul(tp, q, permute(tp, k, {0, 2, 1})));
        auto o = reshape(tp, permute(tp, matmul(tp, a, v), {1, 0, 2}), Shape{nq, d});
        return wo.forward(tp, o);
    }
};

template <class T>
struct DecoderLayer {
    LayerNorm<T> ln_t1, ln_i1, ln_t2, ln_i2, ln_mlp;
    CrossAttention<T> t2i, i2t;
    Linear<T> fc1, fc2;

    DecoderLayer() = default;
    DecoderLayer(int64_t dim, int64_t heads, Rng& rng)
        : ln_t1(dim), ln_i1(dim), ln_t2(dim), ln_i2(dim), ln_mlp(dim),
          t2i(dim, heads, rng), i2t(dim, heads, rng),
          fc1(dim, 4 * dim, true, rng), fc2(4 * dim, dim, true, rng) {}

    void forward(Tape<T>& tp, TensorPtr<T>& toks, TensorPtr<T>& img) const {
        toks = add(tp, toks, t2i.forward(tp, ln_t1.forward(tp, toks), ln_i1.forward(tp, img)));
        img = add(tp, img, i2t.forward(tp, ln_i2.forward(tp, img), ln_t2.forward(tp, toks)));
        toks = add(tp, toks, fc2.forward(tp, gelu(tp, fc1.forward(tp, ln_mlp.forward(tp, toks)))));
    }
};

/// Two layers of bidirectional cross-attention between (output token + prompt
/// tokens) and image tokens, two 2x learned upsamplings, then a dot product
/// between the output token and the upsampled features.
template <class T>
struct MaskDecoder {
    int64_t dim = 0, heads = 1;
    TensorPtr<T> out_token;  // (1, dim)
    std::vector<DecoderLayer<T>> layers;
    ConvT2d<T> up1, up2;
    Linear<T> out_proj;

    MaskDecoder() = default;
    MaskDecoder(int64_t dim_, int64_t heads_, int64_t n_layers, Rng& rng) : dim(dim_), heads(heads_) {
        require(dim % heads == 0, "MaskDecoder: heads must divide token_dim");
        require(dim % 4 == 0, "MaskDecoder: token_dim must be divisible by 4");
        out_token = make_tensor<T>(Shape{1, dim});
        init_trunc_normal(out_token, rng, 0.02);
        for (int64_t i = 0; i < n_layers; ++i) layers.emplace_back(dim, heads, rng);
        up1 = ConvT2d<T>(dim, dim / 2, rng);
        up2 = ConvT2d<T>(dim / 2, dim / 4, rng);
        out_proj = Linear<T>(dim, dim / 4, true, rng);
    }

    /// features (dim, G, G) + prompt tokens (N, dim) -> logits (H, W).
    TensorPtr<T> forward(Tape<T>& tp, const TensorPtr<T>& features, const TensorPtr<T>& prompt_tokens,
                         int64_t image_h, int64_t image_w) const {
        require(features->ndim() == 3 && features->shape[0] == dim,
                "decode_mask: features " + shape_str(features->shape) + " do not match token_dim " +
                    std::to_string(dim));
        int64_t g = features->shape[1];
        auto img = permute(tp, reshape(tp, features, Shape{dim, g * g}), {1, 0});  // (S, dim)
        auto toks = concat<T>(tp, {out_token, prompt_tokens}, 0);
        for (const auto& layer : layers) layer.forward(tp, toks, img);
        auto f = reshape(tp, permute(tp, img, {1, 0}), Shape{dim, g, g});
        f = gelu(tp, up1.forward(tp, f));
        f = gelu(tp, up2.forward(tp, f));  // (dim/4, 4G, 4G)
        auto h = out_proj.forward(tp, slice(tp, toks, 0, 0, 1));  // (1, dim/4)
        auto flat = reshape(tp, f, Shape{dim / 4, 16 * g * g});
        auto logits = reshape(tp, matmul(tp, h, flat), Shape{1, 4 * g, 4 * g});
        logits = upsample_bilinear(tp, logits, image_h, image_w);
        return reshape(tp, logits, Shape{image_h, image_w});
    }
};

/// Four upsampling blocks (two 3x3 convolutions + one 2x transposed
/// convolution each) from the encoder output to image resolution, ending in a
/// three-channel sigmoid head (center distance, boundary distance, foreground).
template <class T>
struct InstanceHead {
    struct Stage {
        Conv2d<T> c1, c2;
        ConvT2d<T> up;
    };
    Conv2d<T> stem;
    std::vector<Stage> stages;
    Conv2d<T> out;

    InstanceHead() = default;
    InstanceHead(int64_t in_channels, int64_t grid, int64_t image_size, int64_t base, Rng& rng) {
        require(image_size == grid * 16,
                "InstanceHead: image size " + std::to_string(image_size) + " is not reachable from a " +
                    std::to_string(grid) + "-wide grid by 4 doublings");
        stem = Conv2d<T>(in_channels, base, 1, 1, 0, true, rng);
        int64_t c = base;
        for (int i = 0; i < 4; ++i) {
            int64_t next = std::max<int64_t>(8, c / 2);
            Stage s;
            s.c1 = Conv2d<T>(c, c, 3, 1, 1, true, rng);
            s.c2 = Conv2d<T>(c, c, 3, 1, 1, true, rng);
            s.up = ConvT2d<T>(c, next, rng);
            stages.push_back(std::move(s));
            c = next;
        }
        out = Conv2d<T>(c, 3, 1, 1, 0, true, rng);
    }

    /// (in_channels, G, G) -> (3, 16G, 16G), all channels through sigmoid.
    TensorPtr<T> forward(Tape<T>& tp, const TensorPtr<T>& features) const {
        auto x = stem.forward(tp, features);
        for (const auto& s : stages) {
            x = relu(tp, s.c1.forward(tp, x));
            x = relu(tp, s.c2.forward(tp, x));
            x = s.up.forward(tp, x);
        }
        return sigmoid(tp, out.forward(tp, x));
    }
};

struct SamConfig {
    VitConfig vit;
    int64_t decoder_heads = 4;
    int64_t decoder_layers = 2;
    int64_t head_base = 32;
};

/// Toy preset: small enough to train on one CPU core.
inline SamConfig toy_sam() {
    SamConfig c;
    c.vit.image_size = 128;
    c.vit.patch_size = 16;
    c.vit.embed_dim = 48;
    c.vit.depth = 8;
    c.vit.heads = 4;
    c.vit.mlp_ratio = 4;
    c.vit.neck_dim = 32;
    c.vit.in_channels = 1;
    return c;
}

template <class T>
struct SamModel {
    using scalar_t = T;

    SamConfig cfg;
    VitEncoder<T> encoder;
    PromptEncoder<T> prompts;
    MaskDecoder<T> decoder;
    InstanceHead<T> head;

    SamModel() = default;
    SamModel(const SamConfig& c, Rng& rng)
        : cfg(c),
          encoder(c.vit, rng),
          prompts(c.vit.neck_dim, rng),
          decoder(c.vit.neck_dim, c.decoder_heads, c.decoder_layers, rng),
          head(c.vit.neck_dim, c.vit.grid(), c.vit.image_size, c.head_base, rng) {}

    TensorPtr<T> encode_image(Tape<T>& tp, const TensorPtr<T>& image) const {
        return encoder.forward(tp, image);
    }

    TensorPtr<T> decode_mask(Tape<T>& tp, const TensorPtr<T>& features, const PromptSet& ps) const {
        RegionGuard<T> rg(tp, "decoder");
        auto toks = prompts.encode(tp, ps, cfg.vit.image_size, cfg.vit.image_size);
        return decoder.forward(tp, features, toks, cfg.vit.image_size, cfg.vit.image_size);
    }

    /// (3, H, W): center distance, boundary distance, foreground probability.
    TensorPtr<T> instance_forward(Tape<T>& tp, const TensorPtr<T>& features) const {
        RegionGuard<T> rg(tp, "head");
        return head.forward(tp, features);
    }

    void collect_params(ParamList<T>& out) const {
        encoder.collect_params(out);
        auto push = [&](const std::string& name, const TensorPtr<T>& t, bool bias = false) {
            if (!t) return;
            out.push_back(Param<T>{name, t, bias, false, false, true, -1, false});
        };
        push("dec.prompt.pos", prompts.pos_label);
        push("dec.prompt.neg", prompts.neg_label);
        push("dec.prompt.box_a", prompts.box_a_label);
        push("dec.prompt.box_b", prompts.box_b_label);
        push("dec.out_token", decoder.out_token);
        auto push_lin = [&](const std::string& n, const Linear<T>& l) {
            push(n + ".w", l.w);
            push(n + ".b", l.b, true);
        };
        auto push_ln = [&](const std::string& n, const LayerNorm<T>& l) {
            push(n + ".g", l.g);
            push(n + ".b", l.b);
        };
        for (size_t i = 0; i < decoder.layers.size(); ++i) {
            const auto& L = decoder.layers[i];
            std::string p = "dec.layer" + std::to_string(i) + ".";
            push_ln(p + "ln_t1", L.ln_t1);
            push_ln(p + "ln_i1", L.ln_i1);
            push_ln(p + "ln_t2", L.ln_t2);
            push_ln(p + "ln_i2", L.ln_i2);
            push_ln(p + "ln_mlp", L.ln_mlp);
            for (auto [tag, ca] : {std::pair<const char*, const CrossAttention<T>*>{"t2i", &L.t2i},
                                   {"i2t", &L.i2t}}) {
                push_lin(p + tag + ".wq", ca->wq);
                push_lin(p + tag + ".wk", ca->wk);
                push_lin(p + tag + ".wv", ca->wv);
                push_lin(p + tag + ".wo", ca->wo);
            }
            push_lin(p + "fc1", L.fc1);
            push_lin(p + "fc2", L.fc2);
        }
        push("dec.up1.w", decoder.up1.w);
        push("dec.up1.b", decoder.up1.b, true);
        push("dec.up2.w", decoder.up2.w);
        push("dec.up2.b", decoder.up2.b, true);
        push_lin("dec.out_proj", decoder.out_proj);
        auto push_conv = [&](const std::string& n, const Conv2d<T>& cv) {
            push(n + ".w", cv.w);
            push(n + ".b", cv.b, true);
        };
        push_conv("head.stem", head.stem);
        for (size_t i = 0; i < head.stages.size(); ++i) {
            std::string p = "head.stage" + std::to_string(i) + ".";
            push_conv(p + "c1", head.stages[i].c1);
            push_conv(p + "c2", head.stages[i].c2);
            push(p + "up.w", head.stages[i].up.w);
            push(p + "up.b", head.stages[i].up.b, true);
        }
        push_conv("head.out", head.out);
    }
};

/// Mean-reduced soft dice loss on mask logits vs a {0,1} target.
template <class T>
TensorPtr<T> dice_loss(Tape<T>& tp, const TensorPtr<T>& logits, const TensorPtr<T>& target) {
    auto p = sigmoid(tp, logits);
    auto num = scale(tp, sum_all(tp, mul(tp, p, target)), T(2));
    auto den = add_const(tp, add(tp, sum_all(tp, p), sum_all(tp, target)), T(1e-6));
    return add_const(tp, scale(tp, div(tp, num, den), T(-1)), T(1));
}

}  // namespace peftsam
