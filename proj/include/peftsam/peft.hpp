#pragma once

#include <optional>

#include "peftsam/vit.hpp"

namespace peftsam {

enum class PeftMethod {
    full_ft,
    freeze_encoder,
    bias_tune,
    ln_tune,
    attn_tune,
    lora,
    qlora,
    adaptformer,
    ssf,
    fact,
    late_ft,
    late_lora,
    late_qlora,
};

inline const char* method_name(PeftMethod m) {
    switch (m) {
        case PeftMethod::full_ft: return "full_ft";
        case PeftMethod::freeze_encoder: return "freeze_encoder";
        case PeftMethod::bias_tune: return "bias_tune";
        case PeftMethod::ln_tune: return "ln_tune";
        case PeftMethod::attn_tune: return "attn_tune";
        case PeftMethod::lora: return "lora";
        case PeftMethod::qlora: return "qlora";
        case PeftMethod::adaptformer: return "adaptformer";
        case PeftMethod::ssf: return "ssf";
        case PeftMethod::fact: return "fact";
        case PeftMethod::late_ft: return "late_ft";
        case PeftMethod::late_lora: return "late_lora";
        case PeftMethod::late_qlora: return "late_qlora";
    }
    fail("method_name: unknown method");
}

inline PeftMethod parse_method(const std::string& s) {
    for (int i = 0; i <= static_cast<int>(PeftMethod::late_qlora); ++i) {
        auto m = static_cast<PeftMethod>(i);
        if (s == method_name(m)) return m;
    }
    fail("unknown PEFT method '" + s + "'");
}

struct PeftConfig {
    PeftMethod method = PeftMethod::full_ft;
    std::optional<int64_t> rank;             // default 32; 16 for fact
    std::optional<double> alpha;             // default 1.0
    bool alpha_learned = false;              // adaptformer only: alpha = "learned"
    std::optional<std::string> lora_scope;   // classic | all (default classic)
    std::optional<int64_t> projection_size;  // adaptformer, default 64
    std::optional<double> dropout;           // default none (adaptformer), 0.1 (fact)
    std::optional<double> late_fraction;     // late_* only, default 0.5
    int quant_bits = 4;
    int64_t quant_block = 64;

    bool is_late() const {
        return method == PeftMethod::late_ft || method == PeftMethod::late_lora ||
               method == PeftMethod::late_qlora;
    }
    bool is_lora_family() const {
        return method == PeftMethod::lora || method == PeftMethod::qlora ||
               method == PeftMethod::late_lora || method == PeftMethod::late_qlora;
    }
    bool is_qlora() const { return method == PeftMethod::qlora || method == PeftMethod::late_qlora; }
    bool is_low_rank() const { return is_lora_family() || method == PeftMethod::fact; }

    int64_t r() const { return rank ? *rank : (method == PeftMethod::fact ? 16 : 32); }
    double alpha_value() const { return alpha ? *alpha : 1.0; }
    bool scope_all() const { return lora_scope && *lora_scope == "all"; }
    int64_t proj() const { return projection_size ? *projection_size : 64; }
    double dropout_p() const { return dropout ? *dropout : (method == PeftMethod::fact ? 0.1 : 0.0); }
    double late_frac() const { return late_fraction ? *late_fraction : 0.5; }
    /// Index of the first adapted/unfrozen block (ceil(f*L) blocks from the end).
    int64_t late_start(int64_t depth) const {
        if (!is_late()) return 0;
        int64_t k = static_cast<int64_t>(std::ceil(late_frac() * static_cast<double>(depth)));
        return depth - std::min(depth, std::max<int64_t>(1, k));
    }

    void validate() const {
        std::string m = method_name(method);
        if (rank) {
            require(is_low_rank(), "PeftConfig: rank is not a parameter of " + m);
            require(*rank > 0, "PeftConfig: rank must be positive");
        }
        if (alpha) {
            require(is_lora_family() || method == PeftMethod::adaptformer || method == PeftMethod::fact,
                    "PeftConfig: alpha is not a parameter of " + m);
            require(*alpha > 0, "PeftConfig: alpha must be positive");
        }
        if (alpha_learned)
            require(method == PeftMethod::adaptformer, "PeftConfig: learned alpha is adaptformer-only");
        if (lora_scope) {
            require(is_lora_family(), "PeftConfig: lora_scope is not a parameter of " + m);
            require(*lora_scope == "classic" || *lora_scope == "all",
                    "PeftConfig: lora_scope must be 'classic' or 'all', got '" + *lora_scope + "'");
        }
        if (projection_size) {
            require(method == PeftMethod::adaptformer,
                    "PeftConfig: projection_size is not a parameter of " + m);
            require(*projection_size > 0, "PeftConfig: projection_size must be positive");
        }
        if (dropout) {
            require(method == PeftMethod::adaptformer || method == PeftMethod::fact,
                    "PeftConfig: dropout is not a parameter of " + m);
            require(*dropout >= 0 && *dropout < 1, "PeftConfig: dropout must be in [0,1)");
        }
        if (late_fraction) {
            require(is_late(), "PeftConfig: late_fraction is not a parameter of " + m);
            require(*late_fraction > 0 && *late_fraction <= 1,
                    "PeftConfig: late_fraction must be in (0,1]");
        }
        require(quant_bits == 4, "PeftConfig: only 4-bit quantization is supported");
        require(quant_block > 0, "PeftConfig: quant_block must be positive");
    }
};

// ---------------------------------------------------------------------------
// trainability selection
// ---------------------------------------------------------------------------

/// bias_tune / ln_tune / attn_tune: exactly the role-matching encoder
/// parameters (plus all decoder-side parameters) become trainable.
template <class T>
void select_trainable(ParamList<T>& params, PeftMethod method) {
    require(method == PeftMethod::bias_tune || method == PeftMethod::ln_tune ||
                method == PeftMethod::attn_tune,
            "select_trainable: not a selective method");
    for (auto& p : params) {
        require(!p.name.empty(), "select_trainable: unlabeled parameter");
        if (p.decoder_side) {
            p.t->requires_grad = true;
            continue;
        }
        bool pick = false;
        switch (method) {
            case PeftMethod::bias_tune: pick = p.is_bias; break;
            case PeftMethod::ln_tune: pick = p.is_norm; break;
            case PeftMethod::attn_tune: pick = p.is_attn; break;
            default: break;
        }
        p.t->requires_grad = pick;
    }
}

// ---------------------------------------------------------------------------
// adapter installation
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void install_lora(Block<T>& b, const VitConfig& cfg, const PeftConfig& pc, Rng& rng) {
    int64_t d = cfg.embed_dim, r = pc.r();
    T a = static_cast<T>(pc.alpha_value());
    if (pc.scope_all()) {
        b.ad.lora_qkv = std::make_shared<LoraAdapter<T>>(d, 3 * d, r, a, rng);
        b.ad.lora_proj = std::make_shared<LoraAdapter<T>>(d, d, r, a, rng);
        b.ad.lora_fc1 = std::make_shared<LoraAdapter<T>>(d, cfg.mlp_hidden(), r, a, rng);
        b.ad.lora_fc2 = std::make_shared<LoraAdapter<T>>(cfg.mlp_hidden(), d, r, a, rng);
    } else {
        b.ad.lora_q = std::make_shared<LoraAdapter<T>>(d, d, r, a, rng);
        b.ad.lora_v = std::make_shared<LoraAdapter<T>>(d, d, r, a, rng);
    }
}

template <class T>
void quantize_block_linears(Block<T>& b, int64_t quant_block) {
    b.ad.q_qkv = std::make_shared<QuantizedLinear<T>>(QuantizedLinear<T>::quantize(b.qkv.w, quant_block));
    b.ad.q_proj = std::make_shared<QuantizedLinear<T>>(QuantizedLinear<T>::quantize(b.proj.w, quant_block));
    b.ad.q_fc1 = std::make_shared<QuantizedLinear<T>>(QuantizedLinear<T>::quantize(b.fc1.w, quant_block));
    b.ad.q_fc2 = std::make_shared<QuantizedLinear<T>>(QuantizedLinear<T>::quantize(b.fc2.w, quant_block));
}

}  // namespace detail

/// Install adapters and assign encoder-side trainability. Decoder-side
/// trainability is handled by apply_peft on the full model.
template <class T>
void apply_peft_encoder(VitEncoder<T>& enc, const PeftConfig& pc, Rng& rng) {
    pc.validate();
    for (auto& b : enc.blocks)
        require(!b.ad.any(), "apply_peft: model already has adapters installed");
    if (pc.is_low_rank())
        require(pc.r() < enc.cfg.embed_dim,
                "apply_peft: rank " + std::to_string(pc.r()) + " must be < embed dim " +
                    std::to_string(enc.cfg.embed_dim));

    ParamList<T> params;
    enc.collect_params(params);
    for (auto& p : params) p.t->requires_grad = false;

    int64_t depth = enc.cfg.depth;
    int64_t start = pc.late_start(depth);

    switch (pc.method) {
        case PeftMethod::full_ft:
            for (auto& p : params) p.t->requires_grad = true;
            break;
        case PeftMethod::freeze_encoder:
            break;
        case PeftMethod::bias_tune:
        case PeftMethod::ln_tune:
        case PeftMethod::attn_tune:
            select_trainable(params, pc.method);
            break;
        case PeftMethod::late_ft:
            for (auto& p : params)
                if (p.block_index >= static_cast<int>(start)) p.t->requires_grad = true;
            break;
        case PeftMethod::lora:
        case PeftMethod::late_lora:
            for (int64_t i = start; i < depth; ++i)
                detail::install_lora(enc.blocks[static_cast<size_t>(i)], enc.cfg, pc, rng);
            break;
        case PeftMethod::qlora:
        case PeftMethod::late_qlora:
            // quantize every block; adapters only in the (late) range
            for (auto& b : enc.blocks) detail::quantize_block_linears(b, pc.quant_block);
            for (int64_t i = start; i < depth; ++i)
                detail::install_lora(enc.blocks[static_cast<size_t>(i)], enc.cfg, pc, rng);
            break;
        case PeftMethod::adaptformer:
            for (auto& b : enc.blocks)
                b.ad.adaptformer = std::make_shared<AdaptFormerModule<T>>(
                    enc.cfg.embed_dim, pc.proj(), static_cast<T>(pc.alpha_value()), pc.alpha_learned,
                    pc.dropout_p(), rng);
            break;
        case PeftMethod::ssf:
            for (auto& b : enc.blocks)
                b.ad.ssf = std::make_shared<SsfBlock<T>>(enc.cfg.embed_dim, enc.cfg.mlp_hidden());
            break;
        case PeftMethod::fact: {
            auto store = std::make_shared<FactStore<T>>(enc.cfg.embed_dim, pc.r(), rng);
            store->alpha = static_cast<T>(pc.alpha_value());
            store->dropout = pc.dropout_p();
            enc.fact = store;
            for (auto& b : enc.blocks) {
                b.ad.fact = store;
                b.ad.fact_sig_q = make_tensor<T>(Shape{pc.r(), pc.r()});
                b.ad.fact_sig_v = make_tensor<T>(Shape{pc.r(), pc.r()});
                b.ad.fact_sig_q->requires_grad = true;
                b.ad.fact_sig_v->requires_grad = true;
            }
            break;
        }
    }
}

/// model must expose `encoder` (a VitEncoder) and collect_params.
template <class Model>
void apply_peft(Model& model, const PeftConfig& pc, Rng& rng) {
    using T = typename std::decay_t<decltype(model.encoder)>::scalar_t;
    apply_peft_encoder(model.encoder, pc, rng);
    ParamList<T> params;
    model.collect_params(params);
    for (auto& p : params)
        if (p.decoder_side) p.t->requires_grad = true;
}

// ---------------------------------------------------------------------------
// qlora export
// ---------------------------------------------------------------------------

/// Replace every quantized encoder linear with its full-precision weight from
/// `base` (same architecture), keeping the trained adapters attached. Returns
/// the list of replaced targets.
template <class T>
std::vector<std::string> export_qlora(VitEncoder<T>& enc, const VitEncoder<T>& base) {
    bool any = false;
    for (auto& b : enc.blocks)
        if (b.ad.q_qkv) any = true;
    require(any, "export_qlora: model has no quantized layers (not a qlora model)");
    require(base.blocks.size() == enc.blocks.size() && base.cfg.embed_dim == enc.cfg.embed_dim,
            "export_qlora: original weights do not match the model architecture");
    std::vector<std::string> replaced;
    for (size_t i = 0; i < enc.blocks.size(); ++i) {
        auto& b = enc.blocks[i];
        const auto& src = base.blocks[i];
        auto restore = [&](const char* tag, Linear<T>& lin, const Linear<T>& orig,
                           std::shared_ptr<QuantizedLinear<T>>& q) {
            if (!q) return;
            require(orig.w && orig.w->shape == q->shape, "export_qlora: adapter/target mismatch on " +
                                                             std::string(tag) + " in block " + std::to_string(i));
            lin.w->data = orig.w->data;
            lin.w->requires_grad = false;
            q.reset();
            replaced.push_back("enc.block" + std::to_string(i) + "." + tag + ".w");
        };
        restore("qkv", b.qkv, src.qkv, b.ad.q_qkv);
        restore("proj", b.proj, src.proj, b.ad.q_proj);
        restore("fc1", b.fc1, src.fc1, b.ad.q_fc1);
        restore("fc2", b.fc2, src.fc2, b.ad.q_fc2);
    }
    return replaced;
}

// ---------------------------------------------------------------------------
// accounting
// ---------------------------------------------------------------------------

struct ParamReport {
    int64_t trainable = 0;
    int64_t frozen = 0;
    int64_t encoder_trainable = 0;
    int64_t decoder_side = 0;   // all decoder-side params (trainable in every method)
    int64_t quantized_bytes = 0;
    std::map<std::string, int64_t> trainable_by_region;
};

template <class T>
ParamReport count_params(const VitEncoder<T>& enc, const ParamList<T>& params) {
    ParamReport r;
    for (const auto& p : params) {
        int64_t n = numel(p.t->shape);
        if (p.decoder_side) r.decoder_side += n;
        if (p.t->requires_grad) {
            r.trainable += n;
            r.trainable_by_region[p.decoder_side ? "decoder" : "encoder"] += n;
            if (!p.decoder_side) r.encoder_trainable += n;
        } else {
            r.frozen += n;
        }
    }
    for (const auto& b : enc.blocks)
        for (const auto& q : {b.ad.q_qkv, b.ad.q_proj, b.ad.q_fc1, b.ad.q_fc2})
            if (q) r.quantized_bytes += q->payload_bytes();
    return r;
}

template <class Model>
ParamReport count_params(const Model& model, const PeftConfig& = {}) {
    using T = typename std::decay_t<decltype(model.encoder)>::scalar_t;
    ParamList<T> params;
    model.collect_params(params);
    return count_params(model.encoder, params);
}

inline double param_seq_ratio(double param_count, double sequence_length) {
    require(param_count > 0 && sequence_length > 0, "param_seq_ratio: arguments must be positive");
    return param_count / sequence_length;
}

struct MemoryReport {
    int64_t param_bytes = 0;
    int64_t grad_bytes = 0;       // trainable params only
    int64_t optimizer_bytes = 0;  // two-moment optimizer: 2x trainable param bytes
    int64_t quantized_bytes = 0;
    int64_t retained_total = 0;
    int64_t encoder_retained = 0;  // patch-embed + encoder-block-* + neck regions
    std::map<std::string, int64_t> retained_by_region;
};

/// Runs one forward+backward via `program` (Tape<T>& -> scalar loss) and reads
/// the activation ledger.
template <class Model, class Program>
MemoryReport memory_report(const Model& model, Program&& program) {
    using T = typename std::decay_t<decltype(model.encoder)>::scalar_t;
    Tape<T> tp;
    auto loss = program(tp);
    auto ledger = tp.ledger_report();
    tp.backward(loss);

    MemoryReport r;
    ParamList<T> params;
    model.collect_params(params);
    for (const auto& p : params) {
        int64_t bytes = numel(p.t->shape) * static_cast<int64_t>(sizeof(T));
        r.param_bytes += bytes;
        if (p.t->requires_grad) r.grad_bytes += bytes;
    }
    r.optimizer_bytes = 2 * r.grad_bytes;
    for (const auto& b : model.encoder.blocks)
        for (const auto& q : {b.ad.q_qkv, b.ad.q_proj, b.ad.q_fc1, b.ad.q_fc2})
            if (q) r.quantized_bytes += q->payload_bytes();
    r.retained_by_region = ledger.region_bytes;
    r.retained_total = ledger.total_retained_bytes;
    for (const auto& [region, bytes] : ledger.region_bytes)
        if (region == "patch-embed" || region == "neck" || region.rfind("encoder-block-", 0) == 0)
            r.encoder_retained += bytes;
    return r;
}

}  // namespace peftsam
