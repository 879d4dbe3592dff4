#include <catch2/catch_amalgamated.hpp>

#include "peftsam/peft.hpp"

using namespace peftsam;

namespace {

VitConfig toy_cfg() {
    VitConfig c;
    c.image_size = 32;
    c.patch_size = 8;
    c.embed_dim = 32;
    c.depth = 4;
    c.heads = 4;
    c.neck_dim = 16;
    c.in_channels = 1;
    return c;
}

struct EncModel {
    VitEncoder<float> encoder;
    explicit EncModel(const VitConfig& c, uint64_t seed) {
        Rng rng(seed);
        encoder = VitEncoder<float>(c, rng);
    }
    void collect_params(ParamList<float>& out) const { encoder.collect_params(out); }
};

int64_t encoder_trainable(const VitConfig& cfg, const PeftConfig& pc, uint64_t seed = 1) {
    EncModel m(cfg, seed);
    Rng rng(seed + 77);
    apply_peft(m, pc, rng);
    return count_params(m).encoder_trainable;
}

TensorPtr<float> toy_image(const VitConfig& c, uint64_t seed) {
    Rng rng(seed);
    auto img = make_tensor<float>(Shape{c.in_channels, c.image_size, c.image_size});
    for (auto& v : img->data) v = static_cast<float>(rng.uniform());
    return img;
}

std::vector<float> run_forward(const VitEncoder<float>& enc, const TensorPtr<float>& img) {
    Tape<float> tp;
    return enc.forward(tp, img)->data;
}

// numerical rank via row-space Gram-Schmidt
int64_t numerical_rank(const std::vector<double>& m, int64_t rows, int64_t cols, double tol = 1e-6) {
    std::vector<std::vector<double>> basis;
    for (int64_t i = 0; i < rows; ++i) {
        std::vector<double> v(m.begin() + i * cols, m.begin() + (i + 1) * cols);
        for (const auto& b : basis) {
            double dot = 0;
            for (int64_t j = 0; j < cols; ++j) dot += v[j] * b[j];
            for (int64_t j = 0; j < cols; ++j) v[j] -= dot * b[j];
        }
        double nrm = 0;
        for (double x : v) nrm += x * x;
        nrm = std::sqrt(nrm);
        if (nrm > tol) {
            for (auto& x : v) x /= nrm;
            basis.push_back(std::move(v));
        }
    }
    return static_cast<int64_t>(basis.size());
}

}  // namespace

TEST_CASE("encoder trainable counts on the ViT-B shape preset") {
    auto cfg = vit_b_shape();
    PeftConfig pc;

    pc.method = PeftMethod::full_ft;
    REQUIRE(encoder_trainable(cfg, pc) == 89'578'240);

    pc.method = PeftMethod::freeze_encoder;
    REQUIRE(encoder_trainable(cfg, pc) == 0);

    pc.method = PeftMethod::late_ft;
    pc.late_fraction = 0.5;
    REQUIRE(encoder_trainable(cfg, pc) == 42'527'232);  // 6 blocks x 7,087,872
    pc.late_fraction.reset();

    pc.method = PeftMethod::attn_tune;
    REQUIRE(encoder_trainable(cfg, pc) == 28'348'416);

    pc.method = PeftMethod::lora;  // classic, r=32
    REQUIRE(encoder_trainable(cfg, pc) == 1'179'648);    // 2*r*(d+d)*L

    pc.method = PeftMethod::late_lora;
    pc.lora_scope = "all";
    pc.late_fraction = 0.5;
    REQUIRE(encoder_trainable(cfg, pc) == 2'359'296);    // 393,216 per block x 6
    pc.lora_scope.reset();
    pc.late_fraction.reset();

    pc.method = PeftMethod::ssf;
    REQUIRE(encoder_trainable(cfg, pc) == 202'752);      // 22d per block x 12

    pc.method = PeftMethod::adaptformer;  // p=64, fixed alpha
    REQUIRE(encoder_trainable(cfg, pc) == 1'189'632);

    pc.method = PeftMethod::ln_tune;
    REQUIRE(encoder_trainable(cfg, pc) == 37'888);       // block LNs + neck LNs

    pc.method = PeftMethod::bias_tune;
    REQUIRE(encoder_trainable(cfg, pc) == 83'712);       // linear + patch biases

    pc.method = PeftMethod::fact;  // r=16, sigmas on q and v
    REQUIRE(encoder_trainable(cfg, pc) == 30'720);       // 2*768*16 + 12*2*16*16
}

TEST_CASE("count ordering across methods on the ViT-B shape preset") {
    auto cfg = vit_b_shape();
    auto n = [&](PeftMethod m, const char* scope = nullptr) {
        PeftConfig pc;
        pc.method = m;
        if (scope) pc.lora_scope = scope;
        return encoder_trainable(cfg, pc);
    };
    int64_t full = n(PeftMethod::full_ft), late = n(PeftMethod::late_ft), attn = n(PeftMethod::attn_tune);
    int64_t llora = n(PeftMethod::late_lora, "all"), lora = n(PeftMethod::lora);
    int64_t af = n(PeftMethod::adaptformer), ssf = n(PeftMethod::ssf);
    int64_t bias = n(PeftMethod::bias_tune), ln = n(PeftMethod::ln_tune), fz = n(PeftMethod::freeze_encoder);
    REQUIRE(full > late);
    REQUIRE(late > attn);
    REQUIRE(attn > llora);
    REQUIRE(llora > lora);
    REQUIRE(llora > af);
    REQUIRE(lora > ssf);
    REQUIRE(af > ssf);
    REQUIRE(ssf > bias);
    REQUIRE(bias > ln);
    REQUIRE(ln > fz);
}

TEST_CASE("trainable + frozen equals total and is method-independent") {
    auto cfg = toy_cfg();
    std::optional<int64_t> total;
    for (auto m : {PeftMethod::full_ft, PeftMethod::freeze_encoder, PeftMethod::bias_tune,
                   PeftMethod::attn_tune, PeftMethod::ln_tune, PeftMethod::late_ft}) {
        PeftConfig pc;
        pc.method = m;
        EncModel mm(cfg, 3);
        Rng rng(9);
        apply_peft(mm, pc, rng);
        auto rep = count_params(mm);
        if (!total) total = rep.trainable + rep.frozen;
        REQUIRE(rep.trainable + rep.frozen == *total);
    }
}

TEST_CASE("late placement picks ceil(fraction * L) blocks from the end") {
    PeftConfig pc;
    pc.method = PeftMethod::late_lora;
    pc.late_fraction = 0.08;
    REQUIRE(pc.late_start(12) == 11);  // exactly the last block
    pc.late_fraction = 0.25;
    REQUIRE(pc.late_start(12) == 9);
    pc.late_fraction = 0.5;
    REQUIRE(pc.late_start(12) == 6);
    pc.late_fraction = 1.0;
    REQUIRE(pc.late_start(12) == 0);

    pc.rank = 8;
    auto cfg = toy_cfg();
    EncModel m(cfg, 4);
    Rng rng(5);
    apply_peft(m, pc, rng);  // fraction 1.0: all 4 blocks adapted
    for (auto& b : m.encoder.blocks) REQUIRE(b.ad.lora_q != nullptr);
}

TEST_CASE("trainable count is non-decreasing in late_fraction") {
    auto cfg = toy_cfg();
    int64_t prev = -1;
    for (double f : {0.1, 0.25, 0.5, 0.75, 1.0}) {
        PeftConfig pc;
        pc.method = PeftMethod::late_ft;
        pc.late_fraction = f;
        int64_t n = encoder_trainable(cfg, pc);
        REQUIRE(n >= prev);
        prev = n;
    }
}

TEST_CASE("config validation rejects method/parameter mismatches") {
    auto check_throws = [](PeftConfig pc) {
        EncModel m(toy_cfg(), 1);
        Rng rng(1);
        REQUIRE_THROWS(apply_peft(m, pc, rng));
    };
    PeftConfig pc;
    pc.method = PeftMethod::lora;
    pc.projection_size = 64;
    check_throws(pc);

    pc = {};
    pc.method = PeftMethod::lora;
    pc.late_fraction = 0.5;
    check_throws(pc);

    pc = {};
    pc.method = PeftMethod::full_ft;
    pc.rank = 8;
    check_throws(pc);

    pc = {};
    pc.method = PeftMethod::bias_tune;
    pc.lora_scope = "classic";
    check_throws(pc);

    pc = {};
    pc.method = PeftMethod::lora;
    pc.lora_scope = "everything";
    check_throws(pc);

    pc = {};
    pc.method = PeftMethod::lora;
    pc.rank = 32;  // r must be < d = 32
    check_throws(pc);

    pc = {};
    pc.method = PeftMethod::lora;
    pc.alpha_learned = true;  // adaptformer-only
    check_throws(pc);
}

TEST_CASE("double adapter application is rejected") {
    EncModel m(toy_cfg(), 2);
    PeftConfig pc;
    pc.method = PeftMethod::ssf;
    Rng rng(2);
    apply_peft(m, pc, rng);
    REQUIRE_THROWS_WITH(apply_peft(m, pc, rng), Catch::Matchers::ContainsSubstring("already"));
}

TEST_CASE("init-neutrality: adapted forward equals base forward") {
    auto cfg = toy_cfg();
    auto img = toy_image(cfg, 10);
    Rng build(42);
    VitEncoder<float> enc(cfg, build);
    auto base = run_forward(enc, img);

    for (auto m : {PeftMethod::lora, PeftMethod::adaptformer, PeftMethod::fact, PeftMethod::ssf}) {
        PeftConfig pc;
        pc.method = m;
        if (m == PeftMethod::lora || m == PeftMethod::fact) pc.rank = 8;
        Rng rng(7);
        apply_peft_encoder(enc, pc, rng);
        auto adapted = run_forward(enc, img);
        INFO(method_name(m));
        REQUIRE(adapted.size() == base.size());
        for (size_t i = 0; i < base.size(); ++i) REQUIRE(adapted[i] == base[i]);
        for (auto& b : enc.blocks) b.ad = BlockAdapters<float>{};
        enc.fact.reset();
    }
}

TEST_CASE("lora_forward matches dense materialization") {
    Rng rng(3);
    LoraAdapter<float> ad(12, 20, 4, 1.f, rng);
    for (auto& v : ad.B->data) v = static_cast<float>(rng.normal(0, 0.1));
    auto w = make_tensor<float>(Shape{12, 20});
    init_normal(w, rng, 0.0, 0.1);
    Linear<float> lin;
    lin.w = w;
    auto x = make_tensor<float>(Shape{5, 12});
    init_normal(x, rng, 0.0, 1.0);

    Tape<float> tp;
    auto y = lora_forward(tp, x, lin, ad);
    auto merged = merge_lora(w, ad);
    auto yd = matmul(tp, x, merged);
    for (int64_t i = 0; i < y->size(); ++i) REQUIRE(std::abs(y->data[i] - yd->data[i]) < 1e-5f);

    // alpha = 0 kills the delta
    ad.alpha = 0.f;
    Tape<float> tp2;
    auto y0 = lora_forward(tp2, x, lin, ad);
    auto yb = matmul(tp2, x, w);
    for (int64_t i = 0; i < y0->size(); ++i) REQUIRE(y0->data[i] == yb->data[i]);
}

TEST_CASE("merged delta has numerical rank <= r") {
    Rng rng(8);
    LoraAdapter<float> ad(16, 16, 4, 1.f, rng);
    for (auto& v : ad.B->data) v = static_cast<float>(rng.normal(0, 0.5));
    auto w = make_tensor<float>(Shape{16, 16});
    init_normal(w, rng, 0.0, 0.1);
    auto merged = merge_lora(w, ad);
    std::vector<double> delta(16 * 16);
    for (size_t i = 0; i < delta.size(); ++i)
        delta[i] = static_cast<double>(merged->data[i]) - static_cast<double>(w->data[i]);
    REQUIRE(numerical_rank(delta, 16, 16, 1e-4) <= 4);
}

TEST_CASE("merge_lora rejects shape mismatch") {
    Rng rng(1);
    LoraAdapter<float> ad(8, 8, 2, 1.f, rng);
    auto w = make_tensor<float>(Shape{8, 9});
    REQUIRE_THROWS(merge_lora(w, ad));
}

TEST_CASE("fact sharing: updating U changes the delta in every block") {
    Rng rng(5);
    FactStore<float> store(16, 4, rng);
    auto sig0 = make_tensor<float>(Shape{4, 4});
    auto sig1 = make_tensor<float>(Shape{4, 4});
    init_normal(sig0, rng, 0.0, 0.5);
    init_normal(sig1, rng, 0.0, 0.5);
    auto x = make_tensor<float>(Shape{3, 16});
    init_normal(x, rng, 0.0, 1.0);

    auto run = [&](const TensorPtr<float>& sig) {
        Tape<float> tp;
        return fact_delta(tp, x, store, sig)->data;
    };
    auto d0 = run(sig0), d1 = run(sig1);
    store.U->data[0] += 1.f;
    auto d0b = run(sig0), d1b = run(sig1);
    REQUIRE(d0 != d0b);
    REQUIRE(d1 != d1b);

    // dense-materialization oracle: delta == x * (U sig V^T) * alpha
    Tape<float> tp;
    auto us = matmul(tp, store.U, sig0);
    auto usvt = matmul(tp, us, permute(tp, store.V, {1, 0}));
    auto dense = matmul(tp, x, usvt);
    auto dd = run(sig0);
    for (int64_t i = 0; i < static_cast<int64_t>(dd.size()); ++i)
        REQUIRE(std::abs(dd[static_cast<size_t>(i)] - dense->data[i]) < 1e-5f);

    REQUIRE_THROWS_WITH(run(nullptr), Catch::Matchers::ContainsSubstring("Sigma"));
}

TEST_CASE("selective methods pick exactly the role-matching encoder params") {
    auto cfg = toy_cfg();
    EncModel m(cfg, 6);
    Rng rng(6);
    PeftConfig pc;
    pc.method = PeftMethod::ln_tune;
    apply_peft(m, pc, rng);
    ParamList<float> ps;
    m.collect_params(ps);
    for (auto& p : ps)
        if (!p.decoder_side) REQUIRE(p.t->requires_grad == p.is_norm);

    ParamList<float> bad;
    bad.push_back(Param<float>{"", make_tensor<float>(Shape{2}), true, false, false, false, -1, false});
    REQUIRE_THROWS_WITH(select_trainable(bad, PeftMethod::bias_tune),
                        Catch::Matchers::ContainsSubstring("unlabeled"));
}

TEST_CASE("qlora quantizes all encoder linears and keeps adapters trainable") {
    auto cfg = toy_cfg();
    auto img = toy_image(cfg, 20);
    Rng b1(123), b2(123);
    VitEncoder<float> fp(cfg, b1), q(cfg, b2);
    auto base = run_forward(fp, img);

    PeftConfig pc;
    pc.method = PeftMethod::qlora;
    pc.rank = 8;
    Rng rng(9);
    apply_peft_encoder(q, pc, rng);
    for (auto& b : q.blocks) {
        REQUIRE(b.ad.q_qkv != nullptr);
        REQUIRE(b.ad.q_proj != nullptr);
        REQUIRE(b.ad.q_fc1 != nullptr);
        REQUIRE(b.ad.q_fc2 != nullptr);
        REQUIRE(b.ad.lora_q != nullptr);
        REQUIRE(b.ad.lora_q->A->requires_grad);
        REQUIRE(b.ad.q_qkv->dequantize()->requires_grad == false);
    }
    // quantized weights are not in the parameter list
    ParamList<float> ps;
    q.collect_params(ps);
    for (auto& p : ps) REQUIRE(p.name.find("qkv.w") == std::string::npos);

    // forward within 5% relative of the full-precision forward
    auto qy = run_forward(q, img);
    double num = 0, den = 0;
    for (size_t i = 0; i < base.size(); ++i) {
        num += (qy[i] - base[i]) * (qy[i] - base[i]);
        den += base[i] * base[i];
    }
    REQUIRE(std::sqrt(num / den) < 0.05);

    // backward reaches adapters but leaves packed payloads untouched
    auto payload0 = q.blocks[0].ad.q_qkv->packed;
    Tape<float> tp;
    auto loss = mean_all(tp, q.forward(tp, img));
    tp.backward(loss);
    REQUIRE(q.blocks[0].ad.lora_q->A->grad.size() > 0);
    REQUIRE(q.blocks[0].qkv.w->grad.empty());
    REQUIRE(q.blocks[0].ad.q_qkv->packed == payload0);
}

TEST_CASE("late_qlora quantizes all blocks but adapts only the late range") {
    auto cfg = toy_cfg();  // depth 4
    EncModel m(cfg, 11);
    PeftConfig pc;
    pc.method = PeftMethod::late_qlora;
    pc.rank = 8;
    pc.late_fraction = 0.5;
    Rng rng(11);
    apply_peft(m, pc, rng);
    for (size_t i = 0; i < 4; ++i) {
        REQUIRE(m.encoder.blocks[i].ad.q_qkv != nullptr);
        REQUIRE((m.encoder.blocks[i].ad.lora_q != nullptr) == (i >= 2));
    }
}

TEST_CASE("export_qlora restores full precision and keeps adapters") {
    auto cfg = toy_cfg();
    auto img = toy_image(cfg, 30);
    Rng b1(77), b2(77);
    VitEncoder<float> model(cfg, b1), base(cfg, b2);
    auto base_out = run_forward(base, img);

    PeftConfig pc;
    pc.method = PeftMethod::qlora;
    pc.rank = 8;
    pc.lora_scope = "all";
    Rng rng(13);
    apply_peft_encoder(model, pc, rng);

    auto replaced = export_qlora(model, base);
    REQUIRE(replaced.size() == 4u * 4u);  // 4 blocks x 4 linears
    for (auto& b : model.blocks) REQUIRE(b.ad.q_qkv == nullptr);

    // untrained adapters: forward == original base forward bit-exact
    auto out = run_forward(model, img);
    for (size_t i = 0; i < out.size(); ++i) REQUIRE(out[i] == base_out[i]);

    // merge after export == merge on the full-precision base directly
    auto& ad = *model.blocks[0].ad.lora_qkv;
    Rng nz(14);
    for (auto& v : ad.B->data) v = static_cast<float>(nz.normal(0, 0.1));
    auto m1 = merge_lora(model.blocks[0].qkv.w, ad);
    auto m2 = merge_lora(base.blocks[0].qkv.w, ad);
    for (int64_t i = 0; i < m1->size(); ++i) REQUIRE(std::abs(m1->data[i] - m2->data[i]) < 1e-5f);

    // refuses a model without quantized layers
    REQUIRE_THROWS_WITH(export_qlora(model, base), Catch::Matchers::ContainsSubstring("not a qlora"));
}

TEST_CASE("param_seq_ratio") {
    REQUIRE(param_seq_ratio(175e9, 2048) == Catch::Approx(8.54e7).epsilon(0.01));
    REQUIRE(param_seq_ratio(86e6, 4096) == Catch::Approx(2.1e4).epsilon(0.01));
    REQUIRE(param_seq_ratio(12345, 1) == 12345.0);
    REQUIRE_THROWS(param_seq_ratio(10, 0));
}

TEST_CASE("memory_report: retained encoder activations track the frozen prefix") {
    // longer sequence so activation saves dominate weight saves, as at real scale
    auto cfg = toy_cfg();
    cfg.image_size = 64;
    cfg.patch_size = 2;  // S = 1024
    cfg.depth = 2;
    auto img = toy_image(cfg, 40);
    auto report_for = [&](PeftMethod m, double frac = 0.5) {
        EncModel mm(cfg, 55);
        PeftConfig pc;
        pc.method = m;
        if (pc.is_late()) pc.late_fraction = frac;
        if (pc.is_low_rank()) pc.rank = 8;
        Rng rng(55);
        apply_peft(mm, pc, rng);
        return memory_report(mm, [&](Tape<float>& tp) { return mean_all(tp, mm.encoder.forward(tp, img)); });
    };

    auto full = report_for(PeftMethod::full_ft);
    auto frozen = report_for(PeftMethod::freeze_encoder);
    auto late = report_for(PeftMethod::late_ft, 0.5);
    auto lora = report_for(PeftMethod::lora);

    REQUIRE(full.encoder_retained > 0);
    REQUIRE(frozen.encoder_retained == 0);
    REQUIRE(late.encoder_retained <= static_cast<int64_t>(0.60 * static_cast<double>(full.encoder_retained)));
    REQUIRE(lora.encoder_retained >= static_cast<int64_t>(0.95 * static_cast<double>(full.encoder_retained)));

    // optimizer bytes = 2x trainable param bytes
    REQUIRE(full.optimizer_bytes == 2 * full.grad_bytes);
    REQUIRE(frozen.grad_bytes == 0);

    // retained bytes non-decreasing in late_fraction
    int64_t prev = -1;
    for (double f : {0.25, 0.5, 1.0}) {
        auto r = report_for(PeftMethod::late_ft, f);
        REQUIRE(r.encoder_retained >= prev);
        prev = r.encoder_retained;
    }
}

TEST_CASE("method names round-trip and unknown names fail") {
    for (int i = 0; i <= static_cast<int>(PeftMethod::late_qlora); ++i) {
        auto m = static_cast<PeftMethod>(i);
        REQUIRE(parse_method(method_name(m)) == m);
    }
    REQUIRE_THROWS(parse_method("prefix_tune"));
}
