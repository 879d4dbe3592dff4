#include <CLI11.hpp>

#include "peftsam/harness.hpp"

using namespace peftsam;

namespace {

struct MethodFlags {
    std::string method = "lora";
    int64_t rank = -1;
    std::string alpha = "";  // number or "learned"
    std::string lora_scope = "";
    int64_t proj = -1;
    std::string dropout = "";  // number or "none"
    double late_fraction = -1;
    int64_t quant_block = -1;
};

void add_method_flags(CLI::App* cmd, MethodFlags& mf) {
    cmd->add_option("--method", mf.method, "PEFT method")->required();
    cmd->add_option("--rank", mf.rank, "low-rank adapter rank");
    cmd->add_option("--alpha", mf.alpha, "adapter scale (number or 'learned')");
    cmd->add_option("--lora-scope", mf.lora_scope)->check(CLI::IsMember({"classic", "all"}));
    cmd->add_option("--proj", mf.proj, "adaptformer projection size");
    cmd->add_option("--dropout", mf.dropout, "adapter dropout (number or 'none')");
    cmd->add_option("--late-fraction", mf.late_fraction);
    cmd->add_option("--quant-block", mf.quant_block);
}

PeftConfig to_peft(const MethodFlags& mf) {
    PeftConfig pc;
    pc.method = parse_method(mf.method);
    if (mf.rank >= 0) pc.rank = mf.rank;
    if (!mf.alpha.empty()) {
        if (mf.alpha == "learned")
            pc.alpha_learned = true;
        else
            pc.alpha = std::stod(mf.alpha);
    }
    if (!mf.lora_scope.empty()) pc.lora_scope = mf.lora_scope;
    if (mf.proj >= 0) pc.projection_size = mf.proj;
    if (!mf.dropout.empty() && mf.dropout != "none") pc.dropout = std::stod(mf.dropout);
    if (mf.late_fraction >= 0) pc.late_fraction = mf.late_fraction;
    if (mf.quant_block > 0) pc.quant_block = mf.quant_block;
    return pc;
}

void print_param_report(const std::string& preset, const PeftConfig& pc) {
    ExperimentConfig cfg;
    cfg.preset = preset;
    cfg.peft = pc;
    auto model = build_model(cfg);
    auto rep = count_params(model);
    std::printf("preset: %s\nmethod: %s\n", preset.c_str(), method_name(pc.method));
    std::printf("trainable:          %lld\n", static_cast<long long>(rep.trainable));
    std::printf("frozen:             %lld\n", static_cast<long long>(rep.frozen));
    std::printf("encoder trainable:  %lld\n", static_cast<long long>(rep.encoder_trainable));
    std::printf("decoder-side:       %lld\n", static_cast<long long>(rep.decoder_side));
    if (rep.quantized_bytes) std::printf("quantized bytes:    %llu\n", static_cast<unsigned long long>(rep.quantized_bytes));
    if (preset == "vit-b-shape") {
        // encoder-side deltas expected on this shape (millions)
        static const std::vector<std::pair<std::string, double>> expected{
            {"full_ft", 89.58},     {"late_ft", 42.53},  {"attn_tune", 28.35},
            {"late_lora", 2.36},    {"lora", 1.18},      {"adaptformer", 1.19},
            {"ssf", 0.20},          {"bias_tune", 0.08}, {"ln_tune", 0.04},
            {"fact", 0.03},         {"freeze_encoder", 0.0}};
        std::printf("\nexpected encoder deltas on this shape [M]:\n");
        for (const auto& [name, m] : expected) std::printf("  %-16s %6.2f\n", name.c_str(), m);
        std::printf("this config:       %6.2f\n", static_cast<double>(rep.encoder_trainable) / 1e6);
    }
}

void print_mem_report(const PeftConfig& pc, uint64_t seed) {
    auto run = [&](PeftMethod m, const PeftConfig& base) {
        ExperimentConfig cfg;
        cfg.preset = "toy";
        cfg.peft = base;
        cfg.peft.method = m;
        cfg.seed = seed;
        auto model = build_model(cfg);
        auto img = make_tensor<float>(Shape{model.encoder.cfg.in_channels, model.encoder.cfg.image_size,
                                            model.encoder.cfg.image_size});
        Rng rng(seed + 1);
        for (auto& v : img->data) v = static_cast<float>(rng.uniform());
        auto program = [&](Tape<float>& tp) {
            auto feat = model.encode_image(tp, img);
            PromptSet ps;
            ps.set_box(0, 0, model.encoder.cfg.image_size - 1, model.encoder.cfg.image_size - 1);
            auto logits = model.decode_mask(tp, feat, ps);
            return mean_all(tp, mul(tp, logits, logits));
        };
        return memory_report(model, program);
    };
    auto rep = run(pc.method, pc);
    auto full = run(PeftMethod::full_ft, PeftConfig{});
    std::printf("method: %s (toy preset)\n", method_name(pc.method));
    std::printf("%-22s %14s\n", "region", "retained bytes");
    for (const auto& [region, bytes] : rep.retained_by_region)
        std::printf("%-22s %14llu\n", region.c_str(), static_cast<unsigned long long>(bytes));
    std::printf("encoder retained:   %llu\n", static_cast<unsigned long long>(rep.encoder_retained));
    std::printf("full_ft baseline:   %llu\n", static_cast<unsigned long long>(full.encoder_retained));
    double ratio = full.encoder_retained
                       ? static_cast<double>(rep.encoder_retained) / static_cast<double>(full.encoder_retained)
                       : 0.0;
    std::printf("ratio vs full_ft:   %.2f\n", ratio);
    std::printf("param bytes:        %llu\n", static_cast<unsigned long long>(rep.param_bytes));
    std::printf("grad bytes:         %llu\n", static_cast<unsigned long long>(rep.grad_bytes));
    std::printf("optimizer bytes:    %llu\n", static_cast<unsigned long long>(rep.optimizer_bytes));
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"parameter-efficient finetuning harness for a promptable segmentation model"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "generate a synthetic instance-segmentation dataset");
    GenSpec spec;
    std::string gen_out;
    gen->add_option("--out", gen_out)->required();
    gen->add_option("--size", spec.image_size);
    gen->add_option("--n-train", spec.n_train);
    gen->add_option("--n-val", spec.n_val);
    gen->add_option("--n-test", spec.n_test);
    gen->add_option("--min-inst", spec.min_instances);
    gen->add_option("--max-inst", spec.max_instances);
    gen->add_option("--min-r", spec.min_radius);
    gen->add_option("--max-r", spec.max_radius);
    gen->add_option("--noise", spec.noise_sigma);
    gen->add_option("--seed", spec.seed);

    // train
    auto* train = app.add_subcommand("train", "train with early stopping");
    ExperimentConfig tcfg;
    MethodFlags tmf;
    std::string train_data, train_out, train_tasks = "box";
    int64_t n_train_limit = -1;
    train->add_option("--data", train_data)->required();
    train->add_option("--preset", tcfg.preset)->check(CLI::IsMember({"toy", "vit-b-shape"}));
    add_method_flags(train, tmf);
    train->add_option("--batch-size", tcfg.train.batch_size);
    train->add_option("--objects-per-image", tcfg.train.objects_per_image);
    train->add_option("--iters", tcfg.train.correction_iterations);
    train->add_option("--lr", tcfg.train.lr);
    train->add_option("--patience", tcfg.train.patience);
    train->add_option("--max-epochs", tcfg.train.max_epochs);
    train->add_option("--seed", tcfg.seed);
    train->add_option("--tasks", train_tasks, "comma-separated; ais adds instance-head training");
    train->add_option("--n-train", n_train_limit, "cap the train split (data scaling)");
    train->add_option("--experiment", tcfg.experiment);
    train->add_option("--out", train_out)->required();

    // eval
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string eval_ckpt, eval_data, eval_tasks = "box", out_jsonl, out_csv;
    int64_t eval_iters = 7;
    uint64_t eval_seed = 0;
    eval->add_option("--ckpt", eval_ckpt)->required();
    eval->add_option("--data", eval_data)->required();
    eval->add_option("--tasks", eval_tasks);
    eval->add_option("--iters", eval_iters);
    eval->add_option("--seed", eval_seed);
    eval->add_option("--out-jsonl", out_jsonl);
    eval->add_option("--out-csv", out_csv);

    // count-params
    auto* cp = app.add_subcommand("count-params", "print a parameter report");
    std::string cp_preset = "vit-b-shape";
    MethodFlags cp_mf;
    cp->add_option("--preset", cp_preset)->check(CLI::IsMember({"toy", "vit-b-shape"}));
    add_method_flags(cp, cp_mf);

    // mem-report
    auto* mem = app.add_subcommand("mem-report", "print retained-activation report (toy preset)");
    std::string mem_preset = "toy";
    MethodFlags mem_mf;
    uint64_t mem_seed = 0;
    mem->add_option("--preset", mem_preset);
    add_method_flags(mem, mem_mf);
    mem->add_option("--seed", mem_seed);

    // export
    auto* exp = app.add_subcommand("export", "merge adapters or restore qlora full precision");
    std::string exp_ckpt, exp_out, exp_base;
    bool merge_flag = false, qlora_flag = false;
    exp->add_option("--ckpt", exp_ckpt)->required();
    exp->add_flag("--merge-lora", merge_flag);
    exp->add_flag("--qlora-full-precision", qlora_flag);
    exp->add_option("--base", exp_base, "full-precision base weights checkpoint");
    exp->add_option("--out", exp_out)->required();

    // sweep
    auto* sw = app.add_subcommand("sweep", "cartesian grid of train+eval runs");
    std::string grid_file, sweep_csv, sweep_data, sweep_task = "box";
    int64_t jobs = 1;
    ExperimentConfig scfg;
    sw->add_option("--grid", grid_file)->required();
    sw->add_option("--data", sweep_data)->required();
    sw->add_option("--jobs", jobs);
    sw->add_option("--out-csv", sweep_csv)->required();
    sw->add_option("--task", sweep_task);
    sw->add_option("--max-epochs", scfg.train.max_epochs);
    sw->add_option("--batch-size", scfg.train.batch_size);
    sw->add_option("--objects-per-image", scfg.train.objects_per_image);
    sw->add_option("--iters", scfg.train.correction_iterations);
    sw->add_option("--seed", scfg.seed);
    sw->add_option("--experiment", scfg.experiment);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            generate(spec, gen_out);
            std::printf("wrote %s\n", (fs::path(gen_out) / "manifest.json").string().c_str());
        } else if (train->parsed()) {
            tcfg.peft = to_peft(tmf);
            tcfg.data_dir = train_data;
            tcfg.out = train_out;
            tcfg.train.seed = tcfg.seed;
            for (auto& t : CLI::detail::split(train_tasks, ',')) tcfg.tasks.push_back(t);
            auto out = run_training(tcfg, {}, n_train_limit);
            std::printf("epochs: %lld\nbest epoch: %lld\nbest val score: %.4f\nstop reason: %s\n",
                        static_cast<long long>(out.epochs), static_cast<long long>(out.best_epoch),
                        out.best_score, out.stop_reason.c_str());
            std::printf("checkpoint: %s\n", out.checkpoint_path.string().c_str());
        } else if (eval->parsed()) {
            std::vector<std::string> tasks = CLI::detail::split(eval_tasks, ',');
            auto out = evaluate_checkpoint(eval_ckpt, eval_data, tasks, eval_seed, eval_iters);
            for (const auto& r : out.rows) std::printf("%s\n", csv_row(r).c_str());
            if (!out_csv.empty()) write_csv(out_csv, out.rows);
            if (!out_jsonl.empty()) write_jsonl(out_jsonl, out.jsonl);
        } else if (cp->parsed()) {
            print_param_report(cp_preset, to_peft(cp_mf));
        } else if (mem->parsed()) {
            if (mem_preset != "toy")
                throw ConfigError("mem-report requires the toy preset (count-only presets refused)");
            print_mem_report(to_peft(mem_mf), mem_seed);
        } else if (exp->parsed()) {
            if (merge_flag == qlora_flag)
                throw ConfigError("export: exactly one of --merge-lora / --qlora-full-precision required");
            auto rep = export_experiment(exp_ckpt, merge_flag ? "merge-lora" : "qlora-full-precision",
                                         exp_out, exp_base);
            std::printf("max |probe diff|: %.3e\n", rep.max_abs_diff);
            for (const auto& n : rep.replaced) std::printf("restored %s\n", n.c_str());
        } else if (sw->parsed()) {
            std::ifstream is(grid_file);
            if (!is.good()) throw DataError("cannot open grid file " + grid_file);
            nlohmann::ordered_json grid;
            try {
                grid = nlohmann::ordered_json::parse(is);
            } catch (const std::exception& e) {
                throw ConfigError("bad grid file: " + std::string(e.what()));
            }
            scfg.data_dir = sweep_data;
            scfg.train.seed = scfg.seed;
            scfg.tasks = {sweep_task};
            scfg.peft.method = PeftMethod::lora;
            scfg.peft.rank = 4;
            auto rows = run_sweep(scfg, grid, sweep_task);
            write_sweep_csv(sweep_csv, rows);
            size_t failed = 0;
            for (const auto& r : rows) failed += r.failed;
            std::printf("%zu rows (%zu failed) -> %s\n", rows.size(), failed, sweep_csv.c_str());
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 4;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const TensorError& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
