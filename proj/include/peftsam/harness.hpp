#pragma once

#include "peftsam/checkpoint.hpp"

namespace peftsam {

struct ConfigError : TensorError {
    using TensorError::TensorError;
};
struct DataError : TensorError {
    using TensorError::TensorError;
};
struct NumericalError : TensorError {
    using TensorError::TensorError;
};

struct ExperimentConfig {
    std::string experiment = "default";
    std::string preset = "toy";  // toy | vit-b-shape
    PeftConfig peft;
    TrainConfig train;
    fs::path data_dir;
    std::vector<std::string> tasks;  // subset of {ais, point, box, ip, ib}
    fs::path out;
    uint64_t seed = 0;

    bool wants(const std::string& task) const {
        return std::find(tasks.begin(), tasks.end(), task) != tasks.end();
    }

    void validate() const {
        if (preset != "toy" && preset != "vit-b-shape")
            throw ConfigError("ExperimentConfig: unknown preset " + preset);
        static const std::vector<std::string> known{"ais", "point", "box", "ip", "ib"};
        for (const auto& t : tasks)
            if (std::find(known.begin(), known.end(), t) == known.end())
                throw ConfigError("ExperimentConfig: unknown task " + t);
        try {
            peft.validate();
            train.validate();
        } catch (const TensorError& e) {
            throw ConfigError(e.what());
        }
    }
};

inline SamConfig preset_config(const std::string& preset) {
    if (preset == "toy") return toy_sam();
    if (preset == "vit-b-shape") {
        SamConfig c;
        c.vit = vit_b_shape();
        return c;
    }
    throw ConfigError("unknown preset " + preset);
}

// ---------------------------------------------------------------------------
// config <-> json
// ---------------------------------------------------------------------------

inline nlohmann::ordered_json peft_to_json(const PeftConfig& pc) {
    nlohmann::ordered_json j;
    j["method"] = method_name(pc.method);
    if (pc.rank) j["rank"] = *pc.rank;
    if (pc.alpha) j["alpha"] = *pc.alpha;
    j["alpha_learned"] = pc.alpha_learned;
    if (pc.lora_scope) j["lora_scope"] = *pc.lora_scope;
    if (pc.projection_size) j["projection_size"] = *pc.projection_size;
    if (pc.dropout) j["dropout"] = *pc.dropout;
    if (pc.late_fraction) j["late_fraction"] = *pc.late_fraction;
    j["quant_bits"] = pc.quant_bits;
    j["quant_block"] = pc.quant_block;
    return j;
}

inline PeftConfig peft_from_json(const nlohmann::ordered_json& j) {
    PeftConfig pc;
    pc.method = parse_method(j.at("method").get<std::string>());
    if (j.contains("rank")) pc.rank = j.at("rank").get<int64_t>();
    if (j.contains("alpha")) pc.alpha = j.at("alpha").get<double>();
    pc.alpha_learned = j.value("alpha_learned", false);
    if (j.contains("lora_scope")) pc.lora_scope = j.at("lora_scope").get<std::string>();
    if (j.contains("projection_size")) pc.projection_size = j.at("projection_size").get<int64_t>();
    if (j.contains("dropout")) pc.dropout = j.at("dropout").get<double>();
    if (j.contains("late_fraction")) pc.late_fraction = j.at("late_fraction").get<double>();
    pc.quant_bits = j.value("quant_bits", 4);
    pc.quant_block = j.value("quant_block", int64_t{64});
    return pc;
}

inline nlohmann::ordered_json experiment_to_json(const ExperimentConfig& cfg) {
    nlohmann::ordered_json j;
    j["experiment"] = cfg.experiment;
    j["preset"] = cfg.preset;
    j["peft"] = peft_to_json(cfg.peft);
    j["train"] = {{"batch_size", cfg.train.batch_size},
                  {"objects_per_image", cfg.train.objects_per_image},
                  {"correction_iterations", cfg.train.correction_iterations},
                  {"lr", cfg.train.lr},
                  {"patience", cfg.train.patience},
                  {"max_epochs", cfg.train.max_epochs},
                  {"seed", cfg.train.seed}};
    j["data_dir"] = cfg.data_dir.string();
    j["tasks"] = cfg.tasks;
    j["seed"] = cfg.seed;
    return j;
}

inline ExperimentConfig experiment_from_json(const nlohmann::ordered_json& j) {
    ExperimentConfig cfg;
    cfg.experiment = j.value("experiment", "default");
    cfg.preset = j.value("preset", "toy");
    cfg.peft = peft_from_json(j.at("peft"));
    const auto& t = j.at("train");
    cfg.train.batch_size = t.at("batch_size").get<int64_t>();
    cfg.train.objects_per_image = t.at("objects_per_image").get<int64_t>();
    cfg.train.correction_iterations = t.at("correction_iterations").get<int64_t>();
    cfg.train.lr = t.at("lr").get<double>();
    cfg.train.patience = t.at("patience").get<int64_t>();
    cfg.train.max_epochs = t.at("max_epochs").get<int64_t>();
    cfg.train.seed = t.at("seed").get<uint64_t>();
    cfg.data_dir = j.value("data_dir", std::string{});
    cfg.tasks = j.value("tasks", std::vector<std::string>{});
    cfg.seed = j.value("seed", uint64_t{0});
    return cfg;
}

/// Build the model deterministically from the config: architecture from the
/// preset, weights from seed, adapters from the PEFT config.
inline SamModel<float> build_model(const ExperimentConfig& cfg) {
    cfg.validate();
    Rng init_rng(cfg.seed);
    SamModel<float> model(preset_config(cfg.preset), init_rng);
    Rng adapter_rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    apply_peft(model, cfg.peft, adapter_rng);
    return model;
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

struct EpochLog {
    int64_t epoch = 0;
    double train_loss = 0;
    double val_score = 0;
};

struct TrainOutcome {
    int64_t epochs = 0;
    int64_t best_epoch = 0;
    double best_score = 0;
    std::string stop_reason;  // patience | max_epochs | nan
    std::vector<EpochLog> log;
    fs::path checkpoint_path;
};

namespace detail {

/// mSA of watershed-decoded instance predictions, averaged over a split.
template <class T>
double ais_score(const SamModel<T>& model, const std::vector<Sample>& data) {
    double acc = 0;
    for (const auto& s : data) {
        Tape<T> tp;
        auto feat = model.encode_image(tp, image_tensor<T>(s));
        auto pred = model.instance_forward(tp, feat);
        InstanceHeadOutput out(s.h, s.w);
        int64_t plane = s.h * s.w;
        for (int64_t i = 0; i < plane; ++i) {
            out.center[static_cast<size_t>(i)] = static_cast<float>(pred->data[i]);
            out.boundary[static_cast<size_t>(i)] = static_cast<float>(pred->data[plane + i]);
            out.foreground[static_cast<size_t>(i)] = static_cast<float>(pred->data[2 * plane + i]);
        }
        acc += mean_segmentation_accuracy(watershed_decode(out), s.instances);
    }
    return data.empty() ? 0.0 : acc / static_cast<double>(data.size());
}

/// Early-stopping score: mean iteration-0 box-prompt dice on the validation
/// split, averaged with AIS mSA when the instance head is being trained.
template <class T>
double validation_score(const SamModel<T>& model, const std::vector<Sample>& val, bool with_ais,
                        uint64_t seed) {
    ModelPredictor<T> pred(model, val);
    auto r = evaluate_interactive(pred, val, StartKind::box, EvalMetric::dice, seed, /*iterations=*/0);
    double score = r.start_mean;
    if (with_ais) score = 0.5 * (score + ais_score(model, val));
    return score;
}

template <class T>
std::vector<std::vector<T>> snapshot_params(const SamModel<T>& model) {
    ParamList<T> params;
    model.collect_params(params);
    std::vector<std::vector<T>> snap;
    snap.reserve(params.size());
    for (const auto& p : params) snap.push_back(p.t->data);
    return snap;
}

template <class T>
void restore_params(SamModel<T>& model, const std::vector<std::vector<T>>& snap) {
    ParamList<T> params;
    model.collect_params(params);
    require(params.size() == snap.size(), "restore_params: snapshot arity mismatch");
    for (size_t i = 0; i < params.size(); ++i) params[i].t->data = snap[i];
}

}  // namespace detail

/// Train with early stopping; writes the best-epoch checkpoint to cfg.out.
/// `val_override`, when set, replaces the validation score (epoch -> score);
/// `n_train_limit` caps the train split (data-scaling sweeps).
inline TrainOutcome run_training(const ExperimentConfig& cfg, SamModel<float>& model,
                                 const std::function<double(int64_t)>& val_override = {},
                                 int64_t n_train_limit = -1) {
    cfg.validate();
    if (cfg.preset != "toy") throw ConfigError("preset " + cfg.preset + " is count-only; training refused");

    DatasetManifest man;
    std::vector<Sample> train_set, val_set;
    try {
        man = load_manifest(cfg.data_dir / "manifest.json");
        train_set = load_split(man, "train");
        val_set = load_split(man, "val");
    } catch (const TensorError& e) {
        throw DataError(e.what());
    }
    if (cfg.wants("ais") && man.task != "instance")
        throw ConfigError("task ais requires instance data, manifest says " + man.task);
    if (n_train_limit >= 0 && static_cast<size_t>(n_train_limit) < train_set.size())
        train_set.resize(static_cast<size_t>(n_train_limit));
    if (train_set.empty()) throw DataError("train split is empty");
    if (val_set.empty()) throw DataError("val split is empty");

    bool with_ais = cfg.wants("ais");
    Adam<float> opt;
    opt.lr = static_cast<float>(cfg.train.lr);

    TrainOutcome out;
    double best = -std::numeric_limits<double>::infinity();
    std::vector<std::vector<float>> best_snap = detail::snapshot_params(model);
    int64_t stagnant = 0;
    for (int64_t epoch = 1; epoch <= cfg.train.max_epochs; ++epoch) {
        Rng rng = Rng(cfg.train.seed).fork(static_cast<uint64_t>(epoch));
        double loss_sum = 0;
        int64_t steps = 0;
        for (size_t i = 0; i < train_set.size(); i += static_cast<size_t>(cfg.train.batch_size)) {
            std::vector<const Sample*> batch;
            for (size_t k = i; k < train_set.size() && k < i + static_cast<size_t>(cfg.train.batch_size); ++k)
                batch.push_back(&train_set[k]);
            loss_sum += interactive_training_step(model, opt, batch, cfg.train, with_ais, rng);
            ++steps;
        }
        double train_loss = loss_sum / static_cast<double>(steps);
        double score = val_override ? val_override(epoch)
                                    : detail::validation_score(model, val_set, with_ais, cfg.seed);
        out.log.push_back({epoch, train_loss, score});
        out.epochs = epoch;
        if (std::getenv("PEFTSAM_VERBOSE"))
            std::fprintf(stderr, "epoch %lld loss %.4f val %.4f\n", static_cast<long long>(epoch),
                         train_loss, score);
        if (!std::isfinite(train_loss) || !std::isfinite(score)) {
            out.stop_reason = "nan";
            break;
        }
        if (score > best + 1e-4) {
            best = score;
            out.best_epoch = epoch;
            best_snap = detail::snapshot_params(model);
            stagnant = 0;
        } else if (++stagnant >= cfg.train.patience) {
            out.stop_reason = "patience";
            break;
        }
    }
    if (out.stop_reason.empty()) out.stop_reason = "max_epochs";
    out.best_score = best;
    detail::restore_params(model, best_snap);
    if (!cfg.out.empty()) {
        auto header = experiment_to_json(cfg);
        header["epochs"] = out.epochs;
        header["best_epoch"] = out.best_epoch;
        header["stop_reason"] = out.stop_reason;
        save_checkpoint(cfg.out, model, header);
        out.checkpoint_path = cfg.out;
    }
    if (out.stop_reason == "nan")
        throw NumericalError("training aborted on non-finite loss at epoch " +
                             std::to_string(out.epochs) + "; last good checkpoint saved");
    return out;
}

inline TrainOutcome run_training(const ExperimentConfig& cfg,
                                 const std::function<double(int64_t)>& val_override = {},
                                 int64_t n_train_limit = -1) {
    auto model = build_model(cfg);
    return run_training(cfg, model, val_override, n_train_limit);
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct ResultRecord {
    std::string experiment, method, task;
    uint64_t seed = 0;
    double value = 0;
    int64_t params_trainable = 0;
    uint64_t act_bytes = 0;
};

struct EvalOutput {
    std::vector<ResultRecord> rows;
    std::vector<nlohmann::ordered_json> jsonl;
};

inline std::string csv_header() { return "experiment,method,seed,task,value,params_trainable,act_bytes"; }

inline std::string csv_row(const ResultRecord& r) {
    std::ostringstream os;
    os << r.experiment << ',' << r.method << ',' << r.seed << ',' << r.task << ','
       << std::setprecision(10) << r.value << ',' << r.params_trainable << ',' << r.act_bytes;
    return os.str();
}

inline void write_csv(const fs::path& path, const std::vector<ResultRecord>& rows) {
    std::ofstream os(path);
    require(os.good(), "cannot open for write: " + path.string());
    os << csv_header() << '\n';
    for (const auto& r : rows) os << csv_row(r) << '\n';
}

inline void write_jsonl(const fs::path& path, const std::vector<nlohmann::ordered_json>& records) {
    std::ofstream os(path);
    require(os.good(), "cannot open for write: " + path.string());
    for (const auto& j : records) os << j.dump() << '\n';
}

/// Retained encoder activation bytes for one training-style forward/backward
/// on the first evaluation image.
template <class T>
uint64_t probe_act_bytes(SamModel<T>& model, const Sample& s) {
    auto program = [&](Tape<T>& tp) {
        auto feat = model.encode_image(tp, image_tensor<T>(s));
        PromptSet ps;
        ps.set_box(0, 0, s.h - 1, s.w - 1);
        auto logits = model.decode_mask(tp, feat, ps);
        return mean_all(tp, mul(tp, logits, logits));
    };
    return memory_report(model, program).encoder_retained;
}

inline EvalOutput evaluate_experiment(SamModel<float>& model, const nlohmann::ordered_json& config_echo,
                                      const fs::path& data_dir, const std::vector<std::string>& tasks,
                                      uint64_t seed, int64_t iterations = 7) {
    DatasetManifest man;
    std::vector<Sample> test_set;
    try {
        man = load_manifest(data_dir / "manifest.json");
        test_set = load_split(man, "test");
    } catch (const TensorError& e) {
        throw DataError(e.what());
    }
    if (test_set.empty()) throw DataError("test split is empty");

    std::string experiment = config_echo.value("experiment", "default");
    std::string method = config_echo.contains("peft")
                             ? config_echo.at("peft").at("method").get<std::string>()
                             : "unknown";
    auto report = count_params(model);
    uint64_t act = probe_act_bytes(model, test_set.front());
    EvalMetric metric = man.metric == "dice" ? EvalMetric::dice : EvalMetric::msa;

    auto has = [&](const std::string& t) {
        return std::find(tasks.begin(), tasks.end(), t) != tasks.end();
    };
    for (const auto& t : tasks) {
        static const std::vector<std::string> known{"ais", "point", "box", "ip", "ib"};
        if (std::find(known.begin(), known.end(), t) == known.end())
            throw ConfigError("unknown task " + t);
    }
    if (has("ais") && man.task != "instance")
        throw DataError("task ais requires instance data, manifest says " + man.task);

    EvalOutput out;
    auto push = [&](const std::string& task, double value) {
        out.rows.push_back({experiment, method, task, seed, value, report.trainable, act});
    };

    std::optional<EvalResult> point_res, box_res;
    ModelPredictor<float> pred(model, test_set);
    if (has("point") || has("ip"))
        point_res = evaluate_interactive(pred, test_set, StartKind::point, metric, seed, iterations);
    if (has("box") || has("ib"))
        box_res = evaluate_interactive(pred, test_set, StartKind::box, metric, seed, iterations);

    for (const auto* res : {&point_res, &box_res}) {
        if (!*res) continue;
        for (const auto& rec : (*res)->records) {
            nlohmann::ordered_json j;
            j["experiment"] = experiment;
            j["method"] = method;
            j["image_id"] = rec.image_id;
            j["object_id"] = rec.object_id;
            j["start"] = rec.start;
            j["metrics"] = rec.metrics;
            j["seed"] = rec.seed;
            out.jsonl.push_back(std::move(j));
        }
    }
    if (has("ais")) {
        for (size_t i = 0; i < test_set.size(); ++i) {
            std::vector<Sample> one{test_set[i]};
            double v = detail::ais_score(model, one);
            nlohmann::ordered_json j;
            j["experiment"] = experiment;
            j["method"] = method;
            j["image_id"] = i;
            j["task"] = "ais";
            j["value"] = v;
            out.jsonl.push_back(std::move(j));
        }
        push("ais", detail::ais_score(model, test_set));
    }
    if (has("point")) push("point", point_res->start_mean);
    if (has("box")) push("box", box_res->start_mean);
    if (has("ip")) push("ip", point_res->final_mean);
    if (has("ib")) push("ib", box_res->final_mean);
    return out;
}

/// Rebuild the model a checkpoint describes and load its tensors.
struct LoadedCheckpoint {
    ExperimentConfig config;
    nlohmann::ordered_json header;
    SamModel<float> model;
};

inline LoadedCheckpoint load_experiment(const fs::path& ckpt_path) {
    auto file = read_checkpoint(ckpt_path);
    LoadedCheckpoint lc;
    lc.header = file.header;
    try {
        lc.config = experiment_from_json(file.header.at("config"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError("checkpoint header missing config fields: " + std::string(e.what()));
    }
    lc.model = build_model(lc.config);
    load_checkpoint_into(file, lc.model);
    return lc;
}

inline EvalOutput evaluate_checkpoint(const fs::path& ckpt, const fs::path& data_dir,
                                      const std::vector<std::string>& tasks, uint64_t seed,
                                      int64_t iterations = 7) {
    auto lc = load_experiment(ckpt);
    return evaluate_experiment(lc.model, lc.header.at("config"), data_dir, tasks, seed, iterations);
}

// ---------------------------------------------------------------------------
// export
// ---------------------------------------------------------------------------

/// Fold every LoRA adapter of a lora/late_lora model into the dense weights
/// and drop the adapters. Returns the max |probe diff| between adapter and
/// merged forward on `probe`.
template <class T>
double merge_lora_model(SamModel<T>& model, const TensorPtr<T>& probe) {
    Tape<T> tp0;
    auto before = model.encode_image(tp0, probe)->data;
    int64_t d = model.encoder.cfg.embed_dim;
    bool any = false;
    for (auto& blk : model.encoder.blocks) {
        auto& ad = blk.ad;
        require(!ad.q_qkv, "merge refused: model has quantized base weights");
        auto fold = [&](Linear<T>& lin, std::shared_ptr<LoraAdapter<T>>& a, int64_t col0, int64_t ncols) {
            if (!a) return;
            auto delta = merge_lora(make_tensor<T>(Shape{a->A->shape[0], a->B->shape[1]}), *a);
            int64_t wcols = lin.w->shape[1];
            for (int64_t i = 0; i < a->A->shape[0]; ++i)
                for (int64_t j = 0; j < ncols; ++j)
                    lin.w->data[i * wcols + col0 + j] += delta->data[i * ncols + j];
            a.reset();
            any = true;
        };
        fold(blk.qkv, ad.lora_q, 0, d);
        fold(blk.qkv, ad.lora_v, 2 * d, d);
        fold(blk.qkv, ad.lora_qkv, 0, 3 * d);
        fold(blk.proj, ad.lora_proj, 0, d);
        fold(blk.fc1, ad.lora_fc1, 0, blk.fc1.w->shape[1]);
        fold(blk.fc2, ad.lora_fc2, 0, d);
    }
    require(any, "merge refused: model has no LoRA adapters");
    Tape<T> tp1;
    auto after = model.encode_image(tp1, probe)->data;
    double diff = 0;
    for (size_t i = 0; i < before.size(); ++i)
        diff = std::max(diff, std::abs(static_cast<double>(before[i]) - static_cast<double>(after[i])));
    return diff;
}

struct ExportReport {
    double max_abs_diff = 0;
    std::vector<std::string> replaced;  // qlora targets restored to full precision
};

inline ExportReport export_experiment(const fs::path& ckpt_path, const std::string& mode,
                                      const fs::path& out_path, const fs::path& base_path = {}) {
    auto lc = load_experiment(ckpt_path);
    auto probe = make_tensor<float>(Shape{lc.model.encoder.cfg.in_channels,
                                          lc.model.encoder.cfg.image_size,
                                          lc.model.encoder.cfg.image_size});
    Rng prng(7);
    for (auto& v : probe->data) v = static_cast<float>(prng.uniform());

    ExportReport rep;
    ExperimentConfig out_cfg = lc.config;
    if (mode == "merge-lora") {
        rep.max_abs_diff = merge_lora_model(lc.model, probe);
        // adapters are folded away: the exported file describes a plain model
        out_cfg.peft = PeftConfig{};
        out_cfg.peft.method = PeftMethod::freeze_encoder;
    } else if (mode == "qlora-full-precision") {
        Tape<float> tpq;
        auto before = lc.model.encode_image(tpq, probe)->data;
        // the full-precision base is the pre-quantization init, reconstructable
        // from the config unless an explicit base checkpoint is given
        ExperimentConfig base_cfg = lc.config;
        base_cfg.peft = PeftConfig{};
        base_cfg.peft.method = PeftMethod::freeze_encoder;
        auto base = build_model(base_cfg);
        if (!base_path.empty()) {
            auto bf = read_checkpoint(base_path);
            load_checkpoint_into(bf, base);
        }
        rep.replaced = export_qlora(lc.model.encoder, base.encoder);
        Tape<float> tpf;
        auto after = lc.model.encode_image(tpf, probe)->data;
        for (size_t i = 0; i < before.size(); ++i)
            rep.max_abs_diff = std::max(rep.max_abs_diff,
                                        std::abs(static_cast<double>(before[i]) - static_cast<double>(after[i])));
        // weights are full precision again; the remaining adapters make this a
        // plain (late_)lora model
        out_cfg.peft.method = lc.config.peft.method == PeftMethod::late_qlora ? PeftMethod::late_lora
                                                                              : PeftMethod::lora;
    } else {
        throw ConfigError("unknown export mode " + mode);
    }
    auto echo = experiment_to_json(out_cfg);
    echo["exported"] = mode;
    echo["exported_from"] = method_name(lc.config.peft.method);
    save_checkpoint(out_path, lc.model, echo);
    return rep;
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

struct SweepRow {
    nlohmann::ordered_json combo;
    ResultRecord record;
    bool failed = false;
    std::string error;
};

/// Grid file: JSON object mapping flag names (method, rank, alpha, lr,
/// late-fraction, lora-scope, proj, dropout, seed, n-train) to value lists.
/// Cartesian product, executed sequentially; invalid combinations become
/// failed rows.
inline std::vector<SweepRow> run_sweep(const ExperimentConfig& base, const nlohmann::ordered_json& grid,
                                       const std::string& eval_task = "box") {
    std::vector<std::string> keys;
    for (auto it = grid.begin(); it != grid.end(); ++it) {
        if (!it.value().is_array() || it.value().empty())
            throw ConfigError("sweep grid: " + it.key() + " must be a non-empty list");
        keys.push_back(it.key());
    }
    std::vector<SweepRow> rows;
    std::vector<size_t> idx(keys.size(), 0);
    while (true) {
        nlohmann::ordered_json combo;
        for (size_t k = 0; k < keys.size(); ++k) combo[keys[k]] = grid.at(keys[k])[idx[k]];

        SweepRow row;
        row.combo = combo;
        try {
            ExperimentConfig cfg = base;
            int64_t n_train_limit = -1;
            for (auto it = combo.begin(); it != combo.end(); ++it) {
                const std::string& k = it.key();
                if (k == "method") cfg.peft.method = parse_method(it.value().get<std::string>());
                else if (k == "rank") cfg.peft.rank = it.value().get<int64_t>();
                else if (k == "alpha") cfg.peft.alpha = it.value().get<double>();
                else if (k == "lr") cfg.train.lr = it.value().get<double>();
                else if (k == "late-fraction") cfg.peft.late_fraction = it.value().get<double>();
                else if (k == "lora-scope") cfg.peft.lora_scope = it.value().get<std::string>();
                else if (k == "proj") cfg.peft.projection_size = it.value().get<int64_t>();
                else if (k == "dropout") cfg.peft.dropout = it.value().get<double>();
                else if (k == "seed") cfg.seed = cfg.train.seed = it.value().get<uint64_t>();
                else if (k == "n-train") n_train_limit = it.value().get<int64_t>();
                else throw ConfigError("sweep grid: unknown axis " + k);
            }
            cfg.experiment = base.experiment + "/" + combo.dump();
            cfg.out.clear();  // per-combo results, no checkpoint files
            auto model = build_model(cfg);
            run_training(cfg, model, {}, n_train_limit);
            auto ev = evaluate_experiment(model, experiment_to_json(cfg), cfg.data_dir, {eval_task}, cfg.seed);
            require(!ev.rows.empty(), "sweep: evaluation produced no rows");
            row.record = ev.rows.front();
            // re-count oracle: the emitted params must match a fresh count of
            // the echoed config
            auto recount = count_params(build_model(cfg));
            require(recount.trainable == row.record.params_trainable, "sweep: param recount mismatch");
        } catch (const std::exception& e) {
            row.failed = true;
            row.error = e.what();
        }
        rows.push_back(std::move(row));

        size_t k = 0;
        for (; k < keys.size(); ++k) {
            if (++idx[k] < grid.at(keys[k]).size()) break;
            idx[k] = 0;
        }
        if (k == keys.size()) break;
    }
    return rows;
}

inline void write_sweep_csv(const fs::path& path, const std::vector<SweepRow>& rows) {
    std::ofstream os(path);
    require(os.good(), "cannot open for write: " + path.string());
    os << csv_header() << ",status,combo\n";
    for (const auto& r : rows) {
        if (r.failed)
            os << ",,,,,,," << "failed," << '"' << r.combo.dump() << '"' << '\n';
        else
            os << csv_row(r.record) << ",ok," << '"' << r.combo.dump() << '"' << '\n';
    }
}

}  // namespace peftsam
