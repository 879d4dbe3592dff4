#pragma once

#include <set>

#include "peftsam/optim.hpp"
#include "peftsam/sam.hpp"
#include "peftsam/synthdata.hpp"

namespace peftsam {

struct TrainConfig {
    int64_t batch_size = 2;
    int64_t objects_per_image = 25;  // resource-efficient preset: 5
    int64_t correction_iterations = 7;
    double lr = 1e-5;
    int64_t patience = 10;
    int64_t max_epochs = 100;
    uint64_t seed = 0;

    void validate() const {
        require(batch_size > 0 && objects_per_image > 0 && correction_iterations >= 0 && lr > 0 &&
                    patience > 0 && max_epochs > 0,
                "TrainConfig: all values must be positive");
    }
};

enum class StartKind { point, box };
enum class EvalMetric { msa, dice };

inline const char* start_name(StartKind k) { return k == StartKind::point ? "point" : "box"; }

// ---------------------------------------------------------------------------
// prompt sampling
// ---------------------------------------------------------------------------

struct Correction {
    bool none = true;
    bool positive = false;
    int64_t r = 0, c = 0;
};

inline std::vector<int64_t> mask_pixels(const std::vector<uint8_t>& mask) {
    std::vector<int64_t> pix;
    for (size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) pix.push_back(static_cast<int64_t>(i));
    return pix;
}

/// point: uniform mask pixel (train) or max-boundary-distance pixel (eval);
/// box: tight bounding box, each side jittered outward by up to 5% in train mode.
inline PromptSet sample_initial_prompt(const std::vector<uint8_t>& mask, int64_t h, int64_t w,
                                       StartKind kind, bool train, Rng& rng) {
    auto pix = mask_pixels(mask);
    require(!pix.empty(), "sample_initial_prompt: empty mask");
    PromptSet ps;
    if (kind == StartKind::point) {
        int64_t i;
        if (train) {
            i = pix[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(pix.size())))];
        } else {
            auto dist = distance_to_outside(mask, h, w);
            i = pix[0];
            for (int64_t p : pix)
                if (dist[static_cast<size_t>(p)] > dist[static_cast<size_t>(i)]) i = p;
        }
        ps.positive_points.push_back({i / w, i % w});
        return ps;
    }
    int64_t r0 = h, r1 = -1, c0 = w, c1 = -1;
    for (int64_t p : pix) {
        r0 = std::min(r0, p / w);
        r1 = std::max(r1, p / w);
        c0 = std::min(c0, p % w);
        c1 = std::max(c1, p % w);
    }
    if (train) {
        double hgt = static_cast<double>(r1 - r0 + 1), wid = static_cast<double>(c1 - c0 + 1);
        r0 -= std::llround(rng.uniform() * 0.05 * hgt);
        r1 += std::llround(rng.uniform() * 0.05 * hgt);
        c0 -= std::llround(rng.uniform() * 0.05 * wid);
        c1 += std::llround(rng.uniform() * 0.05 * wid);
        r0 = std::max<int64_t>(0, r0);
        c0 = std::max<int64_t>(0, c0);
        r1 = std::min(h - 1, r1);
        c1 = std::min(w - 1, c1);
    }
    ps.set_box(r0, c0, r1, c1);
    return ps;
}

/// Pick one correction point: larger error set (tie -> false negatives), its
/// largest connected component, a uniform pixel inside it.
inline Correction sample_correction(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& truth,
                                    int64_t h, int64_t w, Rng& rng) {
    require(pred.size() == truth.size() && pred.size() == static_cast<size_t>(h * w),
            "sample_correction: shape mismatch");
    std::vector<uint8_t> fn(pred.size()), fp(pred.size());
    int64_t n_fn = 0, n_fp = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        fn[i] = truth[i] && !pred[i];
        fp[i] = pred[i] && !truth[i];
        n_fn += fn[i];
        n_fp += fp[i];
    }
    Correction corr;
    if (n_fn == 0 && n_fp == 0) return corr;  // no-op
    bool positive = n_fn >= n_fp;
    const auto& err = positive ? fn : fp;
    auto [labels, count] = connected_components(err, h, w);
    std::vector<int64_t> area(count + 1, 0);
    for (uint32_t l : labels)
        if (l) ++area[l];
    uint32_t best = 1;
    for (uint32_t l = 2; l <= count; ++l)
        if (area[l] > area[best]) best = l;
    std::vector<int64_t> pix;
    for (size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == best) pix.push_back(static_cast<int64_t>(i));
    int64_t i = pix[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(pix.size())))];
    corr.none = false;
    corr.positive = positive;
    corr.r = i / w;
    corr.c = i % w;
    return corr;
}

inline void apply_correction(PromptSet& ps, const Correction& corr) {
    if (corr.none) return;
    if (corr.positive)
        ps.positive_points.push_back({corr.r, corr.c});
    else
        ps.negative_points.push_back({corr.r, corr.c});
}

// ---------------------------------------------------------------------------
// training step
// ---------------------------------------------------------------------------

template <class T>
TensorPtr<T> image_tensor(const Sample& s) {
    auto t = make_tensor<T>(Shape{1, s.h, s.w});
    for (size_t i = 0; i < s.image.size(); ++i) t->data[i] = static_cast<T>(s.image[i]);
    return t;
}

template <class T>
std::vector<uint8_t> object_mask(const InstanceMap& m, uint32_t label) {
    std::vector<uint8_t> mask(m.labels.size());
    for (size_t i = 0; i < mask.size(); ++i) mask[i] = m.labels[i] == label;
    return mask;
}

template <class T>
TensorPtr<T> mask_tensor(const std::vector<uint8_t>& mask, int64_t h, int64_t w) {
    auto t = make_tensor<T>(Shape{h, w});
    for (size_t i = 0; i < mask.size(); ++i) t->data[i] = static_cast<T>(mask[i]);
    return t;
}

/// Dice loss for already-sigmoided probabilities.
template <class T>
TensorPtr<T> dice_prob_loss(Tape<T>& tp, const TensorPtr<T>& p, const TensorPtr<T>& target) {
    auto num = scale(tp, sum_all(tp, mul(tp, p, target)), T(2));
    auto den = add_const(tp, add(tp, sum_all(tp, p), sum_all(tp, target)), T(1e-6));
    return add_const(tp, scale(tp, div(tp, num, den), T(-1)), T(1));
}

template <class T>
std::vector<uint8_t> binarize_logits(const TensorPtr<T>& logits) {
    std::vector<uint8_t> m(logits->data.size());
    for (size_t i = 0; i < m.size(); ++i) m[i] = logits->data[i] > T(0);
    return m;
}

namespace detail {

template <class T>
TensorPtr<T> mean_of(Tape<T>& tp, const std::vector<TensorPtr<T>>& terms) {
    auto acc = terms[0];
    for (size_t i = 1; i < terms.size(); ++i) acc = add(tp, acc, terms[i]);
    return scale(tp, acc, static_cast<T>(1.0 / static_cast<double>(terms.size())));
}

inline std::vector<uint32_t> instance_ids(const InstanceMap& m) {
    std::set<uint32_t> ids(m.labels.begin(), m.labels.end());
    ids.erase(0);
    return {ids.begin(), ids.end()};
}

}  // namespace detail

/// One optimizer step over a batch: per object, an initial prompt (point or
/// box, 50/50) plus iterative corrections; loss is the mean over iterations
/// and objects of dice + BCE on mask logits, plus the instance-head targets
/// when requested. Returns the scalar loss.
template <class T>
double interactive_training_step(SamModel<T>& model, Adam<T>& opt, const std::vector<const Sample*>& batch,
                                 const TrainConfig& tc, bool train_instance_head, Rng& rng) {
    tc.validate();
    Tape<T> tp;
    tp.training = true;
    tp.dropout_rng = &rng;
    std::vector<TensorPtr<T>> mask_terms, inst_terms;
    for (const Sample* s : batch) {
        auto ids = detail::instance_ids(s->instances);
        if (ids.empty()) {
            std::fprintf(stderr, "warning: skipping image without any object\n");
            continue;
        }
        auto img = image_tensor<T>(*s);
        auto feat = model.encode_image(tp, img);
        // sample objects uniformly without replacement
        for (int64_t k = static_cast<int64_t>(ids.size()) - 1; k > 0; --k)
            std::swap(ids[static_cast<size_t>(k)],
                      ids[static_cast<size_t>(rng.uniform_int(k + 1))]);
        int64_t n_obj = std::min<int64_t>(tc.objects_per_image, static_cast<int64_t>(ids.size()));
        for (int64_t oi = 0; oi < n_obj; ++oi) {
            auto truth = object_mask<T>(s->instances, ids[static_cast<size_t>(oi)]);
            auto target = mask_tensor<T>(truth, s->h, s->w);
            StartKind kind = rng.uniform() < 0.5 ? StartKind::point : StartKind::box;
            auto ps = sample_initial_prompt(truth, s->h, s->w, kind, /*train=*/true, rng);
            TensorPtr<T> logits, loss_it;
            for (int64_t it = 0; it <= tc.correction_iterations; ++it) {
                bool recompute = true;
                if (it > 0) {
                    auto corr = sample_correction(binarize_logits(logits), truth, s->h, s->w, rng);
                    if (corr.none)
                        recompute = false;  // prompts unchanged; reuse the iteration loss
                    else
                        apply_correction(ps, corr);
                }
                if (recompute) {
                    logits = model.decode_mask(tp, feat, ps);
                    loss_it = add(tp, dice_loss(tp, logits, target),
                                  bce_with_logits(tp, logits, target));
                }
                mask_terms.push_back(loss_it);
            }
        }
        if (train_instance_head) {
            auto pred = model.instance_forward(tp, feat);
            auto channel = [&](int64_t c) { return slice(tp, pred, 0, c, 1); };
            auto tgt = [&](const std::vector<float>& v) {
                auto t = make_tensor<T>(Shape{1, s->h, s->w});
                for (size_t i = 0; i < v.size(); ++i) t->data[i] = static_cast<T>(v[i]);
                return t;
            };
            auto mse = [&](const TensorPtr<T>& p, const TensorPtr<T>& q) {
                auto d = sub(tp, p, q);
                return mean_all(tp, mul(tp, d, d));
            };
            auto term = add(tp, mse(channel(0), tgt(s->targets.center)),
                            mse(channel(1), tgt(s->targets.boundary)));
            term = add(tp, term, dice_prob_loss(tp, channel(2), tgt(s->targets.foreground)));
            inst_terms.push_back(term);
        }
    }
    require(!mask_terms.empty(), "interactive_training_step: batch contained no objects");
    auto total = detail::mean_of(tp, mask_terms);
    if (!inst_terms.empty()) total = add(tp, total, detail::mean_of(tp, inst_terms));
    tp.backward(total);
    ParamList<T> params;
    model.collect_params(params);
    opt.step(params);
    return static_cast<double>(total->data[0]);
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct EvalRecord {
    int64_t image_id = 0, object_id = 0;
    std::string start;
    std::vector<double> metrics;  // iterations 0..7
    uint64_t seed = 0;
};

struct EvalResult {
    std::vector<EvalRecord> records;
    double start_mean = 0;  // iteration 0
    double final_mean = 0;  // last iteration (I_P / I_B)
};

inline double object_metric(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& truth,
                            int64_t h, int64_t w, EvalMetric metric) {
    if (metric == EvalMetric::dice) {
        std::vector<float> p(pred.begin(), pred.end()), t(truth.begin(), truth.end());
        return dice(p, t);
    }
    InstanceMap pm(h, w), tm(h, w);
    for (size_t i = 0; i < pred.size(); ++i) {
        pm.labels[i] = pred[i];
        tm.labels[i] = truth[i];
    }
    return mean_segmentation_accuracy(pm, tm);
}

/// `predict(image_index, prompts)` -> binary mask (h*w u8). Deterministic for
/// a fixed seed; initial prompts use the eval rules (center point / tight box).
template <class Predict>
EvalResult evaluate_interactive(Predict&& predict, const std::vector<Sample>& data, StartKind start,
                                EvalMetric metric, uint64_t seed, int64_t iterations = 7) {
    EvalResult res;
    Rng master(seed);
    bool any = false;
    for (size_t ii = 0; ii < data.size(); ++ii) {
        const Sample& s = data[ii];
        for (uint32_t id : detail::instance_ids(s.instances)) {
            any = true;
            uint64_t salt = ii * 1000003ull + id * 131ull + (start == StartKind::box ? 1 : 0);
            Rng rng = master.fork(salt);
            auto truth = object_mask<float>(s.instances, id);
            auto ps = sample_initial_prompt(truth, s.h, s.w, start, /*train=*/false, rng);
            EvalRecord rec;
            rec.image_id = static_cast<int64_t>(ii);
            rec.object_id = static_cast<int64_t>(id);
            rec.start = start_name(start);
            rec.seed = salt;
            std::vector<uint8_t> pred;
            for (int64_t it = 0; it <= iterations; ++it) {
                bool stale = false;
                if (it > 0) {
                    auto corr = sample_correction(pred, truth, s.h, s.w, rng);
                    if (corr.none)
                        stale = true;
                    else
                        apply_correction(ps, corr);
                }
                if (!stale)
                    pred = predict(ii, ps);
                rec.metrics.push_back(object_metric(pred, truth, s.h, s.w, metric));
            }
            res.records.push_back(std::move(rec));
        }
    }
    require(any, "evaluate_interactive: dataset has no annotations");
    for (const auto& r : res.records) {
        res.start_mean += r.metrics.front();
        res.final_mean += r.metrics.back();
    }
    res.start_mean /= static_cast<double>(res.records.size());
    res.final_mean /= static_cast<double>(res.records.size());
    return res;
}

/// Prediction closure over a real model; the image encoding is cached while
/// consecutive calls stay on the same image.
template <class T>
struct ModelPredictor {
    const SamModel<T>& model;
    const std::vector<Sample>& data;
    std::shared_ptr<Tape<T>> tape;
    TensorPtr<T> features;
    size_t cached = SIZE_MAX;

    ModelPredictor(const SamModel<T>& m, const std::vector<Sample>& d) : model(m), data(d) {}

    std::vector<uint8_t> operator()(size_t image_index, const PromptSet& ps) {
        if (image_index != cached) {
            tape = std::make_shared<Tape<T>>();
            features = model.encode_image(*tape, image_tensor<T>(data[image_index]));
            cached = image_index;
        }
        Tape<T> tp;
        // decode on a fresh tape against detached features
        auto feat = make_tensor<T>(features->shape);
        feat->data = features->data;
        auto logits = model.decode_mask(tp, feat, ps);
        return binarize_logits(logits);
    }
};

}  // namespace peftsam
