#pragma once

#include <map>
#include <queue>
#include <tuple>

#include "peftsam/tensor.hpp"

namespace peftsam {

/// 2-d instance labeling; 0 is background, labels need not be contiguous.
struct InstanceMap {
    int64_t h = 0, w = 0;
    std::vector<uint32_t> labels;

    InstanceMap() = default;
    InstanceMap(int64_t h_, int64_t w_) : h(h_), w(w_), labels(static_cast<size_t>(h_ * w_), 0) {}

    uint32_t at(int64_t y, int64_t x) const { return labels[static_cast<size_t>(y * w + x)]; }
    uint32_t& at(int64_t y, int64_t x) { return labels[static_cast<size_t>(y * w + x)]; }
    int64_t size() const { return h * w; }

    RawTensor to_raw() const { return raw_from_u32({h, w}, labels); }
    static InstanceMap from_raw(const RawTensor& t) {
        require(t.dtype == Dtype::U32 && t.shape.size() == 2, "InstanceMap: expected 2-d u32 NPA1 array");
        InstanceMap m(t.shape[0], t.shape[1]);
        m.labels = raw_to_u32(t);
        return m;
    }
};

/// Three image-shaped channels: center distance, boundary distance, foreground.
/// Used both for training targets (derived from annotations) and for decoded
/// model predictions.
struct DistanceTargets {
    int64_t h = 0, w = 0;
    std::vector<float> center, boundary, foreground;

    DistanceTargets() = default;
    DistanceTargets(int64_t h_, int64_t w_)
        : h(h_), w(w_),
          center(static_cast<size_t>(h_ * w_), 0.f),
          boundary(static_cast<size_t>(h_ * w_), 0.f),
          foreground(static_cast<size_t>(h_ * w_), 0.f) {}
};

using InstanceHeadOutput = DistanceTargets;

// ---------------------------------------------------------------------------
// connected components (4-connectivity)
// ---------------------------------------------------------------------------

inline std::pair<std::vector<uint32_t>, uint32_t> connected_components(const std::vector<uint8_t>& mask,
                                                                       int64_t h, int64_t w) {
    std::vector<uint32_t> labels(static_cast<size_t>(h * w), 0);
    uint32_t next = 0;
    std::vector<int64_t> stack;
    for (int64_t i = 0; i < h * w; ++i) {
        if (!mask[static_cast<size_t>(i)] || labels[static_cast<size_t>(i)]) continue;
        ++next;
        stack.push_back(i);
        labels[static_cast<size_t>(i)] = next;
        while (!stack.empty()) {
            int64_t p = stack.back();
            stack.pop_back();
            int64_t y = p / w, x = p % w;
            const int64_t dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
            for (int k = 0; k < 4; ++k) {
                int64_t ny = y + dy[k], nx = x + dx[k];
                if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                int64_t q = ny * w + nx;
                if (mask[static_cast<size_t>(q)] && !labels[static_cast<size_t>(q)]) {
                    labels[static_cast<size_t>(q)] = next;
                    stack.push_back(q);
                }
            }
        }
    }
    return {labels, next};
}

/// Exact Euclidean distance from each mask pixel to the nearest non-mask pixel
/// (pixels outside the image border count as non-mask). Non-mask pixels get 0.
inline std::vector<double> distance_to_outside(const std::vector<uint8_t>& mask, int64_t h, int64_t w) {
    std::vector<double> dist(static_cast<size_t>(h * w), 0.0);
    // candidate set: non-mask pixels adjacent (8-conn) to the mask, plus
    // virtual pixels just beyond the image border
    std::vector<std::pair<double, double>> cand;
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            if (mask[static_cast<size_t>(y * w + x)]) continue;
            bool near = false;
            for (int64_t dy = -1; dy <= 1 && !near; ++dy)
                for (int64_t dx = -1; dx <= 1 && !near; ++dx) {
                    int64_t ny = y + dy, nx = x + dx;
                    if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                    if (mask[static_cast<size_t>(ny * w + nx)]) near = true;
                }
            if (near) cand.emplace_back(static_cast<double>(y), static_cast<double>(x));
        }
    for (int64_t x = 0; x < w; ++x) {
        if (mask[static_cast<size_t>(x)]) cand.emplace_back(-1.0, static_cast<double>(x));
        if (mask[static_cast<size_t>((h - 1) * w + x)]) cand.emplace_back(static_cast<double>(h), static_cast<double>(x));
    }
    for (int64_t y = 0; y < h; ++y) {
        if (mask[static_cast<size_t>(y * w)]) cand.emplace_back(static_cast<double>(y), -1.0);
        if (mask[static_cast<size_t>(y * w + w - 1)]) cand.emplace_back(static_cast<double>(y), static_cast<double>(w));
    }
    for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
            if (!mask[static_cast<size_t>(y * w + x)]) continue;
            double best = 1e300;
            for (auto& [cy, cx] : cand) {
                double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
                best = std::min(best, dy * dy + dx * dx);
            }
            dist[static_cast<size_t>(y * w + x)] = cand.empty() ? 1e300 : std::sqrt(best);
        }
    return dist;
}

// ---------------------------------------------------------------------------
// target derivation
// ---------------------------------------------------------------------------

inline DistanceTargets derive_targets(const InstanceMap& inst) {
    DistanceTargets t(inst.h, inst.w);
    std::map<uint32_t, std::vector<int64_t>> pixels;
    for (int64_t i = 0; i < inst.size(); ++i) {
        uint32_t l = inst.labels[static_cast<size_t>(i)];
        if (l) {
            pixels[l].push_back(i);
            t.foreground[static_cast<size_t>(i)] = 1.f;
        }
    }
    for (auto& [label, pix] : pixels) {
        std::vector<uint8_t> mask(static_cast<size_t>(inst.size()), 0);
        for (int64_t i : pix) mask[static_cast<size_t>(i)] = 1;

        // boundary distance: distance to non-instance minus one, so pixels on
        // the instance rim sit at 0; degenerate (thin) instances get 1
        auto dist = distance_to_outside(mask, inst.h, inst.w);
        double dmax = 0;
        for (int64_t i : pix) dmax = std::max(dmax, dist[static_cast<size_t>(i)] - 1.0);
        for (int64_t i : pix) {
            double v = dmax > 0 ? std::max(0.0, dist[static_cast<size_t>(i)] - 1.0) / dmax : 1.0;
            t.boundary[static_cast<size_t>(i)] = static_cast<float>(v);
        }

        // center distance: 1 at the pixel nearest the centroid, 0 at the
        // farthest pixel
        double cy = 0, cx = 0;
        for (int64_t i : pix) {
            cy += static_cast<double>(i / inst.w);
            cx += static_cast<double>(i % inst.w);
        }
        cy /= static_cast<double>(pix.size());
        cx /= static_cast<double>(pix.size());
        double dmin = 1e300, dmx = 0;
        std::vector<double> cd(pix.size());
        for (size_t k = 0; k < pix.size(); ++k) {
            double dy = static_cast<double>(pix[k] / inst.w) - cy;
            double dx = static_cast<double>(pix[k] % inst.w) - cx;
            cd[k] = std::sqrt(dy * dy + dx * dx);
            dmin = std::min(dmin, cd[k]);
            dmx = std::max(dmx, cd[k]);
        }
        for (size_t k = 0; k < pix.size(); ++k) {
            double v = dmx > dmin ? 1.0 - (cd[k] - dmin) / (dmx - dmin) : 1.0;
            t.center[static_cast<size_t>(pix[k])] = static_cast<float>(v);
        }
    }
    return t;
}

// ---------------------------------------------------------------------------
// seeded watershed
// ---------------------------------------------------------------------------

inline InstanceMap watershed_decode(const InstanceHeadOutput& pred, double tau_center = 0.5,
                                    double tau_fg = 0.5) {
    require(pred.center.size() == pred.boundary.size() && pred.center.size() == pred.foreground.size() &&
                static_cast<int64_t>(pred.center.size()) == pred.h * pred.w,
            "watershed_decode: channel shape mismatch");
    int64_t h = pred.h, w = pred.w;
    std::vector<uint8_t> mask(static_cast<size_t>(h * w));
    for (int64_t i = 0; i < h * w; ++i) mask[static_cast<size_t>(i)] = pred.foreground[static_cast<size_t>(i)] > tau_fg;
    std::vector<uint8_t> seed_mask(static_cast<size_t>(h * w));
    for (int64_t i = 0; i < h * w; ++i)
        seed_mask[static_cast<size_t>(i)] = mask[static_cast<size_t>(i)] && pred.center[static_cast<size_t>(i)] > tau_center;
    auto [seeds, nseeds] = connected_components(seed_mask, h, w);

    InstanceMap out(h, w);
    // priority flood over elevation 1 - boundary_distance, restricted to mask;
    // ties broken by insertion order (seeds pushed in row-major order)
    using Item = std::tuple<double, int64_t, int64_t, uint32_t>;  // elev, counter, pixel, label
    auto cmp = [](const Item& a, const Item& b) { return a > b; };
    std::priority_queue<Item, std::vector<Item>, decltype(cmp)> heap(cmp);
    int64_t counter = 0;
    auto elev = [&](int64_t i) { return 1.0 - static_cast<double>(pred.boundary[static_cast<size_t>(i)]); };
    const int64_t dy4[4] = {-1, 1, 0, 0}, dx4[4] = {0, 0, -1, 1};
    // seed pixels are labeled up front; flooding grows outward from them
    for (int64_t i = 0; i < h * w; ++i)
        if (seeds[static_cast<size_t>(i)]) out.labels[static_cast<size_t>(i)] = seeds[static_cast<size_t>(i)];
    for (int64_t i = 0; i < h * w; ++i) {
        if (!seeds[static_cast<size_t>(i)]) continue;
        int64_t y = i / w, x = i % w;
        for (int k = 0; k < 4; ++k) {
            int64_t ny = y + dy4[k], nx = x + dx4[k];
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            int64_t q = ny * w + nx;
            if (mask[static_cast<size_t>(q)] && !out.labels[static_cast<size_t>(q)])
                heap.emplace(elev(q), counter++, q, seeds[static_cast<size_t>(i)]);
        }
    }
    (void)nseeds;
    while (!heap.empty()) {
        auto [e, c, p, label] = heap.top();
        heap.pop();
        if (out.labels[static_cast<size_t>(p)]) continue;
        out.labels[static_cast<size_t>(p)] = label;
        int64_t y = p / w, x = p % w;
        const int64_t dy[4] = {-1, 1, 0, 0}, dx[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
            int64_t ny = y + dy[k], nx = x + dx[k];
            if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
            int64_t q = ny * w + nx;
            if (mask[static_cast<size_t>(q)] && !out.labels[static_cast<size_t>(q)])
                heap.emplace(elev(q), counter++, q, label);
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// metrics (mean segmentation accuracy, dice)
// ---------------------------------------------------------------------------

inline double mean_segmentation_accuracy(const InstanceMap& pred, const InstanceMap& truth) {
    require(pred.h == truth.h && pred.w == truth.w, "mean_segmentation_accuracy: shape mismatch");
    std::map<uint32_t, int64_t> parea, tarea;
    std::map<std::pair<uint32_t, uint32_t>, int64_t> inter;
    for (int64_t i = 0; i < pred.size(); ++i) {
        uint32_t p = pred.labels[static_cast<size_t>(i)];
        uint32_t t = truth.labels[static_cast<size_t>(i)];
        if (p) parea[p]++;
        if (t) tarea[t]++;
        if (p && t) inter[{p, t}]++;
    }
    int64_t np = static_cast<int64_t>(parea.size());
    int64_t nt = static_cast<int64_t>(tarea.size());
    if (np == 0 && nt == 0) return 1.0;
    if (np == 0 || nt == 0) return 0.0;
    // IoU per overlapping pair, sorted descending for greedy unique matching
    std::vector<std::tuple<double, uint32_t, uint32_t>> ious;
    for (auto& [pt, ov] : inter) {
        double u = static_cast<double>(parea[pt.first] + tarea[pt.second] - ov);
        ious.emplace_back(static_cast<double>(ov) / u, pt.first, pt.second);
    }
    std::sort(ious.begin(), ious.end(), [](auto& a, auto& b) { return std::get<0>(a) > std::get<0>(b); });
    double score = 0;
    for (int ti = 0; ti < 10; ++ti) {
        double t = 0.5 + 0.05 * ti;
        std::map<uint32_t, bool> pused, tused;
        int64_t tp = 0;
        for (auto& [iou, pl, tl] : ious) {
            if (iou <= t) break;  // strict inequality
            if (pused[pl] || tused[tl]) continue;
            pused[pl] = tused[tl] = true;
            ++tp;
        }
        score += static_cast<double>(tp) / static_cast<double>(tp + (np - tp) + (nt - tp));
    }
    return score / 10.0;
}

/// Dice coefficient 2*sum(p*t) / (sum(p) + sum(t)); empty/empty is 1.
inline double dice(const std::vector<float>& pred, const std::vector<float>& truth) {
    require(pred.size() == truth.size(), "dice: shape mismatch");
    double num = 0, sp = 0, st = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        num += static_cast<double>(pred[i]) * static_cast<double>(truth[i]);
        sp += pred[i];
        st += truth[i];
    }
    if (sp + st == 0) return 1.0;
    return 2.0 * num / (sp + st);
}

}  // namespace peftsam
