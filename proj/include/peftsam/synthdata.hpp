#pragma once

#include <filesystem>

#include <json.hpp>

#include "peftsam/instanceseg.hpp"

namespace peftsam {

namespace fs = std::filesystem;

struct GenSpec {
    int64_t image_size = 128;
    int64_t n_train = 2, n_val = 1, n_test = 1;
    int64_t min_instances = 3, max_instances = 8;
    int64_t min_radius = 4, max_radius = 12;
    double contrast = 0.4;       // minimum intensity above background
    double noise_sigma = 0.05;
    bool overlap_allowed = false;
    uint64_t seed = 0;

    void validate() const {
        require(image_size > 0 && n_train >= 0 && n_val >= 0 && n_test >= 0, "GenSpec: sizes must be non-negative");
        require(min_instances >= 1 && max_instances >= min_instances, "GenSpec: bad instance range");
        require(min_radius >= 1 && max_radius >= min_radius, "GenSpec: bad radius range");
        require(max_radius < image_size / 2, "GenSpec: max radius must be < image_size/2");
        require(contrast > 0 && contrast <= 1, "GenSpec: contrast must be in (0,1]");
    }
};

struct DatasetPair {
    std::string image_file;
    std::string label_file;
};

struct DatasetManifest {
    int format_version = 1;
    std::string task = "instance";  // instance | semantic
    std::string metric = "msa";     // msa | dice
    std::map<std::string, std::vector<DatasetPair>> splits;  // train/val/test
    fs::path base_dir;
};

struct Sample {
    std::vector<float> image;  // (H*W) in [0,1]
    int64_t h = 0, w = 0;
    InstanceMap instances;
    DistanceTargets targets;   // derived once at load
};

// ---------------------------------------------------------------------------
// generation
// ---------------------------------------------------------------------------

namespace detail {

struct Ellipse {
    double cy, cx, a, b, cos_t, sin_t;
    bool contains(double y, double x) const {
        double dy = y - cy, dx = x - cx;
        double u = dx * cos_t + dy * sin_t;
        double v = -dx * sin_t + dy * cos_t;
        return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
    }
    bool overlaps(const Ellipse& o) const {
        double d = std::hypot(cy - o.cy, cx - o.cx);
        return d < std::max(a, b) + std::max(o.a, o.b);
    }
};

inline void render_image(const GenSpec& spec, Rng& rng, int64_t image_index, std::vector<float>& img,
                         InstanceMap& lab) {
    int64_t n = spec.image_size;
    img.assign(static_cast<size_t>(n * n), 0.f);
    lab = InstanceMap(n, n);
    int64_t count = spec.min_instances + rng.uniform_int(spec.max_instances - spec.min_instances + 1);
    std::vector<Ellipse> placed;
    for (int64_t inst = 0; inst < count; ++inst) {
        Ellipse e{};
        bool ok = false;
        for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
            e.a = rng.uniform(static_cast<double>(spec.min_radius), static_cast<double>(spec.max_radius));
            e.b = rng.uniform(static_cast<double>(spec.min_radius), static_cast<double>(spec.max_radius));
            double margin = std::max(e.a, e.b) + 1;
            e.cy = rng.uniform(margin, static_cast<double>(n) - margin);
            e.cx = rng.uniform(margin, static_cast<double>(n) - margin);
            double th = rng.uniform(0.0, 3.141592653589793);
            e.cos_t = std::cos(th);
            e.sin_t = std::sin(th);
            ok = spec.overlap_allowed;
            if (!ok) {
                ok = true;
                for (const auto& p : placed)
                    if (e.overlaps(p)) {
                        ok = false;
                        break;
                    }
            }
        }
        if (!ok)
            fail("generate: infeasible packing for image " + std::to_string(image_index) +
                 " after 1000 rejection attempts");
        placed.push_back(e);
        double intensity = spec.contrast + rng.uniform() * (1.0 - spec.contrast);
        uint32_t label = static_cast<uint32_t>(inst + 1);
        int64_t y0 = std::max<int64_t>(0, static_cast<int64_t>(e.cy - std::max(e.a, e.b)) - 1);
        int64_t y1 = std::min(n - 1, static_cast<int64_t>(e.cy + std::max(e.a, e.b)) + 1);
        int64_t x0 = std::max<int64_t>(0, static_cast<int64_t>(e.cx - std::max(e.a, e.b)) - 1);
        int64_t x1 = std::min(n - 1, static_cast<int64_t>(e.cx + std::max(e.a, e.b)) + 1);
        for (int64_t y = y0; y <= y1; ++y)
            for (int64_t x = x0; x <= x1; ++x)
                if (e.contains(static_cast<double>(y), static_cast<double>(x))) {
                    img[static_cast<size_t>(y * n + x)] = static_cast<float>(intensity);
                    lab.at(y, x) = label;  // later blobs overwrite earlier
                }
    }
    for (auto& v : img) v += static_cast<float>(rng.normal(0.0, spec.noise_sigma));
}

}  // namespace detail

inline DatasetManifest generate(const GenSpec& spec, const fs::path& out_dir) {
    spec.validate();
    fs::create_directories(out_dir);
    DatasetManifest man;
    man.base_dir = out_dir;
    const std::pair<const char*, int64_t> split_defs[3] = {
        {"train", spec.n_train}, {"val", spec.n_val}, {"test", spec.n_test}};
    uint64_t split_salt = 0;
    for (auto& [split, count] : split_defs) {
        ++split_salt;
        for (int64_t i = 0; i < count; ++i) {
            Rng rng = Rng(spec.seed).fork(split_salt * 1000003ull + static_cast<uint64_t>(i));
            std::vector<float> img;
            InstanceMap lab;
            detail::render_image(spec, rng, i, img, lab);
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%s_%03lld", split, static_cast<long long>(i));
            std::string stem = buf;
            npa1_save((out_dir / (stem + "_img.npa")).string(),
                      raw_from_f32({spec.image_size, spec.image_size}, img.data(), static_cast<int64_t>(img.size())));
            npa1_save((out_dir / (stem + "_lab.npa")).string(), lab.to_raw());
            man.splits[split].push_back({stem + "_img.npa", stem + "_lab.npa"});
        }
    }
    // manifest.json with stable key order
    nlohmann::ordered_json j;
    j["format_version"] = man.format_version;
    j["task"] = man.task;
    j["metric"] = man.metric;
    nlohmann::ordered_json js;
    for (const char* split : {"train", "val", "test"}) {
        nlohmann::ordered_json arr = nlohmann::ordered_json::array();
        for (auto& p : man.splits[split]) arr.push_back({{"image", p.image_file}, {"label", p.label_file}});
        js[split] = arr;
    }
    j["splits"] = js;
    std::ofstream os(out_dir / "manifest.json");
    os << j.dump(2) << "\n";
    require(os.good(), "generate: cannot write manifest");
    return man;
}

// ---------------------------------------------------------------------------
// loading
// ---------------------------------------------------------------------------

inline DatasetManifest load_manifest(const fs::path& manifest_path) {
    std::ifstream is(manifest_path);
    require(is.good(), "load: cannot open manifest " + manifest_path.string());
    nlohmann::json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        fail("load: corrupt manifest " + manifest_path.string() + ": " + e.what());
    }
    DatasetManifest man;
    man.base_dir = manifest_path.parent_path();
    man.format_version = j.value("format_version", 1);
    man.task = j.value("task", "instance");
    man.metric = j.value("metric", "msa");
    for (auto& [split, arr] : j.at("splits").items())
        for (auto& p : arr) {
            DatasetPair dp{p.at("image").get<std::string>(), p.at("label").get<std::string>()};
            require(fs::exists(man.base_dir / dp.image_file), "load: missing file " + dp.image_file);
            require(fs::exists(man.base_dir / dp.label_file), "load: missing file " + dp.label_file);
            man.splits[split].push_back(dp);
        }
    return man;
}

inline Sample load_sample(const DatasetManifest& man, const DatasetPair& pair, bool derive = true) {
    Sample s;
    auto img = npa1_load((man.base_dir / pair.image_file).string());
    require(img.dtype == Dtype::F32 && img.shape.size() == 2,
            "load: expected 2-d f32 image in " + pair.image_file);
    s.h = img.shape[0];
    s.w = img.shape[1];
    s.image = raw_to_f32(img);
    // min-max normalize to [0,1]
    float lo = s.image.empty() ? 0.f : s.image[0], hi = lo;
    for (float v : s.image) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi > lo)
        for (auto& v : s.image) v = (v - lo) / (hi - lo);
    auto lab = npa1_load((man.base_dir / pair.label_file).string());
    s.instances = InstanceMap::from_raw(lab);
    require(s.instances.h == s.h && s.instances.w == s.w,
            "load: image/label shape mismatch for " + pair.image_file);
    if (derive) s.targets = derive_targets(s.instances);
    return s;
}

inline std::vector<Sample> load_split(const DatasetManifest& man, const std::string& split, bool derive = true) {
    std::vector<Sample> out;
    auto it = man.splits.find(split);
    if (it == man.splits.end()) return out;
    for (auto& p : it->second) out.push_back(load_sample(man, p, derive));
    return out;
}

}  // namespace peftsam
