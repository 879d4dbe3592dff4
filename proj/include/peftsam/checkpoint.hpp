#pragma once

#include "peftsam/interactive.hpp"

namespace peftsam {

/// PSAMCKPT container: magic, version u32 LE, header_len u64 LE, JSON header
/// (config echo + tensor index + quantization metadata), raw payload.
/// save -> load -> save is byte-idempotent.
inline constexpr uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& s, uint32_t v) {
    for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& s, uint64_t v) {
    for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <class T>
void quant_entries(const SamModel<T>& model,
                   std::vector<std::pair<std::string, const QuantizedLinear<T>*>>& out) {
    for (size_t i = 0; i < model.encoder.blocks.size(); ++i) {
        const auto& ad = model.encoder.blocks[i].ad;
        std::string p = "enc.block" + std::to_string(i) + ".";
        if (ad.q_qkv) out.push_back({p + "qkv.w", ad.q_qkv.get()});
        if (ad.q_proj) out.push_back({p + "proj.w", ad.q_proj.get()});
        if (ad.q_fc1) out.push_back({p + "fc1.w", ad.q_fc1.get()});
        if (ad.q_fc2) out.push_back({p + "fc2.w", ad.q_fc2.get()});
    }
}

}  // namespace detail

template <class T>
void save_checkpoint(const fs::path& path, const SamModel<T>& model, const nlohmann::ordered_json& config) {
    ParamList<T> params;
    model.collect_params(params);
    std::vector<std::pair<std::string, const QuantizedLinear<T>*>> quants;
    detail::quant_entries(model, quants);

    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    uint64_t offset = 0;
    for (const auto& p : params) {
        uint64_t len = static_cast<uint64_t>(p.t->data.size() * sizeof(float));
        tensors.push_back({{"name", p.name},
                           {"dtype", "f32"},
                           {"shape", p.t->shape},
                           {"offset", offset},
                           {"length", len},
                           {"trainable", p.t->requires_grad}});
        offset += len;
    }
    nlohmann::ordered_json quant = nlohmann::ordered_json::array();
    for (const auto& [name, q] : quants) {
        uint64_t clen = static_cast<uint64_t>(q->packed.size());
        uint64_t slen = static_cast<uint64_t>(q->scales.size() * sizeof(float));
        quant.push_back({{"name", name},
                         {"shape", q->shape},
                         {"block", q->block},
                         {"codes_offset", offset},
                         {"codes_length", clen},
                         {"scales_offset", offset + clen},
                         {"scales_length", slen}});
        offset += clen + slen;
    }
    nlohmann::ordered_json header;
    header["config"] = config;
    header["tensors"] = tensors;
    header["quant"] = quant;
    std::string hs = header.dump();

    std::string out;
    out += "PSAMCKPT";
    detail::put_u32(out, kCheckpointVersion);
    detail::put_u64(out, static_cast<uint64_t>(hs.size()));
    out += hs;
    for (const auto& p : params)
        for (T v : p.t->data) {
            float f = static_cast<float>(v);
            out.append(reinterpret_cast<const char*>(&f), sizeof(float));
        }
    for (const auto& [name, q] : quants) {
        out.append(reinterpret_cast<const char*>(q->packed.data()), q->packed.size());
        out.append(reinterpret_cast<const char*>(q->scales.data()), q->scales.size() * sizeof(float));
    }
    std::ofstream os(path, std::ios::binary);
    require(os.good(), "save_checkpoint: cannot open " + path.string());
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    require(os.good(), "save_checkpoint: write failed for " + path.string());
}

struct CheckpointFile {
    nlohmann::ordered_json header;
    std::string payload;  // bytes after the header
};

inline CheckpointFile read_checkpoint(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "read_checkpoint: cannot open " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    require(bytes.size() >= 20 && bytes.compare(0, 8, "PSAMCKPT") == 0,
            "read_checkpoint: bad magic in " + path.string());
    uint32_t version = 0;
    for (int i = 0; i < 4; ++i) version |= static_cast<uint32_t>(static_cast<uint8_t>(bytes[8 + i])) << (8 * i);
    require(version == kCheckpointVersion,
            "read_checkpoint: unsupported version " + std::to_string(version));
    uint64_t hlen = 0;
    for (int i = 0; i < 8; ++i) hlen |= static_cast<uint64_t>(static_cast<uint8_t>(bytes[12 + i])) << (8 * i);
    require(20 + hlen <= bytes.size(), "read_checkpoint: truncated header in " + path.string());
    CheckpointFile f;
    try {
        f.header = nlohmann::ordered_json::parse(bytes.substr(20, hlen));
    } catch (const std::exception& e) {
        fail("read_checkpoint: corrupt header: " + std::string(e.what()));
    }
    f.payload = bytes.substr(20 + hlen);
    // index sanity: offsets within payload and non-overlapping (entries are
    // emitted back to back, so checking contiguity is exact)
    uint64_t expect = 0;
    for (const auto& t : f.header.at("tensors")) {
        require(t.at("offset").get<uint64_t>() == expect, "read_checkpoint: tensor offsets not contiguous");
        expect += t.at("length").get<uint64_t>();
    }
    for (const auto& q : f.header.at("quant")) {
        require(q.at("codes_offset").get<uint64_t>() == expect, "read_checkpoint: quant offsets not contiguous");
        expect += q.at("codes_length").get<uint64_t>() + q.at("scales_length").get<uint64_t>();
    }
    require(expect == f.payload.size(), "read_checkpoint: payload size mismatch in " + path.string());
    return f;
}

/// Overwrite the tensors of an already-built model (same architecture and
/// adapters) with checkpoint contents.
template <class T>
void load_checkpoint_into(const CheckpointFile& f, SamModel<T>& model) {
    ParamList<T> params;
    model.collect_params(params);
    std::map<std::string, TensorPtr<T>> by_name;
    for (auto& p : params) by_name[p.name] = p.t;

    size_t matched = 0;
    for (const auto& t : f.header.at("tensors")) {
        std::string name = t.at("name").get<std::string>();
        auto it = by_name.find(name);
        require(it != by_name.end(), "load_checkpoint: model has no tensor named " + name);
        auto shape = t.at("shape").get<Shape>();
        require(shape == it->second->shape, "load_checkpoint: shape mismatch for " + name);
        uint64_t off = t.at("offset").get<uint64_t>(), len = t.at("length").get<uint64_t>();
        require(len == it->second->data.size() * sizeof(float), "load_checkpoint: length mismatch for " + name);
        const char* src = f.payload.data() + off;
        for (size_t i = 0; i < it->second->data.size(); ++i) {
            float v;
            std::memcpy(&v, src + i * sizeof(float), sizeof(float));
            it->second->data[i] = static_cast<T>(v);
        }
        ++matched;
    }
    require(matched == by_name.size(), "load_checkpoint: model has tensors missing from the checkpoint");

    std::vector<std::pair<std::string, const QuantizedLinear<T>*>> quants;
    detail::quant_entries(model, quants);
    const auto& qindex = f.header.at("quant");
    require(qindex.size() == quants.size(), "load_checkpoint: quantized-layer count mismatch");
    for (size_t i = 0; i < quants.size(); ++i) {
        const auto& q = qindex[i];
        require(q.at("name").get<std::string>() == quants[i].first,
                "load_checkpoint: quantized layer order mismatch at " + quants[i].first);
        auto* dst = const_cast<QuantizedLinear<T>*>(quants[i].second);
        dst->shape = q.at("shape").get<Shape>();
        dst->block = q.at("block").get<int64_t>();
        uint64_t co = q.at("codes_offset").get<uint64_t>(), cl = q.at("codes_length").get<uint64_t>();
        uint64_t so = q.at("scales_offset").get<uint64_t>(), sl = q.at("scales_length").get<uint64_t>();
        dst->packed.assign(f.payload.begin() + static_cast<int64_t>(co),
                           f.payload.begin() + static_cast<int64_t>(co + cl));
        dst->scales.resize(sl / sizeof(float));
        std::memcpy(dst->scales.data(), f.payload.data() + so, sl);
    }
}

}  // namespace peftsam
