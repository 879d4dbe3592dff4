#pragma once

#include "peftsam/nn.hpp"

namespace peftsam {

/// Symmetric per-block absmax int4: scale = absmax/7, q = clamp(round(v/scale), -8, 7).
/// Codes are stored biased by +8 as unsigned nibbles.
struct QuantBlockResult {
    std::vector<uint8_t> codes;  // unbiased later; one nibble value (q+8) per element
    float scale = 0.f;
};

inline QuantBlockResult quantize_block(const float* v, int64_t n) {
    QuantBlockResult r;
    r.codes.resize(static_cast<size_t>(n));
    float absmax = 0.f;
    for (int64_t i = 0; i < n; ++i) {
        require(std::isfinite(v[i]), "quantize_block: non-finite input");
        absmax = std::max(absmax, std::abs(v[i]));
    }
    if (absmax == 0.f) {
        std::fill(r.codes.begin(), r.codes.end(), uint8_t(8));  // q = 0
        r.scale = 0.f;
        return r;
    }
    r.scale = absmax / 7.0f;
    for (int64_t i = 0; i < n; ++i) {
        int q = static_cast<int>(std::lround(v[i] / r.scale));
        q = std::max(-8, std::min(7, q));
        r.codes[static_cast<size_t>(i)] = static_cast<uint8_t>(q + 8);
    }
    return r;
}

inline float dequantize_code(uint8_t code, float scale) { return static_cast<float>(static_cast<int>(code) - 8) * scale; }

/// 4-bit frozen weight storage for one linear layer. The packed payload never
/// receives gradients; forward dequantizes on the fly.
template <class T>
struct QuantizedLinear {
    Shape shape;                  // original (in, out)
    int64_t block = 64;           // elements per quantization block
    std::vector<uint8_t> packed;  // low nibble first
    std::vector<float> scales;    // one per block

    static QuantizedLinear quantize(const TensorPtr<T>& w, int64_t block_size) {
        QuantizedLinear q;
        q.shape = w->shape;
        q.block = block_size;
        int64_t n = w->size();
        std::vector<uint8_t> nibbles(static_cast<size_t>(n));
        for (int64_t off = 0; off < n; off += block_size) {
            int64_t len = std::min(block_size, n - off);
            std::vector<float> buf(static_cast<size_t>(len));
            for (int64_t i = 0; i < len; ++i) buf[static_cast<size_t>(i)] = static_cast<float>(w->data[off + i]);
            auto r = quantize_block(buf.data(), len);
            std::copy(r.codes.begin(), r.codes.end(), nibbles.begin() + off);
            q.scales.push_back(r.scale);
        }
        q.packed = pack_u4(nibbles);
        return q;
    }

    TensorPtr<T> dequantize() const {
        int64_t n = numel(shape);
        auto nibbles = unpack_u4(packed, n);
        auto w = make_tensor<T>(shape);
        for (int64_t i = 0; i < n; ++i) {
            float s = scales[static_cast<size_t>(i / block)];
            w->data[i] = static_cast<T>(dequantize_code(nibbles[static_cast<size_t>(i)], s));
        }
        w->requires_grad = false;
        return w;
    }

    int64_t payload_bytes() const {
        return static_cast<int64_t>(packed.size() + scales.size() * sizeof(float));
    }
};

}  // namespace peftsam
