#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace peftsam {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

struct TensorError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

[[noreturn]] inline void fail(const std::string& msg) { throw TensorError(msg); }

inline void require(bool cond, const std::string& msg) {
    if (!cond) fail(msg);
}

/// Dense tensor of scalar type T (float for training, double for gradient
/// checks). Gradient storage is allocated lazily by the tape.
template <class T>
struct TensorData {
    Shape shape;
    std::vector<T> data;
    bool requires_grad = false;
    std::vector<T> grad;

    TensorData() = default;
    TensorData(Shape s, T fill = T(0)) : shape(std::move(s)) {
        data.assign(static_cast<size_t>(numel(shape)), fill);
    }
    TensorData(Shape s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
        require(static_cast<int64_t>(data.size()) == numel(shape),
                "tensor data size does not match shape " + shape_str(shape));
    }

    int64_t size() const { return static_cast<int64_t>(data.size()); }
    int64_t ndim() const { return static_cast<int64_t>(shape.size()); }

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }

    int64_t nbytes() const { return size() * static_cast<int64_t>(sizeof(T)); }
};

template <class T>
using TensorPtr = std::shared_ptr<TensorData<T>>;

template <class T>
TensorPtr<T> make_tensor(Shape s, T fill = T(0)) {
    return std::make_shared<TensorData<T>>(std::move(s), fill);
}

template <class T>
TensorPtr<T> make_tensor(Shape s, std::vector<T> d) {
    return std::make_shared<TensorData<T>>(std::move(s), std::move(d));
}

// ---------------------------------------------------------------------------
// Deterministic RNG. Explicit transforms so streams are reproducible
// independent of the standard library's distribution implementations.
// ---------------------------------------------------------------------------

class Rng {
  public:
    explicit Rng(uint64_t seed = 0) : state_(seed ^ 0x9e3779b97f4a7c15ull) {
        // avoid the all-zero state
        next_u64();
        next_u64();
    }

    uint64_t next_u64() {
        // splitmix64
        uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    int64_t uniform_int(int64_t n) {
        return static_cast<int64_t>(next_u64() % static_cast<uint64_t>(n));
    }

    /// Standard normal via Box-Muller.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        double r = std::sqrt(-2.0 * std::log(u1));
        double th = 6.283185307179586 * u2;
        spare_ = r * std::sin(th);
        have_spare_ = true;
        return r * std::cos(th);
    }

    double normal(double mean, double std) { return mean + std * normal(); }

    /// Derive an independent stream (e.g. per-image) from this seed.
    Rng fork(uint64_t salt) const { return Rng(state_ ^ (salt * 0xd1342543de82ef95ull + 0x632be59bd9b4e019ull)); }

  private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// ---------------------------------------------------------------------------
// NPA1 tensor file format.
// magic "NPA1", 1 byte dtype code (0=f32, 1=f64, 2=u32, 3=packed-u4),
// 1 byte ndim, ndim x u32 LE extents, raw LE row-major payload.
// packed-u4: low nibble first, zero-padded final byte.
// ---------------------------------------------------------------------------

enum class Dtype : uint8_t { F32 = 0, F64 = 1, U32 = 2, PackedU4 = 3 };

/// Untyped array container used for file IO, instance maps and quantized
/// payloads. Differentiable tensors live in TensorData<T> instead.
struct RawTensor {
    Dtype dtype = Dtype::F32;
    Shape shape;
    std::vector<uint8_t> bytes;

    int64_t elements() const { return numel(shape); }

    static int64_t payload_bytes(Dtype dt, int64_t n) {
        switch (dt) {
            case Dtype::F32: return n * 4;
            case Dtype::F64: return n * 8;
            case Dtype::U32: return n * 4;
            case Dtype::PackedU4: return (n + 1) / 2;
        }
        fail("bad dtype");
    }
};

inline void npa1_write(std::ostream& os, const RawTensor& t) {
    os.write("NPA1", 4);
    uint8_t code = static_cast<uint8_t>(t.dtype);
    uint8_t nd = static_cast<uint8_t>(t.shape.size());
    os.put(static_cast<char>(code));
    os.put(static_cast<char>(nd));
    for (int64_t e : t.shape) {
        uint32_t v = static_cast<uint32_t>(e);
        os.write(reinterpret_cast<const char*>(&v), 4);
    }
    require(static_cast<int64_t>(t.bytes.size()) == RawTensor::payload_bytes(t.dtype, t.elements()),
            "NPA1 payload size mismatch");
    os.write(reinterpret_cast<const char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()));
}

inline void npa1_save(const std::string& path, const RawTensor& t) {
    std::ofstream os(path, std::ios::binary);
    require(os.good(), "cannot open for write: " + path);
    npa1_write(os, t);
    require(os.good(), "write failed: " + path);
}

inline RawTensor npa1_read(std::istream& is, const std::string& what = "<stream>") {
    char magic[4];
    is.read(magic, 4);
    require(is.good() && std::memcmp(magic, "NPA1", 4) == 0, "not an NPA1 file: " + what);
    int code = is.get();
    int nd = is.get();
    require(code >= 0 && code <= 3 && nd >= 0, "corrupt NPA1 header: " + what);
    RawTensor t;
    t.dtype = static_cast<Dtype>(code);
    for (int i = 0; i < nd; ++i) {
        uint32_t v = 0;
        is.read(reinterpret_cast<char*>(&v), 4);
        t.shape.push_back(v);
    }
    int64_t nb = RawTensor::payload_bytes(t.dtype, t.elements());
    t.bytes.resize(static_cast<size_t>(nb));
    is.read(reinterpret_cast<char*>(t.bytes.data()), nb);
    require(is.gcount() == nb, "truncated NPA1 payload: " + what);
    return t;
}

inline RawTensor npa1_load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "cannot open: " + path);
    return npa1_read(is, path);
}

inline RawTensor raw_from_f32(const Shape& shape, const float* v, int64_t n) {
    RawTensor t;
    t.dtype = Dtype::F32;
    t.shape = shape;
    t.bytes.resize(static_cast<size_t>(n) * 4);
    std::memcpy(t.bytes.data(), v, static_cast<size_t>(n) * 4);
    return t;
}

inline RawTensor raw_from_u32(const Shape& shape, const std::vector<uint32_t>& v) {
    RawTensor t;
    t.dtype = Dtype::U32;
    t.shape = shape;
    t.bytes.resize(v.size() * 4);
    std::memcpy(t.bytes.data(), v.data(), v.size() * 4);
    return t;
}

inline std::vector<float> raw_to_f32(const RawTensor& t) {
    require(t.dtype == Dtype::F32, "expected f32 NPA1 payload");
    std::vector<float> v(static_cast<size_t>(t.elements()));
    std::memcpy(v.data(), t.bytes.data(), v.size() * 4);
    return v;
}

inline std::vector<uint32_t> raw_to_u32(const RawTensor& t) {
    require(t.dtype == Dtype::U32, "expected u32 NPA1 payload");
    std::vector<uint32_t> v(static_cast<size_t>(t.elements()));
    std::memcpy(v.data(), t.bytes.data(), v.size() * 4);
    return v;
}

// packed-u4 helpers: values stored as unsigned nibbles, low nibble first.
inline std::vector<uint8_t> pack_u4(const std::vector<uint8_t>& nibbles) {
    std::vector<uint8_t> out((nibbles.size() + 1) / 2, 0);
    for (size_t i = 0; i < nibbles.size(); ++i) {
        uint8_t v = nibbles[i] & 0x0f;
        if (i % 2 == 0)
            out[i / 2] |= v;
        else
            out[i / 2] |= static_cast<uint8_t>(v << 4);
    }
    return out;
}

inline std::vector<uint8_t> unpack_u4(const std::vector<uint8_t>& packed, int64_t n) {
    std::vector<uint8_t> out(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
        uint8_t b = packed[static_cast<size_t>(i / 2)];
        out[static_cast<size_t>(i)] = (i % 2 == 0) ? (b & 0x0f) : (b >> 4);
    }
    return out;
}

}  // namespace peftsam
