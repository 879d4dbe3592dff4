#pragma once

#include <functional>
#include <map>
#include <unordered_map>

#include "peftsam/tensor.hpp"

namespace peftsam {

/// Per-region byte accounting of tensors saved for the backward pass.
/// A record contributes bytes only when its backward rule will actually run,
/// i.e. some trainable parameter lies upstream of (or at) one of its inputs.
struct ActivationLedger {
    std::map<std::string, int64_t> region_bytes;
    int64_t total_retained_bytes = 0;

    int64_t region(const std::string& name) const {
        auto it = region_bytes.find(name);
        return it == region_bytes.end() ? 0 : it->second;
    }
};

/// Reverse-mode tape. Single-owner, single-threaded within one training step.
/// Ops record a node whenever any input requires a gradient; frozen-only
/// subgraphs still leave region-tagged records (with zero retained bytes) so
/// the ledger can report on them.
template <class T>
class Tape {
  public:
    struct Record {
        const char* op;
        std::string region;
        bool needs_grad = false;
        TensorPtr<T> out;
        int64_t saved_bytes = 0;
        std::function<void()> backward;  // accumulates into input grads
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    const std::string& region() const { return region_; }
    void set_region(std::string r) { region_ = std::move(r); }

    Rng* dropout_rng = nullptr;  // set by the training step; null => dropout off
    bool training = false;

    size_t num_records() const { return records_.size(); }
    const std::vector<Record>& records() const { return records_; }

    /// Run backward from a scalar loss produced on this tape.
    void backward(const TensorPtr<T>& loss) {
        require(loss->size() == 1, "backward: loss must be scalar, got shape " + shape_str(loss->shape));
        require(produced_.count(loss.get()) > 0, "backward: loss was not produced on this tape");
        require(!consumed_, "backward: tape already consumed; run a new forward pass");
        consumed_ = true;
        loss->ensure_grad();
        loss->grad[0] = T(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            if (!it->needs_grad) continue;
            if (it->out->grad.empty()) continue;  // output never used by the loss
            it->backward();
        }
    }

    ActivationLedger ledger_report() const {
        ActivationLedger l;
        for (const auto& r : records_) {
            int64_t b = r.needs_grad ? r.saved_bytes : 0;
            l.region_bytes[r.region] += b;
            l.total_retained_bytes += b;
        }
        return l;
    }

    void record(const char* op, bool needs_grad, TensorPtr<T> out, int64_t saved_bytes,
                std::function<void()> bw) {
        Record r;
        r.op = op;
        r.region = region_;
        r.needs_grad = needs_grad;
        r.out = out;
        r.saved_bytes = needs_grad ? saved_bytes : 0;
        if (needs_grad) r.backward = std::move(bw);
        produced_.emplace(out.get(), 1);
        records_.push_back(std::move(r));
    }

    bool produced(const TensorData<T>* t) const { return produced_.count(t) > 0; }

  private:
    std::vector<Record> records_;
    std::unordered_map<const TensorData<T>*, char> produced_;
    std::string region_ = "untagged";
    bool consumed_ = false;
};

template <class T>
class RegionGuard {
  public:
    RegionGuard(Tape<T>& tape, std::string region) : tape_(tape), prev_(tape.region()) {
        tape_.set_region(std::move(region));
    }
    ~RegionGuard() { tape_.set_region(prev_); }

  private:
    Tape<T>& tape_;
    std::string prev_;
};

}  // namespace peftsam
