#pragma once

#include <unordered_map>

#include "peftsam/nn.hpp"

namespace peftsam {

/// Adam with fixed hyperparameters; state is keyed by tensor identity.
template <class T>
struct Adam {
    double lr = 1e-5;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    struct Moments {
        std::vector<double> m, v;
    };
    std::unordered_map<const TensorData<T>*, Moments> state;
    int64_t t = 0;

    explicit Adam(double lr_ = 1e-5) : lr(lr_) {}

    /// One update over every trainable parameter carrying a gradient; clears
    /// the gradients it consumed.
    void step(ParamList<T>& params) {
        ++t;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (auto& p : params) {
            auto& tensor = *p.t;
            if (!tensor.requires_grad || tensor.grad.empty()) continue;
            auto& mom = state[&tensor];
            if (mom.m.empty()) {
                mom.m.assign(tensor.data.size(), 0.0);
                mom.v.assign(tensor.data.size(), 0.0);
            }
            for (size_t i = 0; i < tensor.data.size(); ++i) {
                double g = static_cast<double>(tensor.grad[i]);
                mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g;
                mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g * g;
                double mhat = mom.m[i] / bc1;
                double vhat = mom.v[i] / bc2;
                tensor.data[i] -= static_cast<T>(lr * mhat / (std::sqrt(vhat) + eps));
            }
            tensor.grad.clear();
        }
    }
};

}  // namespace peftsam
