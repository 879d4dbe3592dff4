#pragma once

#include "peftsam/ops.hpp"

namespace peftsam {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int64_t checked_params = 0;
};

/// Compares analytic gradients against central finite differences.
/// `program` builds a scalar loss on the given tape from the current values of
/// `params`; it must be deterministic. Parameters with requires_grad == false
/// are skipped. Run at double precision.
template <class Program>
GradCheckReport grad_check(Program&& program, const std::vector<std::pair<std::string, TensorPtr<double>>>& params,
                           double eps = 1e-5) {
    auto eval = [&]() -> double {
        Tape<double> tp;
        TensorPtr<double> loss = program(tp);
        require(loss->size() == 1, "grad_check: program must produce a scalar loss");
        return loss->data[0];
    };

    // analytic pass
    std::vector<std::vector<double>> analytic;
    {
        Tape<double> tp;
        for (auto& [name, p] : params) p->grad.clear();
        TensorPtr<double> loss = program(tp);
        tp.backward(loss);
        for (auto& [name, p] : params) {
            if (p->requires_grad) {
                p->ensure_grad();
                analytic.push_back(p->grad);
            } else {
                analytic.emplace_back();
            }
        }
    }

    GradCheckReport rep;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& [name, p] = params[pi];
        if (!p->requires_grad) continue;
        for (int64_t i = 0; i < p->size(); ++i) {
            double orig = p->data[i];
            p->data[i] = orig + eps;
            double fp = eval();
            p->data[i] = orig - eps;
            double fm = eval();
            p->data[i] = orig;
            double fd = (fp - fm) / (2 * eps);
            double an = analytic[pi][i];
            if (!std::isfinite(fd) || !std::isfinite(an))
                fail("grad_check: non-finite value at parameter " + name);
            double rel = std::abs(an - fd) / std::max(1.0, std::abs(an));
            ++rep.checked_params;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = name;
            }
        }
    }
    return rep;
}

}  // namespace peftsam
