#include "mepp/adam.hpp"

#include <cmath>

namespace mepp {

void AdamState::step_update(Graph& graph) {
    ++step_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    for (const auto& [name, id] : graph.parameter_ids()) {
        Tensor& p = graph.node_out(id);
        if (!p.has_grad()) {
            throw GraphError(name, "adam update requires a gradient; run backward first");
        }
        Moments& mo = moments_[name];
        if (mo.m.size() != p.numel()) {
            mo.m.assign(p.numel(), 0.0);
            mo.v.assign(p.numel(), 0.0);
        }
        const double* g = p.grad();
        double* w = p.data();
        for (std::size_t i = 0; i < p.numel(); ++i) {
            mo.m[i] = config_.beta1 * mo.m[i] + (1.0 - config_.beta1) * g[i];
            mo.v[i] = config_.beta2 * mo.v[i] + (1.0 - config_.beta2) * g[i] * g[i];
            const double mhat = mo.m[i] / bc1;
            const double vhat = mo.v[i] / bc2;
            w[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
        }
    }
}

} // namespace mepp
