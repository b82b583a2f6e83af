#ifndef MEPP_ADAM_HPP
#define MEPP_ADAM_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mepp/graph.hpp"

namespace mepp {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Per-parameter first/second moment state for Adam with bias correction.
class AdamState {
public:
    explicit AdamState(AdamConfig config = {}) : config_(config) {}

    const AdamConfig& config() const { return config_; }
    std::uint64_t step() const { return step_; }

    // Applies one Adam update to every parameter of the graph, reading the
    // gradients produced by Graph::backward. Throws if any gradient is absent.
    void step_update(Graph& graph);

private:
    struct Moments {
        std::vector<double> m;
        std::vector<double> v;
    };
    AdamConfig config_;
    std::uint64_t step_ = 0;
    std::map<std::string, Moments> moments_;
};

} // namespace mepp

#endif
