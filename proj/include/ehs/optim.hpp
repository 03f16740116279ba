#pragma once

#include <cstdint>
#include <vector>

#include "ehs/params.hpp"

namespace ehs {

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction. Moment buffers are keyed by position in the
// parameter list, so the same list (same order) must be passed every step.
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    // One update. Frozen (trainable=false) parameters are left bitwise
    // untouched and may carry no gradient; a trainable parameter without a
    // gradient is an error.
    void step(ParamList& params);

    int64_t steps_taken() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

private:
    AdamConfig cfg_;
    int64_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

} // namespace ehs
