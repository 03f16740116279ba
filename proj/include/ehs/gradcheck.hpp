#pragma once

#include <functional>
#include <string>

#include "ehs/params.hpp"

namespace ehs {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int64_t worst_index = -1;
};

// Compares analytic gradients against central finite differences for every
// coordinate of every trainable parameter in `params`.
//
// `forward` must rebuild the graph from the current parameter values and
// return the scalar loss. Error metric per coordinate:
//   |analytic - (f(w+h) - f(w-h)) / 2h| / max(1, |analytic|)
GradCheckReport gradient_check(const std::function<TensorPtr()>& forward, ParamList& params,
                               double h = 1e-5);

} // namespace ehs
