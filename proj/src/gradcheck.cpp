#include "ehs/gradcheck.hpp"

#include <cmath>
#include <vector>

namespace ehs {

GradCheckReport gradient_check(const std::function<TensorPtr()>& forward, ParamList& params,
                               double h) {
    zero_grads(params);
    auto loss = forward();
    backward(loss);

    std::vector<std::vector<double>> analytic(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (!p.trainable) continue;
        p.t->ensure_grad(); // a parameter the loss never touches has grad 0
        analytic[i] = p.t->grad;
    }

    GradCheckReport rep;
    for (size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (!p.trainable) continue;
        for (size_t j = 0; j < p.t->data.size(); ++j) {
            const double keep = p.t->data[j];
            p.t->data[j] = keep + h;
            const double fp = forward()->value();
            p.t->data[j] = keep - h;
            const double fm = forward()->value();
            p.t->data[j] = keep;
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[i][j];
            const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
            if (err > rep.max_rel_err) {
                rep.max_rel_err = err;
                rep.worst_param = p.name;
                rep.worst_index = static_cast<int64_t>(j);
            }
        }
    }
    zero_grads(params);
    return rep;
}

} // namespace ehs
