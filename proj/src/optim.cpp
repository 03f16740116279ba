#include "ehs/optim.hpp"

#include <cmath>

#include "ehs/error.hpp"

namespace ehs {

void Adam::step(ParamList& params) {
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
    } else if (m_.size() != params.size()) {
        throw TapeError("Adam::step: parameter list size changed between steps");
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
        Parameter& p = params[i];
        if (!p.trainable) continue;
        if (p.t->grad.empty()) {
            throw TapeError("Adam::step: trainable parameter '" + p.name + "' has no gradient");
        }
        auto& m = m_[i];
        auto& v = v_[i];
        const size_t n = p.t->data.size();
        if (m.empty()) {
            m.assign(n, 0.0);
            v.assign(n, 0.0);
        }
        const bool f32 = p.t->dtype == DType::f32;
        for (size_t j = 0; j < n; ++j) {
            const double g = p.t->grad[j];
            m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
            v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            double w = p.t->data[j] - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            if (f32) w = static_cast<double>(static_cast<float>(w));
            if (!std::isfinite(w)) {
                throw NumericError("Adam::step: non-finite update for '" + p.name + "'");
            }
            p.t->data[j] = w;
        }
    }
}

} // namespace ehs
