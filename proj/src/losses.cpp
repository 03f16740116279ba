#include "ehs/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "ehs/error.hpp"

namespace ehs {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double logsumexp2(double a, double b) {
    if (a == kNegInf) return b;
    if (b == kNegInf) return a;
    double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

} // namespace

int ctc_min_frames(const std::vector<int>& labels) {
    int repeats = 0;
    for (size_t i = 1; i < labels.size(); ++i)
        if (labels[i] == labels[i - 1]) ++repeats;
    return static_cast<int>(labels.size()) + repeats;
}

TensorPtr ctc_loss(const TensorPtr& log_probs, const std::vector<int>& labels) {
    if (log_probs->ndim() != 2)
        throw ShapeError("ctc_loss: log-probs must be [T, alphabet+1]");
    const int t_len = log_probs->rows(), n = log_probs->cols();
    const int blank = n - 1;
    if (labels.empty()) throw DataError("ctc_loss: empty label sequence");
    for (int l : labels)
        if (l < 0 || l >= blank)
            throw DataError("ctc_loss: label " + std::to_string(l) +
                            " outside the alphabet of " + std::to_string(blank));
    if (ctc_min_frames(labels) > t_len)
        throw InfeasibleCtcError(
            "ctc_loss: label of length " + std::to_string(labels.size()) + " needs at least " +
            std::to_string(ctc_min_frames(labels)) + " frames, got " + std::to_string(t_len));
    // Guard the log-softmax precondition loosely enough that perturbed
    // inputs (finite-difference probes) still pass.
    for (int t = 0; t < t_len; ++t) {
        double m = kNegInf, s = 0.0;
        for (int k = 0; k < n; ++k) m = std::max(m, log_probs->data[t * n + k]);
        for (int k = 0; k < n; ++k) s += std::exp(log_probs->data[t * n + k] - m);
        if (std::abs(m + std::log(s)) > 1e-3)
            throw DataError("ctc_loss: row " + std::to_string(t) +
                            " is not log-softmax normalized");
    }

    // Extended label with blanks interleaved: blank, l1, blank, ..., lL, blank.
    const int S = 2 * static_cast<int>(labels.size()) + 1;
    std::vector<int> ext(S, blank);
    for (size_t i = 0; i < labels.size(); ++i) ext[2 * i + 1] = labels[i];
    auto lp = [&](int t, int s) { return log_probs->data[t * n + ext[s]]; };
    auto can_skip = [&](int s) { return ext[s] != blank && s >= 2 && ext[s] != ext[s - 2]; };

    std::vector<double> alpha(static_cast<size_t>(t_len) * S, kNegInf);
    alpha[0] = lp(0, 0);
    if (S > 1) alpha[1] = lp(0, 1);
    for (int t = 1; t < t_len; ++t) {
        for (int s = 0; s < S; ++s) {
            double a = alpha[(t - 1) * S + s];
            if (s >= 1) a = logsumexp2(a, alpha[(t - 1) * S + s - 1]);
            if (can_skip(s)) a = logsumexp2(a, alpha[(t - 1) * S + s - 2]);
            alpha[t * S + s] = a == kNegInf ? kNegInf : a + lp(t, s);
        }
    }
    double log_p = logsumexp2(alpha[(t_len - 1) * S + S - 1],
                              S > 1 ? alpha[(t_len - 1) * S + S - 2] : kNegInf);
    if (log_p == kNegInf)
        throw InfeasibleCtcError("ctc_loss: no feasible alignment"); // unreachable after the
                                                                     // frame-count check
    auto out = make_op({1}, log_probs->dtype, {log_probs}, "ctc_loss");
    out->data[0] = -log_p;
    finalize_op(*out);

    if (out->requires_grad) {
        // Backward pass mirrors forward; gamma = alpha + beta - lp collects
        // path mass per (t, symbol), and d(-logP)/d lp[t,k] falls out of it.
        std::vector<double> beta(static_cast<size_t>(t_len) * S, kNegInf);
        beta[(t_len - 1) * S + S - 1] = lp(t_len - 1, S - 1);
        if (S > 1) beta[(t_len - 1) * S + S - 2] = lp(t_len - 1, S - 2);
        for (int t = t_len - 2; t >= 0; --t) {
            for (int s = 0; s < S; ++s) {
                double b = beta[(t + 1) * S + s];
                if (s + 1 < S) b = logsumexp2(b, beta[(t + 1) * S + s + 1]);
                if (s + 2 < S && ext[s + 2] != blank && ext[s + 2] != ext[s])
                    b = logsumexp2(b, beta[(t + 1) * S + s + 2]);
                beta[t * S + s] = b == kNegInf ? kNegInf : b + lp(t, s);
            }
        }
        std::vector<double> g(static_cast<size_t>(t_len) * n, kNegInf);
        for (int t = 0; t < t_len; ++t) {
            for (int s = 0; s < S; ++s) {
                double gamma = alpha[t * S + s] + beta[t * S + s] - lp(t, s);
                auto& cell = g[static_cast<size_t>(t) * n + ext[s]];
                cell = logsumexp2(cell, gamma);
            }
        }
        for (auto& v : g) v = v == kNegInf ? 0.0 : -std::exp(v - log_p);
        out->backprop = [log_probs, g = std::move(g)](Tensor& self) {
            std::vector<double> scaled(g.size());
            for (size_t i = 0; i < g.size(); ++i) scaled[i] = self.grad[0] * g[i];
            accumulate_grad(*log_probs, scaled.data(), static_cast<int64_t>(scaled.size()));
        };
    }
    return out;
}

TensorPtr attention_ce(const TensorPtr& att_logits, const std::vector<int>& labels) {
    if (att_logits->ndim() != 2 ||
        att_logits->rows() != static_cast<int>(labels.size()))
        throw ShapeError("attention_ce: " + std::to_string(labels.size()) +
                         " labels for logits of " + std::to_string(att_logits->rows()) +
                         " decode steps");
    return cross_entropy_rows(att_logits, labels);
}

TensorPtr hybrid_loss(const TensorPtr& ctc, const TensorPtr& att, double lambda) {
    if (!(lambda >= 0.0 && lambda <= 1.0))
        throw ConfigError("hybrid_loss: lambda must lie in [0,1]");
    if (!ctc->is_scalar() || !att->is_scalar())
        throw ShapeError("hybrid_loss: both terms must be scalars");
    return add(scale(ctc, lambda), scale(att, 1.0 - lambda));
}

TensorPtr downstream_loss(const TensorPtr& prediction, double target, TaskKind task) {
    if (!prediction->is_scalar())
        throw ShapeError("downstream_loss: prediction must be a single value");
    auto flat = prediction->ndim() == 1 ? prediction : reshape(prediction, {1});
    if (task == TaskKind::classification) {
        if (target != 0.0 && target != 1.0)
            throw DataError("downstream_loss: classification target must be 0 or 1");
        return bce_with_logit(flat, target);
    }
    if (!(target >= 0.0 && target <= 24.0))
        throw DataError("downstream_loss: regression target outside [0,24]");
    return squared_error(flat, target);
}

} // namespace ehs
