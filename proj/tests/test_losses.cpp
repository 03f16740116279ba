#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "ehs/error.hpp"
#include "ehs/gradcheck.hpp"
#include "ehs/losses.hpp"
#include "ehs/rng.hpp"
#include "oracles.hpp"

using namespace ehs;

namespace {

// Row-normalized log-probs from raw gaussian logits.
TensorPtr random_log_probs(Rng& rng, int t_len, int n_symbols, double spread = 1.5) {
    auto t = tensor({t_len, n_symbols});
    for (auto& v : t->data) v = rng.gaussian(0.0, spread);
    for (int i = 0; i < t_len; ++i) {
        double m = t->data[i * n_symbols];
        for (int k = 1; k < n_symbols; ++k) m = std::max(m, t->data[i * n_symbols + k]);
        double s = 0.0;
        for (int k = 0; k < n_symbols; ++k) s += std::exp(t->data[i * n_symbols + k] - m);
        const double lse = m + std::log(s);
        for (int k = 0; k < n_symbols; ++k) t->data[i * n_symbols + k] -= lse;
    }
    return t;
}

std::vector<int> random_feasible_labels(Rng& rng, int t_len, int alphabet, int max_len) {
    while (true) {
        int len = 1 + static_cast<int>(rng.below(max_len));
        std::vector<int> labels;
        for (int i = 0; i < len; ++i) labels.push_back(static_cast<int>(rng.below(alphabet)));
        if (ctc_min_frames(labels) <= t_len) return labels;
    }
}

} // namespace

TEST_CASE("ctc_min_frames counts repeats") {
    CHECK(ctc_min_frames({0}) == 1);
    CHECK(ctc_min_frames({0, 1}) == 2);
    CHECK(ctc_min_frames({0, 0}) == 3);
    CHECK(ctc_min_frames({2, 2, 2}) == 5);
    CHECK(ctc_min_frames({0, 1, 1, 0}) == 5);
}

TEST_CASE("ctc single-frame and two-frame closed forms") {
    // T=1, alphabet {a}, blank: only path is "a" itself.
    auto lp1 = tensor({1, 2}, {std::log(0.3), std::log(0.7)});
    CHECK(ctc_loss(lp1, {0})->value() == doctest::Approx(-std::log(0.3)).epsilon(1e-12));

    // T=2, uniform over {a, blank}: paths aa, a_, _a carry 3/4 total mass.
    auto lp2 = tensor({2, 2}, std::vector<double>(4, std::log(0.5)));
    CHECK(ctc_loss(lp2, {0})->value() == doctest::Approx(-std::log(0.75)).epsilon(1e-12));
}

TEST_CASE("ctc equals exhaustive path enumeration") {
    Rng rng(314);
    for (int trial = 0; trial < 500; ++trial) {
        const int t_len = 1 + static_cast<int>(rng.below(6));
        const int alphabet = 1 + static_cast<int>(rng.below(4));
        auto lp = random_log_probs(rng, t_len, alphabet + 1);
        auto labels = random_feasible_labels(rng, t_len, alphabet, 3);
        const double fb = ctc_loss(lp, labels)->value();
        const double enumerated =
            oracles::ctc_enumeration_loss(lp->data, t_len, alphabet + 1, labels);
        CHECK(std::abs(fb - enumerated) <= 1e-8);
        CHECK(fb >= 0.0); // normalized rows: total path mass <= 1
    }
}

TEST_CASE("ctc rejects infeasible and malformed instances") {
    Rng rng(1);
    auto lp = random_log_probs(rng, 2, 3); // T=2, alphabet {a,b}
    CHECK_THROWS_AS(ctc_loss(lp, {0, 0}), InfeasibleCtcError); // needs 3 frames
    CHECK_THROWS_AS(ctc_loss(lp, {0, 1, 0}), InfeasibleCtcError);
    CHECK_THROWS_AS(ctc_loss(lp, {}), DataError);
    CHECK_THROWS_AS(ctc_loss(lp, {2}), DataError); // blank is not a label
    auto raw = tensor({2, 3}, {1.0, 2.0, 0.5, 0.0, 0.0, 0.0});
    CHECK_THROWS_WITH_AS(ctc_loss(raw, {0}), doctest::Contains("normalized"), DataError);
}

TEST_CASE("ctc is sensitive to label order") {
    Rng rng(99);
    auto lp = random_log_probs(rng, 5, 4);
    CHECK(ctc_loss(lp, {0, 1})->value() != ctc_loss(lp, {1, 0})->value());
}

TEST_CASE("ctc gradient matches finite differences") {
    Rng rng(2718);
    for (int trial = 0; trial < 6; ++trial) {
        const int t_len = 3 + static_cast<int>(rng.below(4));
        const int alphabet = 2 + static_cast<int>(rng.below(3));
        auto logits = tensor({t_len, alphabet + 1});
        for (auto& v : logits->data) v = rng.gaussian(0.0, 1.0);
        logits->requires_grad = true;
        auto labels = random_feasible_labels(rng, t_len, alphabet, 3);
        ParamList ps{{"logits", logits, true}};
        auto rep = gradient_check(
            [&] { return ctc_loss(log_softmax_rows(logits), labels); }, ps);
        CHECK(rep.max_rel_err < 1e-5);
    }
    // Repeated symbols exercise the no-skip rule.
    auto logits = tensor({5, 3});
    Rng r2(5);
    for (auto& v : logits->data) v = r2.gaussian(0.0, 1.0);
    logits->requires_grad = true;
    ParamList ps{{"logits", logits, true}};
    auto rep = gradient_check(
        [&] { return ctc_loss(log_softmax_rows(logits), {0, 0}); },
        ps);
    CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("attention cross-entropy") {
    SUBCASE("saturated correct logits") {
        auto t = tensor({2, 3});
        t->data = {50.0, 0.0, 0.0, 0.0, 0.0, 50.0};
        CHECK(attention_ce(t, {0, 2})->value() < 1e-9);
    }
    SUBCASE("uniform logits over 10 symbols") {
        auto t = tensor({4, 10}, std::vector<double>(40, 0.25));
        CHECK(attention_ce(t, {3, 1, 9, 0})->value() ==
              doctest::Approx(std::log(10.0)).epsilon(1e-12));
    }
    SUBCASE("random case against per-step recomputation") {
        Rng rng(7);
        auto t = tensor({5, 6});
        for (auto& v : t->data) v = rng.gaussian(0.0, 2.0);
        std::vector<int> labels{2, 0, 5, 5, 1};
        double want = 0.0;
        for (int i = 0; i < 5; ++i) {
            double m = t->data[i * 6];
            for (int k = 1; k < 6; ++k) m = std::max(m, t->data[i * 6 + k]);
            double s = 0.0;
            for (int k = 0; k < 6; ++k) s += std::exp(t->data[i * 6 + k] - m);
            want += m + std::log(s) - t->data[i * 6 + labels[i]];
        }
        want /= 5.0;
        CHECK(attention_ce(t, labels)->value() == doctest::Approx(want).epsilon(1e-12));
    }
    SUBCASE("length mismatch") {
        auto t = tensor({2, 3});
        CHECK_THROWS_AS(attention_ce(t, {0}), ShapeError);
    }
}

TEST_CASE("hybrid loss is the lambda blend") {
    auto c = scalar_tensor(2.0);
    auto a = scalar_tensor(4.0);
    CHECK(hybrid_loss(c, a, 1.0)->value() == 2.0);
    CHECK(hybrid_loss(c, a, 0.0)->value() == 4.0);
    CHECK(hybrid_loss(c, a, 0.5)->value() == 3.0);
    for (double l : {0.1, 0.25, 0.9}) {
        CHECK(hybrid_loss(c, a, l)->value() ==
              doctest::Approx(l * 2.0 + (1 - l) * 4.0).epsilon(1e-15));
    }
    CHECK_THROWS_AS(hybrid_loss(c, a, -0.1), ConfigError);
    CHECK_THROWS_AS(hybrid_loss(c, a, 1.1), ConfigError);

    // The blend weights are exactly the gradients of the two terms.
    auto ct = scalar_tensor(1.3);
    auto at = scalar_tensor(0.4);
    ct->requires_grad = at->requires_grad = true;
    backward(hybrid_loss(ct, at, 0.3));
    CHECK(ct->grad[0] == doctest::Approx(0.3).epsilon(1e-15));
    CHECK(at->grad[0] == doctest::Approx(0.7).epsilon(1e-15));
}

TEST_CASE("downstream loss") {
    SUBCASE("classification closed forms") {
        auto z = scalar_tensor(0.0);
        CHECK(downstream_loss(z, 1.0, TaskKind::classification)->value() ==
              doctest::Approx(std::log(2.0)).epsilon(1e-15));
        CHECK_THROWS_AS(downstream_loss(z, 0.5, TaskKind::classification), DataError);
    }
    SUBCASE("regression closed forms and gradient") {
        auto p = scalar_tensor(7.0);
        CHECK(downstream_loss(p, 7.0, TaskKind::regression)->value() == 0.0);
        CHECK_THROWS_AS(downstream_loss(p, 25.0, TaskKind::regression), DataError);
        CHECK_THROWS_AS(downstream_loss(p, -1.0, TaskKind::regression), DataError);

        auto q = scalar_tensor(1.3);
        q->requires_grad = true;
        ParamList ps{{"q", q, true}};
        auto rep =
            gradient_check([&] { return downstream_loss(q, 0.5, TaskKind::regression); }, ps);
        CHECK(rep.max_rel_err < 1e-9);
        zero_grads(ps);
        backward(downstream_loss(q, 0.5, TaskKind::regression));
        CHECK(q->grad[0] == doctest::Approx(2.0 * (1.3 - 0.5)).epsilon(1e-12));
    }
    SUBCASE("2-d single-element prediction is accepted") {
        auto p = tensor({1, 1}, {0.0});
        CHECK(downstream_loss(p, 1.0, TaskKind::classification)->value() ==
              doctest::Approx(std::log(2.0)).epsilon(1e-15));
    }
}
