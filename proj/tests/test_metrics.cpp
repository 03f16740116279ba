#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <string>
#include <vector>

#include "ehs/error.hpp"
#include "ehs/metrics.hpp"
#include "ehs/rng.hpp"
#include "oracles.hpp"

using namespace ehs;

namespace {

ScoredSet random_set(Rng& rng, int n_pos, int n_neg, double sep, bool quantize = false) {
    ScoredSet s;
    for (int i = 0; i < n_pos; ++i) {
        double v = rng.gaussian(sep, 1.0);
        s.scores.push_back(quantize ? std::round(v * 4) / 4 : v);
        s.labels.push_back(1);
    }
    for (int i = 0; i < n_neg; ++i) {
        double v = rng.gaussian(0.0, 1.0);
        s.scores.push_back(quantize ? std::round(v * 4) / 4 : v);
        s.labels.push_back(0);
    }
    return s;
}

} // namespace

TEST_CASE("auc basic cases") {
    CHECK(auc({{0.8, 0.7, 0.2, 0.1}, {1, 1, 0, 0}}) == 1.0);
    CHECK(auc({{0.9, 0.4, 0.5, 0.1}, {1, 1, 0, 0}}) == 0.75);
    CHECK(auc({{0.3, 0.3, 0.3, 0.3}, {1, 0, 1, 0}}) == 0.5);
    CHECK_THROWS_AS(auc({{0.1, 0.2}, {1, 1}}), DataError);
}

TEST_CASE("auc equals trapezoidal ROC area and is rank-invariant") {
    Rng rng(2024);
    for (int trial = 0; trial < 80; ++trial) {
        int n_pos = 1 + static_cast<int>(rng.below(100));
        int n_neg = 1 + static_cast<int>(rng.below(100));
        auto s = random_set(rng, n_pos, n_neg, rng.uniform(0.0, 2.0), trial % 2 == 0);
        double a = auc(s);
        double t = oracles::trapezoid_auc(s);
        CHECK(std::abs(a - t) <= 1e-12);

        auto m = s;
        for (auto& v : m.scores) v = std::exp(0.5 * v) + 3.0; // strictly monotone
        CHECK(auc(m) == a);
    }
}

TEST_CASE("eer point") {
    SUBCASE("separable set gives 1.0/1.0") {
        auto p = eer_point({{0.8, 0.6, 0.4, 0.2}, {1, 1, 0, 0}});
        CHECK(p.sensitivity == 1.0);
        CHECK(p.specificity == 1.0);
    }
    SUBCASE("identical scores give 0.5/0.5") {
        auto p = eer_point({{0.4, 0.4, 0.4, 0.4}, {1, 0, 0, 1}});
        CHECK(p.sensitivity == doctest::Approx(0.5).epsilon(1e-12));
        CHECK(p.specificity == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("interleaved set matches the sweep oracle") {
        ScoredSet s{{0.9, 0.3, 0.7, 0.1}, {1, 1, 0, 0}};
        auto p = eer_point(s);
        auto o = oracles::sweep_eer(s);
        CHECK(p.sensitivity == doctest::Approx(o.sensitivity).epsilon(1e-9));
        CHECK(p.specificity == doctest::Approx(o.specificity).epsilon(1e-9));
    }
    SUBCASE("sensitivity equals specificity within 1e-6 on random sets") {
        Rng rng(77);
        for (int trial = 0; trial < 100; ++trial) {
            auto s = random_set(rng, 2 + static_cast<int>(rng.below(40)),
                                2 + static_cast<int>(rng.below(40)), rng.uniform(0.0, 1.5),
                                trial % 3 == 0);
            auto p = eer_point(s);
            CHECK(std::abs(p.sensitivity - p.specificity) < 1e-6);
            auto o = oracles::sweep_eer(s);
            CHECK(p.sensitivity == doctest::Approx(o.sensitivity).epsilon(1e-6));
        }
    }
}

TEST_CASE("delong test") {
    SUBCASE("identical score vectors give p = 1 exactly") {
        std::vector<double> a{0.9, 0.8, 0.3, 0.4, 0.2, 0.1};
        std::vector<int> l{1, 1, 1, 0, 0, 0};
        auto r = delong_test(a, a, l);
        CHECK(r.z == 0.0);
        CHECK(r.p == 1.0);
    }
    SUBCASE("hand-evaluated 3 pos / 3 neg case") {
        // components worked out by hand:
        //   model a: V10 = {1, 1, 2/3}, V01 = {2/3, 1, 1}, auc = 8/9
        //   model b: V10 = {1, 2/3, 2/3}, V01 = {1/3, 1, 1}, auc = 7/9
        //   S10aa = 1/27, S01aa = 1/27, S10bb = 1/27, S01bb = 4/27,
        //   S10ab = 1/54, S01ab = 2/27
        //   var_a = 2/81, var_b = 5/81, cov = 5/162, denom = 2/81
        //   z = (1/9)/sqrt(2/81) = 1/sqrt(2), p = erfc(1/2) = 0.4795001221869535
        std::vector<double> a{0.9, 0.7, 0.3, 0.6, 0.2, 0.1};
        std::vector<double> b{0.8, 0.4, 0.5, 0.7, 0.3, 0.2};
        std::vector<int> l{1, 1, 1, 0, 0, 0};
        auto r = delong_test(a, b, l);
        CHECK(std::abs(r.auc_a - 8.0 / 9.0) < 1e-12);
        CHECK(std::abs(r.auc_b - 7.0 / 9.0) < 1e-12);
        CHECK(std::abs(r.z - 1.0 / std::sqrt(2.0)) < 1e-10);
        CHECK(std::abs(r.p - 0.4795001221869535) < 1e-10);
    }
    SUBCASE("z is antisymmetric") {
        std::vector<double> a{0.9, 0.7, 0.3, 0.6, 0.2, 0.1};
        std::vector<double> b{0.8, 0.4, 0.5, 0.7, 0.3, 0.2};
        std::vector<int> l{1, 1, 1, 0, 0, 0};
        CHECK(delong_test(a, b, l).z == -delong_test(b, a, l).z);
    }
    SUBCASE("degenerate variance cases") {
        std::vector<int> l{1, 1, 0, 0};
        auto same = delong_test({1, 1, 0, 0}, {0.9, 0.9, 0.1, 0.1}, l);
        CHECK(same.p == 1.0);
        auto diff = delong_test({1, 1, 0, 0}, {0, 0, 1, 1}, l);
        CHECK(diff.p == 0.0);
        CHECK(diff.degenerate_variance);
    }
    SUBCASE("agrees with the paired bootstrap oracle") {
        Rng rng(4242);
        for (int trial = 0; trial < 5; ++trial) {
            const int P = 40, N = 60;
            std::vector<double> a, b;
            std::vector<int> l;
            for (int i = 0; i < P + N; ++i) {
                const int y = i < P ? 1 : 0;
                const double base = y ? rng.gaussian(0.8, 1.0) : rng.gaussian(0.0, 1.0);
                a.push_back(base + rng.gaussian(0.0, 0.5));
                b.push_back(base + rng.gaussian(0.0, 0.7));
                l.push_back(y);
            }
            auto r = delong_test(a, b, l);
            auto rb = rng.fork(trial);
            double pboot = oracles::bootstrap_delong_p(a, b, l, 30000, rb);
            CHECK(std::abs(r.p - pboot) <= 0.03);
        }
    }
}

TEST_CASE("regression metrics") {
    SUBCASE("perfect prediction") {
        auto r = regression_metrics({1, 2, 3}, {1, 2, 3});
        CHECK(r.rmse == 0.0);
        CHECK(r.mae == 0.0);
        REQUIRE(r.pcc.has_value());
        CHECK(*r.pcc == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("anti-correlation") {
        auto r = regression_metrics({-1, 0, 1}, {1, 0, -1});
        REQUIRE(r.pcc.has_value());
        CHECK(*r.pcc == doctest::Approx(-1.0).epsilon(1e-12));
    }
    SUBCASE("hand-summed case") {
        auto r = regression_metrics({1, 2, 3}, {2, 2, 5});
        CHECK(r.rmse == doctest::Approx(std::sqrt(5.0 / 3.0)).epsilon(1e-12));
        CHECK(r.mae == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("zero variance leaves pcc undefined but keeps rmse/mae") {
        auto r = regression_metrics({2, 2, 2}, {1, 2, 3});
        CHECK_FALSE(r.pcc.has_value());
        CHECK(r.mae == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    }
}

TEST_CASE("character error rate") {
    CHECK(cer("abc", "abc") == 0.0);
    CHECK(cer("a", "abcd") == 3.0);
    CHECK(cer("ab", "b") == 0.5);
    CHECK_THROWS_AS(cer("", "abc"), DataError);

    Rng rng(15);
    const std::string alpha = "abcdefghij";
    for (int trial = 0; trial < 300; ++trial) {
        std::string r, h;
        int lr = 1 + static_cast<int>(rng.below(12));
        int lh = static_cast<int>(rng.below(15));
        for (int i = 0; i < lr; ++i) r += alpha[rng.below(10)];
        for (int i = 0; i < lh; ++i) h += alpha[rng.below(10)];
        CHECK(levenshtein(r, h) == oracles::edit_distance_memo(r, h));
        CHECK(cer(r, h) <= static_cast<double>(r.size() + h.size()) / r.size());
    }
}

TEST_CASE("report rendering") {
    MetricsReport r;
    r.model = "EH-AC+TL-1";
    r.split = "test";
    r.auc = 0.79;
    r.sensitivity = 0.71;
    r.specificity = 0.71;
    r.n_sessions = 100;
    r.n_pos = 25;
    r.n_neg = 75;
    r.config_fingerprint = "demo";

    auto csv = render_report_csv({r});
    CHECK(csv.find("EH-AC+TL-1/test,0.79,0.71,0.71") != std::string::npos);
    CHECK(render_report_csv({r}) == csv);

    auto js = render_report_json({r});
    CHECK(render_report_json({r}) == js);
    auto back = parse_report_json(js);
    REQUIRE(back.size() == 1);
    CHECK(back[0].model == r.model);
    CHECK(back[0].auc == r.auc);
    CHECK_FALSE(back[0].rmse.has_value());
    CHECK(back[0].n_neg == 75);
}
