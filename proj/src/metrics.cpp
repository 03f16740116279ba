#include "ehs/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include <json.hpp>

#include "ehs/error.hpp"

namespace ehs {

namespace {

double psi(double x, double y) {
    if (x > y) return 1.0;
    if (x == y) return 0.5;
    return 0.0;
}

void split_by_label(const ScoredSet& s, std::vector<double>& pos, std::vector<double>& neg) {
    for (size_t i = 0; i < s.scores.size(); ++i) {
        (s.labels[i] ? pos : neg).push_back(s.scores[i]);
    }
}

std::string fmt2(const std::optional<double>& v) {
    if (!v) return "";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", *v);
    return buf;
}

} // namespace

void ScoredSet::validate_for_binary() const {
    if (scores.size() != labels.size()) throw DataError("scored set: score/label length mismatch");
    if (scores.empty()) throw DataError("scored set: empty");
    int pos = 0, neg = 0;
    for (size_t i = 0; i < scores.size(); ++i) {
        if (!std::isfinite(scores[i])) throw DataError("scored set: non-finite score");
        if (labels[i] != 0 && labels[i] != 1) throw DataError("scored set: labels must be 0/1");
        (labels[i] ? pos : neg)++;
    }
    if (pos == 0 || neg == 0) {
        throw DataError("scored set: need both classes (got " + std::to_string(pos) +
                        " positive, " + std::to_string(neg) + " negative)");
    }
}

double auc(const ScoredSet& s) {
    s.validate_for_binary();
    std::vector<double> pos, neg;
    split_by_label(s, pos, neg);
    double total = 0.0;
    for (double x : pos) {
        for (double y : neg) total += psi(x, y);
    }
    return total / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

EerPoint eer_point(const ScoredSet& s) {
    s.validate_for_binary();
    std::vector<double> pos, neg;
    split_by_label(s, pos, neg);

    std::set<double> uniq(s.scores.begin(), s.scores.end());
    std::vector<double> u(uniq.begin(), uniq.end());
    std::vector<double> thresholds;
    thresholds.push_back(u.front() - 1.0);
    for (size_t i = 0; i + 1 < u.size(); ++i) thresholds.push_back((u[i] + u[i + 1]) / 2.0);
    thresholds.push_back(u.back() + 1.0);

    // score >= threshold predicts positive
    auto point = [&](double th, double& sens, double& spec) {
        int tp = 0, tn = 0;
        for (double x : pos) tp += x >= th ? 1 : 0;
        for (double y : neg) tn += y < th ? 1 : 0;
        sens = static_cast<double>(tp) / pos.size();
        spec = static_cast<double>(tn) / neg.size();
    };

    double prev_s, prev_p;
    point(thresholds[0], prev_s, prev_p);
    if (std::abs(prev_s - prev_p) <= 1e-12) return {thresholds[0], prev_s, prev_p};
    for (size_t i = 1; i < thresholds.size(); ++i) {
        double cs, cp;
        point(thresholds[i], cs, cp);
        if (std::abs(cs - cp) <= 1e-12) return {thresholds[i], cs, cp};
        const double d0 = prev_s - prev_p, d1 = cs - cp;
        if (d0 > 0.0 && d1 < 0.0) {
            const double alpha = d0 / (d0 - d1);
            return {thresholds[i - 1] + alpha * (thresholds[i] - thresholds[i - 1]),
                    prev_s + alpha * (cs - prev_s), prev_p + alpha * (cp - prev_p)};
        }
        prev_s = cs;
        prev_p = cp;
    }
    throw NumericError("eer_point: no crossing found"); // unreachable: diff spans +1..-1
}

DelongResult delong_test(const std::vector<double>& scores_a, const std::vector<double>& scores_b,
                         const std::vector<int>& labels) {
    if (scores_a.size() != labels.size() || scores_b.size() != labels.size()) {
        throw DataError("delong_test: paired inputs must have identical length");
    }
    ScoredSet sa{scores_a, labels}, sb{scores_b, labels};
    sa.validate_for_binary();
    sb.validate_for_binary();

    std::vector<double> pa, na, pb, nb;
    split_by_label(sa, pa, na);
    split_by_label(sb, pb, nb);
    const size_t P = pa.size(), N = na.size();
    if (P < 2 || N < 2) throw DataError("delong_test: need at least 2 sessions per class");

    auto components = [&](const std::vector<double>& pos, const std::vector<double>& neg,
                          std::vector<double>& v10, std::vector<double>& v01) {
        v10.assign(P, 0.0);
        v01.assign(N, 0.0);
        for (size_t i = 0; i < P; ++i) {
            for (size_t j = 0; j < N; ++j) {
                const double w = psi(pos[i], neg[j]);
                v10[i] += w;
                v01[j] += w;
            }
        }
        for (auto& v : v10) v /= static_cast<double>(N);
        for (auto& v : v01) v /= static_cast<double>(P);
    };
    std::vector<double> v10a, v01a, v10b, v01b;
    components(pa, na, v10a, v01a);
    components(pb, nb, v10b, v01b);

    auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    const double auc_a = mean(v10a), auc_b = mean(v10b);

    auto cov = [](const std::vector<double>& x, double mx, const std::vector<double>& y,
                  double my) {
        double s = 0.0;
        for (size_t i = 0; i < x.size(); ++i) s += (x[i] - mx) * (y[i] - my);
        return s / static_cast<double>(x.size() - 1);
    };
    const double s10aa = cov(v10a, auc_a, v10a, auc_a);
    const double s10bb = cov(v10b, auc_b, v10b, auc_b);
    const double s10ab = cov(v10a, auc_a, v10b, auc_b);
    const double s01aa = cov(v01a, auc_a, v01a, auc_a);
    const double s01bb = cov(v01b, auc_b, v01b, auc_b);
    const double s01ab = cov(v01a, auc_a, v01b, auc_b);

    const double var_a = s10aa / P + s01aa / N;
    const double var_b = s10bb / P + s01bb / N;
    const double cov_ab = s10ab / P + s01ab / N;
    const double denom = var_a + var_b - 2.0 * cov_ab;

    DelongResult r;
    r.auc_a = auc_a;
    r.auc_b = auc_b;
    if (denom <= 1e-300) {
        if (auc_a == auc_b) {
            r.z = 0.0;
            r.p = 1.0;
        } else {
            r.z = auc_a > auc_b ? HUGE_VAL : -HUGE_VAL;
            r.p = 0.0;
            r.degenerate_variance = true;
        }
        return r;
    }
    r.z = (auc_a - auc_b) / std::sqrt(denom);
    r.p = std::erfc(std::abs(r.z) / std::sqrt(2.0));
    return r;
}

RegressionMetrics regression_metrics(const std::vector<double>& pred,
                                     const std::vector<double>& target) {
    if (pred.size() != target.size()) throw DataError("regression_metrics: length mismatch");
    if (pred.size() < 2) throw DataError("regression_metrics: need at least 2 points");
    const size_t n = pred.size();
    double sq = 0.0, ab = 0.0, mp = 0.0, mt = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double d = pred[i] - target[i];
        sq += d * d;
        ab += std::abs(d);
        mp += pred[i];
        mt += target[i];
    }
    mp /= static_cast<double>(n);
    mt /= static_cast<double>(n);
    double cpt = 0.0, vp = 0.0, vt = 0.0;
    for (size_t i = 0; i < n; ++i) {
        cpt += (pred[i] - mp) * (target[i] - mt);
        vp += (pred[i] - mp) * (pred[i] - mp);
        vt += (target[i] - mt) * (target[i] - mt);
    }
    RegressionMetrics r;
    r.rmse = std::sqrt(sq / static_cast<double>(n));
    r.mae = ab / static_cast<double>(n);
    if (vp > 0.0 && vt > 0.0) {
        r.pcc = cpt / std::sqrt(vp * vt);
    }
    return r;
}

int levenshtein(const std::string& a, const std::string& b) {
    const size_t m = a.size(), n = b.size();
    std::vector<int> prev(n + 1), cur(n + 1);
    for (size_t j = 0; j <= n; ++j) prev[j] = static_cast<int>(j);
    for (size_t i = 1; i <= m; ++i) {
        cur[0] = static_cast<int>(i);
        for (size_t j = 1; j <= n; ++j) {
            const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
        }
        std::swap(prev, cur);
    }
    return prev[n];
}

double cer(const std::string& reference, const std::string& hypothesis) {
    if (reference.empty()) throw DataError("cer: empty reference");
    return static_cast<double>(levenshtein(reference, hypothesis)) /
           static_cast<double>(reference.size());
}

std::string render_report_csv(const std::vector<MetricsReport>& reports) {
    std::string out =
        "row,auc,sensitivity,specificity,delong_p,rmse,mae,pcc,cer,n_sessions,n_pos,n_neg\n";
    for (const auto& r : reports) {
        out += r.model + "/" + r.split + "," + fmt2(r.auc) + "," + fmt2(r.sensitivity) + "," +
               fmt2(r.specificity) + "," + fmt2(r.delong_p) + "," + fmt2(r.rmse) + "," +
               fmt2(r.mae) + "," + fmt2(r.pcc) + "," + fmt2(r.cer) + "," +
               std::to_string(r.n_sessions) + "," + std::to_string(r.n_pos) + "," +
               std::to_string(r.n_neg) + "\n";
    }
    return out;
}

std::string render_report_json(const std::vector<MetricsReport>& reports) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : reports) {
        nlohmann::ordered_json o;
        o["model"] = r.model;
        o["split"] = r.split;
        auto put = [&](const char* key, const std::optional<double>& v) {
            if (v) o[key] = *v;
        };
        put("auc", r.auc);
        put("sensitivity", r.sensitivity);
        put("specificity", r.specificity);
        put("delong_p", r.delong_p);
        put("rmse", r.rmse);
        put("mae", r.mae);
        put("pcc", r.pcc);
        put("cer", r.cer);
        o["n_sessions"] = r.n_sessions;
        o["n_pos"] = r.n_pos;
        o["n_neg"] = r.n_neg;
        o["config"] = r.config_fingerprint;
        arr.push_back(std::move(o));
    }
    return arr.dump(2) + "\n";
}

std::vector<MetricsReport> parse_report_json(const std::string& text) {
    nlohmann::json arr;
    try {
        arr = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("report json: ") + e.what());
    }
    std::vector<MetricsReport> out;
    for (const auto& o : arr) {
        MetricsReport r;
        r.model = o.at("model").get<std::string>();
        r.split = o.at("split").get<std::string>();
        auto get = [&](const char* key) -> std::optional<double> {
            if (o.contains(key)) return o.at(key).get<double>();
            return std::nullopt;
        };
        r.auc = get("auc");
        r.sensitivity = get("sensitivity");
        r.specificity = get("specificity");
        r.delong_p = get("delong_p");
        r.rmse = get("rmse");
        r.mae = get("mae");
        r.pcc = get("pcc");
        r.cer = get("cer");
        r.n_sessions = o.at("n_sessions").get<int>();
        r.n_pos = o.at("n_pos").get<int>();
        r.n_neg = o.at("n_neg").get<int>();
        r.config_fingerprint = o.value("config", "");
        out.push_back(std::move(r));
    }
    return out;
}

} // namespace ehs
