#pragma once

#include <optional>
#include <string>
#include <vector>

namespace ehs {

// Session-level scores with binary labels (1 = positive class).
struct ScoredSet {
    std::vector<double> scores;
    std::vector<int> labels;

    void validate_for_binary() const; // both classes present, finite scores
};

// Mann-Whitney statistic: fraction of (positive, negative) pairs where the
// positive scores higher; ties count 1/2. Equals the trapezoidal ROC area.
double auc(const ScoredSet& s);

struct EerPoint {
    double threshold;
    double sensitivity;
    double specificity;
};

// Threshold sweep at score midpoints, linear interpolation at the
// sensitivity/specificity crossing.
EerPoint eer_point(const ScoredSet& s);

struct DelongResult {
    double auc_a = 0.0;
    double auc_b = 0.0;
    double z = 0.0;
    double p = 1.0;
    bool degenerate_variance = false;
};

// Paired DeLong test: same sessions and labels, two score vectors.
DelongResult delong_test(const std::vector<double>& scores_a, const std::vector<double>& scores_b,
                         const std::vector<int>& labels);

struct RegressionMetrics {
    double rmse;
    double mae;
    std::optional<double> pcc; // undefined when either side has zero variance
};

RegressionMetrics regression_metrics(const std::vector<double>& pred,
                                     const std::vector<double>& target);

// Unit-cost edit distance.
int levenshtein(const std::string& a, const std::string& b);

// Levenshtein / reference length; can exceed 1 via insertions.
double cer(const std::string& reference, const std::string& hypothesis);

struct MetricsReport {
    std::string model;
    std::string split;
    std::optional<double> auc, sensitivity, specificity, delong_p;
    std::optional<double> rmse, mae, pcc, cer;
    int n_sessions = 0;
    int n_pos = 0;
    int n_neg = 0;
    std::string config_fingerprint;
};

// Table-shaped CSV: one "model/split" row per report, 2-decimal values.
std::string render_report_csv(const std::vector<MetricsReport>& reports);
// Full-precision JSON; parses back to equal values.
std::string render_report_json(const std::vector<MetricsReport>& reports);
std::vector<MetricsReport> parse_report_json(const std::string& text);

} // namespace ehs
