#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "ehs/checkpoint.hpp"
#include "ehs/corpus.hpp"
#include "ehs/features.hpp"
#include "ehs/losses.hpp"
#include "ehs/metrics.hpp"
#include "ehs/models.hpp"
#include "ehs/params.hpp"

namespace ehs {

// Everything a training run needs to know about the model stack and the
// feature frontend. One fingerprint covers the lot, so any artifact can state
// exactly which pipeline produced it.
struct PipelineConfig {
    FeatureConfig features;
    EncoderConfig encoder;
    AsrDecoderConfig decoder;
    RcnnHeadConfig head;
    LstmHeadConfig lstm_head;
    FusionConfig fusion;

    void validate() const;
    std::string canonical() const;  // field-by-field text form
    uint64_t fingerprint() const;   // CRC-64 of canonical()
    std::string fingerprint_hex() const;
};

struct TrainConfig {
    int batch_size = 8; // gradient accumulation group
    int max_epochs = 20;
    int patience = 3;   // epochs without dev improvement before stopping
    double lr = 1e-3;
    uint64_t seed = 1;
    FreezePolicy policy = FreezePolicy::TL1_update_all;
    TaskKind task = TaskKind::classification;
    double lambda = 0.5; // hybrid-loss weight on the CTC term

    void validate() const;
};

enum class ExperimentArm { scratch, tl1, tl2, lstm_baseline };

const char* arm_token(ExperimentArm a);           // "scratch" / "tl1" / ...
const char* arm_label(ExperimentArm a);           // table name: "EH-AC+TL-1" / ...
ExperimentArm arm_from_string(const std::string& s); // accepts tokens; ConfigError

// --- featurized views of the corpus ----------------------------------------

struct PretrainExample {
    std::string transcript;
    TensorPtr features; // normalized log-mel [T, n_mels]
};

struct SegmentExample {
    std::string session_id;
    TensorPtr features;
    int label = 0;      // session's binary label, inherited by the segment
    double score = 0.0; // session's phq8, inherited likewise
};

struct SessionGroup {
    std::string session_id;
    int label = 0;
    double score = 0.0;
    std::vector<int> segment_indices; // into DataSplit::segments
};

struct DataSplit {
    std::vector<SegmentExample> segments;
    std::vector<SessionGroup> sessions;
};

// Reads each response's WAV under `root`, computes (or reuses a cached copy
// of) its normalized log-mel features, and maps the transcript to labels.
// Caches live in root/features when `use_cache`; a cache entry computed under
// a different feature config is ignored and recomputed.
std::vector<PretrainExample> load_pretrain_split(const std::vector<Session>& sessions,
                                                 const std::string& split, const std::string& root,
                                                 const FeatureConfig& fcfg, int alphabet,
                                                 bool use_cache = true);

// Segments every response (25 s cuts) and featurizes each segment on its own,
// inheriting the session's label. DataError on an empty split or a session
// that keeps no segments.
DataSplit load_downstream_split(const std::vector<Session>& sessions, const std::string& split,
                                const std::string& root, const FeatureConfig& fcfg,
                                bool use_cache = true);

// Writes feature caches for every response in every split; returns the number
// of files written (skips valid existing entries).
int featurize_corpus(const std::vector<Session>& sessions, const std::string& root,
                     const FeatureConfig& fcfg);

// --- training loops ----------------------------------------------------------

struct EpochLog {
    int epoch = 0;          // 1-based
    double train_loss = 0.0;
    double dev_metric = 0.0; // dev loss (pretraining) or dev AUC/RMSE (downstream)
    std::optional<double> dev_cer;
};

// epoch,train_loss,dev_metric[,dev_cer] rows; header included.
std::string epoch_log_csv(const std::vector<EpochLog>& log, const std::string& metric_name);

struct PretrainResult {
    Checkpoint best;          // lowest dev loss over completed epochs
    std::vector<EpochLog> log;
    double best_dev_loss = std::numeric_limits<double>::infinity();
    double best_dev_cer = std::numeric_limits<double>::quiet_NaN(); // CER at the chosen epoch
};

// Hybrid CTC/attention pretraining under cfg.policy (tl1 or tl2 only).
// Feasibility failures in CTC are surfaced, never skipped. max_epochs == 0
// returns the initialization as the checkpoint.
PretrainResult pretrain_asr(const std::vector<PretrainExample>& train,
                            const std::vector<PretrainExample>& dev,
                            const PipelineConfig& pipeline, const TrainConfig& cfg);

struct DownstreamModel {
    ExperimentArm arm = ExperimentArm::scratch;
    TaskKind task = TaskKind::classification;
    EncoderConfig encoder;
    RcnnHeadConfig head;
    LstmHeadConfig lstm_head;
    FusionConfig fusion;
    ParamList segment_params; // encoder.+head. (head. only for the LSTM arm)
    ParamList fusion_params;  // fusion.
};

// Freshly initialized downstream model (segment + fusion parameters) with the
// same names, shapes, and random streams train_downstream starts from. Used
// both by the trainer and to rebuild a skeleton for restoring a saved model.
DownstreamModel build_downstream_model(const PipelineConfig& pipeline, ExperimentArm arm,
                                       TaskKind task, uint64_t seed);

// Segment model applied to one segment's features (dispatches on the arm).
HeadOutput segment_forward(const DownstreamModel& model, const TensorPtr& features);
// Session score: max-fused segment embeddings through the fusion MLP.
double session_score(const DownstreamModel& model, const DataSplit& data,
                     const SessionGroup& session);

struct DownstreamResult {
    DownstreamModel model; // best-dev state of both stages
    std::vector<EpochLog> stage1_log; // segment-level dev metric
    std::vector<EpochLog> stage2_log; // session-level dev metric
    double best_dev_metric = 0.0;     // stage-2 (session-level) selection value
};

// Stage 1 trains the segment model (each segment under its session's label),
// stage 2 trains the fusion MLP on the frozen best segment model's
// embeddings. Early stopping on the dev metric (AUC up / RMSE down) in both
// stages. `encoder_source` == nullptr means the scratch arm; a non-null
// source is transferred (encoder weights only) before training. Test data
// never enters here: callers evaluate separately.
DownstreamResult train_downstream(const DataSplit& train, const DataSplit& dev,
                                  const PipelineConfig& pipeline, const TrainConfig& cfg,
                                  ExperimentArm arm, const Checkpoint* encoder_source);

// Session-aligned scores for a split, sorted by session id.
struct SessionScores {
    std::vector<std::string> session_ids;
    std::vector<double> scores;  // logit (classification) or predicted phq8
    std::vector<int> labels;     // binary
    std::vector<double> targets; // phq8
};

SessionScores score_sessions(const DownstreamModel& model, const DataSplit& data);

// MetricsReport over one split: AUC/sensitivity/specificity for
// classification, RMSE/MAE/PCC for regression.
MetricsReport evaluate_downstream(const DownstreamModel& model, const DataSplit& data,
                                  const std::string& split_name,
                                  const std::string& config_fingerprint);

// --- experiment harness -------------------------------------------------------

struct ExperimentConfig {
    std::vector<ExperimentArm> arms = {ExperimentArm::scratch, ExperimentArm::tl1,
                                       ExperimentArm::tl2};
    std::vector<uint64_t> seeds = {1, 2, 3, 4, 5};
    PipelineConfig pipeline;
    TrainConfig pretrain;   // policy is set per arm; other fields shared
    TrainConfig downstream; // policy must be a downstream one

    void validate() const; // >= 2 distinct arms, >= 3 distinct seeds
};

struct ArmRun {
    ExperimentArm arm = ExperimentArm::scratch;
    uint64_t seed = 0;
    MetricsReport dev, test;
    SessionScores test_scores; // for paired tests between arms
    double pretrain_cer = std::numeric_limits<double>::quiet_NaN(); // tl arms only
};

struct ArmComparison {
    ExperimentArm arm_a = ExperimentArm::scratch;
    ExperimentArm arm_b = ExperimentArm::scratch;
    uint64_t seed = 0;
    DelongResult delong;
};

struct ExperimentResult {
    std::vector<ArmRun> runs;               // arms x seeds, arm-major
    std::vector<ArmComparison> comparisons; // every arm pair, per seed (classification)
    std::vector<MetricsReport> summary;     // per arm+split, metrics averaged over seeds
    std::string summary_csv;
    std::string summary_json; // full per-run detail + config echo
};

// Paired DeLong between two runs that must share the identical test session
// list (ConfigError otherwise).
DelongResult compare_runs(const ArmRun& a, const ArmRun& b);

ExperimentResult run_experiment(const std::vector<Session>& sessions, const std::string& root,
                                const ExperimentConfig& cfg);

} // namespace ehs
