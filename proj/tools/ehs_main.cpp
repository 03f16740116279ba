// Batch front end for the pipeline: corpus synthesis, featurization,
// pretraining, downstream training, evaluation, prediction, the multi-arm
// experiment harness, and a gradient-check entry point.
//
// Settings come from a JSON config file (--config); the documented flags
// override file values. Exit codes: 0 ok, 2 configuration error, 3 data
// error, 4 numeric failure. stdout carries data, stderr diagnostics.
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ehs/binio.hpp"
#include "ehs/checkpoint.hpp"
#include "ehs/corpus.hpp"
#include "ehs/error.hpp"
#include "ehs/gradcheck.hpp"
#include "ehs/losses.hpp"
#include "ehs/metrics.hpp"
#include "ehs/models.hpp"
#include "ehs/rng.hpp"
#include "ehs/trainer.hpp"

using nlohmann::json;
using nlohmann::ordered_json;
using namespace ehs;
namespace fs = std::filesystem;

namespace {

// --- configuration file ---------------------------------------------------

struct FileConfig {
    SyntheticCorpusConfig corpus;
    PipelineConfig pipeline;
    TrainConfig pretrain;
    TrainConfig downstream;
    std::vector<ExperimentArm> arms{ExperimentArm::scratch, ExperimentArm::tl1,
                                    ExperimentArm::tl2};
    std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
    std::string corpus_dir;
    std::string out_dir;
    std::string checkpoint; // encoder source for tl arms
    std::string model;      // trained downstream model
    std::string split = "dev";
    std::string arm = "scratch";

    FileConfig() {
        pretrain.policy = FreezePolicy::TL1_update_all;
        downstream.policy = FreezePolicy::finetune_encoder;
    }
};

void expect_keys(const json& j, const std::string& where,
                 const std::set<std::string>& allowed) {
    if (!j.is_object()) throw ConfigError("config: '" + where + "' must be an object");
    for (const auto& [key, _] : j.items()) {
        if (!allowed.count(key)) {
            throw ConfigError("config: unknown key '" + key + "' in " + where);
        }
    }
}

template <typename T>
void get_to(const json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

void read_corpus(const json& j, SyntheticCorpusConfig& c) {
    expect_keys(j, "corpus",
                {"n_speakers", "min_sessions_per_speaker", "max_sessions_per_speaker",
                 "min_responses_per_session", "max_responses_per_session",
                 "min_response_seconds", "max_response_seconds", "seed", "rate_coupling",
                 "tilt_coupling", "label_noise_std", "prevalence_target", "sample_rate",
                 "ratios"});
    get_to(j, "n_speakers", c.n_speakers);
    get_to(j, "min_sessions_per_speaker", c.min_sessions_per_speaker);
    get_to(j, "max_sessions_per_speaker", c.max_sessions_per_speaker);
    get_to(j, "min_responses_per_session", c.min_responses_per_session);
    get_to(j, "max_responses_per_session", c.max_responses_per_session);
    get_to(j, "min_response_seconds", c.min_response_seconds);
    get_to(j, "max_response_seconds", c.max_response_seconds);
    get_to(j, "seed", c.seed);
    get_to(j, "rate_coupling", c.rate_coupling);
    get_to(j, "tilt_coupling", c.tilt_coupling);
    get_to(j, "label_noise_std", c.label_noise_std);
    get_to(j, "prevalence_target", c.prevalence_target);
    get_to(j, "sample_rate", c.sample_rate);
    if (j.contains("ratios")) {
        const auto& r = j.at("ratios");
        expect_keys(r, "corpus.ratios", {"train", "dev", "test"});
        get_to(r, "train", c.ratios.train);
        get_to(r, "dev", c.ratios.dev);
        get_to(r, "test", c.ratios.test);
    }
}

void read_pipeline(const json& j, PipelineConfig& p) {
    expect_keys(j, "pipeline", {"features", "encoder", "decoder", "head", "lstm_head", "fusion"});
    if (j.contains("features")) {
        const auto& f = j.at("features");
        expect_keys(f, "pipeline.features",
                    {"sample_rate", "window_ms", "hop_ms", "n_fft", "n_mels", "f_min", "f_max",
                     "log_floor"});
        get_to(f, "sample_rate", p.features.sample_rate);
        get_to(f, "window_ms", p.features.window_ms);
        get_to(f, "hop_ms", p.features.hop_ms);
        get_to(f, "n_fft", p.features.n_fft);
        get_to(f, "n_mels", p.features.n_mels);
        get_to(f, "f_min", p.features.f_min);
        get_to(f, "f_max", p.features.f_max);
        get_to(f, "log_floor", p.features.log_floor);
        p.encoder.n_mels = p.features.n_mels; // keep in step unless overridden below
    }
    if (j.contains("encoder")) {
        const auto& e = j.at("encoder");
        expect_keys(e, "pipeline.encoder",
                    {"conv_channels", "time_stride", "freq_stride", "n_mels", "lstm_hidden"});
        get_to(e, "conv_channels", p.encoder.conv_channels);
        get_to(e, "time_stride", p.encoder.time_stride);
        get_to(e, "freq_stride", p.encoder.freq_stride);
        get_to(e, "n_mels", p.encoder.n_mels);
        get_to(e, "lstm_hidden", p.encoder.lstm_hidden);
    }
    if (j.contains("decoder")) {
        const auto& d = j.at("decoder");
        expect_keys(d, "pipeline.decoder", {"alphabet", "embed_dim", "hidden", "att_dim"});
        get_to(d, "alphabet", p.decoder.alphabet);
        get_to(d, "embed_dim", p.decoder.embed_dim);
        get_to(d, "hidden", p.decoder.hidden);
        get_to(d, "att_dim", p.decoder.att_dim);
    }
    if (j.contains("head")) {
        const auto& h = j.at("head");
        expect_keys(h, "pipeline.head", {"rnn_hidden", "proj_dim", "embed_dim"});
        get_to(h, "rnn_hidden", p.head.rnn_hidden);
        get_to(h, "proj_dim", p.head.proj_dim);
        get_to(h, "embed_dim", p.head.embed_dim);
    }
    if (j.contains("lstm_head")) {
        const auto& h = j.at("lstm_head");
        expect_keys(h, "pipeline.lstm_head", {"hidden", "embed_dim"});
        get_to(h, "hidden", p.lstm_head.hidden);
        get_to(h, "embed_dim", p.lstm_head.embed_dim);
    }
    if (j.contains("fusion")) {
        const auto& f = j.at("fusion");
        expect_keys(f, "pipeline.fusion", {"hidden"});
        get_to(f, "hidden", p.fusion.hidden);
    }
}

void read_train(const json& j, const std::string& where, TrainConfig& t, bool downstream) {
    std::set<std::string> keys = {"batch_size", "max_epochs", "patience",
                                  "lr",         "lambda",     "seed",
                                  "freeze_policy"};
    if (downstream) keys.insert("task");
    expect_keys(j, where, keys);
    get_to(j, "batch_size", t.batch_size);
    get_to(j, "max_epochs", t.max_epochs);
    get_to(j, "patience", t.patience);
    get_to(j, "lr", t.lr);
    get_to(j, "lambda", t.lambda);
    get_to(j, "seed", t.seed);
    if (j.contains("freeze_policy")) {
        t.policy = freeze_policy_from_string(j.at("freeze_policy").get<std::string>());
    }
    if (downstream && j.contains("task")) {
        t.task = task_from_string(j.at("task").get<std::string>());
    }
}

void read_experiment(const json& j, FileConfig& c) {
    expect_keys(j, "experiment", {"arms", "seeds"});
    if (j.contains("arms")) {
        c.arms.clear();
        for (const auto& a : j.at("arms")) c.arms.push_back(arm_from_string(a.get<std::string>()));
    }
    get_to(j, "seeds", c.seeds);
}

FileConfig load_file_config(const std::string& path) {
    FileConfig c;
    if (path.empty()) return c;
    std::string text;
    try {
        auto bytes = read_file_bytes(path);
        text.assign(bytes.begin(), bytes.end());
    } catch (const DataError&) {
        throw ConfigError("cannot open config file '" + path + "'");
    }
    try {
        json j = json::parse(text);
        expect_keys(j, "the top level",
                    {"corpus", "pipeline", "pretrain", "downstream", "experiment", "corpus_dir",
                     "out_dir", "checkpoint", "model", "split", "arm"});
        if (j.contains("corpus")) read_corpus(j.at("corpus"), c.corpus);
        if (j.contains("pipeline")) read_pipeline(j.at("pipeline"), c.pipeline);
        if (j.contains("pretrain")) read_train(j.at("pretrain"), "pretrain", c.pretrain, false);
        if (j.contains("downstream"))
            read_train(j.at("downstream"), "downstream", c.downstream, true);
        if (j.contains("experiment")) read_experiment(j.at("experiment"), c);
        get_to(j, "corpus_dir", c.corpus_dir);
        get_to(j, "out_dir", c.out_dir);
        get_to(j, "checkpoint", c.checkpoint);
        get_to(j, "model", c.model);
        get_to(j, "split", c.split);
        get_to(j, "arm", c.arm);
    } catch (const json::exception& e) {
        throw ConfigError("config '" + path + "': " + e.what());
    }
    return c;
}

// --- effective-config echo (reproducibility headers) -----------------------

ordered_json corpus_json(const SyntheticCorpusConfig& c) {
    ordered_json j;
    j["n_speakers"] = c.n_speakers;
    j["min_sessions_per_speaker"] = c.min_sessions_per_speaker;
    j["max_sessions_per_speaker"] = c.max_sessions_per_speaker;
    j["min_responses_per_session"] = c.min_responses_per_session;
    j["max_responses_per_session"] = c.max_responses_per_session;
    j["min_response_seconds"] = c.min_response_seconds;
    j["max_response_seconds"] = c.max_response_seconds;
    j["seed"] = c.seed;
    j["rate_coupling"] = c.rate_coupling;
    j["tilt_coupling"] = c.tilt_coupling;
    j["label_noise_std"] = c.label_noise_std;
    j["prevalence_target"] = c.prevalence_target;
    j["sample_rate"] = c.sample_rate;
    j["ratios"] = {{"train", c.ratios.train}, {"dev", c.ratios.dev}, {"test", c.ratios.test}};
    return j;
}

ordered_json pipeline_json(const PipelineConfig& p) {
    ordered_json j;
    j["features"] = {{"sample_rate", p.features.sample_rate}, {"window_ms", p.features.window_ms},
                     {"hop_ms", p.features.hop_ms},           {"n_fft", p.features.n_fft},
                     {"n_mels", p.features.n_mels},           {"f_min", p.features.f_min},
                     {"f_max", p.features.f_max},             {"log_floor", p.features.log_floor}};
    j["encoder"] = {{"conv_channels", p.encoder.conv_channels},
                    {"time_stride", p.encoder.time_stride},
                    {"freq_stride", p.encoder.freq_stride},
                    {"n_mels", p.encoder.n_mels},
                    {"lstm_hidden", p.encoder.lstm_hidden}};
    j["decoder"] = {{"alphabet", p.decoder.alphabet},
                    {"embed_dim", p.decoder.embed_dim},
                    {"hidden", p.decoder.hidden},
                    {"att_dim", p.decoder.att_dim}};
    j["head"] = {{"rnn_hidden", p.head.rnn_hidden},
                 {"proj_dim", p.head.proj_dim},
                 {"embed_dim", p.head.embed_dim}};
    j["lstm_head"] = {{"hidden", p.lstm_head.hidden}, {"embed_dim", p.lstm_head.embed_dim}};
    j["fusion"] = {{"hidden", p.fusion.hidden}};
    return j;
}

ordered_json train_json(const TrainConfig& t, bool downstream) {
    ordered_json j;
    j["batch_size"] = t.batch_size;
    j["max_epochs"] = t.max_epochs;
    j["patience"] = t.patience;
    j["lr"] = t.lr;
    j["lambda"] = t.lambda;
    j["seed"] = t.seed;
    j["freeze_policy"] = freeze_policy_name(t.policy);
    if (downstream) j["task"] = task_name(t.task);
    return j;
}

ordered_json effective_json(const FileConfig& c, const std::string& command) {
    ordered_json j;
    j["command"] = command;
    j["corpus"] = corpus_json(c.corpus);
    j["pipeline"] = pipeline_json(c.pipeline);
    j["config_fingerprint"] = c.pipeline.fingerprint_hex();
    j["pretrain"] = train_json(c.pretrain, false);
    j["downstream"] = train_json(c.downstream, true);
    ordered_json arms = ordered_json::array();
    for (auto a : c.arms) arms.push_back(arm_token(a));
    j["experiment"] = {{"arms", arms}, {"seeds", c.seeds}};
    j["corpus_dir"] = c.corpus_dir;
    j["out_dir"] = c.out_dir;
    j["checkpoint"] = c.checkpoint;
    j["model"] = c.model;
    j["split"] = c.split;
    j["arm"] = c.arm;
    return j;
}

void write_text(const std::string& path, const std::string& text) {
    std::vector<uint8_t> bytes(text.begin(), text.end());
    write_file_bytes(path, bytes);
}

std::string ensure_out_dir(const FileConfig& c, const std::string& command) {
    if (c.out_dir.empty()) {
        throw ConfigError(command + " needs an output directory (--out or out_dir)");
    }
    fs::create_directories(c.out_dir);
    return c.out_dir;
}

void write_run_json(const std::string& out_dir, const FileConfig& c,
                    const std::string& command) {
    write_text((fs::path(out_dir) / "run.json").string(),
               effective_json(c, command).dump(2) + "\n");
}

// One-line reproducibility header for CSV artifacts: the full effective
// config (single-line JSON) plus the seed that produced the file.
std::string repro_header(const FileConfig& c, const std::string& command, uint64_t seed) {
    return "# seed=" + std::to_string(seed) + " config=" + effective_json(c, command).dump() +
           "\n";
}

std::vector<Session> load_corpus(const FileConfig& c) {
    if (c.corpus_dir.empty()) throw ConfigError("corpus_dir is not set in the config");
    return load_manifest((fs::path(c.corpus_dir) / "manifest.jsonl").string());
}

// --- subcommands ------------------------------------------------------------

int cmd_gen_corpus(const FileConfig& cfg, bool force) {
    auto out = ensure_out_dir(cfg, "gen-corpus");
    const bool occupied = fs::exists(out) && !fs::is_empty(out);
    if (occupied && !force) {
        throw ConfigError("output directory '" + out + "' is not empty (use --force to replace)");
    }
    if (occupied) {
        fs::remove_all(out);
        fs::create_directories(out);
    }
    auto sessions = generate_synthetic_corpus(cfg.corpus, out);
    save_manifest((fs::path(out) / "manifest.jsonl").string(), sessions);
    auto stats = repro_header(cfg, "gen-corpus", cfg.corpus.seed) + corpus_stats_csv(sessions);
    write_text((fs::path(out) / "stats.csv").string(), stats);
    write_run_json(out, cfg, "gen-corpus");
    std::fputs(stats.c_str(), stdout);
    return 0;
}

int cmd_featurize(const FileConfig& cfg) {
    auto sessions = load_corpus(cfg);
    int n = featurize_corpus(sessions, cfg.corpus_dir, cfg.pipeline.features);
    write_text((fs::path(cfg.corpus_dir) / "features" / "run.json").string(),
               effective_json(cfg, "featurize").dump(2) + "\n");
    std::printf("wrote %d feature files under %s/features\n", n, cfg.corpus_dir.c_str());
    return 0;
}

int cmd_pretrain(const FileConfig& cfg) {
    auto out = ensure_out_dir(cfg, "pretrain");
    auto sessions = load_corpus(cfg);
    auto train = load_pretrain_split(sessions, "train", cfg.corpus_dir, cfg.pipeline.features,
                                     cfg.pipeline.decoder.alphabet);
    auto dev = load_pretrain_split(sessions, "dev", cfg.corpus_dir, cfg.pipeline.features,
                                   cfg.pipeline.decoder.alphabet);
    auto res = pretrain_asr(train, dev, cfg.pipeline, cfg.pretrain);
    save_checkpoint(res.best, (fs::path(out) / "checkpoint.ehck").string());
    auto log = repro_header(cfg, "pretrain", cfg.pretrain.seed) +
               epoch_log_csv(res.log, "dev_loss");
    write_text((fs::path(out) / "pretrain_log.csv").string(), log);
    write_run_json(out, cfg, "pretrain");
    std::fputs(log.c_str(), stdout);
    std::fprintf(stderr, "best dev cer %.6g; checkpoint at %s/checkpoint.ehck\n",
                 res.best_dev_cer, out.c_str());
    return 0;
}

int cmd_train(const FileConfig& cfg) {
    auto out = ensure_out_dir(cfg, "train");
    auto arm = arm_from_string(cfg.arm);
    auto sessions = load_corpus(cfg);
    auto train = load_downstream_split(sessions, "train", cfg.corpus_dir, cfg.pipeline.features);
    auto dev = load_downstream_split(sessions, "dev", cfg.corpus_dir, cfg.pipeline.features);

    Checkpoint source;
    const Checkpoint* source_ptr = nullptr;
    if (arm == ExperimentArm::tl1 || arm == ExperimentArm::tl2) {
        if (cfg.checkpoint.empty()) {
            throw ConfigError(std::string("arm ") + arm_token(arm) +
                              " needs 'checkpoint' pointing at a pretrained encoder");
        }
        source = load_checkpoint(cfg.checkpoint);
        source_ptr = &source;
    }
    auto res = train_downstream(train, dev, cfg.pipeline, cfg.downstream, arm, source_ptr);

    CheckpointMeta meta;
    meta.model = std::string("downstream/") + arm_token(arm);
    meta.task = task_name(cfg.downstream.task);
    meta.config_fingerprint = cfg.pipeline.fingerprint();
    meta.seed = cfg.downstream.seed;
    meta.freeze_policy = arm == ExperimentArm::lstm_baseline
                             ? ""
                             : freeze_policy_name(cfg.downstream.policy);
    ParamList all = res.model.segment_params;
    all.insert(all.end(), res.model.fusion_params.begin(), res.model.fusion_params.end());
    save_checkpoint(all, meta, (fs::path(out) / "model.ehck").string());

    const char* metric = cfg.downstream.task == TaskKind::classification ? "dev_auc" : "dev_rmse";
    auto head = repro_header(cfg, "train", cfg.downstream.seed);
    write_text((fs::path(out) / "stage1_log.csv").string(),
               head + epoch_log_csv(res.stage1_log, metric));
    auto stage2 = head + epoch_log_csv(res.stage2_log, metric);
    write_text((fs::path(out) / "stage2_log.csv").string(), stage2);
    write_run_json(out, cfg, "train");
    std::fputs(stage2.c_str(), stdout);
    std::fprintf(stderr, "best dev %s %.6g; model at %s/model.ehck\n", metric,
                 res.best_dev_metric, out.c_str());
    return 0;
}

DownstreamModel load_downstream_model(const std::string& path, const PipelineConfig& pipeline) {
    if (path.empty()) throw ConfigError("'model' is not set in the config");
    auto ck = load_checkpoint(path);
    const std::string prefix = "downstream/";
    if (ck.meta.model.rfind(prefix, 0) != 0) {
        throw ConfigError("'" + path + "' is not a downstream model checkpoint (model kind '" +
                          ck.meta.model + "')");
    }
    if (ck.meta.config_fingerprint != pipeline.fingerprint()) {
        throw ConfigError("model '" + path +
                          "' was trained under a different pipeline configuration");
    }
    auto m = build_downstream_model(pipeline, arm_from_string(ck.meta.model.substr(prefix.size())),
                                    task_from_string(ck.meta.task), ck.meta.seed);
    ParamList all = m.segment_params;
    all.insert(all.end(), m.fusion_params.begin(), m.fusion_params.end());
    restore_params(ck, all);
    return m;
}

int cmd_evaluate(const FileConfig& cfg, bool final_eval) {
    auto out = ensure_out_dir(cfg, "evaluate");
    if (cfg.split == "test" && !final_eval) {
        throw ConfigError("test labels are withheld until the final evaluation; "
                          "pass --final to evaluate on the test split");
    }
    auto sessions = load_corpus(cfg);
    auto model = load_downstream_model(cfg.model, cfg.pipeline);
    auto data = load_downstream_split(sessions, cfg.split, cfg.corpus_dir, cfg.pipeline.features);
    auto rep = evaluate_downstream(model, data, cfg.split, cfg.pipeline.fingerprint_hex());
    auto csv = repro_header(cfg, "evaluate", cfg.downstream.seed) + render_report_csv({rep});
    write_text((fs::path(out) / "report.csv").string(), csv);
    write_text((fs::path(out) / "report.json").string(), render_report_json({rep}) + "\n");
    write_run_json(out, cfg, "evaluate");
    std::fputs(csv.c_str(), stdout);
    return 0;
}

int cmd_predict(const FileConfig& cfg) {
    auto out = ensure_out_dir(cfg, "predict");
    auto sessions = load_corpus(cfg);
    auto model = load_downstream_model(cfg.model, cfg.pipeline);
    auto data = load_downstream_split(sessions, cfg.split, cfg.corpus_dir, cfg.pipeline.features);
    auto scored = score_sessions(model, data);

    const bool cls = model.task == TaskKind::classification;
    std::string csv = repro_header(cfg, "predict", cfg.downstream.seed);
    csv += cls ? "session_id,probability,class\n" : "session_id,predicted_phq8,class\n";
    char buf[64];
    for (size_t i = 0; i < scored.session_ids.size(); ++i) {
        double value = cls ? 1.0 / (1.0 + std::exp(-scored.scores[i])) : scored.scores[i];
        int label = cls ? value >= 0.5 : value >= 10.0;
        std::snprintf(buf, sizeof buf, "%.6f,%d\n", value, label);
        csv += scored.session_ids[i] + "," + buf;
    }
    write_text((fs::path(out) / "predictions.csv").string(), csv);
    write_run_json(out, cfg, "predict");
    std::fputs(csv.c_str(), stdout);
    return 0;
}

int cmd_experiment(const FileConfig& cfg) {
    auto out = ensure_out_dir(cfg, "experiment");
    auto sessions = load_corpus(cfg);
    ExperimentConfig ec;
    ec.arms = cfg.arms;
    ec.seeds = cfg.seeds;
    ec.pipeline = cfg.pipeline;
    ec.pretrain = cfg.pretrain;
    ec.downstream = cfg.downstream;
    auto result = run_experiment(sessions, cfg.corpus_dir, ec);
    auto csv = repro_header(cfg, "experiment", 0) + result.summary_csv;
    write_text((fs::path(out) / "summary.csv").string(), csv);
    write_text((fs::path(out) / "summary.json").string(), result.summary_json + "\n");
    write_run_json(out, cfg, "experiment");
    std::fputs(csv.c_str(), stdout);
    return 0;
}

// Gradient checks over every trainable parameter of each model family,
// against central finite differences.
int cmd_gradcheck() {
    struct Case {
        std::string name;
        std::function<GradCheckReport(ParamList&)> run;
        ParamList params;
    };
    std::vector<Case> cases;
    Rng rng(20240817);

    auto random_features = [&rng](int frames, int mels) {
        std::vector<double> v(static_cast<size_t>(frames) * mels);
        for (auto& x : v) x = rng.gaussian(0.0, 1.0);
        return tensor({frames, mels}, v);
    };

    EncoderConfig enc;
    enc.conv_channels = {2, 3};
    enc.n_mels = 9;
    enc.lstm_hidden = {4};
    AsrDecoderConfig dec;
    dec.alphabet = 4;
    dec.embed_dim = 3;
    dec.hidden = 5;
    dec.att_dim = 3;
    const std::vector<int> labels = {1, 3, 0};
    auto asr_features = random_features(15, enc.n_mels);

    {
        Case c;
        c.name = "encoder+decoder hybrid loss";
        Rng init(1);
        c.params = init_encoder(enc, init);
        auto d = init_asr_decoder(dec, enc.out_dim(), init);
        c.params.insert(c.params.end(), d.begin(), d.end());
        c.run = [=](ParamList& ps) {
            return gradient_check(
                [&] {
                    auto h = encoder_forward(ps, enc, asr_features);
                    auto o = asr_forward(ps, dec, h, labels);
                    return hybrid_loss(ctc_loss(log_softmax_rows(o.ctc_logits), labels),
                                       attention_ce(o.att_logits, labels), 0.5);
                },
                ps);
        };
        cases.push_back(std::move(c));
    }
    {
        Case c;
        c.name = "encoder+head classification loss";
        RcnnHeadConfig head;
        head.rnn_hidden = 3;
        head.proj_dim = 2;
        head.embed_dim = 4;
        Rng init(2);
        c.params = init_encoder(enc, init);
        auto h = init_rcnn_head(head, enc.out_dim(), init);
        c.params.insert(c.params.end(), h.begin(), h.end());
        auto feats = asr_features;
        c.run = [=](ParamList& ps) {
            return gradient_check(
                [&] {
                    auto enc_out = encoder_forward(ps, enc, feats);
                    auto out = rcnn_forward(ps, head, enc_out);
                    return downstream_loss(out.prediction, 1.0, TaskKind::classification);
                },
                ps);
        };
        cases.push_back(std::move(c));
    }
    {
        Case c;
        c.name = "lstm head regression loss";
        LstmHeadConfig head;
        head.hidden = 4;
        head.embed_dim = 3;
        Rng init(3);
        c.params = init_lstm_head(head, 9, init);
        auto feats = random_features(11, 9);
        c.run = [=](ParamList& ps) {
            return gradient_check(
                [&] {
                    auto out = lstm_head_forward(ps, head, feats);
                    return downstream_loss(out.prediction, 14.0, TaskKind::regression);
                },
                ps);
        };
        cases.push_back(std::move(c));
    }
    {
        Case c;
        c.name = "fusion mlp over segment embeddings";
        FusionConfig fusion;
        fusion.hidden = 3;
        Rng init(4);
        c.params = init_fusion(fusion, 4, init);
        std::vector<TensorPtr> embeds = {random_features(1, 4), random_features(1, 4),
                                         random_features(1, 4)};
        c.run = [=](ParamList& ps) {
            return gradient_check(
                [&] {
                    return downstream_loss(fusion_forward(ps, fusion, embeds), 1.0,
                                           TaskKind::classification);
                },
                ps);
        };
        cases.push_back(std::move(c));
    }

    const double tol = 2e-4;
    bool ok = true;
    for (auto& c : cases) {
        for (auto& p : c.params) p.t->requires_grad = true;
        auto rep = c.run(c.params);
        bool pass = rep.max_rel_err < tol;
        ok = ok && pass;
        std::printf("gradcheck %-36s max_rel_err=%.3e worst=%s[%lld] %s\n", c.name.c_str(),
                    rep.max_rel_err, rep.worst_param.c_str(),
                    static_cast<long long>(rep.worst_index), pass ? "PASS" : "FAIL");
    }
    std::printf("gradcheck %s\n", ok ? "OK" : "FAILED");
    return ok ? 0 : 1;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"speech-based depression prediction: corpus, training, and evaluation tools"};
    app.require_subcommand(1);

    std::string config_path, out_dir, arm, policy, task, split;
    uint64_t seed = 0;
    bool seed_set = false, force = false, final_eval = false;

    auto add_common = [&](CLI::App* sub, bool with_out) {
        sub->add_option("--config", config_path, "JSON configuration file");
        if (with_out) sub->add_option("--out", out_dir, "output directory (overrides out_dir)");
    };
    auto add_seed = [&](CLI::App* sub) {
        sub->add_option_function<uint64_t>(
            "--seed", [&](uint64_t v) { seed = v; seed_set = true; },
            "seed override");
    };

    auto* gen = app.add_subcommand("gen-corpus", "synthesize a labeled corpus");
    add_common(gen, true);
    add_seed(gen);
    gen->add_flag("--force", force, "replace a non-empty output directory");

    auto* feat = app.add_subcommand("featurize", "precompute feature caches for a corpus");
    add_common(feat, false);

    auto* pre = app.add_subcommand("pretrain", "hybrid CTC/attention pretraining");
    add_common(pre, true);
    add_seed(pre);
    pre->add_option("--freeze-policy", policy, "tl1 or tl2")
        ->check(CLI::IsMember({"tl1", "tl2"}));

    auto* train = app.add_subcommand("train", "train the downstream predictor");
    add_common(train, true);
    add_seed(train);
    train->add_option("--arm", arm, "scratch, tl1, tl2, or lstm");
    train->add_option("--task", task, "cls or reg")->check(CLI::IsMember({"cls", "reg"}));

    auto* eval = app.add_subcommand("evaluate", "metrics report for a split");
    add_common(eval, true);
    eval->add_option("--split", split, "train, dev, or test")
        ->check(CLI::IsMember({"train", "dev", "test"}));
    eval->add_flag("--final", final_eval, "allow the one-shot test-split evaluation");

    auto* pred = app.add_subcommand("predict", "per-session predictions for a split");
    add_common(pred, true);
    pred->add_option("--split", split, "train, dev, or test")
        ->check(CLI::IsMember({"train", "dev", "test"}));

    auto* exp = app.add_subcommand("experiment", "multi-arm, multi-seed comparison");
    add_common(exp, true);

    app.add_subcommand("gradcheck", "finite-difference check of every backward rule");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        if (command == "gradcheck") return cmd_gradcheck();

        FileConfig cfg = load_file_config(config_path);
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        if (!split.empty()) cfg.split = split;
        if (!arm.empty()) cfg.arm = arm;
        if (!policy.empty()) cfg.pretrain.policy = freeze_policy_from_string(policy);
        if (!task.empty()) cfg.downstream.task = task_from_string(task);
        if (seed_set) {
            cfg.corpus.seed = seed;
            cfg.pretrain.seed = seed;
            cfg.downstream.seed = seed;
        }

        if (command == "gen-corpus") return cmd_gen_corpus(cfg, force);
        if (command == "featurize") return cmd_featurize(cfg);
        if (command == "pretrain") return cmd_pretrain(cfg);
        if (command == "train") return cmd_train(cfg);
        if (command == "evaluate") return cmd_evaluate(cfg, final_eval);
        if (command == "predict") return cmd_predict(cfg);
        if (command == "experiment") return cmd_experiment(cfg);
        std::fprintf(stderr, "unknown subcommand '%s'\n", command.c_str());
        return 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "internal error: %s\n", e.what());
        return 1;
    }
}
