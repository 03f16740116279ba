#include "ehs/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <utility>

#include <json.hpp>

#include "ehs/audio.hpp"
#include "ehs/crc64.hpp"
#include "ehs/error.hpp"
#include "ehs/optim.hpp"

namespace fs = std::filesystem;

namespace ehs {

namespace {

std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::string fmt_exact(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string join_ints(const std::vector<int>& xs) {
    std::string s;
    for (size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
    return s;
}

std::vector<int> shuffled_indices(size_t n, Rng& rng) {
    std::vector<int> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = static_cast<int>(i);
    for (size_t i = n; i > 1; --i) {
        size_t j = static_cast<size_t>(rng.below(i));
        std::swap(idx[i - 1], idx[j]);
    }
    return idx;
}

// Turns the autograd tape off for the guarded scope so evaluation passes do
// pure forward math.
struct GradOff {
    ParamList& ps;
    std::vector<bool> saved;
    explicit GradOff(ParamList& params) : ps(params) {
        saved.reserve(ps.size());
        for (auto& p : ps) {
            saved.push_back(p.t->requires_grad);
            p.t->requires_grad = false;
        }
    }
    ~GradOff() {
        for (size_t i = 0; i < ps.size(); ++i) ps[i].t->requires_grad = saved[i];
    }
};

std::string stem_of(const std::string& wav_path) {
    return fs::path(wav_path).stem().string();
}

FeatureMatrix features_of(const AudioBuffer& audio, const FeatureConfig& fcfg) {
    return per_utterance_normalize(log_mel(audio, fcfg));
}

// Cache-aware feature computation. cache_path == "" disables the cache.
FeatureMatrix cached_features(const AudioBuffer& audio, const FeatureConfig& fcfg,
                              const std::string& cache_path) {
    if (!cache_path.empty() && fs::exists(cache_path)) {
        auto f = load_features(cache_path);
        if (f.fingerprint == fcfg.fingerprint()) return f;
    }
    return features_of(audio, fcfg);
}

AudioBuffer slice_audio(const AudioBuffer& audio, int64_t start, int64_t count) {
    AudioBuffer out;
    out.sample_rate = audio.sample_rate;
    out.samples.assign(audio.samples.begin() + start, audio.samples.begin() + start + count);
    return out;
}

bool is_pretrain_policy(FreezePolicy p) {
    return p == FreezePolicy::TL1_update_all || p == FreezePolicy::TL2_freeze_decoder;
}

bool improved(double value, double best, bool maximize) {
    return maximize ? value > best : value < best;
}

nlohmann::ordered_json report_json(const MetricsReport& r) {
    return nlohmann::ordered_json::parse(render_report_json({r}))[0];
}

} // namespace

// --- configs ----------------------------------------------------------------

void PipelineConfig::validate() const {
    features.validate();
    encoder.validate();
    decoder.validate();
    head.validate();
    lstm_head.validate();
    fusion.validate();
    if (encoder.n_mels != features.n_mels) {
        throw ConfigError("pipeline: encoder expects " + std::to_string(encoder.n_mels) +
                          " mel bins but the frontend produces " + std::to_string(features.n_mels));
    }
}

std::string PipelineConfig::canonical() const {
    std::string s;
    s += "features{" + features.fingerprint() + ",floor=" + fmt_exact(features.log_floor) + "}";
    s += "encoder{conv=" + join_ints(encoder.conv_channels) +
         ";ts=" + std::to_string(encoder.time_stride) +
         ";fs=" + std::to_string(encoder.freq_stride) + ";mels=" + std::to_string(encoder.n_mels) +
         ";lstm=" + join_ints(encoder.lstm_hidden) + "}";
    s += "decoder{a=" + std::to_string(decoder.alphabet) +
         ";e=" + std::to_string(decoder.embed_dim) + ";h=" + std::to_string(decoder.hidden) +
         ";att=" + std::to_string(decoder.att_dim) + "}";
    s += "head{rnn=" + std::to_string(head.rnn_hidden) + ";proj=" + std::to_string(head.proj_dim) +
         ";emb=" + std::to_string(head.embed_dim) + "}";
    s += "lstm_head{h=" + std::to_string(lstm_head.hidden) +
         ";emb=" + std::to_string(lstm_head.embed_dim) + "}";
    s += "fusion{h=" + std::to_string(fusion.hidden) + "}";
    return s;
}

uint64_t PipelineConfig::fingerprint() const {
    auto s = canonical();
    return crc64(s.data(), s.size());
}

std::string PipelineConfig::fingerprint_hex() const {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fingerprint()));
    return buf;
}

void TrainConfig::validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (max_epochs < 0) throw ConfigError("train: max_epochs must be >= 0");
    if (patience < 1) throw ConfigError("train: patience must be >= 1");
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train: lr must be positive");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("train: lambda must be in [0,1]");
}

const char* arm_token(ExperimentArm a) {
    switch (a) {
        case ExperimentArm::scratch: return "scratch";
        case ExperimentArm::tl1: return "tl1";
        case ExperimentArm::tl2: return "tl2";
        case ExperimentArm::lstm_baseline: return "lstm";
    }
    throw ConfigError("unknown experiment arm value");
}

const char* arm_label(ExperimentArm a) {
    switch (a) {
        case ExperimentArm::scratch: return "EH-AC";
        case ExperimentArm::tl1: return "EH-AC+TL-1";
        case ExperimentArm::tl2: return "EH-AC+TL-2";
        case ExperimentArm::lstm_baseline: return "LSTM";
    }
    throw ConfigError("unknown experiment arm value");
}

ExperimentArm arm_from_string(const std::string& s) {
    if (s == "scratch") return ExperimentArm::scratch;
    if (s == "tl1") return ExperimentArm::tl1;
    if (s == "tl2") return ExperimentArm::tl2;
    if (s == "lstm" || s == "lstm_baseline") return ExperimentArm::lstm_baseline;
    throw ConfigError("unknown arm '" + s + "' (expected scratch, tl1, tl2 or lstm)");
}

// --- data loading -------------------------------------------------------------

std::vector<PretrainExample> load_pretrain_split(const std::vector<Session>& sessions,
                                                 const std::string& split, const std::string& root,
                                                 const FeatureConfig& fcfg, int alphabet,
                                                 bool use_cache) {
    std::vector<PretrainExample> out;
    for (const auto& s : sessions) {
        if (s.split != split) continue;
        for (size_t ri = 0; ri < s.responses.size(); ++ri) {
            const auto& r = s.responses[ri];
            if (r.transcript.empty()) {
                throw DataError("session '" + s.session_id + "': response " + std::to_string(ri) +
                                " has no transcript");
            }
            transcript_to_labels(r.transcript, alphabet); // validate early
            auto audio = load_wav((fs::path(root) / r.wav_path).string());
            std::string cache = use_cache
                ? (fs::path(root) / "features" / (stem_of(r.wav_path) + ".ehfb")).string()
                : "";
            PretrainExample ex;
            ex.transcript = r.transcript;
            ex.features = feature_tensor(cached_features(audio, fcfg, cache));
            out.push_back(std::move(ex));
        }
    }
    if (out.empty()) throw DataError("split '" + split + "' has no responses");
    return out;
}

DataSplit load_downstream_split(const std::vector<Session>& sessions, const std::string& split,
                                const std::string& root, const FeatureConfig& fcfg,
                                bool use_cache) {
    DataSplit out;
    for (const auto& s : sessions) {
        if (s.split != split) continue;
        SessionGroup g;
        g.session_id = s.session_id;
        g.label = phq8_to_binary(s.phq8);
        g.score = static_cast<double>(s.phq8);
        for (size_t ri = 0; ri < s.responses.size(); ++ri) {
            const auto& r = s.responses[ri];
            auto audio = load_wav((fs::path(root) / r.wav_path).string());
            auto segs = segment_response(audio, s.session_id, static_cast<int>(ri));
            for (size_t k = 0; k < segs.size(); ++k) {
                std::string cache =
                    use_cache ? (fs::path(root) / "features" /
                                 (stem_of(r.wav_path) + ".s" + std::to_string(k) + ".ehfb"))
                                    .string()
                              : "";
                SegmentExample seg;
                seg.session_id = s.session_id;
                seg.label = g.label;
                seg.score = g.score;
                seg.features = feature_tensor(cached_features(
                    slice_audio(audio, segs[k].start, segs[k].count), fcfg, cache));
                g.segment_indices.push_back(static_cast<int>(out.segments.size()));
                out.segments.push_back(std::move(seg));
            }
        }
        if (g.segment_indices.empty()) {
            throw DataError("session " + s.session_id + " kept no segments");
        }
        out.sessions.push_back(std::move(g));
    }
    if (out.sessions.empty()) throw DataError("split '" + split + "' has no sessions");
    return out;
}

int featurize_corpus(const std::vector<Session>& sessions, const std::string& root,
                     const FeatureConfig& fcfg) {
    fs::create_directories(fs::path(root) / "features");
    int written = 0;
    auto fresh = [&](const std::string& path) {
        if (!fs::exists(path)) return true;
        return load_features(path).fingerprint != fcfg.fingerprint();
    };
    for (const auto& s : sessions) {
        for (size_t ri = 0; ri < s.responses.size(); ++ri) {
            const auto& r = s.responses[ri];
            auto audio = load_wav((fs::path(root) / r.wav_path).string());
            auto dir = fs::path(root) / "features";
            auto full = (dir / (stem_of(r.wav_path) + ".ehfb")).string();
            if (fresh(full)) {
                save_features(full, features_of(audio, fcfg));
                ++written;
            }
            auto segs = segment_response(audio, s.session_id, static_cast<int>(ri));
            for (size_t k = 0; k < segs.size(); ++k) {
                auto part =
                    (dir / (stem_of(r.wav_path) + ".s" + std::to_string(k) + ".ehfb")).string();
                if (fresh(part)) {
                    save_features(part,
                                  features_of(slice_audio(audio, segs[k].start, segs[k].count), fcfg));
                    ++written;
                }
            }
        }
    }
    return written;
}

// --- logs ---------------------------------------------------------------------

std::string epoch_log_csv(const std::vector<EpochLog>& log, const std::string& metric_name) {
    bool with_cer = false;
    for (const auto& e : log) with_cer = with_cer || e.dev_cer.has_value();
    std::string out = "epoch,train_loss," + metric_name;
    if (with_cer) out += ",dev_cer";
    out += "\n";
    for (const auto& e : log) {
        out += std::to_string(e.epoch) + "," + fmt_g(e.train_loss) + "," + fmt_g(e.dev_metric);
        if (with_cer) out += "," + (e.dev_cer ? fmt_g(*e.dev_cer) : std::string(""));
        out += "\n";
    }
    return out;
}

// --- pretraining ----------------------------------------------------------------

namespace {

struct DevAsrEval {
    double loss = 0.0;
    double cer = 0.0;
};

DevAsrEval eval_asr_dev(ParamList& ps, const PipelineConfig& pipeline, const TrainConfig& cfg,
                        const std::vector<PretrainExample>& dev) {
    GradOff guard(ps);
    double loss_sum = 0.0;
    int64_t edits = 0, ref_len = 0;
    for (const auto& ex : dev) {
        auto labels = transcript_to_labels(ex.transcript, pipeline.decoder.alphabet);
        auto enc = encoder_forward(ps, pipeline.encoder, ex.features);
        auto out = asr_forward(ps, pipeline.decoder, enc, labels);
        auto loss = hybrid_loss(ctc_loss(log_softmax_rows(out.ctc_logits), labels),
                                attention_ce(out.att_logits, labels), cfg.lambda);
        loss_sum += loss->value();
        auto hyp = greedy_ctc_decode(out.ctc_logits, pipeline.decoder.alphabet);
        edits += levenshtein(ex.transcript, hyp);
        ref_len += static_cast<int64_t>(ex.transcript.size());
    }
    DevAsrEval e;
    e.loss = loss_sum / static_cast<double>(dev.size());
    e.cer = static_cast<double>(edits) / static_cast<double>(ref_len);
    return e;
}

} // namespace

PretrainResult pretrain_asr(const std::vector<PretrainExample>& train,
                            const std::vector<PretrainExample>& dev,
                            const PipelineConfig& pipeline, const TrainConfig& cfg) {
    pipeline.validate();
    cfg.validate();
    if (!is_pretrain_policy(cfg.policy)) {
        throw ConfigError("pretraining expects freeze policy tl1 or tl2, got " +
                          std::string(freeze_policy_name(cfg.policy)));
    }
    if (train.empty()) throw DataError("pretraining: empty train split");
    if (dev.empty()) throw DataError("pretraining: empty dev split");

    Rng init_rng = Rng::derive(cfg.seed, "pretrain/init");
    ParamList ps = init_encoder(pipeline.encoder, init_rng);
    auto dec = init_asr_decoder(pipeline.decoder, pipeline.encoder.out_dim(), init_rng);
    ps.insert(ps.end(), dec.begin(), dec.end());
    apply_freeze(ps, cfg.policy);
    for (auto& p : ps) p.t->requires_grad = p.trainable;

    CheckpointMeta meta;
    meta.model = "asr";
    meta.task = "";
    meta.config_fingerprint = pipeline.fingerprint();
    meta.seed = cfg.seed;
    meta.step = 0;
    meta.freeze_policy = freeze_policy_name(cfg.policy);

    PretrainResult res;
    auto init_eval = eval_asr_dev(ps, pipeline, cfg, dev);
    res.best = snapshot(ps, meta);
    res.best_dev_loss = init_eval.loss;
    res.best_dev_cer = init_eval.cer;

    Adam adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
    Rng order_rng = Rng::derive(cfg.seed, "pretrain/order");
    int64_t steps = 0;
    int bad_epochs = 0;
    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        auto idx = shuffled_indices(train.size(), order_rng);
        double loss_sum = 0.0;
        for (size_t b0 = 0; b0 < idx.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
            size_t b1 = std::min(idx.size(), b0 + static_cast<size_t>(cfg.batch_size));
            zero_grads(ps);
            for (size_t j = b0; j < b1; ++j) {
                const auto& ex = train[static_cast<size_t>(idx[j])];
                auto labels = transcript_to_labels(ex.transcript, pipeline.decoder.alphabet);
                auto enc = encoder_forward(ps, pipeline.encoder, ex.features);
                auto out = asr_forward(ps, pipeline.decoder, enc, labels);
                auto loss = hybrid_loss(ctc_loss(log_softmax_rows(out.ctc_logits), labels),
                                        attention_ce(out.att_logits, labels), cfg.lambda);
                loss_sum += loss->value();
                backward(scale(loss, 1.0 / static_cast<double>(b1 - b0)));
            }
            adam.step(ps);
            ++steps;
        }
        auto ev = eval_asr_dev(ps, pipeline, cfg, dev);
        EpochLog el;
        el.epoch = epoch;
        el.train_loss = loss_sum / static_cast<double>(train.size());
        el.dev_metric = ev.loss;
        el.dev_cer = ev.cer;
        res.log.push_back(el);
        if (improved(ev.loss, res.best_dev_loss, /*maximize=*/false)) {
            res.best_dev_loss = ev.loss;
            res.best_dev_cer = ev.cer;
            meta.step = steps;
            res.best = snapshot(ps, meta);
            bad_epochs = 0;
        } else if (++bad_epochs >= cfg.patience) {
            break;
        }
    }
    return res;
}

// --- downstream ------------------------------------------------------------------

HeadOutput segment_forward(const DownstreamModel& model, const TensorPtr& features) {
    if (model.arm == ExperimentArm::lstm_baseline) {
        return lstm_head_forward(model.segment_params, model.lstm_head, features);
    }
    auto enc = encoder_forward(model.segment_params, model.encoder, features);
    return rcnn_forward(model.segment_params, model.head, enc);
}

double session_score(const DownstreamModel& model, const DataSplit& data,
                     const SessionGroup& session) {
    std::vector<TensorPtr> embeds;
    embeds.reserve(session.segment_indices.size());
    for (int si : session.segment_indices) {
        embeds.push_back(segment_forward(model, data.segments[static_cast<size_t>(si)].features)
                             .embedding);
    }
    return fusion_forward(model.fusion_params, model.fusion, embeds)->value();
}

namespace {

double target_of(const SegmentExample& s, TaskKind task) {
    return task == TaskKind::classification ? static_cast<double>(s.label) : s.score;
}

// Segment-level dev metric for stage 1: AUC over segment logits for
// classification, RMSE over segment predictions for regression.
double eval_segments(DownstreamModel& model, const DataSplit& dev, TaskKind task) {
    GradOff guard(model.segment_params);
    if (task == TaskKind::classification) {
        ScoredSet set;
        for (const auto& s : dev.segments) {
            set.scores.push_back(segment_forward(model, s.features).prediction->value());
            set.labels.push_back(s.label);
        }
        return auc(set);
    }
    std::vector<double> pred, want;
    for (const auto& s : dev.segments) {
        pred.push_back(segment_forward(model, s.features).prediction->value());
        want.push_back(s.score);
    }
    return regression_metrics(pred, want).rmse;
}

// Session-level dev metric for stage 2 on precomputed frozen embeddings.
double eval_sessions_on_embeddings(const DownstreamModel& model,
                                   const std::vector<std::vector<TensorPtr>>& embeds,
                                   const std::vector<SessionGroup>& sessions, TaskKind task) {
    ParamList& fp = const_cast<ParamList&>(model.fusion_params);
    GradOff guard(fp);
    if (task == TaskKind::classification) {
        ScoredSet set;
        for (size_t i = 0; i < sessions.size(); ++i) {
            set.scores.push_back(
                fusion_forward(model.fusion_params, model.fusion, embeds[i])->value());
            set.labels.push_back(sessions[i].label);
        }
        return auc(set);
    }
    std::vector<double> pred, want;
    for (size_t i = 0; i < sessions.size(); ++i) {
        pred.push_back(fusion_forward(model.fusion_params, model.fusion, embeds[i])->value());
        want.push_back(sessions[i].score);
    }
    return regression_metrics(pred, want).rmse;
}

std::vector<std::vector<TensorPtr>> frozen_embeddings(DownstreamModel& model,
                                                      const DataSplit& data) {
    GradOff guard(model.segment_params);
    std::vector<std::vector<TensorPtr>> out;
    out.reserve(data.sessions.size());
    for (const auto& g : data.sessions) {
        std::vector<TensorPtr> embeds;
        embeds.reserve(g.segment_indices.size());
        for (int si : g.segment_indices) {
            auto e = segment_forward(model, data.segments[static_cast<size_t>(si)].features)
                         .embedding;
            embeds.push_back(tensor(e->shape, e->data)); // detached leaf
        }
        out.push_back(std::move(embeds));
    }
    return out;
}

} // namespace

DownstreamModel build_downstream_model(const PipelineConfig& pipeline, ExperimentArm arm,
                                       TaskKind task, uint64_t seed) {
    pipeline.validate();
    DownstreamModel m;
    m.arm = arm;
    m.task = task;
    m.encoder = pipeline.encoder;
    m.head = pipeline.head;
    m.lstm_head = pipeline.lstm_head;
    m.fusion = pipeline.fusion;
    Rng init_rng = Rng::derive(seed, "downstream/init");
    if (arm == ExperimentArm::lstm_baseline) {
        m.segment_params = init_lstm_head(pipeline.lstm_head, pipeline.features.n_mels, init_rng);
    } else {
        m.segment_params = init_encoder(pipeline.encoder, init_rng);
        auto head = init_rcnn_head(pipeline.head, pipeline.encoder.out_dim(), init_rng);
        m.segment_params.insert(m.segment_params.end(), head.begin(), head.end());
    }
    const int embed_dim = arm == ExperimentArm::lstm_baseline ? pipeline.lstm_head.embed_dim
                                                              : pipeline.head.embed_dim;
    Rng fusion_rng = Rng::derive(seed, "downstream/fusion/init");
    m.fusion_params = init_fusion(pipeline.fusion, embed_dim, fusion_rng);
    return m;
}

DownstreamResult train_downstream(const DataSplit& train, const DataSplit& dev,
                                  const PipelineConfig& pipeline, const TrainConfig& cfg,
                                  ExperimentArm arm, const Checkpoint* encoder_source) {
    pipeline.validate();
    cfg.validate();
    const bool lstm_arm = arm == ExperimentArm::lstm_baseline;
    if (!lstm_arm && is_pretrain_policy(cfg.policy)) {
        throw ConfigError("downstream training expects freeze policy finetune_encoder or "
                          "freeze_encoder");
    }
    const bool wants_transfer = arm == ExperimentArm::tl1 || arm == ExperimentArm::tl2;
    if (wants_transfer && encoder_source == nullptr) {
        throw ConfigError(std::string("arm ") + arm_token(arm) + " needs an encoder checkpoint");
    }
    if (!wants_transfer && encoder_source != nullptr) {
        throw ConfigError(std::string("arm ") + arm_token(arm) +
                          " does not take an encoder checkpoint");
    }
    if (train.sessions.empty() || train.segments.empty()) {
        throw DataError("downstream: empty train split");
    }
    if (dev.sessions.empty()) throw DataError("downstream: empty dev split");

    const bool maximize = cfg.task == TaskKind::classification;

    DownstreamResult res;
    res.model = build_downstream_model(pipeline, arm, cfg.task, cfg.seed);
    if (encoder_source) transfer_encoder(*encoder_source, res.model.segment_params);
    if (!lstm_arm) apply_freeze(res.model.segment_params, cfg.policy);
    for (auto& p : res.model.segment_params) p.t->requires_grad = p.trainable;

    CheckpointMeta meta;
    meta.model = lstm_arm ? "lstm_segment" : "segment";
    meta.task = task_name(cfg.task);
    meta.config_fingerprint = pipeline.fingerprint();
    meta.seed = cfg.seed;
    meta.freeze_policy = lstm_arm ? "" : freeze_policy_name(cfg.policy);

    // Stage 1: segment model under inherited session labels.
    {
        ParamList& ps = res.model.segment_params;
        double best = eval_segments(res.model, dev, cfg.task);
        Checkpoint best_state = snapshot(ps, meta);
        Adam adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
        Rng order_rng = Rng::derive(cfg.seed, "downstream/stage1/order");
        int64_t steps = 0;
        int bad = 0;
        for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
            auto idx = shuffled_indices(train.segments.size(), order_rng);
            double loss_sum = 0.0;
            for (size_t b0 = 0; b0 < idx.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
                size_t b1 = std::min(idx.size(), b0 + static_cast<size_t>(cfg.batch_size));
                zero_grads(ps);
                for (size_t j = b0; j < b1; ++j) {
                    const auto& seg = train.segments[static_cast<size_t>(idx[j])];
                    auto out = segment_forward(res.model, seg.features);
                    auto loss = downstream_loss(out.prediction, target_of(seg, cfg.task), cfg.task);
                    loss_sum += loss->value();
                    backward(scale(loss, 1.0 / static_cast<double>(b1 - b0)));
                }
                adam.step(ps);
                ++steps;
            }
            double m = eval_segments(res.model, dev, cfg.task);
            EpochLog el;
            el.epoch = epoch;
            el.train_loss = loss_sum / static_cast<double>(train.segments.size());
            el.dev_metric = m;
            res.stage1_log.push_back(el);
            if (improved(m, best, maximize)) {
                best = m;
                meta.step = steps;
                best_state = snapshot(ps, meta);
                bad = 0;
            } else if (++bad >= cfg.patience) {
                break;
            }
        }
        restore_params(best_state, ps);
    }

    // Stage 2: fusion MLP over the frozen segment model's embeddings.
    {
        auto train_embeds = frozen_embeddings(res.model, train);
        auto dev_embeds = frozen_embeddings(res.model, dev);
        for (auto& p : res.model.fusion_params) p.t->requires_grad = true;
        ParamList& fp = res.model.fusion_params;

        CheckpointMeta fmeta = meta;
        fmeta.model = "fusion";
        fmeta.step = 0;

        double best = eval_sessions_on_embeddings(res.model, dev_embeds, dev.sessions, cfg.task);
        Checkpoint best_state = snapshot(fp, fmeta);
        Adam adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8});
        Rng order_rng = Rng::derive(cfg.seed, "downstream/stage2/order");
        int64_t steps = 0;
        int bad = 0;
        for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
            auto idx = shuffled_indices(train.sessions.size(), order_rng);
            double loss_sum = 0.0;
            for (size_t b0 = 0; b0 < idx.size(); b0 += static_cast<size_t>(cfg.batch_size)) {
                size_t b1 = std::min(idx.size(), b0 + static_cast<size_t>(cfg.batch_size));
                zero_grads(fp);
                for (size_t j = b0; j < b1; ++j) {
                    const auto& g = train.sessions[static_cast<size_t>(idx[j])];
                    auto pred = fusion_forward(fp, pipeline.fusion,
                                               train_embeds[static_cast<size_t>(idx[j])]);
                    double target = cfg.task == TaskKind::classification
                                        ? static_cast<double>(g.label)
                                        : g.score;
                    auto loss = downstream_loss(pred, target, cfg.task);
                    loss_sum += loss->value();
                    backward(scale(loss, 1.0 / static_cast<double>(b1 - b0)));
                }
                adam.step(fp);
                ++steps;
            }
            double m = eval_sessions_on_embeddings(res.model, dev_embeds, dev.sessions, cfg.task);
            EpochLog el;
            el.epoch = epoch;
            el.train_loss = loss_sum / static_cast<double>(train.sessions.size());
            el.dev_metric = m;
            res.stage2_log.push_back(el);
            if (improved(m, best, maximize)) {
                best = m;
                fmeta.step = steps;
                best_state = snapshot(fp, fmeta);
                bad = 0;
            } else if (++bad >= cfg.patience) {
                break;
            }
        }
        restore_params(best_state, fp);
        res.best_dev_metric = best;
    }
    return res;
}

SessionScores score_sessions(const DownstreamModel& model, const DataSplit& data) {
    std::vector<int> order(data.sessions.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        return data.sessions[static_cast<size_t>(a)].session_id <
               data.sessions[static_cast<size_t>(b)].session_id;
    });
    ParamList& sp = const_cast<ParamList&>(model.segment_params);
    ParamList& fp = const_cast<ParamList&>(model.fusion_params);
    GradOff g1(sp), g2(fp);
    SessionScores out;
    for (int i : order) {
        const auto& s = data.sessions[static_cast<size_t>(i)];
        out.session_ids.push_back(s.session_id);
        out.scores.push_back(session_score(model, data, s));
        out.labels.push_back(s.label);
        out.targets.push_back(s.score);
    }
    return out;
}

MetricsReport evaluate_downstream(const DownstreamModel& model, const DataSplit& data,
                                  const std::string& split_name,
                                  const std::string& config_fingerprint) {
    auto scores = score_sessions(model, data);
    MetricsReport r;
    r.model = arm_label(model.arm);
    r.split = split_name;
    r.n_sessions = static_cast<int>(scores.scores.size());
    for (int l : scores.labels) (l ? r.n_pos : r.n_neg) += 1;
    r.config_fingerprint = config_fingerprint;
    if (model.task == TaskKind::classification) {
        ScoredSet set{scores.scores, scores.labels};
        r.auc = auc(set);
        auto pt = eer_point(set);
        r.sensitivity = pt.sensitivity;
        r.specificity = pt.specificity;
    } else {
        auto m = regression_metrics(scores.scores, scores.targets);
        r.rmse = m.rmse;
        r.mae = m.mae;
        r.pcc = m.pcc;
    }
    return r;
}

// --- experiment harness ----------------------------------------------------------

void ExperimentConfig::validate() const {
    if (arms.size() < 2) throw ConfigError("experiment: need at least 2 arms");
    std::set<ExperimentArm> arm_set(arms.begin(), arms.end());
    if (arm_set.size() != arms.size()) throw ConfigError("experiment: duplicate arms");
    if (seeds.size() < 3) throw ConfigError("experiment: need at least 3 seeds");
    std::set<uint64_t> seed_set(seeds.begin(), seeds.end());
    if (seed_set.size() != seeds.size()) throw ConfigError("experiment: duplicate seeds");
    pipeline.validate();
    pretrain.validate();
    downstream.validate();
    if (is_pretrain_policy(downstream.policy)) {
        throw ConfigError("experiment: downstream freeze policy must be finetune_encoder or "
                          "freeze_encoder");
    }
}

DelongResult compare_runs(const ArmRun& a, const ArmRun& b) {
    if (a.test_scores.session_ids != b.test_scores.session_ids) {
        throw ConfigError("comparison: runs were evaluated on different test sets");
    }
    if (a.test_scores.labels != b.test_scores.labels) {
        throw ConfigError("comparison: runs disagree on test labels");
    }
    return delong_test(a.test_scores.scores, b.test_scores.scores, a.test_scores.labels);
}

namespace {

std::optional<double> mean_of(const std::vector<std::optional<double>>& vs) {
    double sum = 0.0;
    int n = 0;
    for (const auto& v : vs) {
        if (v) {
            sum += *v;
            ++n;
        }
    }
    if (n == 0) return std::nullopt;
    return sum / n;
}

MetricsReport mean_report(const std::vector<const MetricsReport*>& rs) {
    MetricsReport out = *rs.front();
    auto collect = [&](auto field) {
        std::vector<std::optional<double>> vs;
        for (const auto* r : rs) vs.push_back(r->*field);
        return mean_of(vs);
    };
    out.auc = collect(&MetricsReport::auc);
    out.sensitivity = collect(&MetricsReport::sensitivity);
    out.specificity = collect(&MetricsReport::specificity);
    out.delong_p = collect(&MetricsReport::delong_p);
    out.rmse = collect(&MetricsReport::rmse);
    out.mae = collect(&MetricsReport::mae);
    out.pcc = collect(&MetricsReport::pcc);
    out.cer = collect(&MetricsReport::cer);
    return out;
}

nlohmann::ordered_json train_config_json(const TrainConfig& c) {
    nlohmann::ordered_json j;
    j["batch_size"] = c.batch_size;
    j["max_epochs"] = c.max_epochs;
    j["patience"] = c.patience;
    j["lr"] = c.lr;
    j["seed"] = c.seed;
    j["freeze_policy"] = freeze_policy_name(c.policy);
    j["task"] = task_name(c.task);
    j["lambda"] = c.lambda;
    return j;
}

} // namespace

ExperimentResult run_experiment(const std::vector<Session>& sessions, const std::string& root,
                                const ExperimentConfig& cfg) {
    cfg.validate();
    const auto fp_hex = cfg.pipeline.fingerprint_hex();

    bool needs_pretrain = false;
    for (auto a : cfg.arms) {
        needs_pretrain = needs_pretrain || a == ExperimentArm::tl1 || a == ExperimentArm::tl2;
    }
    std::vector<PretrainExample> pre_train, pre_dev;
    if (needs_pretrain) {
        pre_train = load_pretrain_split(sessions, "train", root, cfg.pipeline.features,
                                        cfg.pipeline.decoder.alphabet);
        pre_dev = load_pretrain_split(sessions, "dev", root, cfg.pipeline.features,
                                      cfg.pipeline.decoder.alphabet);
    }
    auto d_train = load_downstream_split(sessions, "train", root, cfg.pipeline.features);
    auto d_dev = load_downstream_split(sessions, "dev", root, cfg.pipeline.features);
    auto d_test = load_downstream_split(sessions, "test", root, cfg.pipeline.features);

    ExperimentResult result;
    for (auto arm : cfg.arms) {
        for (uint64_t seed : cfg.seeds) {
            Checkpoint source;
            const Checkpoint* src = nullptr;
            double pre_cer = std::numeric_limits<double>::quiet_NaN();
            if (arm == ExperimentArm::tl1 || arm == ExperimentArm::tl2) {
                TrainConfig pcfg = cfg.pretrain;
                pcfg.seed = seed;
                pcfg.policy = arm == ExperimentArm::tl1 ? FreezePolicy::TL1_update_all
                                                        : FreezePolicy::TL2_freeze_decoder;
                auto pr = pretrain_asr(pre_train, pre_dev, cfg.pipeline, pcfg);
                source = std::move(pr.best);
                src = &source;
                pre_cer = pr.best_dev_cer;
            }
            TrainConfig dcfg = cfg.downstream;
            dcfg.seed = seed;
            auto dr = train_downstream(d_train, d_dev, cfg.pipeline, dcfg, arm, src);

            ArmRun run;
            run.arm = arm;
            run.seed = seed;
            run.dev = evaluate_downstream(dr.model, d_dev, "dev", fp_hex);
            run.test = evaluate_downstream(dr.model, d_test, "test", fp_hex);
            run.test_scores = score_sessions(dr.model, d_test);
            run.pretrain_cer = pre_cer;
            if (!std::isnan(pre_cer)) {
                run.dev.cer = pre_cer;
                run.test.cer = pre_cer;
            }
            result.runs.push_back(std::move(run));
        }
    }

    if (cfg.downstream.task == TaskKind::classification) {
        for (size_t i = 0; i < cfg.arms.size(); ++i) {
            for (size_t j = i + 1; j < cfg.arms.size(); ++j) {
                for (uint64_t seed : cfg.seeds) {
                    const ArmRun *ra = nullptr, *rb = nullptr;
                    for (const auto& r : result.runs) {
                        if (r.seed != seed) continue;
                        if (r.arm == cfg.arms[i]) ra = &r;
                        if (r.arm == cfg.arms[j]) rb = &r;
                    }
                    ArmComparison c;
                    c.arm_a = cfg.arms[i];
                    c.arm_b = cfg.arms[j];
                    c.seed = seed;
                    c.delong = compare_runs(*ra, *rb);
                    result.comparisons.push_back(c);
                }
            }
        }
    }

    for (auto arm : cfg.arms) {
        for (const char* split : {"dev", "test"}) {
            std::vector<const MetricsReport*> rs;
            for (const auto& r : result.runs) {
                if (r.arm == arm) rs.push_back(split == std::string("dev") ? &r.dev : &r.test);
            }
            result.summary.push_back(mean_report(rs));
        }
    }
    result.summary_csv = render_report_csv(result.summary);

    nlohmann::ordered_json j;
    j["pipeline"] = cfg.pipeline.canonical();
    j["config_fingerprint"] = fp_hex;
    j["pretrain"] = train_config_json(cfg.pretrain);
    j["downstream"] = train_config_json(cfg.downstream);
    {
        auto arms = nlohmann::ordered_json::array();
        for (auto a : cfg.arms) arms.push_back(arm_token(a));
        j["arms"] = arms;
        j["seeds"] = cfg.seeds;
    }
    {
        auto runs = nlohmann::ordered_json::array();
        for (const auto& r : result.runs) {
            nlohmann::ordered_json o;
            o["arm"] = arm_token(r.arm);
            o["seed"] = r.seed;
            if (!std::isnan(r.pretrain_cer)) o["pretrain_cer"] = r.pretrain_cer;
            o["dev"] = report_json(r.dev);
            o["test"] = report_json(r.test);
            runs.push_back(std::move(o));
        }
        j["runs"] = runs;
    }
    {
        auto cmps = nlohmann::ordered_json::array();
        for (const auto& c : result.comparisons) {
            nlohmann::ordered_json o;
            o["arm_a"] = arm_token(c.arm_a);
            o["arm_b"] = arm_token(c.arm_b);
            o["seed"] = c.seed;
            o["auc_a"] = c.delong.auc_a;
            o["auc_b"] = c.delong.auc_b;
            o["z"] = c.delong.z;
            o["p"] = c.delong.p;
            o["degenerate_variance"] = c.delong.degenerate_variance;
            cmps.push_back(std::move(o));
        }
        j["comparisons"] = cmps;
    }
    {
        auto sum = nlohmann::ordered_json::array();
        for (const auto& r : result.summary) sum.push_back(report_json(r));
        j["summary"] = sum;
    }
    result.summary_json = j.dump(2) + "\n";
    return result;
}

} // namespace ehs
