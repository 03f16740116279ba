#include "ehs/models.hpp"

#include <cmath>

#include "ehs/error.hpp"

namespace ehs {

const char* task_name(TaskKind t) {
    return t == TaskKind::classification ? "classification" : "regression";
}

TaskKind task_from_string(const std::string& s) {
    if (s == "classification" || s == "cls") return TaskKind::classification;
    if (s == "regression" || s == "reg") return TaskKind::regression;
    throw ConfigError("unknown task kind '" + s + "'");
}

std::vector<int> transcript_to_labels(const std::string& transcript, int alphabet) {
    std::vector<int> labels;
    labels.reserve(transcript.size());
    for (char c : transcript) {
        int k = c - 'a';
        if (k < 0 || k >= alphabet)
            throw DataError("transcript symbol '" + std::string(1, c) +
                            "' outside the " + std::to_string(alphabet) + "-symbol alphabet");
        labels.push_back(k);
    }
    return labels;
}

TensorPtr feature_tensor(const FeatureMatrix& f) {
    return tensor({f.frames, f.n_mels}, f.data);
}

namespace {

const TensorPtr& p(const ParamList& params, const std::string& name) {
    for (const auto& q : params) {
        if (q.name == name) return q.t;
    }
    throw ConfigError("model parameter '" + name + "' not found");
}

// LSTM weights: Xavier matrices, zero bias. Gate order is i,f,g,o; the
// forget-gate section starts at 1 so cell state survives early training.
void push_lstm(ParamList& out, const std::string& prefix, int d_in, int d_h, Rng& rng,
               bool forget_bias_one = true) {
    out.push_back({prefix + ".wx", xavier({d_in, 4 * d_h}, d_in, 4 * d_h, rng), true});
    out.push_back({prefix + ".wh", xavier({d_h, 4 * d_h}, d_h, 4 * d_h, rng), true});
    auto b = tensor({4 * d_h}, DType::f64, true);
    if (forget_bias_one) {
        for (int i = d_h; i < 2 * d_h; ++i) b->data[i] = 1.0;
    }
    out.push_back({prefix + ".b", b, true});
}

void push_linear(ParamList& out, const std::string& prefix, int d_in, int d_out, Rng& rng) {
    out.push_back({prefix + ".w", xavier({d_in, d_out}, d_in, d_out, rng), true});
    out.push_back({prefix + ".b", tensor({d_out}, DType::f64, true), true});
}

int conv_reduce(int extent, int stride) { return (extent - 3) / stride + 1; }

// Smallest input extent for which `layers` valid 3-wide convs still emit
// at least one output element.
int conv_min_extent(int layers, int stride) {
    int need = 1;
    for (int i = 0; i < layers; ++i) need = (need - 1) * stride + 3;
    return need;
}

} // namespace

// --- encoder -----------------------------------------------------------------

void EncoderConfig::validate() const {
    if (conv_channels.empty()) throw ConfigError("encoder: need at least one conv layer");
    for (int c : conv_channels)
        if (c < 1) throw ConfigError("encoder: conv channels must be positive");
    if (time_stride < 1 || freq_stride < 1) throw ConfigError("encoder: strides must be >= 1");
    if (lstm_hidden.empty()) throw ConfigError("encoder: need at least one LSTM layer");
    for (int h : lstm_hidden)
        if (h < 1) throw ConfigError("encoder: LSTM hidden sizes must be positive");
    const int min_mels = conv_min_extent(static_cast<int>(conv_channels.size()), freq_stride);
    if (n_mels < min_mels)
        throw ConfigError("encoder: n_mels " + std::to_string(n_mels) +
                          " too narrow for the conv stack, need >= " + std::to_string(min_mels));
}

int EncoderConfig::min_frames() const {
    return conv_min_extent(static_cast<int>(conv_channels.size()), time_stride);
}

int EncoderConfig::reduced_frames(int frames) const {
    if (frames < min_frames())
        throw DataError("encoder: input of " + std::to_string(frames) +
                        " frames is below the minimum of " + std::to_string(min_frames()) +
                        " for this conv stack");
    int t = frames;
    for (size_t i = 0; i < conv_channels.size(); ++i) t = conv_reduce(t, time_stride);
    return t;
}

int EncoderConfig::freq_out() const {
    int f = n_mels;
    for (size_t i = 0; i < conv_channels.size(); ++i) f = conv_reduce(f, freq_stride);
    return f;
}

int EncoderConfig::out_dim() const { return lstm_hidden.back(); }

ParamList init_encoder(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    ParamList out;
    int c_in = 1;
    for (size_t i = 0; i < cfg.conv_channels.size(); ++i) {
        const int c_out = cfg.conv_channels[i];
        const std::string prefix = "encoder.conv" + std::to_string(i);
        out.push_back({prefix + ".kernel",
                       xavier({c_out, c_in, 3, 3}, c_in * 9, c_out * 9, rng), true});
        out.push_back({prefix + ".bias", tensor({c_out}, DType::f64, true), true});
        c_in = c_out;
    }
    int d_in = cfg.conv_channels.back() * cfg.freq_out();
    for (size_t i = 0; i < cfg.lstm_hidden.size(); ++i) {
        push_lstm(out, "encoder.lstm" + std::to_string(i), d_in, cfg.lstm_hidden[i], rng);
        d_in = cfg.lstm_hidden[i];
    }
    return out;
}

TensorPtr encoder_forward(const ParamList& params, const EncoderConfig& cfg,
                          const TensorPtr& features) {
    if (features->ndim() != 2 || features->cols() != cfg.n_mels)
        throw ShapeError("encoder: expected [T," + std::to_string(cfg.n_mels) +
                         "] features");
    cfg.reduced_frames(features->rows()); // throws the minimum-length error
    auto x = reshape(features, {1, features->rows(), features->cols()});
    for (size_t i = 0; i < cfg.conv_channels.size(); ++i) {
        const std::string prefix = "encoder.conv" + std::to_string(i);
        x = conv2d(x, p(params, prefix + ".kernel"), cfg.time_stride, cfg.freq_stride);
        x = relu(add_channel_bias(x, p(params, prefix + ".bias")));
    }
    auto h = time_major(x); // [T', C*F]
    for (size_t i = 0; i < cfg.lstm_hidden.size(); ++i) {
        const std::string prefix = "encoder.lstm" + std::to_string(i);
        h = lstm_sequence(h, p(params, prefix + ".wx"), p(params, prefix + ".wh"),
                          p(params, prefix + ".b"));
    }
    return h;
}

// --- ASR decoder ---------------------------------------------------------------

void AsrDecoderConfig::validate() const {
    if (alphabet < 2) throw ConfigError("decoder: alphabet must have >= 2 symbols");
    if (embed_dim < 1 || hidden < 1 || att_dim < 1)
        throw ConfigError("decoder: dimensions must be positive");
}

ParamList init_asr_decoder(const AsrDecoderConfig& cfg, int enc_dim, Rng& rng) {
    cfg.validate();
    ParamList out;
    // Embedding row `alphabet` is the start-of-sequence token.
    out.push_back({"decoder.embed",
                   xavier({cfg.alphabet + 1, cfg.embed_dim}, cfg.alphabet + 1, cfg.embed_dim,
                          rng),
                   true});
    out.push_back({"decoder.att_enc", xavier({enc_dim, cfg.att_dim}, enc_dim, cfg.att_dim, rng),
                   true});
    out.push_back({"decoder.att_dec",
                   xavier({cfg.hidden, cfg.att_dim}, cfg.hidden, cfg.att_dim, rng), true});
    out.push_back({"decoder.att_b", tensor({cfg.att_dim}, DType::f64, true), true});
    out.push_back({"decoder.att_v", xavier({cfg.att_dim, 1}, cfg.att_dim, 1, rng), true});
    push_lstm(out, "decoder.lstm", cfg.embed_dim + enc_dim, cfg.hidden, rng);
    push_linear(out, "decoder.out", cfg.hidden, cfg.alphabet, rng);
    push_linear(out, "ctc_head", enc_dim, cfg.alphabet + 1, rng);
    return out;
}

AsrOutputs asr_forward(const ParamList& params, const AsrDecoderConfig& cfg,
                       const TensorPtr& encoded, const std::vector<int>& labels) {
    if (labels.empty()) throw DataError("asr_forward: transcript must not be empty");
    for (int l : labels)
        if (l < 0 || l >= cfg.alphabet)
            throw DataError("asr_forward: label " + std::to_string(l) +
                            " outside the alphabet of " + std::to_string(cfg.alphabet));
    const int d_h = encoded->cols();

    AsrOutputs out;
    out.ctc_logits = add_bias(matmul(encoded, p(params, "ctc_head.w")), p(params, "ctc_head.b"));

    // Teacher-forced additive attention; the encoder projection is shared
    // across decode steps.
    auto enc_proj = add_bias(matmul(encoded, p(params, "decoder.att_enc")),
                             p(params, "decoder.att_b")); // [T', att]
    const auto& embed = p(params, "decoder.embed");
    auto h = tensor({1, cfg.hidden});
    auto c = tensor({1, cfg.hidden});
    std::vector<TensorPtr> step_logits, step_attention;
    for (size_t l = 0; l < labels.size(); ++l) {
        const int prev = l == 0 ? cfg.alphabet : labels[l - 1];
        auto emb = slice_rows(embed, prev, prev + 1); // [1, embed_dim]
        auto dec_proj = matmul(h, p(params, "decoder.att_dec"));          // [1, att]
        auto scores = matmul(tanh_t(add_bias(enc_proj, reshape(dec_proj, {dec_proj->cols()}))),
                             p(params, "decoder.att_v"));                 // [T', 1]
        auto alpha = softmax_rows(reshape(scores, {1, scores->rows()}));  // [1, T']
        auto context = matmul(alpha, encoded);                            // [1, d_h]
        (void)d_h;
        auto step = lstm_step(concat_cols({emb, context}), h, c, p(params, "decoder.lstm.wx"),
                              p(params, "decoder.lstm.wh"), p(params, "decoder.lstm.b"));
        h = step.first;
        c = step.second;
        step_logits.push_back(
            add_bias(matmul(h, p(params, "decoder.out.w")), p(params, "decoder.out.b")));
        step_attention.push_back(alpha);
    }
    out.att_logits = concat_rows(step_logits);   // [L, alphabet]
    out.attention = concat_rows(step_attention); // [L, T']
    return out;
}

std::string greedy_ctc_decode(const TensorPtr& ctc_logits, int alphabet) {
    if (ctc_logits->ndim() != 2 || ctc_logits->cols() != alphabet + 1)
        throw ShapeError("greedy_ctc_decode: expected [T," + std::to_string(alphabet + 1) +
                         "] logits");
    const int t_len = ctc_logits->rows(), n = ctc_logits->cols();
    const int blank = alphabet;
    std::string out;
    int prev = blank;
    for (int t = 0; t < t_len; ++t) {
        int best = 0;
        for (int k = 1; k < n; ++k)
            if (ctc_logits->data[t * n + k] > ctc_logits->data[t * n + best]) best = k;
        if (best != blank && best != prev) out += static_cast<char>('a' + best);
        prev = best;
    }
    return out;
}

// --- RCNN head -----------------------------------------------------------------

void RcnnHeadConfig::validate() const {
    if (rnn_hidden < 1 || proj_dim < 1 || embed_dim < 1)
        throw ConfigError("head: dimensions must be positive");
}

ParamList init_rcnn_head(const RcnnHeadConfig& cfg, int enc_dim, Rng& rng) {
    cfg.validate();
    ParamList out;
    push_lstm(out, "head.fwd", enc_dim, cfg.rnn_hidden, rng);
    push_lstm(out, "head.bwd", enc_dim, cfg.rnn_hidden, rng);
    push_linear(out, "head.proj", enc_dim, cfg.proj_dim, rng);
    push_linear(out, "head.dense", 2 * cfg.rnn_hidden + cfg.proj_dim, cfg.embed_dim, rng);
    push_linear(out, "head.out", cfg.embed_dim, 1, rng);
    return out;
}

namespace {

HeadOutput head_from_pooled(const ParamList& params, const TensorPtr& pooled) {
    HeadOutput out;
    out.embedding =
        relu(add_bias(matmul(pooled, p(params, "head.dense.w")), p(params, "head.dense.b")));
    out.prediction =
        add_bias(matmul(out.embedding, p(params, "head.out.w")), p(params, "head.out.b"));
    return out;
}

} // namespace

HeadOutput rcnn_forward(const ParamList& params, const RcnnHeadConfig& cfg,
                        const TensorPtr& encoded) {
    (void)cfg;
    if (encoded->ndim() != 2 || encoded->rows() < 1)
        throw ShapeError("rcnn_forward: expected a non-empty [T,d] hidden sequence");
    auto fwd = lstm_sequence(encoded, p(params, "head.fwd.wx"), p(params, "head.fwd.wh"),
                             p(params, "head.fwd.b"));
    auto bwd = reverse_rows(lstm_sequence(reverse_rows(encoded), p(params, "head.bwd.wx"),
                                          p(params, "head.bwd.wh"), p(params, "head.bwd.b")));
    auto proj =
        add_bias(matmul(encoded, p(params, "head.proj.w")), p(params, "head.proj.b"));
    auto pooled = reduce_max_axis(concat_cols({fwd, bwd, proj}), 0); // [1, 2r+p]
    return head_from_pooled(params, pooled);
}

// --- plain-LSTM baseline head ----------------------------------------------------

void LstmHeadConfig::validate() const {
    if (hidden < 1 || embed_dim < 1) throw ConfigError("head: dimensions must be positive");
}

ParamList init_lstm_head(const LstmHeadConfig& cfg, int n_mels, Rng& rng) {
    cfg.validate();
    ParamList out;
    push_lstm(out, "head.lstm", n_mels, cfg.hidden, rng);
    push_linear(out, "head.dense", cfg.hidden, cfg.embed_dim, rng);
    push_linear(out, "head.out", cfg.embed_dim, 1, rng);
    return out;
}

HeadOutput lstm_head_forward(const ParamList& params, const LstmHeadConfig& cfg,
                             const TensorPtr& features) {
    (void)cfg;
    if (features->ndim() != 2 || features->rows() < 1)
        throw ShapeError("lstm_head_forward: expected non-empty [T,F] features");
    auto h = lstm_sequence(features, p(params, "head.lstm.wx"), p(params, "head.lstm.wh"),
                           p(params, "head.lstm.b"));
    auto last = slice_rows(h, h->rows() - 1, h->rows());
    return head_from_pooled(params, last);
}

// --- fusion ---------------------------------------------------------------------

void FusionConfig::validate() const {
    if (hidden < 1) throw ConfigError("fusion: hidden width must be positive");
}

ParamList init_fusion(const FusionConfig& cfg, int embed_dim, Rng& rng) {
    cfg.validate();
    ParamList out;
    push_linear(out, "fusion.hidden", embed_dim, cfg.hidden, rng);
    push_linear(out, "fusion.out", cfg.hidden, 1, rng);
    return out;
}

TensorPtr fusion_forward(const ParamList& params, const FusionConfig& cfg,
                         const std::vector<TensorPtr>& embeddings) {
    (void)cfg;
    if (embeddings.empty()) throw DataError("fusion: session has no segment embeddings");
    auto pooled = embeddings.size() == 1
                      ? embeddings[0]
                      : reduce_max_axis(concat_rows(embeddings), 0); // [1, d]
    auto hidden =
        relu(add_bias(matmul(pooled, p(params, "fusion.hidden.w")), p(params, "fusion.hidden.b")));
    return add_bias(matmul(hidden, p(params, "fusion.out.w")), p(params, "fusion.out.b"));
}

} // namespace ehs
