#pragma once

#include <string>
#include <vector>

#include "ehs/features.hpp"
#include "ehs/params.hpp"
#include "ehs/rng.hpp"
#include "ehs/tensor.hpp"

namespace ehs {

enum class TaskKind { classification, regression };

const char* task_name(TaskKind t);
TaskKind task_from_string(const std::string& s); // ConfigError on unknown name

// Toy alphabet 'a'..'a'+alphabet-1 mapped to label indices; DataError on
// characters outside the alphabet.
std::vector<int> transcript_to_labels(const std::string& transcript, int alphabet);

TensorPtr feature_tensor(const FeatureMatrix& f); // [frames, n_mels] leaf

// --- encoder: conv stack + LSTM stack, parameters under "encoder." ---------

struct EncoderConfig {
    std::vector<int> conv_channels{16, 32}; // 3x3 kernels each
    int time_stride = 2;  // per conv layer
    int freq_stride = 1;  // per conv layer
    int n_mels = 40;      // expected feature width
    std::vector<int> lstm_hidden{64, 64};

    void validate() const;           // ConfigError, incl. n_mels too narrow
    int reduced_frames(int frames) const; // valid-conv floor arithmetic per layer
    int min_frames() const;          // smallest input length the convs accept
    int freq_out() const;            // feature width after the conv stack
    int out_dim() const;             // hidden size of the last LSTM
};

ParamList init_encoder(const EncoderConfig& cfg, Rng& rng);

// features [T, n_mels] -> hidden sequence [T', out_dim]. DataError with the
// documented minimum when T < min_frames().
TensorPtr encoder_forward(const ParamList& params, const EncoderConfig& cfg,
                          const TensorPtr& features);

// --- ASR decoder (pretraining only): attention path "decoder.", CTC
// projection "ctc_head." ----------------------------------------------------

struct AsrDecoderConfig {
    int alphabet = 10;
    int embed_dim = 16;
    int hidden = 64;  // decoder LSTM size
    int att_dim = 32; // additive-attention projection size

    void validate() const;
};

ParamList init_asr_decoder(const AsrDecoderConfig& cfg, int enc_dim, Rng& rng);

struct AsrOutputs {
    TensorPtr ctc_logits; // [T', alphabet+1], blank = last column
    TensorPtr att_logits; // [L, alphabet], teacher-forced
    TensorPtr attention;  // [L, T'], each row a probability vector
};

AsrOutputs asr_forward(const ParamList& params, const AsrDecoderConfig& cfg,
                       const TensorPtr& encoded, const std::vector<int>& labels);

// Per-frame argmax -> collapse repeats -> drop blanks, rendered in the toy
// alphabet.
std::string greedy_ctc_decode(const TensorPtr& ctc_logits, int alphabet);

// --- RCNN prediction head, parameters under "head." ------------------------

struct RcnnHeadConfig {
    int rnn_hidden = 32; // per direction
    int proj_dim = 32;   // per-step learned projection
    int embed_dim = 32;  // segment-embedding width

    void validate() const;
};

ParamList init_rcnn_head(const RcnnHeadConfig& cfg, int enc_dim, Rng& rng);

struct HeadOutput {
    TensorPtr prediction; // [1,1] logit (classification) or value (regression)
    TensorPtr embedding;  // [1, embed_dim], last hidden layer
};

HeadOutput rcnn_forward(const ParamList& params, const RcnnHeadConfig& cfg,
                        const TensorPtr& encoded);

// Plain-LSTM baseline head over raw features (no encoder); same output
// contract as the RCNN head, parameters under "head.".
struct LstmHeadConfig {
    int hidden = 64;
    int embed_dim = 32;

    void validate() const;
};

ParamList init_lstm_head(const LstmHeadConfig& cfg, int n_mels, Rng& rng);
HeadOutput lstm_head_forward(const ParamList& params, const LstmHeadConfig& cfg,
                             const TensorPtr& features);

// --- segment fusion MLP, parameters under "fusion." ------------------------

struct FusionConfig {
    int hidden = 32;

    void validate() const;
};

ParamList init_fusion(const FusionConfig& cfg, int embed_dim, Rng& rng);

// Elementwise max over segment embeddings ([1,d] each) -> MLP -> [1,1].
TensorPtr fusion_forward(const ParamList& params, const FusionConfig& cfg,
                         const std::vector<TensorPtr>& embeddings);

} // namespace ehs
