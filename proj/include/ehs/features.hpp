#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ehs/audio.hpp"

namespace ehs {

struct FeatureConfig {
    int sample_rate = 16000;
    int window_ms = 25;
    int hop_ms = 10;
    int n_fft = 512; // power of two >= window samples
    int n_mels = 40;
    double f_min = 20.0;
    double f_max = 8000.0;
    double log_floor = 1e-10;

    int window_samples() const { return sample_rate * window_ms / 1000; }
    int hop_samples() const { return sample_rate * hop_ms / 1000; }

    void validate() const; // ConfigError on violation
    std::string fingerprint() const;
};

struct FeatureMatrix {
    int frames = 0;
    int n_mels = 0;
    std::vector<double> data; // row-major [frames x n_mels]
    std::string fingerprint;

    double at(int i, int j) const { return data[static_cast<size_t>(i) * n_mels + j]; }
};

// floor((N - window)/hop) + 1; DataError if the audio is shorter than one
// analysis window.
int frames_count(int64_t n_samples, const FeatureConfig& cfg);

// In-place iterative radix-2 FFT; size must be a power of two.
void fft_radix2(std::vector<double>& re, std::vector<double>& im);

// HTK-scale triangular filters with unit peak, [n_mels x (n_fft/2 + 1)].
std::vector<double> mel_filterbank(const FeatureConfig& cfg);

// Hamming window -> zero-padded power spectrum -> mel filter bank ->
// natural log of max(energy, log_floor).
FeatureMatrix log_mel(const AudioBuffer& audio, const FeatureConfig& cfg);

// Subtracts the per-mel-bin mean over the utterance's frames.
FeatureMatrix per_utterance_normalize(const FeatureMatrix& f);

// Flat binary cache (magic "EHFB", version, frames, n_mels, f64 payload).
void save_features(const std::string& path, const FeatureMatrix& f);
FeatureMatrix load_features(const std::string& path);

} // namespace ehs
