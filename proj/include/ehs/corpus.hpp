#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "ehs/audio.hpp"
#include "ehs/rng.hpp"

namespace ehs {

// One recorded answer inside a session: a WAV file plus its transcript in
// the toy alphabet 'a'..'j'.
struct Response {
    std::string wav_path;
    std::string transcript;
};

struct Session {
    std::string speaker_id;
    std::string session_id;
    std::string split; // "train" / "dev" / "test"
    int phq8 = 0;      // 0..24
    std::vector<Response> responses;
};

// 1 = positive class (+dep, score >= 10), 0 = negative. DataError outside [0,24].
int phq8_to_binary(int score);

// A contiguous slice of one response's samples, at most 25 s long.
struct Segment {
    std::string session_id;
    int response_index = 0;
    int64_t start = 0; // sample offset into the source response
    int64_t count = 0;
    double seconds = 0.0;
};

// Greedy contiguous 25 s cuts. A trailing remainder shorter than 1 s is
// dropped; audio shorter than 1 s overall is a DataError.
std::vector<Segment> segment_response(const AudioBuffer& audio,
                                      const std::string& session_id,
                                      int response_index);

struct SplitRatios {
    double train = 0.6;
    double dev = 0.2;
    double test = 0.2;
};

struct SplitManifest {
    std::map<std::string, std::set<std::string>> sessions; // split -> session ids
    std::map<std::string, std::set<std::string>> speakers; // split -> speaker ids
};

// Shuffles speakers with the seed and partitions them by the ratios; every
// session follows its speaker, so split speaker sets are disjoint by
// construction. Ratios must sum to 1; needs at least 3 speakers.
SplitManifest split_by_speaker(const std::vector<Session>& sessions,
                               const SplitRatios& ratios, uint64_t seed);

// Writes the manifest's split assignment into the sessions.
void apply_split(std::vector<Session>& sessions, const SplitManifest& manifest);

struct SyntheticCorpusConfig {
    int n_speakers = 200;
    int min_sessions_per_speaker = 1;
    int max_sessions_per_speaker = 3;
    int min_responses_per_session = 1;
    int max_responses_per_session = 2;
    double min_response_seconds = 1.5;
    double max_response_seconds = 3.0;
    uint64_t seed = 1;
    // Strength in [0,1] of the monotone link from latent severity to token
    // rate and to spectral tilt. 0 = audio carries no label signal.
    double rate_coupling = 1.0;
    double tilt_coupling = 1.0;
    double label_noise_std = 2.0;     // std of the gaussian added to severity
    double prevalence_target = 0.25;  // desired fraction of +dep sessions
    int sample_rate = 16000;
    SplitRatios ratios;

    void validate() const; // throws ConfigError naming the offending field
};

// Exponent p such that severity = 24*u^p (u uniform) rounds to a +dep
// phq8 (>= 10) with exactly the target probability before label noise.
double severity_exponent(double prevalence_target);

// One latent-severity draw in [0,24], skewed toward low scores.
double sample_severity(Rng& rng, double prevalence_target);

// Renders the corpus under out_dir (WAV files in out_dir/wav) and returns
// the sessions with split labels applied. Byte-identical for identical
// config, including the seed.
std::vector<Session> generate_synthetic_corpus(const SyntheticCorpusConfig& cfg,
                                               const std::string& out_dir);

// JSONL manifest: one object per line with keys speaker_id, session_id,
// split, phq8, responses[{wav_path, transcript}].
void save_manifest(const std::string& path, const std::vector<Session>& sessions);
std::vector<Session> load_manifest(const std::string& path);

// Counts of sessions and responses per split and class, CSV-rendered with
// one column per (split, class) pair plus a total column.
std::string corpus_stats_csv(const std::vector<Session>& sessions);

} // namespace ehs
