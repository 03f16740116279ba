#include "ehs/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ehs/error.hpp"

namespace fs = std::filesystem;

namespace ehs {

int phq8_to_binary(int score) {
    if (score < 0 || score > 24)
        throw DataError("phq8 score " + std::to_string(score) + " outside [0,24]");
    return score >= 10 ? 1 : 0;
}

std::vector<Segment> segment_response(const AudioBuffer& audio,
                                      const std::string& session_id,
                                      int response_index) {
    const int64_t n = static_cast<int64_t>(audio.samples.size());
    const int64_t min_len = audio.sample_rate;          // 1 s
    const int64_t seg_len = 25 * static_cast<int64_t>(audio.sample_rate);
    if (audio.sample_rate <= 0) throw DataError("segment_response: sample_rate must be positive");
    if (n < min_len)
        throw DataError("segment_response: response in session " + session_id +
                        " is shorter than 1 s, nothing to segment");
    std::vector<Segment> out;
    int64_t pos = 0;
    while (n - pos >= seg_len) {
        out.push_back({session_id, response_index, pos, seg_len,
                       static_cast<double>(seg_len) / audio.sample_rate});
        pos += seg_len;
    }
    const int64_t rem = n - pos;
    if (rem >= min_len)
        out.push_back({session_id, response_index, pos, rem,
                       static_cast<double>(rem) / audio.sample_rate});
    return out;
}

SplitManifest split_by_speaker(const std::vector<Session>& sessions,
                               const SplitRatios& ratios, uint64_t seed) {
    if (ratios.train < 0 || ratios.dev < 0 || ratios.test < 0)
        throw ConfigError("split ratios must be non-negative");
    if (std::abs(ratios.train + ratios.dev + ratios.test - 1.0) > 1e-9)
        throw ConfigError("split ratios must sum to 1");

    std::map<std::string, std::vector<std::string>> by_speaker;
    for (const auto& s : sessions) {
        if (s.speaker_id.empty() || s.session_id.empty())
            throw DataError("split_by_speaker: session with empty speaker or session id");
        by_speaker[s.speaker_id].push_back(s.session_id);
    }
    std::vector<std::string> speakers;
    for (const auto& [spk, _] : by_speaker) speakers.push_back(spk);
    if (speakers.size() < 3)
        throw DataError("split_by_speaker: need at least 3 speakers, got " +
                        std::to_string(speakers.size()));

    Rng rng = Rng::derive(seed, "speaker-split");
    for (size_t i = speakers.size() - 1; i > 0; --i) {
        size_t j = static_cast<size_t>(rng.below(i + 1));
        std::swap(speakers[i], speakers[j]);
    }

    const size_t n = speakers.size();
    const double r[3] = {ratios.train, ratios.dev, ratios.test};
    size_t count[3];
    count[0] = static_cast<size_t>(std::floor(n * r[0]));
    count[1] = static_cast<size_t>(std::floor(n * (r[0] + r[1]))) - count[0];
    count[2] = n - count[0] - count[1];
    // Every split with a positive ratio gets at least one speaker; floor
    // rounding can otherwise starve a small split.
    for (int k = 0; k < 3; ++k) {
        while (r[k] > 0 && count[k] == 0) {
            int big = 0;
            for (int m = 1; m < 3; ++m)
                if (count[m] > count[big]) big = m;
            count[big]--;
            count[k]++;
        }
    }

    static const char* names[3] = {"train", "dev", "test"};
    SplitManifest out;
    for (int k = 0; k < 3; ++k) out.sessions[names[k]]; // ensure all keys exist
    for (int k = 0; k < 3; ++k) out.speakers[names[k]];
    size_t idx = 0;
    for (int k = 0; k < 3; ++k) {
        for (size_t c = 0; c < count[k]; ++c, ++idx) {
            const auto& spk = speakers[idx];
            out.speakers[names[k]].insert(spk);
            for (const auto& sid : by_speaker[spk]) out.sessions[names[k]].insert(sid);
        }
    }
    return out;
}

void apply_split(std::vector<Session>& sessions, const SplitManifest& manifest) {
    std::map<std::string, std::string> split_of;
    for (const auto& [name, set] : manifest.sessions)
        for (const auto& sid : set) split_of[sid] = name;
    for (auto& s : sessions) {
        auto it = split_of.find(s.session_id);
        if (it == split_of.end())
            throw DataError("apply_split: session " + s.session_id + " missing from manifest");
        s.split = it->second;
    }
}

void SyntheticCorpusConfig::validate() const {
    auto fail = [](const std::string& what) { throw ConfigError("corpus config: " + what); };
    if (n_speakers < 3) fail("n_speakers must be >= 3");
    if (min_sessions_per_speaker < 1 || max_sessions_per_speaker < min_sessions_per_speaker)
        fail("sessions-per-speaker range invalid");
    if (min_responses_per_session < 1 || max_responses_per_session < min_responses_per_session)
        fail("responses-per-session range invalid");
    if (min_response_seconds < 1.0) fail("min_response_seconds must be >= 1 s");
    if (max_response_seconds < min_response_seconds) fail("response duration range invalid");
    if (rate_coupling < 0.0 || rate_coupling > 1.0) fail("rate_coupling outside [0,1]");
    if (tilt_coupling < 0.0 || tilt_coupling > 1.0) fail("tilt_coupling outside [0,1]");
    if (label_noise_std < 0.0) fail("label_noise_std must be >= 0");
    if (!(prevalence_target > 0.0 && prevalence_target < 1.0))
        fail("prevalence_target unsatisfiable, must lie strictly inside (0,1)");
    if (sample_rate < 8000) fail("sample_rate must be >= 8000");
}

double severity_exponent(double prevalence_target) {
    if (!(prevalence_target > 0.0 && prevalence_target < 1.0))
        throw ConfigError("prevalence_target unsatisfiable, must lie strictly inside (0,1)");
    // Severity rounds to a phq8 of 10+ once it reaches 9.5, so calibrate the
    // latent threshold there: P(24*u^p >= 9.5) = 1 - (9.5/24)^(1/p).
    return std::log(9.5 / 24.0) / std::log(1.0 - prevalence_target);
}

double sample_severity(Rng& rng, double prevalence_target) {
    const double p = severity_exponent(prevalence_target);
    return 24.0 * std::pow(rng.uniform(), p);
}

namespace {

struct SpeakerTraits {
    double severity;   // latent, in [0,24]
    double pitch_mult; // nuisance: shifts all token frequencies
    double gain;       // nuisance: overall loudness
};

SpeakerTraits draw_speaker(Rng& rng, const SyntheticCorpusConfig& cfg) {
    SpeakerTraits t;
    t.severity = sample_severity(rng, cfg.prevalence_target);
    t.pitch_mult = std::exp2(std::clamp(rng.gaussian(0.0, 0.12), -0.35, 0.35));
    t.gain = 0.3 * std::pow(10.0, std::clamp(rng.gaussian(0.0, 0.05), -0.15, 0.15));
    return t;
}

// Appends one tone-chord token for symbol `sym` and returns its duration.
void render_token(std::vector<double>& x, Rng& rng, int sym,
                  const SpeakerTraits& spk, const SyntheticCorpusConfig& cfg) {
    const double sev = spk.severity / 24.0 * 2.0 - 1.0; // [-1, 1]
    // Token rate: higher severity = slower tokens (monotone in severity).
    double dur_ms = 275.0 + cfg.rate_coupling * sev * 125.0 + rng.gaussian(0.0, 15.0);
    dur_ms = std::clamp(dur_ms, 150.0, 400.0);
    // Spectral tilt: higher severity = flatter spectrum (more harmonic energy).
    const double tilt = 1.0 - cfg.tilt_coupling * sev * 0.7;
    double amp[3], asum = 0.0;
    for (int h = 0; h < 3; ++h) asum += amp[h] = std::exp(-tilt * h);
    double phase[3];
    for (int h = 0; h < 3; ++h) phase[h] = rng.uniform(0.0, 6.283185307179586);

    const double f0 = 180.0 * std::pow(420.0 / 180.0, sym / 9.0) * spk.pitch_mult;
    const int n = static_cast<int>(std::lround(dur_ms / 1000.0 * cfg.sample_rate));
    const int ramp = std::min(cfg.sample_rate / 100, n / 4); // 10 ms attack/release
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int h = 0; h < 3; ++h)
            s += amp[h] / asum *
                 std::sin(6.283185307179586 * f0 * (h + 1) * i / cfg.sample_rate + phase[h]);
        double env = 1.0;
        if (i < ramp) env = 0.5 - 0.5 * std::cos(3.141592653589793 * i / ramp);
        else if (n - 1 - i < ramp) env = 0.5 - 0.5 * std::cos(3.141592653589793 * (n - 1 - i) / ramp);
        x.push_back(spk.gain * env * s);
    }
}

std::string render_response(AudioBuffer& audio, Rng& rng, const SpeakerTraits& spk,
                            const SyntheticCorpusConfig& cfg) {
    const double target = rng.uniform(cfg.min_response_seconds, cfg.max_response_seconds);
    const int gap = cfg.sample_rate * 30 / 1000;
    auto& x = audio.samples;
    x.assign(static_cast<size_t>(gap), 0.0);
    std::string transcript;
    while (static_cast<double>(x.size()) / cfg.sample_rate < target) {
        const int sym = static_cast<int>(rng.below(10));
        transcript += static_cast<char>('a' + sym);
        render_token(x, rng, sym, spk, cfg);
        x.insert(x.end(), static_cast<size_t>(gap), 0.0);
    }
    for (auto& v : x) v += rng.gaussian(0.0, 0.002); // light noise floor
    audio.sample_rate = cfg.sample_rate;
    return transcript;
}

std::string zero_pad(int v, int width) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%0*d", width, v);
    return buf;
}

} // namespace

std::vector<Session> generate_synthetic_corpus(const SyntheticCorpusConfig& cfg,
                                               const std::string& out_dir) {
    cfg.validate();
    fs::create_directories(fs::path(out_dir) / "wav");

    std::vector<Session> sessions;
    for (int i = 0; i < cfg.n_speakers; ++i) {
        const std::string spk_id = "p" + zero_pad(i, 4);
        Rng spk_rng = Rng::derive(cfg.seed, "spk/" + spk_id);
        const SpeakerTraits traits = draw_speaker(spk_rng, cfg);
        const int n_sessions =
            cfg.min_sessions_per_speaker +
            static_cast<int>(spk_rng.below(
                cfg.max_sessions_per_speaker - cfg.min_sessions_per_speaker + 1));

        for (int j = 0; j < n_sessions; ++j) {
            Session ses;
            ses.speaker_id = spk_id;
            ses.session_id = spk_id + "-s" + zero_pad(j, 2);
            Rng ses_rng = Rng::derive(cfg.seed, "ses/" + ses.session_id);
            const double noisy = traits.severity + ses_rng.gaussian(0.0, cfg.label_noise_std);
            ses.phq8 = static_cast<int>(std::clamp(std::lround(noisy), 0l, 24l));
            const int n_responses =
                cfg.min_responses_per_session +
                static_cast<int>(ses_rng.below(
                    cfg.max_responses_per_session - cfg.min_responses_per_session + 1));

            for (int r = 0; r < n_responses; ++r) {
                Response resp;
                const std::string base = ses.session_id + "-r" + zero_pad(r, 2);
                Rng resp_rng = Rng::derive(cfg.seed, "resp/" + base);
                AudioBuffer audio;
                resp.transcript = render_response(audio, resp_rng, traits, cfg);
                resp.wav_path = "wav/" + base + ".wav";
                save_wav((fs::path(out_dir) / resp.wav_path).string(), audio);
                ses.responses.push_back(std::move(resp));
            }
            sessions.push_back(std::move(ses));
        }
    }

    apply_split(sessions, split_by_speaker(sessions, cfg.ratios, cfg.seed));
    return sessions;
}

void save_manifest(const std::string& path, const std::vector<Session>& sessions) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open manifest for writing: " + path);
    for (const auto& s : sessions) {
        nlohmann::ordered_json j;
        j["speaker_id"] = s.speaker_id;
        j["session_id"] = s.session_id;
        j["split"] = s.split;
        j["phq8"] = s.phq8;
        auto arr = nlohmann::ordered_json::array();
        for (const auto& r : s.responses)
            arr.push_back({{"wav_path", r.wav_path}, {"transcript", r.transcript}});
        j["responses"] = std::move(arr);
        out << j.dump() << "\n";
    }
    if (!out) throw DataError("write failed for manifest: " + path);
}

std::vector<Session> load_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open manifest: " + path);
    std::vector<Session> sessions;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("manifest " + path + " line " + std::to_string(lineno) +
                              ": " + e.what());
        }
        auto need = [&](const char* key) -> const nlohmann::json& {
            if (!j.contains(key))
                throw FormatError("manifest " + path + " line " + std::to_string(lineno) +
                                  ": missing key '" + key + "'");
            return j.at(key);
        };
        Session s;
        s.speaker_id = need("speaker_id").get<std::string>();
        s.session_id = need("session_id").get<std::string>();
        s.split = need("split").get<std::string>();
        if (s.split != "train" && s.split != "dev" && s.split != "test")
            throw FormatError("manifest line " + std::to_string(lineno) +
                              ": unknown split '" + s.split + "'");
        s.phq8 = need("phq8").get<int>();
        if (s.phq8 < 0 || s.phq8 > 24)
            throw DataError("manifest session " + s.session_id + ": phq8 " +
                            std::to_string(s.phq8) + " outside [0,24]");
        for (const auto& rj : need("responses")) {
            Response r;
            if (!rj.contains("wav_path"))
                throw FormatError("manifest session " + s.session_id +
                                  ": response missing wav_path");
            r.wav_path = rj.at("wav_path").get<std::string>();
            if (rj.contains("transcript")) r.transcript = rj.at("transcript").get<std::string>();
            s.responses.push_back(std::move(r));
        }
        if (s.responses.empty())
            throw DataError("manifest session " + s.session_id + " has no responses");
        sessions.push_back(std::move(s));
    }
    return sessions;
}

std::string corpus_stats_csv(const std::vector<Session>& sessions) {
    static const char* splits[3] = {"train", "dev", "test"};
    int64_t ses[3][2] = {}, resp[3][2] = {};
    for (const auto& s : sessions) {
        int k = -1;
        for (int i = 0; i < 3; ++i)
            if (s.split == splits[i]) k = i;
        if (k < 0) throw DataError("corpus_stats: session " + s.session_id +
                                   " has no split assigned");
        const int cls = phq8_to_binary(s.phq8);
        ses[k][cls] += 1;
        resp[k][cls] += static_cast<int64_t>(s.responses.size());
    }
    std::string out = "stat,train+dep,train-dep,dev+dep,dev-dep,test+dep,test-dep,total\n";
    auto row = [&out](const char* name, const int64_t c[3][2]) {
        out += name;
        int64_t total = 0;
        for (int k = 0; k < 3; ++k) {
            out += "," + std::to_string(c[k][1]) + "," + std::to_string(c[k][0]);
            total += c[k][0] + c[k][1];
        }
        out += "," + std::to_string(total) + "\n";
    };
    row("sessions", ses);
    row("responses", resp);
    return out;
}

} // namespace ehs
