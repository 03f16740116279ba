#include "ehs/features.hpp"

#include <cmath>
#include <numbers>

#include "ehs/binio.hpp"
#include "ehs/error.hpp"

namespace ehs {

namespace {

constexpr uint32_t kFeatureVersion = 1;

bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

} // namespace

void FeatureConfig::validate() const {
    if (sample_rate <= 0) throw ConfigError("features: sample_rate must be positive");
    if (window_ms <= 0 || hop_ms <= 0) throw ConfigError("features: window/hop must be positive");
    if (hop_ms > window_ms) throw ConfigError("features: hop_ms must be <= window_ms");
    if (!is_pow2(n_fft)) throw ConfigError("features: n_fft must be a power of two");
    if (n_fft < window_samples()) {
        throw ConfigError("features: n_fft " + std::to_string(n_fft) + " < window of " +
                          std::to_string(window_samples()) + " samples");
    }
    if (n_mels < 1) throw ConfigError("features: n_mels must be >= 1");
    if (!(f_min >= 0.0 && f_min < f_max && f_max <= sample_rate / 2.0)) {
        throw ConfigError("features: need 0 <= f_min < f_max <= sample_rate/2");
    }
    if (!(log_floor > 0.0)) throw ConfigError("features: log_floor must be positive");
}

std::string FeatureConfig::fingerprint() const {
    return "sr" + std::to_string(sample_rate) + "w" + std::to_string(window_ms) + "h" +
           std::to_string(hop_ms) + "fft" + std::to_string(n_fft) + "m" + std::to_string(n_mels) +
           "f" + std::to_string(static_cast<int>(f_min)) + "-" +
           std::to_string(static_cast<int>(f_max));
}

int frames_count(int64_t n_samples, const FeatureConfig& cfg) {
    const int win = cfg.window_samples(), hop = cfg.hop_samples();
    if (n_samples < win) {
        throw DataError("features: audio of " + std::to_string(n_samples) +
                        " samples is shorter than one analysis window (" + std::to_string(win) +
                        ")");
    }
    return static_cast<int>((n_samples - win) / hop) + 1;
}

void fft_radix2(std::vector<double>& re, std::vector<double>& im) {
    const size_t n = re.size();
    if (im.size() != n) throw ConfigError("fft: re/im size mismatch");
    if (!is_pow2(static_cast<int>(n))) throw ConfigError("fft: size must be a power of two");
    // bit-reversal permutation
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            std::swap(re[i], re[j]);
            std::swap(im[i], im[j]);
        }
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
        const double wr = std::cos(ang), wi = std::sin(ang);
        for (size_t i = 0; i < n; i += len) {
            double cr = 1.0, ci = 0.0;
            for (size_t k = 0; k < len / 2; ++k) {
                const size_t a = i + k, b = i + k + len / 2;
                const double tr = re[b] * cr - im[b] * ci;
                const double ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                const double ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
    }
}

std::vector<double> mel_filterbank(const FeatureConfig& cfg) {
    cfg.validate();
    const int bins = cfg.n_fft / 2 + 1;
    std::vector<double> fb(static_cast<size_t>(cfg.n_mels) * bins, 0.0);
    const double mel_lo = hz_to_mel(cfg.f_min), mel_hi = hz_to_mel(cfg.f_max);
    std::vector<double> edges(cfg.n_mels + 2);
    for (int i = 0; i < cfg.n_mels + 2; ++i) {
        edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (cfg.n_mels + 1));
    }
    for (int m = 0; m < cfg.n_mels; ++m) {
        const double lo = edges[m], mid = edges[m + 1], hi = edges[m + 2];
        for (int k = 0; k < bins; ++k) {
            const double f = static_cast<double>(k) * cfg.sample_rate / cfg.n_fft;
            double w = 0.0;
            if (f >= lo && f <= mid) {
                w = (f - lo) / (mid - lo);
            } else if (f > mid && f <= hi) {
                w = (hi - f) / (hi - mid);
            }
            fb[static_cast<size_t>(m) * bins + k] = w;
        }
    }
    return fb;
}

FeatureMatrix log_mel(const AudioBuffer& audio, const FeatureConfig& cfg) {
    cfg.validate();
    if (audio.sample_rate != cfg.sample_rate) {
        throw DataError("features: audio at " + std::to_string(audio.sample_rate) +
                        " Hz, config expects " + std::to_string(cfg.sample_rate));
    }
    const int win = cfg.window_samples(), hop = cfg.hop_samples();
    const int frames = frames_count(static_cast<int64_t>(audio.samples.size()), cfg);
    const int bins = cfg.n_fft / 2 + 1;

    std::vector<double> hamming(win);
    for (int i = 0; i < win; ++i) {
        hamming[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * i / (win - 1));
    }
    auto fb = mel_filterbank(cfg);

    FeatureMatrix out;
    out.frames = frames;
    out.n_mels = cfg.n_mels;
    out.fingerprint = cfg.fingerprint();
    out.data.resize(static_cast<size_t>(frames) * cfg.n_mels);

    std::vector<double> re(cfg.n_fft), im(cfg.n_fft), power(bins);
    for (int fr = 0; fr < frames; ++fr) {
        const double* s = &audio.samples[static_cast<size_t>(fr) * hop];
        for (int i = 0; i < win; ++i) re[i] = s[i] * hamming[i];
        std::fill(re.begin() + win, re.end(), 0.0);
        std::fill(im.begin(), im.end(), 0.0);
        fft_radix2(re, im);
        for (int k = 0; k < bins; ++k) power[k] = re[k] * re[k] + im[k] * im[k];
        for (int m = 0; m < cfg.n_mels; ++m) {
            const double* w = &fb[static_cast<size_t>(m) * bins];
            double e = 0.0;
            for (int k = 0; k < bins; ++k) e += w[k] * power[k];
            out.data[static_cast<size_t>(fr) * cfg.n_mels + m] = std::log(std::max(e, cfg.log_floor));
        }
    }
    return out;
}

FeatureMatrix per_utterance_normalize(const FeatureMatrix& f) {
    if (f.frames < 1) throw DataError("features: cannot normalize an empty feature matrix");
    FeatureMatrix out = f;
    for (int m = 0; m < f.n_mels; ++m) {
        double mean = 0.0;
        for (int i = 0; i < f.frames; ++i) mean += f.at(i, m);
        mean /= f.frames;
        for (int i = 0; i < f.frames; ++i) {
            out.data[static_cast<size_t>(i) * f.n_mels + m] = f.at(i, m) - mean;
        }
    }
    return out;
}

void save_features(const std::string& path, const FeatureMatrix& f) {
    std::vector<uint8_t> out;
    out.reserve(16 + 8 * f.data.size());
    put_bytes(out, "EHFB", 4);
    put_u32(out, kFeatureVersion);
    put_u32(out, static_cast<uint32_t>(f.frames));
    put_u32(out, static_cast<uint32_t>(f.n_mels));
    if (f.fingerprint.size() > 0xffff) {
        throw FormatError("feature cache: fingerprint longer than 65535 bytes");
    }
    put_u16(out, static_cast<uint16_t>(f.fingerprint.size()));
    put_bytes(out, f.fingerprint.data(), f.fingerprint.size());
    for (double v : f.data) put_f64(out, v);
    write_file_bytes(path, out);
}

FeatureMatrix load_features(const std::string& path) {
    auto bytes = read_file_bytes(path);
    ByteReader r(bytes.data(), bytes.size(), "feature cache '" + path + "'");
    if (r.str(4) != "EHFB") throw FormatError("feature cache '" + path + "': bad magic");
    uint32_t version = r.u32();
    if (version != kFeatureVersion) {
        throw VersionError("feature cache '" + path + "': version " + std::to_string(version) +
                           " (supported: " + std::to_string(kFeatureVersion) + ")");
    }
    FeatureMatrix f;
    f.frames = static_cast<int>(r.u32());
    f.n_mels = static_cast<int>(r.u32());
    f.fingerprint = r.str(r.u16());
    const size_t n = static_cast<size_t>(f.frames) * f.n_mels;
    f.data.resize(n);
    for (size_t i = 0; i < n; ++i) f.data[i] = r.f64();
    return f;
}

} // namespace ehs
