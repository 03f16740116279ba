#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <vector>

#include "ehs/audio.hpp"
#include "ehs/binio.hpp"
#include "ehs/error.hpp"
#include "ehs/features.hpp"
#include "ehs/rng.hpp"

using namespace ehs;
namespace fs = std::filesystem;

namespace {

fs::path tmpdir() {
    auto d = fs::temp_directory_path() / "ehs_test_dsp";
    fs::create_directories(d);
    return d;
}

AudioBuffer sine(double freq_hz, double seconds, double amp = 0.25, int sr = 16000) {
    AudioBuffer a;
    a.sample_rate = sr;
    a.samples.resize(static_cast<size_t>(seconds * sr));
    for (size_t i = 0; i < a.samples.size(); ++i) {
        a.samples[i] = amp * std::sin(2.0 * std::numbers::pi * freq_hz * static_cast<double>(i) / sr);
    }
    return a;
}

// O(N^2) DFT power spectrum of one already-windowed, zero-padded frame.
std::vector<double> naive_power(const std::vector<double>& x, int n_fft) {
    std::vector<double> p(n_fft / 2 + 1);
    for (int k = 0; k <= n_fft / 2; ++k) {
        double re = 0.0, im = 0.0;
        for (int n = 0; n < n_fft; ++n) {
            double ang = -2.0 * std::numbers::pi * k * n / n_fft;
            double v = static_cast<size_t>(n) < x.size() ? x[n] : 0.0;
            re += v * std::cos(ang);
            im += v * std::sin(ang);
        }
        p[k] = re * re + im * im;
    }
    return p;
}

} // namespace

TEST_CASE("wav round trips and rejections") {
    auto dir = tmpdir();

    SUBCASE("silence round trip") {
        AudioBuffer a;
        a.samples.assign(16000, 0.0);
        auto p = (dir / "silence.wav").string();
        save_wav(p, a);
        auto b = load_wav(p);
        CHECK(b.sample_rate == 16000);
        REQUIRE(b.samples.size() == 16000);
        for (double v : b.samples) CHECK(v == 0.0);
    }

    SUBCASE("sine save-load-save is byte identical") {
        auto a = sine(1000.0, 0.5);
        auto p1 = (dir / "sine1.wav").string(), p2 = (dir / "sine2.wav").string();
        save_wav(p1, a);
        auto b = load_wav(p1);
        save_wav(p2, b);
        CHECK(read_file_bytes(p1) == read_file_bytes(p2));
    }

    SUBCASE("stereo header rejected naming the field") {
        std::vector<uint8_t> w;
        put_bytes(w, "RIFF", 4);
        put_u32(w, 36 + 4);
        put_bytes(w, "WAVE", 4);
        put_bytes(w, "fmt ", 4);
        put_u32(w, 16);
        put_u16(w, 1);
        put_u16(w, 2); // stereo
        put_u32(w, 16000);
        put_u32(w, 64000);
        put_u16(w, 4);
        put_u16(w, 16);
        put_bytes(w, "data", 4);
        put_u32(w, 4);
        put_u32(w, 0);
        auto p = (dir / "stereo.wav").string();
        write_file_bytes(p, w);
        CHECK_THROWS_WITH_AS(load_wav(p), doctest::Contains("channels"), FormatError);
    }

    SUBCASE("truncated file rejected") {
        auto p = (dir / "trunc.wav").string();
        write_file_bytes(p, {'R', 'I', 'F', 'F', 0, 0});
        CHECK_THROWS_AS(load_wav(p), FormatError);
    }
}

TEST_CASE("frames_count formula") {
    FeatureConfig cfg;
    CHECK(frames_count(400, cfg) == 1);
    CHECK(frames_count(16000, cfg) == 98);
    CHECK_THROWS_AS(frames_count(399, cfg), DataError);

    Rng rng(31);
    for (int i = 0; i < 200; ++i) {
        int64_t n = 400 + static_cast<int64_t>(rng.below(100000));
        CHECK(frames_count(n, cfg) == static_cast<int>((n - 400) / 160) + 1);
    }
}

TEST_CASE("fft matches naive DFT") {
    Rng rng(8);
    for (int n : {8, 64, 512}) {
        std::vector<double> x(n);
        for (auto& v : x) v = rng.uniform(-1.0, 1.0);
        auto want = naive_power(x, n);
        std::vector<double> re(x), im(n, 0.0);
        fft_radix2(re, im);
        for (int k = 0; k <= n / 2; ++k) {
            double got = re[k] * re[k] + im[k] * im[k];
            CHECK(std::abs(got - want[k]) <= 1e-9 * std::max(1.0, want[k]));
        }
    }
}

TEST_CASE("log_mel basics") {
    FeatureConfig cfg;

    SUBCASE("all-zero audio hits the log floor everywhere") {
        AudioBuffer a;
        a.samples.assign(1600, 0.0);
        auto f = log_mel(a, cfg);
        CHECK(f.frames == frames_count(1600, cfg));
        CHECK(f.n_mels == 40);
        for (double v : f.data) CHECK(v == std::log(1e-10));
    }

    SUBCASE("1 kHz tone: energy concentrates at the nearest mel center") {
        auto a = sine(1000.0, 0.5);
        auto f = log_mel(a, cfg);
        // mean energy per bin
        int best = 0;
        double best_e = -1e300;
        for (int m = 0; m < f.n_mels; ++m) {
            double e = 0.0;
            for (int i = 0; i < f.frames; ++i) e += f.at(i, m);
            if (e > best_e) {
                best_e = e;
                best = m;
            }
        }
        // centers from the same HTK construction
        auto mel = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
        auto hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
        double lo = mel(cfg.f_min), hi = mel(cfg.f_max);
        int nearest = 0;
        double best_d = 1e300;
        for (int m = 0; m < cfg.n_mels; ++m) {
            double center = hz(lo + (hi - lo) * (m + 1) / (cfg.n_mels + 1));
            double d = std::abs(center - 1000.0);
            if (d < best_d) {
                best_d = d;
                nearest = m;
            }
        }
        CHECK(best == nearest);
    }

    SUBCASE("one frame against the naive DFT oracle") {
        auto a = sine(730.0, 0.1);
        auto f = log_mel(a, cfg);
        const int win = cfg.window_samples();
        std::vector<double> frame(static_cast<size_t>(win));
        for (int i = 0; i < win; ++i) {
            double h = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * i / (win - 1));
            frame[i] = a.samples[i] * h; // first frame, hop offset 0
        }
        auto p = naive_power(frame, cfg.n_fft);
        auto fb = mel_filterbank(cfg);
        const int bins = cfg.n_fft / 2 + 1;
        for (int m = 0; m < cfg.n_mels; ++m) {
            double e = 0.0;
            for (int k = 0; k < bins; ++k) e += fb[static_cast<size_t>(m) * bins + k] * p[k];
            double want = std::log(std::max(e, cfg.log_floor));
            CHECK(std::abs(f.at(0, m) - want) <= 1e-9 * std::max(1.0, std::abs(want)));
        }
    }

    SUBCASE("doubling amplitude adds 2 log 2 above the floor") {
        auto a = sine(440.0, 0.2, 0.2);
        auto b = sine(440.0, 0.2, 0.4);
        auto fa = log_mel(a, cfg), fb = log_mel(b, cfg);
        const double floor_log = std::log(cfg.log_floor);
        for (size_t i = 0; i < fa.data.size(); ++i) {
            if (fa.data[i] > floor_log + 2.0 && fb.data[i] > floor_log + 2.0) {
                CHECK(fb.data[i] - fa.data[i] == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-9));
            }
        }
    }

    SUBCASE("shift by exact hop multiples shifts rows") {
        auto a = sine(620.0, 0.3);
        AudioBuffer shifted;
        shifted.sample_rate = a.sample_rate;
        shifted.samples.assign(3 * 160, 0.0);
        shifted.samples.insert(shifted.samples.end(), a.samples.begin(), a.samples.end());
        auto fa = log_mel(a, cfg), fs = log_mel(shifted, cfg);
        for (int i = 0; i < fa.frames; ++i) {
            for (int m = 0; m < fa.n_mels; ++m) {
                CHECK(std::abs(fs.at(i + 3, m) - fa.at(i, m)) <= 1e-9);
            }
        }
    }

    SUBCASE("scaling up never decreases log energy") {
        auto a = sine(1500.0, 0.15, 0.1);
        auto b = a;
        for (auto& v : b.samples) v *= 3.0;
        auto fa = log_mel(a, cfg), fb = log_mel(b, cfg);
        for (size_t i = 0; i < fa.data.size(); ++i) CHECK(fb.data[i] >= fa.data[i] - 1e-12);
    }
}

TEST_CASE("per-utterance normalization") {
    FeatureConfig cfg;
    SUBCASE("constant features become zeros") {
        FeatureMatrix f;
        f.frames = 5;
        f.n_mels = 3;
        f.data.assign(15, 7.25);
        auto g = per_utterance_normalize(f);
        for (double v : g.data) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("column means vanish and the map is idempotent") {
        auto a = sine(900.0, 0.2);
        auto f = log_mel(a, cfg);
        auto g = per_utterance_normalize(f);
        for (int m = 0; m < g.n_mels; ++m) {
            double mean = 0.0;
            for (int i = 0; i < g.frames; ++i) mean += g.at(i, m);
            CHECK(std::abs(mean / g.frames) < 1e-10);
        }
        auto h = per_utterance_normalize(g);
        for (size_t i = 0; i < g.data.size(); ++i) CHECK(std::abs(h.data[i] - g.data[i]) < 1e-10);
    }
}

TEST_CASE("feature cache round trip and corruption") {
    auto dir = tmpdir();
    auto a = sine(333.0, 0.12);
    FeatureConfig cfg;
    auto f = log_mel(a, cfg);
    auto p = (dir / "f.ehfb").string();
    save_features(p, f);
    auto g = load_features(p);
    CHECK(g.frames == f.frames);
    CHECK(g.n_mels == f.n_mels);
    CHECK(g.fingerprint == f.fingerprint);
    CHECK(g.fingerprint == cfg.fingerprint());
    CHECK(g.data == f.data);

    auto bytes = read_file_bytes(p);
    SUBCASE("bad magic") {
        auto b = bytes;
        b[0] = 'X';
        write_file_bytes(p, b);
        CHECK_THROWS_AS(load_features(p), FormatError);
    }
    SUBCASE("future version") {
        auto b = bytes;
        b[4] = 99;
        write_file_bytes(p, b);
        CHECK_THROWS_AS(load_features(p), VersionError);
    }
    SUBCASE("truncated") {
        auto b = bytes;
        b.resize(b.size() - 5);
        write_file_bytes(p, b);
        CHECK_THROWS_WITH_AS(load_features(p), doctest::Contains("truncated"), FormatError);
    }
}
