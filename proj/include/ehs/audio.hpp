#pragma once

#include <string>
#include <vector>

namespace ehs {

struct AudioBuffer {
    std::vector<double> samples; // in [-1, 1]
    int sample_rate = 16000;

    double seconds() const {
        return static_cast<double>(samples.size()) / static_cast<double>(sample_rate);
    }
};

// RIFF/WAVE, PCM 16-bit, mono only. Samples are scaled by 1/32768 on load
// and quantized with the same scale on save, so save->load->save round-trips
// byte-identically.
AudioBuffer load_wav(const std::string& path);
void save_wav(const std::string& path, const AudioBuffer& audio);

} // namespace ehs
