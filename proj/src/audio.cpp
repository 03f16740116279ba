#include "ehs/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "ehs/binio.hpp"
#include "ehs/error.hpp"

namespace ehs {

AudioBuffer load_wav(const std::string& path) {
    auto bytes = read_file_bytes(path);
    ByteReader r(bytes.data(), bytes.size(), "wav '" + path + "'");
    if (r.str(4) != "RIFF") throw FormatError("wav '" + path + "': chunk_id is not RIFF");
    (void)r.u32(); // riff size; trust the actual file length instead
    if (r.str(4) != "WAVE") throw FormatError("wav '" + path + "': format is not WAVE");

    bool have_fmt = false;
    uint16_t channels = 0, bits = 0, audio_format = 0;
    uint32_t sample_rate = 0;
    std::vector<double> samples;
    bool have_data = false;

    while (r.remaining() >= 8) {
        std::string id = r.str(4);
        uint32_t size = r.u32();
        if (id == "fmt ") {
            if (size < 16) throw FormatError("wav '" + path + "': fmt chunk size " + std::to_string(size));
            audio_format = r.u16();
            channels = r.u16();
            sample_rate = r.u32();
            (void)r.u32(); // byte rate
            (void)r.u16(); // block align
            bits = r.u16();
            if (size > 16) (void)r.raw(size - 16);
            have_fmt = true;
        } else if (id == "data") {
            if (!have_fmt) throw FormatError("wav '" + path + "': data chunk before fmt");
            if (audio_format != 1) {
                throw FormatError("wav '" + path + "': audio_format " + std::to_string(audio_format) +
                                  " (only PCM=1 supported)");
            }
            if (channels != 1) {
                throw FormatError("wav '" + path + "': channels " + std::to_string(channels) +
                                  " (only mono supported)");
            }
            if (bits != 16) {
                throw FormatError("wav '" + path + "': bits_per_sample " + std::to_string(bits) +
                                  " (only 16 supported)");
            }
            const uint8_t* p = r.raw(size);
            samples.resize(size / 2);
            for (size_t i = 0; i < samples.size(); ++i) {
                int16_t v = static_cast<int16_t>(static_cast<uint16_t>(p[2 * i]) |
                                                 (static_cast<uint16_t>(p[2 * i + 1]) << 8));
                samples[i] = static_cast<double>(v) / 32768.0;
            }
            have_data = true;
        } else {
            (void)r.raw(size); // skip unknown chunk
        }
        if (size % 2 == 1 && r.remaining() > 0) (void)r.raw(1); // chunk padding
    }
    if (!have_fmt) throw FormatError("wav '" + path + "': missing fmt chunk");
    if (!have_data) throw FormatError("wav '" + path + "': missing data chunk");
    if (sample_rate == 0) throw FormatError("wav '" + path + "': sample_rate 0");
    if (samples.empty()) throw FormatError("wav '" + path + "': empty data chunk");

    AudioBuffer a;
    a.sample_rate = static_cast<int>(sample_rate);
    a.samples = std::move(samples);
    for (double& v : a.samples) v = std::clamp(v, -1.0, 1.0);
    return a;
}

void save_wav(const std::string& path, const AudioBuffer& audio) {
    if (audio.samples.empty()) throw DataError("save_wav: empty audio buffer");
    if (audio.sample_rate <= 0) throw DataError("save_wav: sample_rate must be positive");
    const uint32_t n = static_cast<uint32_t>(audio.samples.size());
    std::vector<uint8_t> out;
    out.reserve(44 + 2 * n);
    put_bytes(out, "RIFF", 4);
    put_u32(out, 36 + 2 * n);
    put_bytes(out, "WAVE", 4);
    put_bytes(out, "fmt ", 4);
    put_u32(out, 16);
    put_u16(out, 1); // PCM
    put_u16(out, 1); // mono
    put_u32(out, static_cast<uint32_t>(audio.sample_rate));
    put_u32(out, static_cast<uint32_t>(audio.sample_rate) * 2);
    put_u16(out, 2);  // block align
    put_u16(out, 16); // bits
    put_bytes(out, "data", 4);
    put_u32(out, 2 * n);
    for (double v : audio.samples) {
        double c = std::clamp(v, -1.0, 1.0);
        long q = std::lround(c * 32768.0);
        q = std::clamp(q, -32768L, 32767L);
        put_u16(out, static_cast<uint16_t>(static_cast<int16_t>(q)));
    }
    write_file_bytes(path, out);
}

} // namespace ehs
