#pragma once

// RIFF/WAVE ingestion, linear resampling and fixed-length slicing of mono clips.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mer {

enum class Emotion : std::uint8_t { happy = 0, sad = 1 };

inline constexpr std::size_t kNumEmotions = 2;

inline std::string_view to_string(Emotion e) {
    return e == Emotion::happy ? "happy" : "sad";
}

inline std::optional<Emotion> parse_emotion(std::string_view s) {
    if (s == "happy") return Emotion::happy;
    if (s == "sad") return Emotion::sad;
    return std::nullopt;
}

struct AudioClip {
    std::vector<double> samples;
    std::uint32_t sample_rate_hz = 44100;
    std::optional<Emotion> label;
    std::string source_id;
    double offset_s = 0.0;

    double duration_s() const {
        return static_cast<double>(samples.size()) / static_cast<double>(sample_rate_hz);
    }
};

class AudioError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class WavError : public AudioError {
public:
    enum class Kind { malformed_header, unsupported_format, empty_data, io };

    WavError(Kind kind, const std::string& what) : AudioError(what), kind_(kind) {}

    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

inline void validate(const AudioClip& clip) {
    if (clip.sample_rate_hz == 0) throw AudioError("sample rate must be positive");
    if (clip.samples.empty()) throw AudioError("clip has no samples");
    for (double s : clip.samples) {
        if (!(s >= -1.0 && s <= 1.0)) throw AudioError("sample outside [-1, 1]");
    }
}

namespace detail {

inline std::uint32_t read_le32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t read_le16(const std::uint8_t* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline void put_le32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline void put_le16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_tag(std::vector<std::uint8_t>& out, const char (&tag)[5]) {
    out.insert(out.end(), tag, tag + 4);
}

// One frame channel value in [-1, 1], integer PCM scaled by 1/2^(bits-1).
inline double decode_sample(const std::uint8_t* p, std::uint16_t bits, bool is_float) {
    if (is_float) {
        const float f = std::bit_cast<float>(read_le32(p));
        return std::clamp(static_cast<double>(f), -1.0, 1.0);
    }
    switch (bits) {
        case 16: {
            const auto v = static_cast<std::int16_t>(read_le16(p));
            return static_cast<double>(v) / 32768.0;
        }
        case 24: {
            std::int32_t v = static_cast<std::int32_t>(p[0]) | (static_cast<std::int32_t>(p[1]) << 8) |
                             (static_cast<std::int32_t>(p[2]) << 16);
            if (v & 0x800000) v |= ~0xFFFFFF;
            return static_cast<double>(v) / 8388608.0;
        }
        default: {
            const auto v = static_cast<std::int32_t>(read_le32(p));
            return static_cast<double>(v) / 2147483648.0;
        }
    }
}

}  // namespace detail

/// Decodes a little-endian RIFF/WAVE buffer into a mono clip.
///
/// Accepts integer PCM at 16/24/32 bits and IEEE float at 32 bits, mono or
/// stereo (including WAVE_FORMAT_EXTENSIBLE wrappers of those). Stereo is
/// mixed down by averaging the two channels.
inline AudioClip decode_wav(std::span<const std::uint8_t> bytes) {
    using Kind = WavError::Kind;
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
        throw WavError(Kind::malformed_header, "not a RIFF/WAVE container");
    }

    bool have_fmt = false;
    std::uint16_t format = 0, channels = 0, bits = 0, block_align = 0;
    std::uint32_t rate = 0;
    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const std::uint8_t* chunk = bytes.data() + pos;
        const std::uint32_t size = detail::read_le32(chunk + 4);
        const std::size_t body = pos + 8;
        if (std::memcmp(chunk, "fmt ", 4) == 0) {
            if (size < 16 || body + size > bytes.size()) {
                throw WavError(Kind::malformed_header, "truncated fmt chunk");
            }
            const std::uint8_t* f = bytes.data() + body;
            format = detail::read_le16(f);
            channels = detail::read_le16(f + 2);
            rate = detail::read_le32(f + 4);
            block_align = detail::read_le16(f + 12);
            bits = detail::read_le16(f + 14);
            if (format == 0xFFFE) {
                if (size < 40) throw WavError(Kind::malformed_header, "truncated extensible fmt chunk");
                format = detail::read_le16(f + 24);
            }
            have_fmt = true;
        } else if (std::memcmp(chunk, "data", 4) == 0) {
            if (!have_fmt) throw WavError(Kind::malformed_header, "data chunk precedes fmt chunk");
            const bool is_float = format == 3;
            if (format != 1 && format != 3) {
                throw WavError(Kind::unsupported_format,
                               "unsupported codec " + std::to_string(format));
            }
            if ((is_float && bits != 32) || (!is_float && bits != 16 && bits != 24 && bits != 32)) {
                throw WavError(Kind::unsupported_format,
                               "unsupported bit depth " + std::to_string(bits));
            }
            if (channels != 1 && channels != 2) {
                throw WavError(Kind::unsupported_format,
                               "unsupported channel count " + std::to_string(channels));
            }
            if (rate == 0) throw WavError(Kind::malformed_header, "zero sample rate");
            const std::size_t bytes_per_sample = bits / 8;
            if (block_align != channels * bytes_per_sample) {
                throw WavError(Kind::malformed_header, "inconsistent block alignment");
            }
            if (size == 0) throw WavError(Kind::empty_data, "zero-length data chunk");
            if (body + size > bytes.size()) throw WavError(Kind::malformed_header, "truncated data chunk");

            const std::size_t frames = size / block_align;
            if (frames == 0) throw WavError(Kind::empty_data, "data chunk holds no complete frame");
            AudioClip clip;
            clip.sample_rate_hz = rate;
            clip.samples.resize(frames);
            const std::uint8_t* d = bytes.data() + body;
            for (std::size_t i = 0; i < frames; ++i) {
                const std::uint8_t* frame = d + i * block_align;
                double v = detail::decode_sample(frame, bits, is_float);
                if (channels == 2) {
                    v = 0.5 * (v + detail::decode_sample(frame + bytes_per_sample, bits, is_float));
                }
                clip.samples[i] = v;
            }
            return clip;
        }
        pos = body + size + (size & 1u);
    }
    throw WavError(Kind::malformed_header, have_fmt ? "missing data chunk" : "missing fmt chunk");
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw WavError(WavError::Kind::io, "cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline AudioClip read_wav(const std::filesystem::path& path) {
    const auto bytes = read_file_bytes(path);
    try {
        AudioClip clip = decode_wav(bytes);
        clip.source_id = path.stem().string();
        return clip;
    } catch (const WavError& e) {
        throw WavError(e.kind(), path.string() + ": " + e.what());
    }
}

enum class WavEncoding { pcm16, float32 };

inline std::vector<std::uint8_t> write_wav(const AudioClip& clip, WavEncoding enc) {
    const std::uint16_t bits = enc == WavEncoding::pcm16 ? 16 : 32;
    const std::uint16_t block = bits / 8;
    const auto data_bytes = static_cast<std::uint32_t>(clip.samples.size() * block);

    std::vector<std::uint8_t> out;
    out.reserve(44 + data_bytes);
    detail::put_tag(out, "RIFF");
    detail::put_le32(out, 36 + data_bytes);
    detail::put_tag(out, "WAVE");
    detail::put_tag(out, "fmt ");
    detail::put_le32(out, 16);
    detail::put_le16(out, enc == WavEncoding::pcm16 ? 1 : 3);
    detail::put_le16(out, 1);
    detail::put_le32(out, clip.sample_rate_hz);
    detail::put_le32(out, clip.sample_rate_hz * block);
    detail::put_le16(out, block);
    detail::put_le16(out, bits);
    detail::put_tag(out, "data");
    detail::put_le32(out, data_bytes);
    for (double s : clip.samples) {
        if (enc == WavEncoding::pcm16) {
            const double q = std::clamp(std::round(s * 32768.0), -32768.0, 32767.0);
            detail::put_le16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
        } else {
            detail::put_le32(out, std::bit_cast<std::uint32_t>(static_cast<float>(s)));
        }
    }
    return out;
}

inline void save_wav(const std::filesystem::path& path, const AudioClip& clip, WavEncoding enc) {
    const auto bytes = write_wav(clip, enc);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw WavError(WavError::Kind::io, "cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw WavError(WavError::Kind::io, "short write to " + path.string());
}

/// Linear-interpolation resampling; output length is round(N * target / source).
inline AudioClip resample(const AudioClip& clip, std::uint32_t target_rate_hz) {
    if (target_rate_hz == 0) throw AudioError("target sample rate must be positive");
    validate(clip);
    if (target_rate_hz == clip.sample_rate_hz) return clip;

    const double ratio = static_cast<double>(clip.sample_rate_hz) / target_rate_hz;
    const auto n_out = static_cast<std::size_t>(
        std::llround(static_cast<double>(clip.samples.size()) * target_rate_hz / clip.sample_rate_hz));
    AudioClip out = clip;
    out.sample_rate_hz = target_rate_hz;
    out.samples.assign(n_out, 0.0);
    const std::size_t last = clip.samples.size() - 1;
    for (std::size_t i = 0; i < n_out; ++i) {
        const double pos = static_cast<double>(i) * ratio;
        const auto i0 = std::min(static_cast<std::size_t>(pos), last);
        const std::size_t i1 = std::min(i0 + 1, last);
        const double frac = std::clamp(pos - static_cast<double>(i0), 0.0, 1.0);
        out.samples[i] = clip.samples[i0] + frac * (clip.samples[i1] - clip.samples[i0]);
    }
    return out;
}

/// Cuts `count` contiguous, non-overlapping sub-clips of `sub_len_s` seconds
/// from the start of `clip`. Any remainder past count * sub_len_s is dropped.
inline std::vector<AudioClip> slice_clip(const AudioClip& clip, double sub_len_s = 5.0,
                                         std::size_t count = 5) {
    if (!(sub_len_s > 0.0) || count == 0) throw AudioError("slice length and count must be positive");
    const auto sub_len = static_cast<std::size_t>(std::llround(sub_len_s * clip.sample_rate_hz));
    if (sub_len == 0 || clip.samples.size() < sub_len * count) {
        throw AudioError("clip too short: " + std::to_string(clip.duration_s()) + " s < " +
                         std::to_string(sub_len_s * static_cast<double>(count)) + " s");
    }
    std::vector<AudioClip> subs;
    subs.reserve(count);
    for (std::size_t k = 0; k < count; ++k) {
        AudioClip sub;
        sub.sample_rate_hz = clip.sample_rate_hz;
        sub.label = clip.label;
        sub.source_id = clip.source_id;
        sub.offset_s = clip.offset_s + static_cast<double>(k * sub_len) / clip.sample_rate_hz;
        const auto first = clip.samples.begin() + static_cast<std::ptrdiff_t>(k * sub_len);
        sub.samples.assign(first, first + static_cast<std::ptrdiff_t>(sub_len));
        subs.push_back(std::move(sub));
    }
    return subs;
}

}  // namespace mer
