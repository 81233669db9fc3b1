#pragma once

// Synthetic two-class corpus. Happy clips are fast major-triad arpeggios with
// bright, partial-rich notes; sad clips are slow sustained minor triads with a
// dark, quickly rolled-off timbre.

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mer/audio.hpp"
#include "mer/manifest.hpp"
#include "mer/ops.hpp"

namespace mer {

struct SynthConfig {
    std::size_t n_per_class = 200;
    double clip_len_s = 30.0;
    std::uint32_t sample_rate_hz = 44100;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_per_class < 1) throw std::invalid_argument("n_per_class must be at least 1");
        if (!(clip_len_s > 0.0)) throw std::invalid_argument("clip length must be positive");
        if (sample_rate_hz == 0) throw std::invalid_argument("sample rate must be positive");
    }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline double uniform(std::mt19937_64& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Adds a tone with the given partial amplitudes to out[begin, begin + len).
/// The envelope is evaluated per sample; partials above 0.45 * rate are skipped.
template <typename Env>
void add_note(std::vector<double>& out, std::size_t begin, std::size_t len, double f0,
              std::span<const double> partial_amps, double rate, const Env& env) {
    len = std::min(len, out.size() - std::min(begin, out.size()));
    if (len == 0) return;
    std::vector<double> gain(len);
    for (std::size_t i = 0; i < len; ++i) gain[i] = env(static_cast<double>(i) / rate);
    for (std::size_t k = 0; k < partial_amps.size(); ++k) {
        const double f = f0 * static_cast<double>(k + 1);
        if (f >= 0.45 * rate) break;
        // Phasor recurrence, renormalized every block to stop magnitude drift.
        const std::complex<double> step = std::polar(1.0, 2.0 * std::numbers::pi * f / rate);
        std::complex<double> z(1.0, 0.0);
        const double a = partial_amps[k];
        for (std::size_t i = 0; i < len; ++i) {
            out[begin + i] += a * gain[i] * z.imag();
            z *= step;
            if ((i & 1023) == 1023) z /= std::abs(z);
        }
    }
}

inline double semitones(double f, double st) { return f * std::pow(2.0, st / 12.0); }

inline void synth_happy(std::vector<double>& out, double rate, std::mt19937_64& rng) {
    const double bpm = uniform(rng, 160.0, 200.0);
    const double note_s = 60.0 / bpm / 2.0;  // eighth notes
    const double root = semitones(261.63, std::floor(uniform(rng, -3.0, 5.0)));
    const double brightness = uniform(rng, 0.5, 0.8);
    const double decay_s = uniform(rng, 0.10, 0.16);
    std::array<double, 12> amps{};
    for (std::size_t k = 0; k < amps.size(); ++k) amps[k] = 1.0 / std::pow(static_cast<double>(k + 1), brightness);

    constexpr std::array<double, 6> pattern{0, 4, 7, 12, 7, 4};
    constexpr std::array<double, 4> progression{0, 5, 7, 0};  // I IV V I
    const auto note_len = static_cast<std::size_t>(note_s * rate);
    const auto tail = static_cast<std::size_t>(0.05 * rate);
    const auto env = [decay_s](double t) { return std::min(t / 0.005, 1.0) * std::exp(-t / decay_s); };
    std::size_t n = 0;
    for (std::size_t begin = 0; begin < out.size(); begin += note_len, ++n) {
        const double chord = progression[(n / 12) % progression.size()];
        const double st = chord + pattern[n % pattern.size()] + (uniform01(rng) < 0.1 ? 12.0 : 0.0);
        const double f0 = semitones(root, st) * (1.0 + uniform(rng, -0.002, 0.002));
        add_note(out, begin, note_len + tail, f0, amps, rate, env);
    }
}

inline void synth_sad(std::vector<double>& out, double rate, std::mt19937_64& rng) {
    const double bpm = uniform(rng, 50.0, 70.0);
    const double chord_s = 2.0 * 60.0 / bpm;  // two beats per chord
    const double root = semitones(110.0, std::floor(uniform(rng, 0.0, 8.0)));
    const double rolloff = uniform(rng, 2.0, 2.6);
    std::array<double, 5> amps{};
    for (std::size_t k = 0; k < amps.size(); ++k) amps[k] = 1.0 / std::pow(static_cast<double>(k + 1), rolloff);

    constexpr std::array<double, 3> triad{0, 3, 7};
    constexpr std::array<double, 4> progression{0, 5, 7, 3};  // i iv v iii
    const auto chord_len = static_cast<std::size_t>(chord_s * rate);
    const double attack = 0.3, release = 0.4;
    const auto env = [=](double t) {
        return std::min(t / attack, 1.0) * std::clamp((chord_s + release - t) / release, 0.0, 1.0);
    };
    std::size_t n = 0;
    for (std::size_t begin = 0; begin < out.size(); begin += chord_len, ++n) {
        const double chord = progression[n % progression.size()];
        const auto len = chord_len + static_cast<std::size_t>(release * rate);
        for (double iv : triad) {
            add_note(out, begin, len, semitones(root, chord + iv) * (1.0 + uniform(rng, -0.003, 0.003)), amps, rate,
                     env);
        }
        add_note(out, begin, len, semitones(root, chord - 12.0), amps, rate, env);
    }
}

}  // namespace detail

/// Deterministic in (label, seed, config). Peak-normalized to 0.9.
inline AudioClip synth_clip(Emotion label, std::uint64_t seed, const SynthConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(detail::splitmix64(seed ^ (static_cast<std::uint64_t>(label) << 56)));
    const auto n = static_cast<std::size_t>(std::llround(cfg.clip_len_s * cfg.sample_rate_hz));
    std::vector<double> out(n, 0.0);
    const auto rate = static_cast<double>(cfg.sample_rate_hz);
    if (label == Emotion::happy) {
        detail::synth_happy(out, rate, rng);
    } else {
        detail::synth_sad(out, rate, rng);
    }
    for (double& v : out) v += 0.002 * (2.0 * uniform01(rng) - 1.0);

    double peak = 0.0;
    for (double v : out) peak = std::max(peak, std::abs(v));
    const double g = peak > 0.0 ? 0.9 / peak : 0.0;
    for (double& v : out) v = std::clamp(v * g, -0.9, 0.9);

    AudioClip clip;
    clip.samples = std::move(out);
    clip.sample_rate_hz = cfg.sample_rate_hz;
    clip.label = label;
    return clip;
}

/// Seed of clip `index` of class `label` within a corpus.
inline std::uint64_t synth_clip_seed(std::uint64_t corpus_seed, Emotion label, std::size_t index) {
    return detail::splitmix64(detail::splitmix64(corpus_seed) + 2 * index + static_cast<std::uint64_t>(label));
}

/// Writes happy/ and sad/ WAV files (16-bit PCM) under `out_dir` plus
/// manifest.json, and returns the manifest.
inline DatasetManifest generate_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
    cfg.validate();
    DatasetManifest m;
    m.metadata = {cfg.sample_rate_hz, "mer synth", cfg.seed};
    m.base_dir = out_dir;
    try {
        for (std::size_t c = 0; c < kNumEmotions; ++c) {
            const auto label = static_cast<Emotion>(c);
            const std::string dir(to_string(label));
            std::filesystem::create_directories(out_dir / dir);
            for (std::size_t i = 0; i < cfg.n_per_class; ++i) {
                std::ostringstream id;
                id << dir << '_' << std::setw(4) << std::setfill('0') << i;
                AudioClip clip = synth_clip(label, synth_clip_seed(cfg.seed, label, i), cfg);
                clip.source_id = id.str();
                const std::string rel = dir + "/" + id.str() + ".wav";
                save_wav(out_dir / rel, clip, WavEncoding::pcm16);
                m.entries.push_back({rel, label, id.str(), Split::unassigned, std::nullopt, std::nullopt});
            }
        }
    } catch (const std::filesystem::filesystem_error& e) {
        throw AudioError(std::string("synth: ") + e.what());
    }
    save_manifest(m, out_dir / "manifest.json");
    return m;
}

}  // namespace mer
