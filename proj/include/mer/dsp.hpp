#pragma once

// Mel-spectrogram front end: framed STFT, power spectrogram, HTK-scale
// triangular filterbank, log compression and CNN input normalization.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <tuple>
#include <vector>

#include "mer/audio.hpp"
#include "mer/fft.hpp"

namespace mer {

class DspError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Dense row-major matrix.
template <typename T>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> values;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), values(r * c, fill) {}

    T& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

    std::span<T> row(std::size_t r) { return {values.data() + r * cols, cols}; }
    std::span<const T> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
};

using ComplexMatrix = Matrix<std::complex<double>>;

enum class WindowFn { hann, rectangular };

struct SpectrogramParams {
    std::size_t win = 2048;
    std::size_t hop = 512;
    WindowFn window_fn = WindowFn::hann;
    std::size_t n_mels = 128;
    double fmin_hz = 0.0;
    std::optional<double> fmax_hz;  // Nyquist when unset
    double log_eps = 1e-10;

    double fmax_for(std::uint32_t rate_hz) const { return fmax_hz.value_or(rate_hz / 2.0); }

    void validate(std::uint32_t rate_hz) const {
        if (win == 0 || hop == 0 || hop > win) throw DspError("require 0 < hop <= win");
        if (n_mels < 2) throw DspError("n_mels must be at least 2");
        const double fmax = fmax_for(rate_hz);
        if (fmax > rate_hz / 2.0) throw DspError("fmax exceeds the Nyquist frequency");
        if (!(fmin_hz >= 0.0 && fmin_hz < fmax)) throw DspError("require 0 <= fmin < fmax");
        if (!(log_eps > 0.0)) throw DspError("log_eps must be positive");
    }
};

inline std::vector<double> make_window(WindowFn fn, std::size_t n) {
    std::vector<double> w(n, 1.0);
    if (fn == WindowFn::hann) {
        // Periodic Hann: a bin-centred sinusoid leaks into exactly three bins.
        for (std::size_t i = 0; i < n; ++i) {
            w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
        }
    }
    return w;
}

inline std::size_t frame_count(std::size_t n_samples, std::size_t win, std::size_t hop) {
    return n_samples < win ? 0 : 1 + (n_samples - win) / hop;
}

/// Frames start at t * hop and span win samples; no centring or padding.
inline ComplexMatrix stft(std::span<const double> samples, const SpectrogramParams& params) {
    if (params.win == 0 || params.hop == 0 || params.hop > params.win) throw DspError("require 0 < hop <= win");
    if (samples.size() < params.win) {
        throw DspError("signal shorter than one window (" + std::to_string(samples.size()) + " < " +
                       std::to_string(params.win) + ")");
    }
    const std::size_t frames = frame_count(samples.size(), params.win, params.hop);
    const auto window = make_window(params.window_fn, params.win);
    RealFft fft(params.win);
    ComplexMatrix out(frames, fft.bins());
    std::vector<double> frame(params.win);
    for (std::size_t t = 0; t < frames; ++t) {
        const double* src = samples.data() + t * params.hop;
        for (std::size_t i = 0; i < params.win; ++i) frame[i] = src[i] * window[i];
        fft.forward(frame, out.row(t));
    }
    return out;
}

struct PowerSpectrogram {
    Matrix<double> values;  // frames x (win/2 + 1)
    SpectrogramParams params;
};

inline PowerSpectrogram power_spectrogram(const ComplexMatrix& z, const SpectrogramParams& params = {}) {
    PowerSpectrogram p{Matrix<double>(z.rows, z.cols), params};
    std::transform(z.values.begin(), z.values.end(), p.values.values.begin(),
                   [](const std::complex<double>& c) { return std::norm(c); });
    return p;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

struct MelFilterbank {
    Matrix<double> weights;  // n_mels x (win/2 + 1)
    std::vector<double> center_freqs_hz;
    std::vector<std::size_t> support_begin;  // first non-zero bin of each row
    std::vector<std::size_t> support_end;    // one past the last non-zero bin
};

/// Triangular filters with corners at n_mels + 2 points equally spaced on the
/// HTK mel scale, evaluated at the FFT bin centre frequencies k * rate / win.
/// Filters have unit peak height (no area normalization).
inline MelFilterbank build_mel_filterbank(const SpectrogramParams& params, std::uint32_t sample_rate_hz) {
    params.validate(sample_rate_hz);
    const std::size_t bins = params.win / 2 + 1;
    const double mel_lo = hz_to_mel(params.fmin_hz);
    const double mel_hi = hz_to_mel(params.fmax_for(sample_rate_hz));
    std::vector<double> corners(params.n_mels + 2);
    for (std::size_t i = 0; i < corners.size(); ++i) {
        corners[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) /
                                            static_cast<double>(params.n_mels + 1));
    }

    MelFilterbank fb;
    fb.weights = Matrix<double>(params.n_mels, bins);
    fb.center_freqs_hz.resize(params.n_mels);
    fb.support_begin.assign(params.n_mels, 0);
    fb.support_end.assign(params.n_mels, 0);
    const double bin_hz = static_cast<double>(sample_rate_hz) / static_cast<double>(params.win);
    for (std::size_t m = 0; m < params.n_mels; ++m) {
        const double lo = corners[m], mid = corners[m + 1], hi = corners[m + 2];
        fb.center_freqs_hz[m] = mid;
        bool seen = false;
        for (std::size_t k = 0; k < bins; ++k) {
            const double f = static_cast<double>(k) * bin_hz;
            const double w = std::max(0.0, std::min((f - lo) / (mid - lo), (hi - f) / (hi - mid)));
            if (w > 0.0) {
                fb.weights(m, k) = w;
                if (!seen) fb.support_begin[m] = k;
                fb.support_end[m] = k + 1;
                seen = true;
            }
        }
        if (!seen) {
            throw DspError("mel filter " + std::to_string(m) + " has empty support; n_mels too large for win " +
                           std::to_string(params.win));
        }
    }
    return fb;
}

/// Shared immutable filterbanks keyed by the parameters that shape them.
inline std::shared_ptr<const MelFilterbank> cached_mel_filterbank(const SpectrogramParams& params,
                                                                  std::uint32_t sample_rate_hz) {
    using Key = std::tuple<std::size_t, std::size_t, double, double, std::uint32_t>;
    static std::mutex mu;
    static std::map<Key, std::shared_ptr<const MelFilterbank>> cache;
    const Key key{params.win, params.n_mels, params.fmin_hz, params.fmax_for(sample_rate_hz), sample_rate_hz};
    std::lock_guard lock(mu);
    auto it = cache.find(key);
    if (it == cache.end()) {
        it = cache.emplace(key, std::make_shared<const MelFilterbank>(build_mel_filterbank(params, sample_rate_hz)))
                 .first;
    }
    return it->second;
}

struct MelSpectrogram {
    Matrix<double> values;  // frames x n_mels
    bool log_scaled = false;
};

/// values = spect * weights^T. Rows of the filterbank are only visited over
/// their support, which is exactly the full product since weights vanish elsewhere.
inline MelSpectrogram mel_spectrogram(const PowerSpectrogram& spect, const MelFilterbank& fb) {
    if (spect.values.cols != fb.weights.cols) {
        throw DspError("dimension mismatch: spectrogram has " + std::to_string(spect.values.cols) +
                       " bins, filterbank expects " + std::to_string(fb.weights.cols));
    }
    const std::size_t n_mels = fb.weights.rows;
    const bool has_support = fb.support_end.size() == n_mels;
    MelSpectrogram mel{Matrix<double>(spect.values.rows, n_mels), false};
    for (std::size_t t = 0; t < spect.values.rows; ++t) {
        const auto row = spect.values.row(t);
        for (std::size_t m = 0; m < n_mels; ++m) {
            const std::size_t k0 = has_support ? fb.support_begin[m] : 0;
            const std::size_t k1 = has_support ? fb.support_end[m] : fb.weights.cols;
            const auto w = fb.weights.row(m);
            double acc = 0.0;
            for (std::size_t k = k0; k < k1; ++k) acc += row[k] * w[k];
            mel.values(t, m) = acc;
        }
    }
    return mel;
}

inline MelSpectrogram log_compress(MelSpectrogram mel, double eps = 1e-10) {
    if (mel.log_scaled) throw DspError("mel-spectrogram is already log-compressed");
    if (!(eps > 0.0)) throw DspError("log epsilon must be positive");
    for (double& v : mel.values.values) v = std::log(v + eps);
    mel.log_scaled = true;
    return mel;
}

/// Standardized 3-channel image fed to the networks. The three channels are
/// identical copies of the resized, standardized mel image.
struct ModelInput {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> pixels;  // 3 x height x width

    std::span<const float> channel(std::size_t c) const {
        return {pixels.data() + c * height * width, height * width};
    }
};

/// Bilinear resize with half-pixel centres; the identity when sizes agree.
inline Matrix<double> resize_bilinear(const Matrix<double>& src, std::size_t out_h, std::size_t out_w) {
    Matrix<double> dst(out_h, out_w);
    const double sy = static_cast<double>(src.rows) / static_cast<double>(out_h);
    const double sx = static_cast<double>(src.cols) / static_cast<double>(out_w);
    for (std::size_t y = 0; y < out_h; ++y) {
        const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(src.rows - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, src.rows - 1);
        const double wy = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < out_w; ++x) {
            const double fx =
                std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(src.cols - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, src.cols - 1);
            const double wx = fx - static_cast<double>(x0);
            const double top = src(y0, x0) + wx * (src(y0, x1) - src(y0, x0));
            const double bot = src(y1, x0) + wx * (src(y1, x1) - src(y1, x0));
            dst(y, x) = top + wy * (bot - top);
        }
    }
    return dst;
}

/// Image rows follow spectrogram frames and columns follow mel bands.
inline ModelInput to_model_input(const MelSpectrogram& mel, std::size_t height = 224, std::size_t width = 224) {
    if (!mel.log_scaled) throw DspError("model input requires a log-compressed mel-spectrogram");
    if (mel.values.rows < 2 || mel.values.cols < 2) throw DspError("degenerate mel-spectrogram (need >= 2x2)");
    if (height == 0 || width == 0) throw DspError("model input size must be positive");

    const Matrix<double> img = resize_bilinear(mel.values, height, width);
    const double n = static_cast<double>(img.values.size());
    const double mean = std::accumulate(img.values.begin(), img.values.end(), 0.0) / n;
    double var = 0.0;
    for (double v : img.values) var += (v - mean) * (v - mean);
    const double stdev = std::max(std::sqrt(var / n), 1e-6);

    ModelInput in{height, width, std::vector<float>(3 * height * width)};
    for (std::size_t i = 0; i < img.values.size(); ++i) {
        const auto v = static_cast<float>((img.values[i] - mean) / stdev);
        if (!std::isfinite(v)) throw DspError("non-finite value in model input");
        for (std::size_t c = 0; c < 3; ++c) in.pixels[c * height * width + i] = v;
    }
    return in;
}

inline MelSpectrogram log_mel_spectrogram(const AudioClip& clip, const SpectrogramParams& params) {
    params.validate(clip.sample_rate_hz);
    const auto fb = cached_mel_filterbank(params, clip.sample_rate_hz);
    return log_compress(mel_spectrogram(power_spectrogram(stft(clip.samples, params), params), *fb), params.log_eps);
}

/// Full chain from a sub-clip to the network input.
inline ModelInput extract_features(const AudioClip& clip, const SpectrogramParams& params, std::size_t height,
                                   std::size_t width) {
    return to_model_input(log_mel_spectrogram(clip, params), height, width);
}

}  // namespace mer
