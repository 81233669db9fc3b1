#pragma once

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

namespace mer {

/// Real-input forward DFT returning the n/2 + 1 non-negative frequency bins.
/// Power-of-two sizes use an iterative radix-2 transform; other sizes fall
/// back to the direct O(n^2) sum.
class RealFft {
public:
    explicit RealFft(std::size_t n) : n_(n) {
        if (n == 0) throw std::invalid_argument("FFT size must be positive");
        pow2_ = (n & (n - 1)) == 0;
        twiddle_.resize(pow2_ ? n / 2 : n);
        for (std::size_t k = 0; k < twiddle_.size(); ++k) {
            const double a = -2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n);
            twiddle_[k] = {std::cos(a), std::sin(a)};
        }
        if (pow2_) {
            bitrev_.resize(n);
            std::size_t bits = 0;
            while ((std::size_t{1} << bits) < n) ++bits;
            for (std::size_t i = 0; i < n; ++i) {
                std::size_t r = 0;
                for (std::size_t b = 0; b < bits; ++b) r |= ((i >> b) & 1u) << (bits - 1 - b);
                bitrev_[i] = r;
            }
        }
        work_.resize(n);
    }

    std::size_t size() const { return n_; }
    std::size_t bins() const { return n_ / 2 + 1; }

    void forward(std::span<const double> in, std::span<std::complex<double>> out) {
        if (in.size() != n_ || out.size() != bins()) throw std::invalid_argument("FFT buffer size mismatch");
        if (!pow2_) {
            for (std::size_t k = 0; k < bins(); ++k) {
                std::complex<double> acc{0.0, 0.0};
                for (std::size_t t = 0; t < n_; ++t) acc += in[t] * twiddle_[(k * t) % n_];
                out[k] = acc;
            }
            return;
        }
        for (std::size_t i = 0; i < n_; ++i) work_[bitrev_[i]] = {in[i], 0.0};
        for (std::size_t len = 2; len <= n_; len <<= 1) {
            const std::size_t half = len / 2;
            const std::size_t step = n_ / len;
            for (std::size_t start = 0; start < n_; start += len) {
                for (std::size_t j = 0; j < half; ++j) {
                    const std::complex<double> u = work_[start + j];
                    const std::complex<double> v = work_[start + j + half] * twiddle_[j * step];
                    work_[start + j] = u + v;
                    work_[start + j + half] = u - v;
                }
            }
        }
        for (std::size_t k = 0; k < bins(); ++k) out[k] = work_[k];
    }

private:
    std::size_t n_;
    bool pow2_ = false;
    std::vector<std::complex<double>> twiddle_;
    std::vector<std::size_t> bitrev_;
    std::vector<std::complex<double>> work_;
};

}  // namespace mer
