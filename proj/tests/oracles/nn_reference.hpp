#pragma once

// Direct-loop reference layers on flat NCHW vectors. Slow and obvious.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

namespace oracle {

struct Dims {
    std::size_t n, c, h, w;
    std::size_t at(std::size_t in, std::size_t ic, std::size_t ih, std::size_t iw) const {
        return ((in * c + ic) * h + ih) * w + iw;
    }
};

/// Grouped convolution with weight (O, C/groups, k, k); bias may be empty.
inline std::vector<double> conv2d(const std::vector<double>& x, Dims d, const std::vector<double>& wt, std::size_t out_c,
                                  std::size_t k, std::size_t stride, std::size_t pad, const std::vector<double>& bias,
                                  std::size_t groups, Dims& out_dims) {
    const std::size_t oh = (d.h + 2 * pad - k) / stride + 1, ow = (d.w + 2 * pad - k) / stride + 1;
    out_dims = {d.n, out_c, oh, ow};
    const std::size_t cin_g = d.c / groups, cout_g = out_c / groups;
    std::vector<double> y(d.n * out_c * oh * ow, 0.0);
    for (std::size_t n = 0; n < d.n; ++n)
        for (std::size_t o = 0; o < out_c; ++o) {
            const std::size_t g = o / cout_g;
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    double acc = bias.empty() ? 0.0 : bias[o];
                    for (std::size_t ci = 0; ci < cin_g; ++ci)
                        for (std::size_t a = 0; a < k; ++a)
                            for (std::size_t b = 0; b < k; ++b) {
                                const long r = static_cast<long>(i * stride + a) - static_cast<long>(pad);
                                const long s = static_cast<long>(j * stride + b) - static_cast<long>(pad);
                                if (r < 0 || s < 0 || r >= static_cast<long>(d.h) || s >= static_cast<long>(d.w)) continue;
                                acc += x[d.at(n, g * cin_g + ci, r, s)] * wt[((o * cin_g + ci) * k + a) * k + b];
                            }
                    y[out_dims.at(n, o, i, j)] = acc;
                }
        }
    return y;
}

inline std::vector<double> maxpool2d(const std::vector<double>& x, Dims d, std::size_t k, std::size_t stride,
                                     std::size_t pad, Dims& out_dims) {
    const std::size_t oh = (d.h + 2 * pad - k) / stride + 1, ow = (d.w + 2 * pad - k) / stride + 1;
    out_dims = {d.n, d.c, oh, ow};
    std::vector<double> y(d.n * d.c * oh * ow);
    for (std::size_t n = 0; n < d.n; ++n)
        for (std::size_t c = 0; c < d.c; ++c)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    double best = -std::numeric_limits<double>::infinity();
                    for (std::size_t a = 0; a < k; ++a)
                        for (std::size_t b = 0; b < k; ++b) {
                            const long r = static_cast<long>(i * stride + a) - static_cast<long>(pad);
                            const long s = static_cast<long>(j * stride + b) - static_cast<long>(pad);
                            if (r < 0 || s < 0 || r >= static_cast<long>(d.h) || s >= static_cast<long>(d.w)) continue;
                            best = std::max(best, x[d.at(n, c, r, s)]);
                        }
                    y[out_dims.at(n, c, i, j)] = best;
                }
    return y;
}

inline std::vector<double> global_avgpool(const std::vector<double>& x, Dims d) {
    std::vector<double> y(d.n * d.c, 0.0);
    for (std::size_t n = 0; n < d.n; ++n)
        for (std::size_t c = 0; c < d.c; ++c) {
            for (std::size_t i = 0; i < d.h; ++i)
                for (std::size_t j = 0; j < d.w; ++j) y[n * d.c + c] += x[d.at(n, c, i, j)];
            y[n * d.c + c] /= static_cast<double>(d.h * d.w);
        }
    return y;
}

/// y = x W^T + b with W (out, in).
inline std::vector<double> linear(const std::vector<double>& x, std::size_t n, std::size_t in,
                                  const std::vector<double>& w, std::size_t out, const std::vector<double>& b) {
    std::vector<double> y(n * out);
    for (std::size_t r = 0; r < n; ++r)
        for (std::size_t o = 0; o < out; ++o) {
            double acc = b.empty() ? 0.0 : b[o];
            for (std::size_t f = 0; f < in; ++f) acc += x[r * in + f] * w[o * in + f];
            y[r * out + o] = acc;
        }
    return y;
}

/// Training-mode batch norm: biased batch statistics per channel.
inline std::vector<double> batchnorm_train(const std::vector<double>& x, Dims d, const std::vector<double>& gamma,
                                           const std::vector<double>& beta, double eps) {
    std::vector<double> y(x.size());
    const double m = static_cast<double>(d.n * d.h * d.w);
    for (std::size_t c = 0; c < d.c; ++c) {
        double mu = 0.0, var = 0.0;
        for (std::size_t n = 0; n < d.n; ++n)
            for (std::size_t i = 0; i < d.h * d.w; ++i) mu += x[(n * d.c + c) * d.h * d.w + i];
        mu /= m;
        for (std::size_t n = 0; n < d.n; ++n)
            for (std::size_t i = 0; i < d.h * d.w; ++i) {
                const double v = x[(n * d.c + c) * d.h * d.w + i] - mu;
                var += v * v;
            }
        var /= m;
        for (std::size_t n = 0; n < d.n; ++n)
            for (std::size_t i = 0; i < d.h * d.w; ++i) {
                const std::size_t p = (n * d.c + c) * d.h * d.w + i;
                y[p] = gamma[c] * (x[p] - mu) / std::sqrt(var + eps) + beta[c];
            }
    }
    return y;
}

}  // namespace oracle
