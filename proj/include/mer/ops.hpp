#pragma once

// Differentiable operations over NCHW tensors. Each op computes its forward
// values eagerly and records the analytic adjoint on the tape.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mer/tensor.hpp"

namespace mer {

enum class Mode { train, eval };

class ModeError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

inline void require(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

/// Gradient buffer of input i, or nullptr when that input takes no gradient.
template <typename T>
T* input_grad(TensorNode<T>& self, std::size_t i) {
    if (i >= self.inputs.size() || !self.inputs[i] || !self.inputs[i]->requires_grad) return nullptr;
    return self.inputs[i]->ensure_grad().data();
}

template <typename T>
const T* input_data(const TensorNode<T>& self, std::size_t i) {
    return self.inputs[i]->data.data();
}

struct ConvGeometry {
    std::size_t channels, height, width;
    std::size_t kh, kw, stride, pad;
    std::size_t out_h, out_w;

    std::size_t patch() const { return channels * kh * kw; }
    std::size_t positions() const { return out_h * out_w; }
    bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

inline std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    return (in + 2 * pad - k) / stride + 1;
}

// col is (channels * kh * kw) x (out_h * out_w).
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
    const std::size_t P = g.positions();
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                T* row = col + ((c * g.kh + ki) * g.kw + kj) * P;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
                    T* dst = row + oy * g.out_w;
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
                        std::fill(dst, dst + g.out_w, T{});
                        continue;
                    }
                    const T* src = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
                        dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) ? T{} : src[ix];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, T* x) {
    const std::size_t P = g.positions();
    for (std::size_t c = 0; c < g.channels; ++c) {
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const T* row = col + ((c * g.kh + ki) * g.kw + kj) * P;
                for (std::size_t oy = 0; oy < g.out_h; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
                    T* dst = x + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
                    const T* src = row + oy * g.out_w;
                    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
                        if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(),
                    "add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return Tensor<T>::from_op(a.shape(), std::move(out), "add", {a, b}, [](TensorNode<T>& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            if (T* g = detail::input_grad(self, k)) {
                for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
            }
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require(a.shape() == b.shape(),
                    "mul: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return Tensor<T>::from_op(a.shape(), std::move(out), "mul", {a, b}, [](TensorNode<T>& self) {
        const T* av = detail::input_data(self, 0);
        const T* bv = detail::input_data(self, 1);
        if (T* g = detail::input_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bv[i];
        }
        if (T* g = detail::input_grad(self, 1)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * av[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * c;
    return Tensor<T>::from_op(x.shape(), std::move(out), "scale", {x}, [c](TensorNode<T>& self) {
        if (T* g = detail::input_grad(self, 0)) {
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * c;
        }
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc{};
    for (T v : x.data()) acc += v;
    return Tensor<T>::from_op({1}, {acc}, "sum", {x}, [](TensorNode<T>& self) {
        if (T* g = detail::input_grad(self, 0)) {
            const std::size_t n = self.inputs[0]->data.size();
            for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
        }
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T{} || std::isnan(x[i]) ? x[i] : T{};
    return Tensor<T>::from_op(x.shape(), std::move(out), "relu", {x}, [](TensorNode<T>& self) {
        if (T* g = detail::input_grad(self, 0)) {
            const T* in = detail::input_data(self, 0);
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                if (in[i] > T{}) g[i] += self.grad[i];
            }
        }
    });
}

template <typename T>
Tensor<T> relu6(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i], T{}, T{6});
    return Tensor<T>::from_op(x.shape(), std::move(out), "relu6", {x}, [](TensorNode<T>& self) {
        if (T* g = detail::input_grad(self, 0)) {
            const T* in = detail::input_data(self, 0);
            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                if (in[i] > T{} && in[i] < T{6}) g[i] += self.grad[i];
            }
        }
    });
}

/// (N, ...) -> (N, prod(...)).
template <typename T>
Tensor<T> flatten(const Tensor<T>& x) {
    detail::require(x.ndim() >= 1, "flatten: scalar input");
    return x.reshape({x.dim(0), x.numel() / x.dim(0)});
}

// ---------------------------------------------------------------------------
// Convolutions

/// Cross-correlation of NCHW input with an (out, in, kh, kw) kernel. `bias`
/// may be an undefined tensor.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride = 1,
                 std::size_t padding = 0) {
    detail::require(x.ndim() == 4, "conv2d: input must be NCHW, got " + shape_string(x.shape()));
    detail::require(weight.ndim() == 4, "conv2d: weight must be (out, in, kh, kw)");
    detail::require(stride > 0, "conv2d: stride must be positive");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t O = weight.dim(0);
    detail::require(weight.dim(1) == C, "conv2d: weight expects " + std::to_string(weight.dim(1)) +
                                            " input channels, got " + std::to_string(C));
    detail::require(H + 2 * padding >= weight.dim(2) && W + 2 * padding >= weight.dim(3),
                    "conv2d: kernel larger than padded input");
    detail::require(!bias.defined() || bias.shape() == Shape{O}, "conv2d: bias must have one entry per output");

    const detail::ConvGeometry g{C,
                                 H,
                                 W,
                                 weight.dim(2),
                                 weight.dim(3),
                                 stride,
                                 padding,
                                 detail::conv_out(H, weight.dim(2), stride, padding),
                                 detail::conv_out(W, weight.dim(3), stride, padding)};
    const std::size_t K = g.patch(), P = g.positions();
    std::vector<T> out(N * O * P);
    std::vector<T> col(g.pointwise() ? 0 : K * P);
    const detail::ConstMatMap<T> wmat(weight.data().data(), O, K);
    for (std::size_t n = 0; n < N; ++n) {
        const T* xn = x.data().data() + n * C * H * W;
        const T* src = xn;
        if (!g.pointwise()) {
            detail::im2col(xn, g, col.data());
            src = col.data();
        }
        detail::MatMap<T> y(out.data() + n * O * P, O, P);
        y.noalias() = wmat * detail::ConstMatMap<T>(src, K, P);
        if (bias.defined()) {
            for (std::size_t o = 0; o < O; ++o) y.row(o).array() += bias[o];
        }
    }

    return Tensor<T>::from_op({N, O, g.out_h, g.out_w}, std::move(out), "conv2d", {x, weight, bias},
                              [g, N, O](TensorNode<T>& self) {
                                  const std::size_t K = g.patch(), P = g.positions();
                                  const std::size_t in_size = g.channels * g.height * g.width;
                                  const T* xv = detail::input_data(self, 0);
                                  const detail::ConstMatMap<T> wmat(detail::input_data(self, 1), O, K);
                                  T* gx = detail::input_grad(self, 0);
                                  T* gw = detail::input_grad(self, 1);
                                  T* gb = detail::input_grad(self, 2);
                                  std::vector<T> col(g.pointwise() ? 0 : K * P);
                                  detail::RowMat<T> gcol;
                                  for (std::size_t n = 0; n < N; ++n) {
                                      const detail::ConstMatMap<T> gy(self.grad.data() + n * O * P, O, P);
                                      if (gw) {
                                          const T* src = xv + n * in_size;
                                          if (!g.pointwise()) {
                                              detail::im2col(src, g, col.data());
                                              src = col.data();
                                          }
                                          detail::MatMap<T>(gw, O, K).noalias() +=
                                              gy * detail::ConstMatMap<T>(src, K, P).transpose();
                                      }
                                      if (gx) {
                                          if (g.pointwise()) {
                                              detail::MatMap<T>(gx + n * in_size, K, P).noalias() +=
                                                  wmat.transpose() * gy;
                                          } else {
                                              gcol.noalias() = wmat.transpose() * gy;
                                              detail::col2im_add(gcol.data(), g, gx + n * in_size);
                                          }
                                      }
                                      if (gb) {
                                          for (std::size_t o = 0; o < O; ++o) gb[o] += gy.row(o).sum();
                                      }
                                  }
                              });
}

/// Per-channel spatial convolution; weight is (C, 1, kh, kw).
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                           std::size_t stride = 1, std::size_t padding = 0) {
    detail::require(x.ndim() == 4, "depthwise_conv2d: input must be NCHW");
    detail::require(stride > 0, "depthwise_conv2d: stride must be positive");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    detail::require(weight.ndim() == 4 && weight.dim(0) == C && weight.dim(1) == 1,
                    "depthwise_conv2d: need one (1, kh, kw) filter per input channel, got weight " +
                        shape_string(weight.shape()) + " for " + std::to_string(C) + " channels");
    detail::require(!bias.defined() || bias.shape() == Shape{C}, "depthwise_conv2d: bias must have one entry per channel");
    const std::size_t KH = weight.dim(2), KW = weight.dim(3);
    detail::require(H + 2 * padding >= KH && W + 2 * padding >= KW, "depthwise_conv2d: kernel larger than padded input");
    const std::size_t OH = detail::conv_out(H, KH, stride, padding), OW = detail::conv_out(W, KW, stride, padding);

    std::vector<T> out(N * C * OH * OW);
    const T* xv = x.data().data();
    const T* wv = weight.data().data();
    for (std::size_t n = 0; n < N; ++n) {
        for (std::size_t c = 0; c < C; ++c) {
            const T* plane = xv + (n * C + c) * H * W;
            const T* k = wv + c * KH * KW;
            T* y = out.data() + (n * C + c) * OH * OW;
            const T b = bias.defined() ? bias[c] : T{};
            for (std::size_t oy = 0; oy < OH; ++oy) {
                for (std::size_t ox = 0; ox < OW; ++ox) {
                    T acc = b;
                    for (std::size_t ki = 0; ki < KH; ++ki) {
                        const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(padding);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                        for (std::size_t kj = 0; kj < KW; ++kj) {
                            const auto ix =
                                static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(padding);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                            acc += k[ki * KW + kj] * plane[static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix)];
                        }
                    }
                    y[oy * OW + ox] = acc;
                }
            }
        }
    }

    return Tensor<T>::from_op(
        {N, C, OH, OW}, std::move(out), "depthwise_conv2d", {x, weight, bias},
        [=](TensorNode<T>& self) {
            const T* xv = detail::input_data(self, 0);
            const T* wv = detail::input_data(self, 1);
            T* gx = detail::input_grad(self, 0);
            T* gw = detail::input_grad(self, 1);
            T* gb = detail::input_grad(self, 2);
            for (std::size_t n = 0; n < N; ++n) {
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t plane_off = (n * C + c) * H * W;
                    const T* gy = self.grad.data() + (n * C + c) * OH * OW;
                    for (std::size_t oy = 0; oy < OH; ++oy) {
                        for (std::size_t ox = 0; ox < OW; ++ox) {
                            const T go = gy[oy * OW + ox];
                            if (gb) gb[c] += go;
                            for (std::size_t ki = 0; ki < KH; ++ki) {
                                const auto iy =
                                    static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(padding);
                                if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                                for (std::size_t kj = 0; kj < KW; ++kj) {
                                    const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kj) -
                                                    static_cast<std::ptrdiff_t>(padding);
                                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                                    const std::size_t xi =
                                        plane_off + static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix);
                                    if (gw) gw[c * KH * KW + ki * KW + kj] += go * xv[xi];
                                    if (gx) gx[xi] += go * wv[c * KH * KW + ki * KW + kj];
                                }
                            }
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Pooling

/// Windowed maximum; NaN propagates. Padded positions never win. The
/// gradient goes to the first maximal element of each window in row-major order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x, std::size_t k = 2, std::size_t stride = 2, std::size_t padding = 0) {
    detail::require(x.ndim() == 4, "maxpool2d: input must be NCHW");
    detail::require(k > 0 && stride > 0 && 2 * padding <= k, "maxpool2d: invalid window");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    detail::require(H + 2 * padding >= k && W + 2 * padding >= k,
                    "maxpool2d: window " + std::to_string(k) + " larger than input " + shape_string(x.shape()));
    const std::size_t OH = detail::conv_out(H, k, stride, padding), OW = detail::conv_out(W, k, stride, padding);

    std::vector<T> out(N * C * OH * OW);
    std::vector<std::size_t> argmax(out.size());
    const T* xv = x.data().data();
    for (std::size_t p = 0; p < N * C; ++p) {
        const T* plane = xv + p * H * W;
        for (std::size_t oy = 0; oy < OH; ++oy) {
            for (std::size_t ox = 0; ox < OW; ++ox) {
                T best = -std::numeric_limits<T>::infinity();
                std::size_t best_i = 0;
                bool found = false;
                for (std::size_t ki = 0; ki < k; ++ki) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(padding);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
                    for (std::size_t kj = 0; kj < k; ++kj) {
                        const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(padding);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                        const std::size_t i = static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix);
                        // NaN wins so that bad values reach the loss instead of vanishing.
                        if (!found || plane[i] > best || (std::isnan(plane[i]) && !std::isnan(best))) {
                            best = plane[i];
                            best_i = i;
                            found = true;
                        }
                    }
                }
                const std::size_t o = (p * OH + oy) * OW + ox;
                out[o] = best;
                argmax[o] = p * H * W + best_i;
            }
        }
    }
    return Tensor<T>::from_op({N, C, OH, OW}, std::move(out), "maxpool2d", {x},
                              [argmax = std::move(argmax)](TensorNode<T>& self) {
                                  if (T* g = detail::input_grad(self, 0)) {
                                      for (std::size_t o = 0; o < argmax.size(); ++o) g[argmax[o]] += self.grad[o];
                                  }
                              });
}

/// Spatial mean per channel: (N, C, H, W) -> (N, C).
template <typename T>
Tensor<T> global_avgpool(const Tensor<T>& x) {
    detail::require(x.ndim() == 4, "global_avgpool: input must be NCHW");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    std::vector<T> out(N * C);
    for (std::size_t p = 0; p < N * C; ++p) {
        T acc{};
        const T* plane = x.data().data() + p * HW;
        for (std::size_t i = 0; i < HW; ++i) acc += plane[i];
        out[p] = acc / static_cast<T>(HW);
    }
    return Tensor<T>::from_op({N, C}, std::move(out), "global_avgpool", {x}, [HW](TensorNode<T>& self) {
        if (T* g = detail::input_grad(self, 0)) {
            for (std::size_t p = 0; p < self.grad.size(); ++p) {
                const T share = self.grad[p] / static_cast<T>(HW);
                for (std::size_t i = 0; i < HW; ++i) g[p * HW + i] += share;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Dense

/// x (N, F) times weight (out, F) transposed, plus bias (out).
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
    detail::require(x.ndim() == 2 && weight.ndim() == 2, "linear: expects 2-D input and weight");
    const std::size_t N = x.dim(0), F = x.dim(1), O = weight.dim(0);
    detail::require(weight.dim(1) == F, "linear: weight expects " + std::to_string(weight.dim(1)) +
                                            " features, got " + std::to_string(F));
    detail::require(!bias.defined() || bias.shape() == Shape{O}, "linear: bias must have one entry per output");
    std::vector<T> out(N * O);
    detail::MatMap<T> y(out.data(), N, O);
    y.noalias() = detail::ConstMatMap<T>(x.data().data(), N, F) *
                  detail::ConstMatMap<T>(weight.data().data(), O, F).transpose();
    if (bias.defined()) {
        for (std::size_t n = 0; n < N; ++n) {
            for (std::size_t o = 0; o < O; ++o) y(n, o) += bias[o];
        }
    }
    return Tensor<T>::from_op({N, O}, std::move(out), "linear", {x, weight, bias}, [N, F, O](TensorNode<T>& self) {
        const detail::ConstMatMap<T> gy(self.grad.data(), N, O);
        if (T* gx = detail::input_grad(self, 0)) {
            detail::MatMap<T>(gx, N, F).noalias() += gy * detail::ConstMatMap<T>(detail::input_data(self, 1), O, F);
        }
        if (T* gw = detail::input_grad(self, 1)) {
            detail::MatMap<T>(gw, O, F).noalias() +=
                gy.transpose() * detail::ConstMatMap<T>(detail::input_data(self, 0), N, F);
        }
        if (T* gb = detail::input_grad(self, 2)) {
            for (std::size_t o = 0; o < O; ++o) gb[o] += gy.col(o).sum();
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization, regularization, merging

/// Batch normalization over (N, H, W) per channel. Train mode normalizes with
/// the biased batch variance and folds the unbiased variance into the running
/// estimate; eval mode uses the running estimates.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, Tensor<T>& running_mean,
                      Tensor<T>& running_var, Mode mode, double momentum = 0.1, double eps = 1e-5) {
    detail::require(x.ndim() == 4, "batchnorm2d: input must be NCHW");
    const std::size_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
    for (const Tensor<T>* p : std::array<const Tensor<T>*, 4>{&gamma, &beta, &running_mean, &running_var}) {
        detail::require(p->shape() == Shape{C}, "batchnorm2d: per-channel parameters must have length " +
                                                    std::to_string(C));
    }
    if (mode == Mode::train && N < 2) {
        throw ModeError("batchnorm2d: train mode needs a batch of at least 2");
    }
    const std::size_t M = N * HW;
    std::vector<T> out(x.numel());
    std::vector<T> xhat(x.numel());
    std::vector<T> invstd(C);
    const T* xv = x.data().data();

    for (std::size_t c = 0; c < C; ++c) {
        double mu, var;
        if (mode == Mode::train) {
            double s = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const T* plane = xv + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) s += plane[i];
            }
            mu = s / static_cast<double>(M);
            double ss = 0.0;
            for (std::size_t n = 0; n < N; ++n) {
                const T* plane = xv + (n * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i) ss += (plane[i] - mu) * (plane[i] - mu);
            }
            var = ss / static_cast<double>(M);
            const double unbiased = M > 1 ? ss / static_cast<double>(M - 1) : var;
            running_mean[c] = static_cast<T>((1.0 - momentum) * running_mean[c] + momentum * mu);
            running_var[c] = static_cast<T>((1.0 - momentum) * running_var[c] + momentum * unbiased);
        } else {
            mu = running_mean[c];
            var = running_var[c];
        }
        const double is = 1.0 / std::sqrt(var + eps);
        invstd[c] = static_cast<T>(is);
        for (std::size_t n = 0; n < N; ++n) {
            const std::size_t off = (n * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
                const T h = static_cast<T>((xv[off + i] - mu) * is);
                xhat[off + i] = h;
                out[off + i] = gamma[c] * h + beta[c];
            }
        }
    }

    return Tensor<T>::from_op(
        x.shape(), std::move(out), "batchnorm2d", {x, gamma, beta},
        [N, C, HW, mode, xhat = std::move(xhat), invstd = std::move(invstd)](TensorNode<T>& self) {
            const T* gam = detail::input_data(self, 1);
            T* gx = detail::input_grad(self, 0);
            T* gg = detail::input_grad(self, 1);
            T* gbeta = detail::input_grad(self, 2);
            const auto M = static_cast<double>(N * HW);
            for (std::size_t c = 0; c < C; ++c) {
                double sum_dy = 0.0, sum_dy_xhat = 0.0;
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t off = (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        sum_dy += self.grad[off + i];
                        sum_dy_xhat += self.grad[off + i] * xhat[off + i];
                    }
                }
                if (gg) gg[c] += static_cast<T>(sum_dy_xhat);
                if (gbeta) gbeta[c] += static_cast<T>(sum_dy);
                if (!gx) continue;
                const double k = gam[c] * invstd[c];
                for (std::size_t n = 0; n < N; ++n) {
                    const std::size_t off = (n * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        if (mode == Mode::train) {
                            gx[off + i] += static_cast<T>(
                                k * (self.grad[off + i] - sum_dy / M - xhat[off + i] * sum_dy_xhat / M));
                        } else {
                            gx[off + i] += static_cast<T>(k * self.grad[off + i]);
                        }
                    }
                }
            }
        });
}

/// Uniform double in [0, 1) from the top 53 bits of a 64-bit draw.
inline double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Inverted dropout: survivors are scaled by 1 / (1 - p). Identity in eval mode.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Mode mode, std::mt19937_64& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("dropout: p must lie in [0, 1)");
    if (mode == Mode::eval || p == 0.0) return x;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> mask(x.numel());
    std::vector<T> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) {
        mask[i] = uniform01(rng) >= p ? keep_scale : T{};
        out[i] = x[i] * mask[i];
    }
    return Tensor<T>::from_op(x.shape(), std::move(out), "dropout", {x},
                              [mask = std::move(mask)](TensorNode<T>& self) {
                                  if (T* g = detail::input_grad(self, 0)) {
                                      for (std::size_t i = 0; i < mask.size(); ++i) g[i] += self.grad[i] * mask[i];
                                  }
                              });
}

/// Stacks NCHW tensors along the channel axis in argument order.
template <typename T>
Tensor<T> channel_concat(const std::vector<Tensor<T>>& xs) {
    detail::require(!xs.empty(), "channel_concat: no inputs");
    const auto& first = xs.front();
    detail::require(first.ndim() == 4, "channel_concat: inputs must be NCHW");
    const std::size_t N = first.dim(0), H = first.dim(2), W = first.dim(3), HW = H * W;
    std::vector<std::size_t> channels;
    std::size_t total = 0;
    for (const auto& t : xs) {
        detail::require(t.ndim() == 4 && t.dim(0) == N && t.dim(2) == H && t.dim(3) == W,
                        "channel_concat: batch/spatial mismatch " + shape_string(t.shape()) + " vs " +
                            shape_string(first.shape()));
        channels.push_back(t.dim(1));
        total += t.dim(1);
    }
    std::vector<T> out(N * total * HW);
    for (std::size_t n = 0; n < N; ++n) {
        std::size_t c0 = 0;
        for (std::size_t k = 0; k < xs.size(); ++k) {
            const T* src = xs[k].data().data() + n * channels[k] * HW;
            std::copy(src, src + channels[k] * HW, out.data() + (n * total + c0) * HW);
            c0 += channels[k];
        }
    }
    return Tensor<T>::from_op({N, total, H, W}, std::move(out), "channel_concat", xs,
                              [N, total, HW, channels](TensorNode<T>& self) {
                                  std::size_t c0 = 0;
                                  for (std::size_t k = 0; k < channels.size(); ++k) {
                                      if (T* g = detail::input_grad(self, k)) {
                                          for (std::size_t n = 0; n < N; ++n) {
                                              const T* src = self.grad.data() + (n * total + c0) * HW;
                                              T* dst = g + n * channels[k] * HW;
                                              for (std::size_t i = 0; i < channels[k] * HW; ++i) dst[i] += src[i];
                                          }
                                      }
                                      c0 += channels[k];
                                  }
                              });
}

// ---------------------------------------------------------------------------
// Classification

/// Row-wise softmax with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
    detail::require(logits.ndim() == 2, "softmax: expects (N, K) logits");
    const std::size_t N = logits.dim(0), K = logits.dim(1);
    std::vector<T> out(N * K);
    for (std::size_t n = 0; n < N; ++n) {
        const T* z = logits.data().data() + n * K;
        const T m = *std::max_element(z, z + K);
        T s{};
        for (std::size_t k = 0; k < K; ++k) s += (out[n * K + k] = std::exp(z[k] - m));
        for (std::size_t k = 0; k < K; ++k) out[n * K + k] /= s;
    }
    return Tensor<T>::from_op({N, K}, out, "softmax", {logits}, [N, K](TensorNode<T>& self) {
        if (T* g = detail::input_grad(self, 0)) {
            for (std::size_t n = 0; n < N; ++n) {
                const T* y = self.data.data() + n * K;
                const T* gy = self.grad.data() + n * K;
                T dot{};
                for (std::size_t k = 0; k < K; ++k) dot += gy[k] * y[k];
                for (std::size_t k = 0; k < K; ++k) g[n * K + k] += y[k] * (gy[k] - dot);
            }
        }
    });
}

/// Mean over the batch of -log softmax(logits)[target], via log-sum-exp.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets) {
    detail::require(logits.ndim() == 2, "cross_entropy: expects (N, K) logits");
    const std::size_t N = logits.dim(0), K = logits.dim(1);
    detail::require(targets.size() == N, "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                             std::to_string(N) + " rows");
    std::vector<T> probs(N * K);
    T loss{};
    for (std::size_t n = 0; n < N; ++n) {
        if (targets[n] >= K) {
            throw std::out_of_range("cross_entropy: target " + std::to_string(targets[n]) + " outside [0, " +
                                    std::to_string(K) + ")");
        }
        const T* z = logits.data().data() + n * K;
        const T m = *std::max_element(z, z + K);
        T s{};
        for (std::size_t k = 0; k < K; ++k) s += std::exp(z[k] - m);
        const T lse = m + std::log(s);
        loss += lse - z[targets[n]];
        for (std::size_t k = 0; k < K; ++k) probs[n * K + k] = std::exp(z[k] - lse);
    }
    loss /= static_cast<T>(N);
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    return Tensor<T>::from_op({1}, {loss}, "cross_entropy", {logits},
                              [N, K, probs = std::move(probs), tgt = std::move(tgt)](TensorNode<T>& self) {
                                  if (T* g = detail::input_grad(self, 0)) {
                                      const T s = self.grad[0] / static_cast<T>(N);
                                      for (std::size_t n = 0; n < N; ++n) {
                                          for (std::size_t k = 0; k < K; ++k) {
                                              const T onehot = k == tgt[n] ? T{1} : T{};
                                              g[n * K + k] += s * (probs[n * K + k] - onehot);
                                          }
                                      }
                                  }
                              });
}

}  // namespace mer
