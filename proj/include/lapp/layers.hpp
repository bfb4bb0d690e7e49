#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "lapp/gemm.hpp"
#include "lapp/rng.hpp"
#include "lapp/tensor.hpp"

namespace lapp {

/// A learnable tensor with its gradient and SGD momentum buffer. Momentum
/// lives here so surgery can gather optimizer state together with weights.
template <typename T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> mom;
  bool decay = true;

  void init(std::vector<int64_t> shape) {
    value.resize(shape);
    grad.resize(shape);
    mom.resize(std::move(shape));
  }
  void zero_grad() { grad.zero(); }
};

inline int64_t conv_out_extent(int64_t in, int64_t k, int64_t stride, int64_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

/// 2D convolution, no bias, square kernel, NCHW. im2col + GEMM with
/// per-sample column buffers.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int64_t c_in, int64_t c_out, int64_t k, int64_t stride, int64_t pad)
      : c_in_(c_in), c_out_(c_out), k_(k), stride_(stride), pad_(pad) {
    w.init({c_out, c_in, k, k});
  }

  void init_weights(Rng& rng) {
    const double fan_in = static_cast<double>(c_in_ * k_ * k_);
    rng.fill_normal(w.value, 0.0, std::sqrt(2.0 / fan_in));
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    check_input(x);
    const int64_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
    const int64_t ho = conv_out_extent(h, k_, stride_, pad_);
    const int64_t wo = conv_out_extent(wd, k_, stride_, pad_);
    Tensor<T> y({n, c_out_, ho, wo});
    col_.resize({c_in_ * k_ * k_, ho * wo});
    for (int64_t i = 0; i < n; ++i) {
      im2col(x.data() + i * c_in_ * h * wd, h, wd, ho, wo, col_.data());
      gemm(false, false, static_cast<int>(c_out_), static_cast<int>(ho * wo),
           static_cast<int>(c_in_ * k_ * k_), T(1), w.value.data(),
           static_cast<int>(c_in_ * k_ * k_), col_.data(),
           static_cast<int>(ho * wo), T(0), y.data() + i * c_out_ * ho * wo,
           static_cast<int>(ho * wo));
    }
    if (train) input_ = x;
    return y;
  }

  /// Accumulates into w.grad; returns gradient w.r.t. the forward input.
  Tensor<T> backward(const Tensor<T>& dy) {
    const Tensor<T>& x = input_;
    if (x.empty()) throw std::runtime_error("Conv2d::backward before forward(train)");
    const int64_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
    const int64_t ho = dy.dim(2), wo = dy.dim(3);
    Tensor<T> dx(x.shape());
    col_.resize({c_in_ * k_ * k_, ho * wo});
    dcol_.resize({c_in_ * k_ * k_, ho * wo});
    for (int64_t i = 0; i < n; ++i) {
      const T* dyi = dy.data() + i * c_out_ * ho * wo;
      // dW += dy_i * col_i^T
      im2col(x.data() + i * c_in_ * h * wd, h, wd, ho, wo, col_.data());
      gemm(false, true, static_cast<int>(c_out_), static_cast<int>(c_in_ * k_ * k_),
           static_cast<int>(ho * wo), T(1), dyi, static_cast<int>(ho * wo),
           col_.data(), static_cast<int>(ho * wo), T(1), w.grad.data(),
           static_cast<int>(c_in_ * k_ * k_));
      // dcol = W^T * dy_i, then scatter back
      gemm(true, false, static_cast<int>(c_in_ * k_ * k_), static_cast<int>(ho * wo),
           static_cast<int>(c_out_), T(1), w.value.data(),
           static_cast<int>(c_in_ * k_ * k_), dyi, static_cast<int>(ho * wo),
           T(0), dcol_.data(), static_cast<int>(ho * wo));
      col2im(dcol_.data(), h, wd, ho, wo, dx.data() + i * c_in_ * h * wd);
    }
    return dx;
  }

  void release_cache() { input_ = Tensor<T>(); }

  int64_t c_in() const { return c_in_; }
  int64_t c_out() const { return c_out_; }
  int64_t k() const { return k_; }
  int64_t stride() const { return stride_; }
  int64_t pad() const { return pad_; }

  Param<T> w;

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.rank() != 4 || x.dim(1) != c_in_)
      throw std::invalid_argument("Conv2d: expected NCHW input with " +
                                  std::to_string(c_in_) + " channels, got " +
                                  shape_string(x));
  }

  void im2col(const T* x, int64_t h, int64_t w, int64_t ho, int64_t wo, T* col) const {
    for (int64_t c = 0; c < c_in_; ++c) {
      for (int64_t ky = 0; ky < k_; ++ky) {
        for (int64_t kx = 0; kx < k_; ++kx) {
          T* dst = col + ((c * k_ + ky) * k_ + kx) * ho * wo;
          for (int64_t oy = 0; oy < ho; ++oy) {
            const int64_t iy = oy * stride_ + ky - pad_;
            if (iy < 0 || iy >= h) {
              std::fill(dst, dst + wo, T(0));
              dst += wo;
              continue;
            }
            const T* src = x + (c * h + iy) * w;
            for (int64_t ox = 0; ox < wo; ++ox) {
              const int64_t ix = ox * stride_ + kx - pad_;
              *dst++ = (ix < 0 || ix >= w) ? T(0) : src[ix];
            }
          }
        }
      }
    }
  }

  void col2im(const T* col, int64_t h, int64_t w, int64_t ho, int64_t wo, T* x) const {
    for (int64_t c = 0; c < c_in_; ++c) {
      for (int64_t ky = 0; ky < k_; ++ky) {
        for (int64_t kx = 0; kx < k_; ++kx) {
          const T* src = col + ((c * k_ + ky) * k_ + kx) * ho * wo;
          for (int64_t oy = 0; oy < ho; ++oy) {
            const int64_t iy = oy * stride_ + ky - pad_;
            if (iy < 0 || iy >= h) continue;
            T* dst = x + (c * h + iy) * w;
            const T* row = src + oy * wo;
            for (int64_t ox = 0; ox < wo; ++ox) {
              const int64_t ix = ox * stride_ + kx - pad_;
              if (ix >= 0 && ix < w) dst[ix] += row[ox];
            }
          }
        }
      }
    }
  }

  int64_t c_in_ = 0, c_out_ = 0, k_ = 0, stride_ = 1, pad_ = 0;
  Tensor<T> input_;
  Tensor<T> col_, dcol_;
};

/// Depthwise 2D convolution (one kxk filter per channel), direct loops.
template <typename T>
class DepthwiseConv2d {
 public:
  DepthwiseConv2d() = default;
  DepthwiseConv2d(int64_t channels, int64_t k, int64_t stride, int64_t pad)
      : c_(channels), k_(k), stride_(stride), pad_(pad) {
    w.init({channels, 1, k, k});
  }

  void init_weights(Rng& rng) {
    const double fan_in = static_cast<double>(k_ * k_);
    rng.fill_normal(w.value, 0.0, std::sqrt(2.0 / fan_in));
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    if (x.rank() != 4 || x.dim(1) != c_)
      throw std::invalid_argument("DepthwiseConv2d: bad input " + shape_string(x));
    const int64_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
    const int64_t ho = conv_out_extent(h, k_, stride_, pad_);
    const int64_t wo = conv_out_extent(wd, k_, stride_, pad_);
    Tensor<T> y({n, c_, ho, wo});
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t c = 0; c < c_; ++c) {
        const T* xc = x.data() + (i * c_ + c) * h * wd;
        const T* wc = w.value.data() + c * k_ * k_;
        T* yc = y.data() + (i * c_ + c) * ho * wo;
        for (int64_t oy = 0; oy < ho; ++oy) {
          for (int64_t ox = 0; ox < wo; ++ox) {
            T acc = T(0);
            for (int64_t ky = 0; ky < k_; ++ky) {
              const int64_t iy = oy * stride_ + ky - pad_;
              if (iy < 0 || iy >= h) continue;
              for (int64_t kx = 0; kx < k_; ++kx) {
                const int64_t ix = ox * stride_ + kx - pad_;
                if (ix < 0 || ix >= wd) continue;
                acc += wc[ky * k_ + kx] * xc[iy * wd + ix];
              }
            }
            yc[oy * wo + ox] = acc;
          }
        }
      }
    }
    if (train) input_ = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const Tensor<T>& x = input_;
    if (x.empty()) throw std::runtime_error("DepthwiseConv2d::backward before forward(train)");
    const int64_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
    const int64_t ho = dy.dim(2), wo = dy.dim(3);
    Tensor<T> dx(x.shape());
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t c = 0; c < c_; ++c) {
        const T* xc = x.data() + (i * c_ + c) * h * wd;
        const T* dyc = dy.data() + (i * c_ + c) * ho * wo;
        const T* wc = w.value.data() + c * k_ * k_;
        T* dwc = w.grad.data() + c * k_ * k_;
        T* dxc = dx.data() + (i * c_ + c) * h * wd;
        for (int64_t oy = 0; oy < ho; ++oy) {
          for (int64_t ox = 0; ox < wo; ++ox) {
            const T g = dyc[oy * wo + ox];
            for (int64_t ky = 0; ky < k_; ++ky) {
              const int64_t iy = oy * stride_ + ky - pad_;
              if (iy < 0 || iy >= h) continue;
              for (int64_t kx = 0; kx < k_; ++kx) {
                const int64_t ix = ox * stride_ + kx - pad_;
                if (ix < 0 || ix >= wd) continue;
                dwc[ky * k_ + kx] += g * xc[iy * wd + ix];
                dxc[iy * wd + ix] += g * wc[ky * k_ + kx];
              }
            }
          }
        }
      }
    }
    return dx;
  }

  void release_cache() { input_ = Tensor<T>(); }

  int64_t channels() const { return c_; }
  int64_t k() const { return k_; }
  int64_t stride() const { return stride_; }

  Param<T> w;

 private:
  int64_t c_ = 0, k_ = 0, stride_ = 1, pad_ = 0;
  Tensor<T> input_;
};

/// Per-channel batch normalization with affine parameters and running
/// statistics (population stats used in eval mode).
template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int64_t channels, double eps = 1e-5, double momentum = 0.1)
      : c_(channels), eps_(eps), momentum_(momentum) {
    gamma.init({channels});
    beta.init({channels});
    gamma.value.fill(T(1));
    running_mean.resize({channels});
    running_var.resize({channels});
    running_var.fill(T(1));
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    if (x.rank() != 4 || x.dim(1) != c_)
      throw std::invalid_argument("BatchNorm2d: bad input " + shape_string(x));
    const int64_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
    const int64_t plane = h * w;
    const int64_t count = n * plane;
    Tensor<T> y(x.shape());
    if (train) {
      mean_.assign(static_cast<size_t>(c_), T(0));
      inv_std_.assign(static_cast<size_t>(c_), T(0));
      xhat_.resize(x.shape());
      for (int64_t c = 0; c < c_; ++c) {
        double sum = 0.0, sq = 0.0;
        for (int64_t i = 0; i < n; ++i) {
          const T* xc = x.data() + (i * c_ + c) * plane;
          for (int64_t j = 0; j < plane; ++j) {
            sum += xc[j];
            sq += static_cast<double>(xc[j]) * xc[j];
          }
        }
        const double mean = sum / count;
        const double var = std::max(0.0, sq / count - mean * mean);
        mean_[c] = static_cast<T>(mean);
        inv_std_[c] = static_cast<T>(1.0 / std::sqrt(var + eps_));
        const double unbiased = count > 1 ? var * count / (count - 1) : var;
        running_mean[c] = static_cast<T>((1.0 - momentum_) * running_mean[c] + momentum_ * mean);
        running_var[c] = static_cast<T>((1.0 - momentum_) * running_var[c] + momentum_ * unbiased);
        const T g = gamma.value[c], b = beta.value[c], m = mean_[c], is = inv_std_[c];
        for (int64_t i = 0; i < n; ++i) {
          const T* xc = x.data() + (i * c_ + c) * plane;
          T* hc = xhat_.data() + (i * c_ + c) * plane;
          T* yc = y.data() + (i * c_ + c) * plane;
          for (int64_t j = 0; j < plane; ++j) {
            hc[j] = (xc[j] - m) * is;
            yc[j] = g * hc[j] + b;
          }
        }
      }
      count_ = count;
    } else {
      for (int64_t c = 0; c < c_; ++c) {
        const T is = static_cast<T>(1.0 / std::sqrt(static_cast<double>(running_var[c]) + eps_));
        const T g = gamma.value[c], b = beta.value[c], m = running_mean[c];
        for (int64_t i = 0; i < n; ++i) {
          const T* xc = x.data() + (i * c_ + c) * plane;
          T* yc = y.data() + (i * c_ + c) * plane;
          for (int64_t j = 0; j < plane; ++j) yc[j] = g * (xc[j] - m) * is + b;
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    if (xhat_.empty()) throw std::runtime_error("BatchNorm2d::backward before forward(train)");
    const int64_t n = dy.dim(0), plane = dy.dim(2) * dy.dim(3);
    Tensor<T> dx(dy.shape());
    for (int64_t c = 0; c < c_; ++c) {
      double dg = 0.0, db = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        const T* dyc = dy.data() + (i * c_ + c) * plane;
        const T* hc = xhat_.data() + (i * c_ + c) * plane;
        for (int64_t j = 0; j < plane; ++j) {
          dg += static_cast<double>(dyc[j]) * hc[j];
          db += dyc[j];
        }
      }
      gamma.grad[c] += static_cast<T>(dg);
      beta.grad[c] += static_cast<T>(db);
      const double scale = static_cast<double>(gamma.value[c]) * inv_std_[c] / count_;
      for (int64_t i = 0; i < n; ++i) {
        const T* dyc = dy.data() + (i * c_ + c) * plane;
        const T* hc = xhat_.data() + (i * c_ + c) * plane;
        T* dxc = dx.data() + (i * c_ + c) * plane;
        for (int64_t j = 0; j < plane; ++j)
          dxc[j] = static_cast<T>(scale * (count_ * dyc[j] - db - hc[j] * dg));
      }
    }
    return dx;
  }

  void release_cache() { xhat_ = Tensor<T>(); }

  int64_t channels() const { return c_; }

  Param<T> gamma, beta;
  Tensor<T> running_mean, running_var;

 private:
  int64_t c_ = 0;
  double eps_ = 1e-5, momentum_ = 0.1;
  std::vector<T> mean_, inv_std_;
  Tensor<T> xhat_;
  int64_t count_ = 0;
};

template <typename T>
inline void relu_inplace(Tensor<T>& t) {
  for (int64_t i = 0; i < t.numel(); ++i)
    if (t[i] < T(0)) t[i] = T(0);
}

/// Gradient through ReLU given the post-activation output.
template <typename T>
inline Tensor<T> relu_backward(const Tensor<T>& dy, const Tensor<T>& y) {
  Tensor<T> dx(dy.shape());
  for (int64_t i = 0; i < dy.numel(); ++i) dx[i] = y[i] > T(0) ? dy[i] : T(0);
  return dx;
}

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(int64_t in, int64_t out) : in_(in), out_(out) {
    w.init({out, in});
    b.init({out});
  }

  void init_weights(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
    rng.fill_uniform(w.value, -bound, bound);
    rng.fill_uniform(b.value, -bound, bound);
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    if (x.rank() != 2 || x.dim(1) != in_)
      throw std::invalid_argument("Linear: bad input " + shape_string(x));
    const int64_t n = x.dim(0);
    Tensor<T> y({n, out_});
    gemm(false, true, static_cast<int>(n), static_cast<int>(out_),
         static_cast<int>(in_), T(1), x.data(), static_cast<int>(in_),
         w.value.data(), static_cast<int>(in_), T(0), y.data(),
         static_cast<int>(out_));
    for (int64_t i = 0; i < n; ++i)
      for (int64_t o = 0; o < out_; ++o) y[i * out_ + o] += b.value[o];
    if (train) input_ = x;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const Tensor<T>& x = input_;
    if (x.empty()) throw std::runtime_error("Linear::backward before forward(train)");
    const int64_t n = x.dim(0);
    gemm(true, false, static_cast<int>(out_), static_cast<int>(in_),
         static_cast<int>(n), T(1), dy.data(), static_cast<int>(out_), x.data(),
         static_cast<int>(in_), T(1), w.grad.data(), static_cast<int>(in_));
    for (int64_t i = 0; i < n; ++i)
      for (int64_t o = 0; o < out_; ++o) b.grad[o] += dy[i * out_ + o];
    Tensor<T> dx({n, in_});
    gemm(false, false, static_cast<int>(n), static_cast<int>(in_),
         static_cast<int>(out_), T(1), dy.data(), static_cast<int>(out_),
         w.value.data(), static_cast<int>(in_), T(0), dx.data(),
         static_cast<int>(in_));
    return dx;
  }

  void release_cache() { input_ = Tensor<T>(); }

  int64_t in() const { return in_; }
  int64_t out() const { return out_; }

  Param<T> w, b;

 private:
  int64_t in_ = 0, out_ = 0;
  Tensor<T> input_;
};

/// 2x2-style max pooling used by the VGG builder.
template <typename T>
class MaxPool2d {
 public:
  MaxPool2d() = default;
  MaxPool2d(int64_t k, int64_t stride) : k_(k), stride_(stride) {}

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    const int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const int64_t ho = (h - k_) / stride_ + 1, wo = (w - k_) / stride_ + 1;
    Tensor<T> y({n, c, ho, wo});
    if (train) {
      argmax_.assign(static_cast<size_t>(n * c * ho * wo), 0);
      in_shape_ = x.shape();
    }
    for (int64_t i = 0; i < n * c; ++i) {
      const T* xc = x.data() + i * h * w;
      T* yc = y.data() + i * ho * wo;
      for (int64_t oy = 0; oy < ho; ++oy) {
        for (int64_t ox = 0; ox < wo; ++ox) {
          T best = xc[(oy * stride_) * w + ox * stride_];
          int64_t best_idx = (oy * stride_) * w + ox * stride_;
          for (int64_t ky = 0; ky < k_; ++ky) {
            for (int64_t kx = 0; kx < k_; ++kx) {
              const int64_t idx = (oy * stride_ + ky) * w + ox * stride_ + kx;
              if (xc[idx] > best) {
                best = xc[idx];
                best_idx = idx;
              }
            }
          }
          yc[oy * wo + ox] = best;
          if (train) argmax_[static_cast<size_t>(i * ho * wo + oy * wo + ox)] = best_idx;
        }
      }
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dx(in_shape_);
    const int64_t plane_out = dy.dim(2) * dy.dim(3);
    const int64_t plane_in = in_shape_[2] * in_shape_[3];
    for (int64_t i = 0; i < dy.dim(0) * dy.dim(1); ++i) {
      const T* dyc = dy.data() + i * plane_out;
      T* dxc = dx.data() + i * plane_in;
      for (int64_t j = 0; j < plane_out; ++j)
        dxc[argmax_[static_cast<size_t>(i * plane_out + j)]] += dyc[j];
    }
    return dx;
  }

 private:
  int64_t k_ = 2, stride_ = 2;
  std::vector<int64_t> argmax_;
  std::vector<int64_t> in_shape_;
};

/// Mean over the spatial plane: NCHW -> NC.
template <typename T>
class GlobalAvgPool {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool train) {
    const int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
    Tensor<T> y({n, c});
    for (int64_t i = 0; i < n * c; ++i) {
      double acc = 0.0;
      const T* xc = x.data() + i * plane;
      for (int64_t j = 0; j < plane; ++j) acc += xc[j];
      y[i] = static_cast<T>(acc / plane);
    }
    if (train) in_shape_ = x.shape();
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dx(in_shape_);
    const int64_t plane = in_shape_[2] * in_shape_[3];
    const T inv = T(1) / static_cast<T>(plane);
    for (int64_t i = 0; i < dy.numel(); ++i) {
      T* dxc = dx.data() + i * plane;
      const T g = dy[i] * inv;
      for (int64_t j = 0; j < plane; ++j) dxc[j] = g;
    }
    return dx;
  }

 private:
  std::vector<int64_t> in_shape_;
};

/// Mean softmax cross-entropy over the batch; fills dlogits for backward.
template <typename T>
T softmax_cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels,
                        Tensor<T>* dlogits) {
  const int64_t n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != n)
    throw std::invalid_argument("softmax_cross_entropy: label count mismatch");
  if (dlogits) dlogits->resize(logits.shape());
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const T* row = logits.data() + i * k;
    T mx = row[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int64_t j = 0; j < k; ++j) z += std::exp(static_cast<double>(row[j] - mx));
    const double logz = std::log(z) + mx;
    loss += logz - row[labels[static_cast<size_t>(i)]];
    if (dlogits) {
      T* drow = dlogits->data() + i * k;
      for (int64_t j = 0; j < k; ++j)
        drow[j] = static_cast<T>(std::exp(row[j] - logz) / n);
      drow[labels[static_cast<size_t>(i)]] -= T(1) / static_cast<T>(n);
    }
  }
  return static_cast<T>(loss / n);
}

}  // namespace lapp
