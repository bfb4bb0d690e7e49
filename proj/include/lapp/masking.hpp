#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "lapp/tensor.hpp"

namespace lapp {

/// Per-module mask state derived from the sparse-path weights and the
/// learnable threshold.
template <typename T>
struct MaskBundle {
  std::vector<T> importance;   // l1 norm per filter, >= 0
  T threshold = T(0);
  std::vector<T> soft;         // sigmoid(importance - threshold), in (0,1)
  std::vector<uint8_t> hard;   // soft >= 0.5, i.e. importance >= threshold
  int64_t kept_count = 0;
};

/// l1 norm of each filter of a [c_out, c_in, k, k] weight tensor.
template <typename T>
std::vector<T> importance_l1(const Tensor<T>& weights) {
  if (weights.rank() != 4)
    throw std::domain_error("importance_l1: expected a 4-way weight tensor");
  const int64_t c_out = weights.dim(0);
  const int64_t per_filter = weights.numel() / c_out;
  std::vector<T> imp(static_cast<size_t>(c_out), T(0));
  const T* w = weights.data();
  for (int64_t f = 0; f < c_out; ++f) {
    T acc = T(0);
    const T* row = w + f * per_filter;
    for (int64_t i = 0; i < per_filter; ++i) {
      if (!std::isfinite(static_cast<double>(row[i])))
        throw std::domain_error("importance_l1: non-finite weight");
      acc += std::abs(row[i]);
    }
    imp[static_cast<size_t>(f)] = acc;
  }
  return imp;
}

/// Soft mask G = sigmoid(I - delta). Gradients of G flow only to delta;
/// the importance input is severed from the gradient graph by contract.
template <typename T>
std::vector<T> soft_mask(const std::vector<T>& importance, T threshold) {
  std::vector<T> g(importance.size());
  for (size_t i = 0; i < importance.size(); ++i) {
    const double z = static_cast<double>(importance[i]) - static_cast<double>(threshold);
    g[i] = static_cast<T>(1.0 / (1.0 + std::exp(-z)));
  }
  return g;
}

/// dL/ddelta given upstream gradients on G: sum_i dG_i * (-G_i (1 - G_i)).
template <typename T>
T soft_mask_grad_threshold(const std::vector<T>& soft, const std::vector<T>& upstream) {
  if (soft.size() != upstream.size())
    throw std::domain_error("soft_mask_grad_threshold: size mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < soft.size(); ++i) {
    const double g = static_cast<double>(soft[i]);
    acc -= static_cast<double>(upstream[i]) * g * (1.0 - g);
  }
  return static_cast<T>(acc);
}

/// Forward: M_i = 1 iff G_i >= 0.5. Backward is the straight-through
/// estimator: upstream gradients on M pass to G unchanged.
template <typename T>
std::vector<uint8_t> binarize_ste(const std::vector<T>& soft) {
  std::vector<uint8_t> m(soft.size());
  for (size_t i = 0; i < soft.size(); ++i) m[i] = soft[i] >= T(0.5) ? 1 : 0;
  return m;
}

template <typename T>
MaskBundle<T> compute_mask_bundle(const Tensor<T>& sparse_weights, T threshold) {
  MaskBundle<T> b;
  b.importance = importance_l1(sparse_weights);
  b.threshold = threshold;
  b.soft = soft_mask(b.importance, threshold);
  b.hard = binarize_ste(b.soft);
  b.kept_count = 0;
  for (uint8_t m : b.hard) b.kept_count += m;
  return b;
}

/// Y[i] = M[i] * X[i] broadcast over spatial dims. Accepts CHW or NCHW.
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& path_output, const std::vector<uint8_t>& hard_mask) {
  if (path_output.rank() != 3 && path_output.rank() != 4)
    throw std::domain_error("apply_mask: expected CHW or NCHW feature map");
  const size_t c_axis = path_output.rank() == 4 ? 1 : 0;
  const int64_t channels = path_output.dim(c_axis);
  if (channels != static_cast<int64_t>(hard_mask.size()))
    throw std::domain_error("apply_mask: mask length does not match channel count");
  const int64_t batch = path_output.rank() == 4 ? path_output.dim(0) : 1;
  const int64_t plane = path_output.numel() / (batch * channels);
  Tensor<T> out(path_output.shape());
  const T* x = path_output.data();
  T* y = out.data();
  for (int64_t n = 0; n < batch; ++n) {
    for (int64_t c = 0; c < channels; ++c) {
      const int64_t base = (n * channels + c) * plane;
      if (hard_mask[static_cast<size_t>(c)]) {
        for (int64_t i = 0; i < plane; ++i) y[base + i] = x[base + i];
      }
      // masked channels stay exactly zero
    }
  }
  return out;
}

/// Backward of apply_mask: d_input = M * d_out, and the per-channel mask
/// gradient dM_c = sum over batch/spatial of d_out * input.
template <typename T>
void apply_mask_backward(const Tensor<T>& d_out, const Tensor<T>& input,
                         const std::vector<uint8_t>& hard_mask,
                         Tensor<T>& d_input, std::vector<T>& d_mask) {
  if (!d_out.same_shape(input))
    throw std::domain_error("apply_mask_backward: shape mismatch");
  const size_t c_axis = d_out.rank() == 4 ? 1 : 0;
  const int64_t channels = d_out.dim(c_axis);
  if (channels != static_cast<int64_t>(hard_mask.size()))
    throw std::domain_error("apply_mask_backward: mask length mismatch");
  const int64_t batch = d_out.rank() == 4 ? d_out.dim(0) : 1;
  const int64_t plane = d_out.numel() / (batch * channels);
  d_input.resize(d_out.shape());
  d_mask.assign(static_cast<size_t>(channels), T(0));
  const T* dy = d_out.data();
  const T* x = input.data();
  T* dx = d_input.data();
  for (int64_t n = 0; n < batch; ++n) {
    for (int64_t c = 0; c < channels; ++c) {
      const int64_t base = (n * channels + c) * plane;
      T acc = T(0);
      for (int64_t i = 0; i < plane; ++i) acc += dy[base + i] * x[base + i];
      d_mask[static_cast<size_t>(c)] += acc;
      if (hard_mask[static_cast<size_t>(c)]) {
        for (int64_t i = 0; i < plane; ++i) dx[base + i] = dy[base + i];
      }
    }
  }
}

}  // namespace lapp
