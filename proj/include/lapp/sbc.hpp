#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lapp/flops_model.hpp"
#include "lapp/layers.hpp"
#include "lapp/masking.hpp"

namespace lapp {

/// d^l selection rule: full width for large targets, half width for very
/// small ones (boundary at c_target = 0.25).
inline int64_t select_bypass_width(int64_t c_out, double c_target) {
  if (c_target <= 0.0 || c_target >= 1.0)
    throw std::domain_error("select_bypass_width: c_target must be in (0,1)");
  if (c_target < 0.25) return (c_out + 1) / 2;
  return c_out;
}

/// Sparse module with bypass compensation. The sparse path is the original
/// conv (+ its normalization) progressively masked per filter; the bypass is
/// a permanent lightweight branch summed with it. After surgery the sparse
/// path is physically narrow and scattered into the bypass output at the
/// kept positions.
template <typename T>
class SbcModule {
 public:
  enum class Mode { masked, compact };

  SbcModule() = default;
  SbcModule(std::string name, int64_t c_in, int64_t c_out, int64_t k,
            int64_t stride, BypassKind kind, int64_t d, bool relu_after_sum)
      : name_(std::move(name)),
        c_in_(c_in),
        c_out_(c_out),
        k_(k),
        stride_(stride),
        d_(d),
        kind_(kind),
        relu_after_sum_(relu_after_sum) {
    if (d < 1 || d > c_out) throw std::domain_error("SbcModule: d must be in [1, c_out]");
    sparse_ = Conv2d<T>(c_in, c_out, k, stride, k / 2);
    sparse_bn_ = BatchNorm2d<T>(c_out);
    threshold_.init({1});
    threshold_.decay = false;  // weight decay never applies to thresholds
    if (kind == BypassKind::v2) {
      b1_ = Conv2d<T>(c_in, d, 1, 1, 0);
      bn1_ = BatchNorm2d<T>(d);
      b2_ = DepthwiseConv2d<T>(d, k, stride, k / 2);
      bn2_ = BatchNorm2d<T>(d);
      b3_ = Conv2d<T>(d, c_out, 1, 1, 0);
      bn3_ = BatchNorm2d<T>(c_out);
    } else if (kind == BypassKind::v1) {
      b2_ = DepthwiseConv2d<T>(c_in, k, stride, k / 2);
      bn2_ = BatchNorm2d<T>(c_in);
      b3_ = Conv2d<T>(c_in, c_out, 1, 1, 0);
      bn3_ = BatchNorm2d<T>(c_out);
    }
    mask_.hard.assign(static_cast<size_t>(c_out), 1);
    mask_.soft.assign(static_cast<size_t>(c_out), T(1));
    mask_.importance.assign(static_cast<size_t>(c_out), T(0));
    mask_.kept_count = c_out;
  }

  void init_weights(Rng& rng) {
    sparse_.init_weights(rng);
    if (kind_ == BypassKind::v2) b1_->init_weights(rng);
    if (kind_ != BypassKind::none) {
      b2_->init_weights(rng);
      b3_->init_weights(rng);
    }
    threshold_.value[0] = T(0);  // empirically initialized to 0
  }

  /// Recompute I, G, M from the current sparse weights and threshold.
  void recompute_masks() {
    if (mode_ != Mode::masked)
      throw std::runtime_error("SbcModule: masks are fixed after surgery");
    mask_ = compute_mask_bundle(sparse_.w.value, threshold_.value[0]);
  }

  void set_hard_mask(std::vector<uint8_t> hard) {
    if (hard.size() != static_cast<size_t>(c_out_))
      throw std::domain_error("SbcModule: mask length mismatch");
    mask_.hard = std::move(hard);
    mask_.kept_count = 0;
    for (uint8_t m : mask_.hard) mask_.kept_count += m;
    mask_.soft.assign(mask_.hard.begin(), mask_.hard.end());
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    if (x.dim(1) != c_in_)
      throw std::invalid_argument("SbcModule '" + name_ + "': bad input " + shape_string(x));
    Tensor<T> sum;
    if (mode_ == Mode::masked) {
      sparse_bn_out_ = sparse_bn_.forward(sparse_.forward(x, train), train);
      sum = apply_mask(sparse_bn_out_, mask_.hard);
      if (!train) sparse_bn_out_ = Tensor<T>();
    } else if (kept_.empty()) {
      sum = Tensor<T>();  // bypass-only module
    } else {
      Tensor<T> ys = sparse_bn_.forward(sparse_.forward(x, train), train);
      // scatter the narrow path into full width at the kept positions
      const int64_t n = ys.dim(0), plane = ys.dim(2) * ys.dim(3);
      sum.resize({n, c_out_, ys.dim(2), ys.dim(3)});
      for (int64_t i = 0; i < n; ++i)
        for (size_t j = 0; j < kept_.size(); ++j) {
          const T* src = ys.data() + (i * static_cast<int64_t>(kept_.size()) +
                                      static_cast<int64_t>(j)) * plane;
          T* dst = sum.data() + (i * c_out_ + kept_[j]) * plane;
          for (int64_t p = 0; p < plane; ++p) dst[p] = src[p];
        }
    }
    Tensor<T> yb = bypass_forward(x, train);
    Tensor<T>& out = yb.empty() ? sum : yb;
    if (!yb.empty() && !sum.empty())
      for (int64_t i = 0; i < out.numel(); ++i) out[i] += sum[i];
    if (out.empty())
      throw std::runtime_error("SbcModule '" + name_ + "': no live path");
    if (relu_after_sum_) relu_inplace(out);
    if (train && relu_after_sum_) out_cache_ = out;
    return std::move(out);
  }

  /// Backward through the module; upstream FLOPs pressure on the mask (the
  /// same constant for every filter of the module) must be set beforehand
  /// via set_mask_grad_bias.
  Tensor<T> backward(const Tensor<T>& dy_in) {
    Tensor<T> dsum = relu_after_sum_ ? relu_backward(dy_in, out_cache_) : dy_in;
    Tensor<T> dx;
    if (mode_ == Mode::masked) {
      Tensor<T> d_sparse_bn;
      std::vector<T> d_mask;
      apply_mask_backward(dsum, sparse_bn_out_, mask_.hard, d_sparse_bn, d_mask);
      for (T& g : d_mask) g += mask_grad_bias_;
      // straight-through: dG = dM, then dG reaches only the threshold
      threshold_.grad[0] += soft_mask_grad_threshold(mask_.soft, d_mask);
      dx = sparse_.backward(sparse_bn_.backward(d_sparse_bn));
    } else if (!kept_.empty()) {
      const int64_t n = dsum.dim(0), plane = dsum.dim(2) * dsum.dim(3);
      Tensor<T> dys({n, static_cast<int64_t>(kept_.size()), dsum.dim(2), dsum.dim(3)});
      for (int64_t i = 0; i < n; ++i)
        for (size_t j = 0; j < kept_.size(); ++j) {
          const T* src = dsum.data() + (i * c_out_ + kept_[j]) * plane;
          T* dst = dys.data() + (i * static_cast<int64_t>(kept_.size()) +
                                 static_cast<int64_t>(j)) * plane;
          for (int64_t p = 0; p < plane; ++p) dst[p] = src[p];
        }
      dx = sparse_.backward(sparse_bn_.backward(dys));
    }
    Tensor<T> dxb = bypass_backward(dsum);
    if (dx.empty()) return dxb;
    if (!dxb.empty())
      for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += dxb[i];
    return dx;
  }

  /// Physically remove pruned filters: gather kept rows of the sparse conv
  /// (weights, gradients, momentum) and the matching normalization channels.
  /// The bypass is untouched. Masks are frozen from this point on.
  void convert_to_compact() {
    if (mode_ == Mode::compact) throw std::runtime_error("SbcModule: already compact");
    kept_.clear();
    for (int64_t i = 0; i < c_out_; ++i)
      if (mask_.hard[static_cast<size_t>(i)]) kept_.push_back(i);
    const int64_t n = static_cast<int64_t>(kept_.size());
    if (n == 0) {
      sparse_ = Conv2d<T>();
      sparse_bn_ = BatchNorm2d<T>();
    } else {
      Conv2d<T> narrow(c_in_, n, k_, stride_, k_ / 2);
      const int64_t row = c_in_ * k_ * k_;
      for (int64_t j = 0; j < n; ++j) {
        const int64_t src = kept_[static_cast<size_t>(j)];
        std::copy_n(sparse_.w.value.data() + src * row, row, narrow.w.value.data() + j * row);
        std::copy_n(sparse_.w.grad.data() + src * row, row, narrow.w.grad.data() + j * row);
        std::copy_n(sparse_.w.mom.data() + src * row, row, narrow.w.mom.data() + j * row);
      }
      BatchNorm2d<T> bn(n);
      for (int64_t j = 0; j < n; ++j) {
        const int64_t src = kept_[static_cast<size_t>(j)];
        bn.gamma.value[j] = sparse_bn_.gamma.value[src];
        bn.gamma.grad[j] = sparse_bn_.gamma.grad[src];
        bn.gamma.mom[j] = sparse_bn_.gamma.mom[src];
        bn.beta.value[j] = sparse_bn_.beta.value[src];
        bn.beta.grad[j] = sparse_bn_.beta.grad[src];
        bn.beta.mom[j] = sparse_bn_.beta.mom[src];
        bn.running_mean[j] = sparse_bn_.running_mean[src];
        bn.running_var[j] = sparse_bn_.running_var[src];
      }
      sparse_ = std::move(narrow);
      sparse_bn_ = std::move(bn);
    }
    mode_ = Mode::compact;
    sparse_bn_out_ = Tensor<T>();
    out_cache_ = Tensor<T>();
  }

  void set_mask_grad_bias(T v) { mask_grad_bias_ = v; }

  /// Learnable parameters. Thresholds stop being parameters after surgery.
  void collect_params(std::vector<Param<T>*>& out) {
    if (mode_ == Mode::masked || !kept_.empty()) {
      out.push_back(&sparse_.w);
      out.push_back(&sparse_bn_.gamma);
      out.push_back(&sparse_bn_.beta);
    }
    if (mode_ == Mode::masked) out.push_back(&threshold_);
    if (kind_ == BypassKind::v2) {
      out.push_back(&b1_->w);
      out.push_back(&bn1_->gamma);
      out.push_back(&bn1_->beta);
    }
    if (kind_ != BypassKind::none) {
      out.push_back(&b2_->w);
      out.push_back(&bn2_->gamma);
      out.push_back(&bn2_->beta);
      out.push_back(&b3_->w);
      out.push_back(&bn3_->gamma);
      out.push_back(&bn3_->beta);
    }
  }

  void collect_buffers(std::vector<std::pair<std::string, Tensor<T>*>>& out) {
    if (mode_ == Mode::masked || !kept_.empty()) {
      out.emplace_back(name_ + ".sparse_bn.running_mean", &sparse_bn_.running_mean);
      out.emplace_back(name_ + ".sparse_bn.running_var", &sparse_bn_.running_var);
    }
    if (kind_ == BypassKind::v2) {
      out.emplace_back(name_ + ".bn1.running_mean", &bn1_->running_mean);
      out.emplace_back(name_ + ".bn1.running_var", &bn1_->running_var);
    }
    if (kind_ != BypassKind::none) {
      out.emplace_back(name_ + ".bn2.running_mean", &bn2_->running_mean);
      out.emplace_back(name_ + ".bn2.running_var", &bn2_->running_var);
      out.emplace_back(name_ + ".bn3.running_mean", &bn3_->running_mean);
      out.emplace_back(name_ + ".bn3.running_var", &bn3_->running_var);
    }
  }

  void assign_param_names() {
    sparse_.w.name = name_ + ".sparse.w";
    sparse_bn_.gamma.name = name_ + ".sparse_bn.gamma";
    sparse_bn_.beta.name = name_ + ".sparse_bn.beta";
    threshold_.name = name_ + ".threshold";
    if (kind_ == BypassKind::v2) {
      b1_->w.name = name_ + ".b1.w";
      bn1_->gamma.name = name_ + ".bn1.gamma";
      bn1_->beta.name = name_ + ".bn1.beta";
    }
    if (kind_ != BypassKind::none) {
      b2_->w.name = name_ + ".b2.w";
      bn2_->gamma.name = name_ + ".bn2.gamma";
      bn2_->beta.name = name_ + ".bn2.beta";
      b3_->w.name = name_ + ".b3.w";
      bn3_->gamma.name = name_ + ".bn3.gamma";
      bn3_->beta.name = name_ + ".bn3.beta";
    }
  }

  const std::string& name() const { return name_; }
  int64_t c_in() const { return c_in_; }
  int64_t c_out() const { return c_out_; }
  int64_t k() const { return k_; }
  int64_t stride() const { return stride_; }
  int64_t d() const { return d_; }
  BypassKind bypass_kind() const { return kind_; }
  Mode mode() const { return mode_; }
  bool relu_after_sum() const { return relu_after_sum_; }
  const MaskBundle<T>& mask() const { return mask_; }
  const std::vector<int64_t>& kept_indices() const { return kept_; }
  Param<T>& threshold() { return threshold_; }
  Param<T>& sparse_weights() { return sparse_.w; }
  int64_t kept_count() const {
    return mode_ == Mode::masked ? mask_.kept_count : static_cast<int64_t>(kept_.size());
  }

  /// Restore compact structure from a checkpoint (rebuilds narrow layers).
  void restore_compact(const std::vector<int64_t>& kept) {
    kept_ = kept;
    const int64_t n = static_cast<int64_t>(kept_.size());
    if (n == 0) {
      sparse_ = Conv2d<T>();
      sparse_bn_ = BatchNorm2d<T>();
    } else {
      sparse_ = Conv2d<T>(c_in_, n, k_, stride_, k_ / 2);
      sparse_bn_ = BatchNorm2d<T>(n);
    }
    mode_ = Mode::compact;
  }

  void restore_mask(const MaskBundle<T>& m) { mask_ = m; }

  void release_caches() {
    sparse_bn_out_ = Tensor<T>();
    out_cache_ = Tensor<T>();
    sparse_.release_cache();
    sparse_bn_.release_cache();
    if (kind_ == BypassKind::v2) {
      b1_->release_cache();
      bn1_->release_cache();
    }
    if (kind_ != BypassKind::none) {
      b2_->release_cache();
      bn2_->release_cache();
      b3_->release_cache();
      bn3_->release_cache();
    }
  }

 private:
  Tensor<T> bypass_forward(const Tensor<T>& x, bool train) {
    if (kind_ == BypassKind::none) return Tensor<T>();
    Tensor<T> t;
    if (kind_ == BypassKind::v2) {
      t = bn1_->forward(b1_->forward(x, train), train);
      relu_inplace(t);
      if (train) b1_out_ = t;
      t = bn2_->forward(b2_->forward(t, train), train);
    } else {
      t = bn2_->forward(b2_->forward(x, train), train);
    }
    relu_inplace(t);
    if (train) b2_out_ = t;
    return bn3_->forward(b3_->forward(t, train), train);
  }

  Tensor<T> bypass_backward(const Tensor<T>& dy) {
    if (kind_ == BypassKind::none) return Tensor<T>();
    Tensor<T> d = b3_->backward(bn3_->backward(dy));
    d = relu_backward(d, b2_out_);
    d = b2_->backward(bn2_->backward(d));
    if (kind_ == BypassKind::v1) return d;
    d = relu_backward(d, b1_out_);
    return b1_->backward(bn1_->backward(d));
  }

  std::string name_;
  int64_t c_in_ = 0, c_out_ = 0, k_ = 0, stride_ = 1, d_ = 0;
  BypassKind kind_ = BypassKind::v2;
  bool relu_after_sum_ = true;
  Mode mode_ = Mode::masked;

  Conv2d<T> sparse_;
  BatchNorm2d<T> sparse_bn_;
  Param<T> threshold_;
  MaskBundle<T> mask_;
  std::vector<int64_t> kept_;

  std::optional<Conv2d<T>> b1_;
  std::optional<BatchNorm2d<T>> bn1_;
  std::optional<DepthwiseConv2d<T>> b2_;
  std::optional<BatchNorm2d<T>> bn2_;
  std::optional<Conv2d<T>> b3_;
  std::optional<BatchNorm2d<T>> bn3_;

  T mask_grad_bias_ = T(0);
  Tensor<T> sparse_bn_out_, out_cache_, b1_out_, b2_out_;
};

/// Functional form of the SBC forward used by tests and bindings: the mask
/// is supplied explicitly.
template <typename T>
Tensor<T> sbc_forward(SbcModule<T>& module, const Tensor<T>& x,
                      const std::vector<uint8_t>& hard_mask, bool train = false) {
  module.set_hard_mask(std::vector<uint8_t>(hard_mask));
  return module.forward(x, train);
}

/// Construct an SBC module with standard fan-in initialization and the
/// threshold at zero.
template <typename T>
SbcModule<T> make_sbc(int64_t c_in, int64_t c_out, int64_t k, int64_t stride,
                      BypassKind kind, int64_t d, Rng& rng,
                      bool relu_after_sum = true, std::string name = "sbc") {
  if (d > c_out) throw std::domain_error("make_sbc: d exceeds c_out");
  SbcModule<T> m(std::move(name), c_in, c_out, k, stride, kind, d, relu_after_sum);
  m.init_weights(rng);
  m.assign_param_names();
  return m;
}

}  // namespace lapp
