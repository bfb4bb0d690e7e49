#pragma once

#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "lapp/flops_model.hpp"
#include "lapp/layers.hpp"
#include "lapp/sbc.hpp"

namespace lapp {

/// Static architecture description: the layer list drives FLOPs accounting,
/// the prunable set drives SBC replacement.
struct ArchSpec {
  std::string name;
  std::vector<LayerSpec> layers;
  int class_count = 10;

  std::vector<std::string> prunable_names() const {
    std::vector<std::string> out;
    for (const auto& l : layers)
      if (l.prunable) out.push_back(l.name);
    return out;
  }
  const LayerSpec& layer(const std::string& n) const {
    for (const auto& l : layers)
      if (l.name == n) return l;
    throw std::invalid_argument("ArchSpec: no layer named '" + n + "'");
  }
};

/// One position in the network graph: either a plain conv+norm unit or an
/// SBC module standing in for it.
template <typename T>
class Unit {
 public:
  virtual ~Unit() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, bool train) = 0;
  virtual Tensor<T> backward(const Tensor<T>& dy) = 0;
  virtual void collect_params(std::vector<Param<T>*>& out) = 0;
  virtual void collect_buffers(std::vector<std::pair<std::string, Tensor<T>*>>& out) = 0;
  virtual SbcModule<T>* as_sbc() { return nullptr; }
  virtual void release_caches() = 0;
};

template <typename T>
class PlainConvUnit final : public Unit<T> {
 public:
  PlainConvUnit(std::string name, int64_t c_in, int64_t c_out, int64_t k,
                int64_t stride, bool relu, Rng& rng)
      : name_(std::move(name)),
        conv_(c_in, c_out, k, stride, k / 2),
        bn_(c_out),
        relu_(relu) {
    conv_.init_weights(rng);
    conv_.w.name = name_ + ".w";
    bn_.gamma.name = name_ + ".bn.gamma";
    bn_.beta.name = name_ + ".bn.beta";
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> y = bn_.forward(conv_.forward(x, train), train);
    if (relu_) relu_inplace(y);
    if (train && relu_) out_ = y;
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    if (relu_) {
      Tensor<T> d = relu_backward(dy, out_);
      return conv_.backward(bn_.backward(d));
    }
    return conv_.backward(bn_.backward(dy));
  }

  void collect_params(std::vector<Param<T>*>& out) override {
    out.push_back(&conv_.w);
    out.push_back(&bn_.gamma);
    out.push_back(&bn_.beta);
  }

  void collect_buffers(std::vector<std::pair<std::string, Tensor<T>*>>& out) override {
    out.emplace_back(name_ + ".bn.running_mean", &bn_.running_mean);
    out.emplace_back(name_ + ".bn.running_var", &bn_.running_var);
  }

  void release_caches() override {
    out_ = Tensor<T>();
    conv_.release_cache();
    bn_.release_cache();
  }

 private:
  std::string name_;
  Conv2d<T> conv_;
  BatchNorm2d<T> bn_;
  bool relu_;
  Tensor<T> out_;
};

template <typename T>
class SbcUnit final : public Unit<T> {
 public:
  explicit SbcUnit(SbcModule<T> m) : m_(std::move(m)) {}

  Tensor<T> forward(const Tensor<T>& x, bool train) override { return m_.forward(x, train); }
  Tensor<T> backward(const Tensor<T>& dy) override { return m_.backward(dy); }
  void collect_params(std::vector<Param<T>*>& out) override { m_.collect_params(out); }
  void collect_buffers(std::vector<std::pair<std::string, Tensor<T>*>>& out) override {
    m_.collect_buffers(out);
  }
  SbcModule<T>* as_sbc() override { return &m_; }
  void release_caches() override { m_.release_caches(); }

 private:
  SbcModule<T> m_;
};

template <typename T>
class Model {
 public:
  virtual ~Model() = default;
  virtual Tensor<T> forward(const Tensor<T>& x, bool train) = 0;
  virtual void backward(const Tensor<T>& dlogits) = 0;
  virtual std::vector<Param<T>*> params() = 0;
  virtual std::vector<std::pair<std::string, Tensor<T>*>> buffers() = 0;
  virtual std::vector<SbcModule<T>*> sbc_units() = 0;
  virtual const ArchSpec& arch() const = 0;
  virtual const std::map<std::string, BypassSpec>& bypasses() const = 0;
  virtual void release_caches() = 0;
};

template <typename T>
struct BasicBlock {
  std::unique_ptr<Unit<T>> conv1;  // activation inside
  std::unique_ptr<Unit<T>> conv2;  // pre-add, no activation inside
  std::unique_ptr<PlainConvUnit<T>> shortcut;  // 1x1 projection when downsampling
  Tensor<T> out;

  Tensor<T> forward(const Tensor<T>& x, bool train) {
    Tensor<T> a = conv1->forward(x, train);
    Tensor<T> b = conv2->forward(a, train);
    if (shortcut) {
      Tensor<T> s = shortcut->forward(x, train);
      for (int64_t i = 0; i < b.numel(); ++i) b[i] += s[i];
    } else {
      for (int64_t i = 0; i < b.numel(); ++i) b[i] += x[i];
    }
    relu_inplace(b);
    if (train) out = b;
    return b;
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> dsum = relu_backward(dy, out);
    Tensor<T> dx = conv1->backward(conv2->backward(dsum));
    if (shortcut) {
      Tensor<T> ds = shortcut->backward(dsum);
      for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += ds[i];
    } else {
      for (int64_t i = 0; i < dx.numel(); ++i) dx[i] += dsum[i];
    }
    return dx;
  }

  void release_caches() {
    out = Tensor<T>();
    conv1->release_caches();
    conv2->release_caches();
    if (shortcut) shortcut->release_caches();
  }
};

/// CIFAR-style ResNet: stem conv, three stages of basic blocks at widths
/// 16/32/64, global average pool, linear classifier.
template <typename T>
class ResNetCifar final : public Model<T> {
 public:
  ResNetCifar(ArchSpec spec, std::unique_ptr<PlainConvUnit<T>> stem,
              std::vector<BasicBlock<T>> blocks, Linear<T> fc,
              std::map<std::string, BypassSpec> byp)
      : spec_(std::move(spec)),
        stem_(std::move(stem)),
        blocks_(std::move(blocks)),
        fc_(std::move(fc)),
        bypasses_(std::move(byp)) {}

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> t = stem_->forward(x, train);
    for (auto& b : blocks_) t = b.forward(t, train);
    t = pool_.forward(t, train);
    return fc_.forward(t, train);
  }

  void backward(const Tensor<T>& dlogits) override {
    Tensor<T> d = pool_.backward(fc_.backward(dlogits));
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) d = it->backward(d);
    stem_->backward(d);
  }

  std::vector<Param<T>*> params() override {
    std::vector<Param<T>*> out;
    stem_->collect_params(out);
    for (auto& b : blocks_) {
      b.conv1->collect_params(out);
      b.conv2->collect_params(out);
      if (b.shortcut) b.shortcut->collect_params(out);
    }
    out.push_back(&fc_.w);
    out.push_back(&fc_.b);
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> buffers() override {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    stem_->collect_buffers(out);
    for (auto& b : blocks_) {
      b.conv1->collect_buffers(out);
      b.conv2->collect_buffers(out);
      if (b.shortcut) b.shortcut->collect_buffers(out);
    }
    return out;
  }

  std::vector<SbcModule<T>*> sbc_units() override {
    std::vector<SbcModule<T>*> out;
    for (auto& b : blocks_) {
      if (auto* s = b.conv1->as_sbc()) out.push_back(s);
      if (auto* s = b.conv2->as_sbc()) out.push_back(s);
    }
    return out;
  }

  const ArchSpec& arch() const override { return spec_; }
  const std::map<std::string, BypassSpec>& bypasses() const override { return bypasses_; }

  void release_caches() override {
    for (auto& b : blocks_) b.release_caches();
    stem_->release_caches();
    fc_.release_cache();
  }

 private:
  ArchSpec spec_;
  std::unique_ptr<PlainConvUnit<T>> stem_;
  std::vector<BasicBlock<T>> blocks_;
  GlobalAvgPool<T> pool_;
  Linear<T> fc_;
  std::map<std::string, BypassSpec> bypasses_;
};

/// CIFAR VGG-16: 13 convs with normalization, five 2x2 max pools, one
/// linear classifier.
template <typename T>
class VggCifar final : public Model<T> {
 public:
  VggCifar(ArchSpec spec, std::vector<std::unique_ptr<Unit<T>>> convs,
           std::vector<int> pool_after, Linear<T> fc,
           std::map<std::string, BypassSpec> byp)
      : spec_(std::move(spec)),
        convs_(std::move(convs)),
        pool_after_(std::move(pool_after)),
        fc_(std::move(fc)),
        bypasses_(std::move(byp)) {
    pools_.resize(pool_after_.size(), MaxPool2d<T>(2, 2));
    c_last_ = fc_.in();
  }

  Tensor<T> forward(const Tensor<T>& x, bool train) override {
    Tensor<T> t = x;
    size_t pool_idx = 0;
    for (size_t i = 0; i < convs_.size(); ++i) {
      t = convs_[i]->forward(t, train);
      if (pool_idx < pool_after_.size() && pool_after_[pool_idx] == static_cast<int>(i)) {
        t = pools_[pool_idx].forward(t, train);
        ++pool_idx;
      }
    }
    t.reshape({t.dim(0), t.numel() / t.dim(0)});
    return fc_.forward(t, train);
  }

  void backward(const Tensor<T>& dlogits) override {
    Tensor<T> d = fc_.backward(dlogits);
    d.reshape({d.dim(0), c_last_, 1, 1});
    size_t pool_idx = pool_after_.size();
    for (size_t i = convs_.size(); i-- > 0;) {
      if (pool_idx > 0 && pool_after_[pool_idx - 1] == static_cast<int>(i)) {
        d = pools_[pool_idx - 1].backward(d);
        --pool_idx;
      }
      d = convs_[i]->backward(d);
    }
  }

  std::vector<Param<T>*> params() override {
    std::vector<Param<T>*> out;
    for (auto& c : convs_) c->collect_params(out);
    out.push_back(&fc_.w);
    out.push_back(&fc_.b);
    return out;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> buffers() override {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (auto& c : convs_) c->collect_buffers(out);
    return out;
  }

  std::vector<SbcModule<T>*> sbc_units() override {
    std::vector<SbcModule<T>*> out;
    for (auto& c : convs_)
      if (auto* s = c->as_sbc()) out.push_back(s);
    return out;
  }

  const ArchSpec& arch() const override { return spec_; }
  const std::map<std::string, BypassSpec>& bypasses() const override { return bypasses_; }

  void release_caches() override {
    for (auto& c : convs_) c->release_caches();
    fc_.release_cache();
  }

 private:
  ArchSpec spec_;
  std::vector<std::unique_ptr<Unit<T>>> convs_;
  std::vector<int> pool_after_;
  std::vector<MaxPool2d<T>> pools_;
  Linear<T> fc_;
  std::map<std::string, BypassSpec> bypasses_;
  int64_t c_last_ = 0;
};

ArchSpec build_arch_spec(const std::string& name);

/// Bypass geometry for every prunable layer of an architecture at a given
/// target (d from select_bypass_width).
std::map<std::string, BypassSpec> bypass_specs_for(const ArchSpec& spec,
                                                   double c_target, BypassKind kind);

struct NetworkBuildResult {
  std::unique_ptr<Model<float>> net;
};

std::unique_ptr<Model<float>> build_baseline(const ArchSpec& spec, uint64_t seed);
std::unique_ptr<Model<float>> build_sbcnet(const ArchSpec& spec, double c_target,
                                           BypassKind kind, uint64_t seed);

struct UniformPruneResult {
  std::unique_ptr<Model<float>> net;
  double rate = 0.0;  // the shared pruning rate p
  std::map<std::string, int64_t> kept;
  bool feasible = true;
  double c_hat = 0.0;
};

/// The LAPP-UP baseline: one shared pruning rate chosen by bisection so the
/// masked network (bypasses included) meets the target; masks fixed from
/// initialization importance, no threshold learning.
UniformPruneResult uniform_prune_init(const ArchSpec& spec, double c_target,
                                      BypassKind kind, uint64_t seed);

/// Kept counts for a shared rate p: every prunable layer keeps
/// max(1, ceil((1-p) * c_out)).
std::map<std::string, int64_t> uniform_kept_counts(const ArchSpec& spec, double p);

std::map<std::string, int64_t> full_kept_counts(const ArchSpec& spec);

}  // namespace lapp
