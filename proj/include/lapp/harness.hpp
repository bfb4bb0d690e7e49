#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "lapp/network.hpp"
#include "lapp/rng.hpp"
#include "lapp/tensor.hpp"

namespace lapp {

/// Resolved configuration of one run. Defaults follow the CIFAR training
/// setup: SGD momentum 0.9, weight decay 1e-4, batch 128, base lr 0.1 with
/// x0.1 decays at 50% and 75% of the epochs.
struct RunConfig {
  std::string arch_name = "resnet20";
  double c_target = 0.4;
  double lambda1 = 3e-5;
  double lambda2 = 1.0;
  int total_epochs = 120;
  int prune_epoch_cap = 40;
  int batch_size = 128;
  double base_lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::string bypass_kind = "v2";
  bool uniform = false;
  uint64_t seed = 1;
  std::string data_dir;
  std::string out_dir;
  int train_subset = 0;  // 0 = full training split
  std::array<double, 3> channel_mean{0.4914, 0.4822, 0.4465};
  std::array<double, 3> channel_std{0.2470, 0.2435, 0.2616};

  void validate() const;
  /// lambda1 default depends on the architecture (3e-5 for resnet20,
  /// 2e-5 otherwise); call after arch_name is final if lambda1 was not
  /// set explicitly.
  static double default_lambda1(const std::string& arch_name);
};

constexpr int kImageChannels = 3;
constexpr int kImageSize = 32;
constexpr int kImagePixels = kImageChannels * kImageSize * kImageSize;  // 3072
constexpr int kClassCount = 10;

/// Images as values in [0,1] (standardization happens at batch assembly).
struct Dataset {
  std::vector<float> images;  // size() * 3072, CHW per record
  std::vector<int> labels;

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  const float* image(int64_t i) const { return images.data() + i * kImagePixels; }
};

/// Read the published CIFAR-10 binary batches (data_batch_1..5.bin,
/// test_batch.bin; 3073 bytes per record). Missing or malformed files raise
/// with the offending file named.
std::pair<Dataset, Dataset> load_cifar10(const std::string& data_dir);
Dataset load_cifar10_file(const std::string& path);

/// True when data_dir holds the full published training split (50,000) and
/// test split (10,000).
bool cifar10_present(const std::string& data_dir);

/// Deterministic stratified subset: the first per-class occurrences, round
/// robin, preserving class balance.
Dataset stratified_subset(const Dataset& d, int64_t count);

/// Pad 4 zeros each side and crop 32x32 at offset (oy, ox) in [0,8].
void pad_crop(const float* src, float* dst, int oy, int ox);
void hflip_inplace(float* img);

/// Training augmentation: random crop from the 4-padded image, horizontal
/// flip with probability 0.5, then per-channel standardization.
void augment_train(const float* src, float* dst, Rng& rng,
                   const std::array<double, 3>& mean, const std::array<double, 3>& stddev);

/// Test-time transform: standardization only.
void standardize(const float* src, float* dst, const std::array<double, 3>& mean,
                 const std::array<double, 3>& stddev);

std::pair<std::array<double, 3>, std::array<double, 3>> compute_channel_stats(
    const Dataset& d);

/// Step schedule: base_lr scaled by 0.1 per passed milestone (50% and 75%
/// of total epochs).
double lr_at(int epoch, const RunConfig& config);

/// Top-1 accuracy as a fraction in [0,1]; inference mode.
double evaluate(Model<float>& net, const Dataset& test,
                const std::array<double, 3>& mean, const std::array<double, 3>& stddev,
                int batch_size = 256);

/// Synthetic dataset in the CIFAR layout for tests and smoke runs: each
/// class is a fixed blob pattern plus noise, labels exactly balanced.
Dataset make_synthetic_dataset(int64_t count, uint64_t seed);
void write_cifar10_layout(const Dataset& train, const Dataset& test,
                          const std::string& dir);

}  // namespace lapp
