#include "lapp/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

namespace lapp {

void RunConfig::validate() const {
  if (c_target <= 0.0 || c_target >= 1.0)
    throw std::domain_error("config: c_target must be in (0,1)");
  if (total_epochs <= prune_epoch_cap)
    throw std::domain_error("config: total_epochs must exceed prune_epoch_cap");
  if (batch_size < 1) throw std::domain_error("config: batch_size must be >= 1");
  if (lambda1 < 0.0 || lambda2 < 0.0)
    throw std::domain_error("config: regularizer coefficients must be >= 0");
  if (prune_epoch_cap < 1) throw std::domain_error("config: prune_epoch_cap must be >= 1");
}

double RunConfig::default_lambda1(const std::string& arch_name) {
  return arch_name == "resnet20" ? 3e-5 : 2e-5;
}

namespace {

constexpr int64_t kRecordBytes = 1 + kImagePixels;

void append_records(const std::string& path, Dataset& out) {
  std::ifstream f(path, std::ios::binary | std::ios::ate);
  if (!f) throw std::runtime_error("cifar10: missing file " + path);
  const int64_t bytes = static_cast<int64_t>(f.tellg());
  if (bytes <= 0 || bytes % kRecordBytes != 0)
    throw std::runtime_error("cifar10: corrupt file (size " + std::to_string(bytes) +
                             " not a multiple of 3073): " + path);
  f.seekg(0);
  const int64_t records = bytes / kRecordBytes;
  std::vector<unsigned char> buf(static_cast<size_t>(kRecordBytes));
  out.images.reserve(out.images.size() + static_cast<size_t>(records * kImagePixels));
  out.labels.reserve(out.labels.size() + static_cast<size_t>(records));
  for (int64_t r = 0; r < records; ++r) {
    f.read(reinterpret_cast<char*>(buf.data()), kRecordBytes);
    if (!f) throw std::runtime_error("cifar10: truncated read in " + path);
    if (buf[0] > 9) throw std::runtime_error("cifar10: label out of range in " + path);
    out.labels.push_back(buf[0]);
    for (int64_t i = 0; i < kImagePixels; ++i)
      out.images.push_back(static_cast<float>(buf[static_cast<size_t>(1 + i)]) / 255.0f);
  }
}

}  // namespace

Dataset load_cifar10_file(const std::string& path) {
  Dataset d;
  append_records(path, d);
  return d;
}

std::pair<Dataset, Dataset> load_cifar10(const std::string& data_dir) {
  Dataset train, test;
  for (int i = 1; i <= 5; ++i)
    append_records(data_dir + "/data_batch_" + std::to_string(i) + ".bin", train);
  append_records(data_dir + "/test_batch.bin", test);
  return {std::move(train), std::move(test)};
}

bool cifar10_present(const std::string& data_dir) {
  try {
    auto [train, test] = load_cifar10(data_dir);
    return train.size() == 50000 && test.size() == 10000;
  } catch (const std::exception&) {
    return false;
  }
}

Dataset stratified_subset(const Dataset& d, int64_t count) {
  if (count <= 0 || count >= d.size()) return d;
  std::vector<std::vector<int64_t>> by_class(kClassCount);
  for (int64_t i = 0; i < d.size(); ++i)
    by_class[static_cast<size_t>(d.labels[static_cast<size_t>(i)])].push_back(i);
  Dataset out;
  out.images.reserve(static_cast<size_t>(count * kImagePixels));
  out.labels.reserve(static_cast<size_t>(count));
  int64_t taken = 0;
  for (size_t round = 0; taken < count; ++round) {
    bool any = false;
    for (int c = 0; c < kClassCount && taken < count; ++c) {
      const auto& ids = by_class[static_cast<size_t>(c)];
      if (round >= ids.size()) continue;
      const int64_t i = ids[round];
      out.labels.push_back(d.labels[static_cast<size_t>(i)]);
      out.images.insert(out.images.end(), d.image(i), d.image(i) + kImagePixels);
      ++taken;
      any = true;
    }
    if (!any) break;
  }
  return out;
}

void pad_crop(const float* src, float* dst, int oy, int ox) {
  if (oy < 0 || oy > 8 || ox < 0 || ox > 8)
    throw std::domain_error("pad_crop: offsets must be in [0,8]");
  // source pixel (y,x) of the crop maps to padded coords (y+oy-4, x+ox-4)
  for (int c = 0; c < kImageChannels; ++c) {
    for (int y = 0; y < kImageSize; ++y) {
      const int sy = y + oy - 4;
      for (int x = 0; x < kImageSize; ++x) {
        const int sx = x + ox - 4;
        const bool inside = sy >= 0 && sy < kImageSize && sx >= 0 && sx < kImageSize;
        dst[(c * kImageSize + y) * kImageSize + x] =
            inside ? src[(c * kImageSize + sy) * kImageSize + sx] : 0.0f;
      }
    }
  }
}

void hflip_inplace(float* img) {
  for (int c = 0; c < kImageChannels; ++c)
    for (int y = 0; y < kImageSize; ++y) {
      float* row = img + (c * kImageSize + y) * kImageSize;
      std::reverse(row, row + kImageSize);
    }
}

void standardize(const float* src, float* dst, const std::array<double, 3>& mean,
                 const std::array<double, 3>& stddev) {
  for (int c = 0; c < kImageChannels; ++c) {
    const float m = static_cast<float>(mean[static_cast<size_t>(c)]);
    const float inv = static_cast<float>(1.0 / stddev[static_cast<size_t>(c)]);
    const float* s = src + c * kImageSize * kImageSize;
    float* d = dst + c * kImageSize * kImageSize;
    for (int i = 0; i < kImageSize * kImageSize; ++i) d[i] = (s[i] - m) * inv;
  }
}

void augment_train(const float* src, float* dst, Rng& rng,
                   const std::array<double, 3>& mean, const std::array<double, 3>& stddev) {
  float buf[kImagePixels];
  const int oy = static_cast<int>(rng.below(9));
  const int ox = static_cast<int>(rng.below(9));
  pad_crop(src, buf, oy, ox);
  if (rng.coin(0.5)) hflip_inplace(buf);
  standardize(buf, dst, mean, stddev);
}

std::pair<std::array<double, 3>, std::array<double, 3>> compute_channel_stats(
    const Dataset& d) {
  std::array<double, 3> mean{}, stddev{};
  const int64_t plane = kImageSize * kImageSize;
  const int64_t count = d.size() * plane;
  for (int c = 0; c < kImageChannels; ++c) {
    double sum = 0.0, sq = 0.0;
    for (int64_t i = 0; i < d.size(); ++i) {
      const float* p = d.image(i) + c * plane;
      for (int64_t j = 0; j < plane; ++j) {
        sum += p[j];
        sq += static_cast<double>(p[j]) * p[j];
      }
    }
    const double m = sum / static_cast<double>(count);
    mean[static_cast<size_t>(c)] = m;
    stddev[static_cast<size_t>(c)] = std::sqrt(std::max(0.0, sq / count - m * m));
  }
  return {mean, stddev};
}

double lr_at(int epoch, const RunConfig& config) {
  if (epoch < 0 || epoch >= config.total_epochs)
    throw std::domain_error("lr_at: epoch out of range");
  const int m1 = config.total_epochs / 2;
  const int m2 = (config.total_epochs * 3) / 4;
  double lr = config.base_lr;
  if (epoch >= m1) lr *= 0.1;
  if (epoch >= m2) lr *= 0.1;
  return lr;
}

double evaluate(Model<float>& net, const Dataset& test,
                const std::array<double, 3>& mean, const std::array<double, 3>& stddev,
                int batch_size) {
  int64_t correct = 0;
  for (int64_t start = 0; start < test.size(); start += batch_size) {
    const int64_t n = std::min<int64_t>(batch_size, test.size() - start);
    Tensor<float> x({n, kImageChannels, kImageSize, kImageSize});
    for (int64_t i = 0; i < n; ++i)
      standardize(test.image(start + i), x.data() + i * kImagePixels, mean, stddev);
    Tensor<float> logits = net.forward(x, false);
    const int64_t k = logits.dim(1);
    for (int64_t i = 0; i < n; ++i) {
      const float* row = logits.data() + i * k;
      int64_t best = 0;
      for (int64_t j = 1; j < k; ++j)
        if (row[j] > row[best]) best = j;
      if (best == test.labels[static_cast<size_t>(start + i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(test.size());
}

Dataset make_synthetic_dataset(int64_t count, uint64_t seed) {
  Rng rng(seed);
  // one fixed blob pattern per class; samples are the pattern plus noise
  std::vector<float> patterns(static_cast<size_t>(kClassCount * kImagePixels));
  for (float& v : patterns) v = static_cast<float>(0.5 + 0.35 * rng.normal());
  Dataset d;
  d.images.resize(static_cast<size_t>(count * kImagePixels));
  d.labels.resize(static_cast<size_t>(count));
  for (int64_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % kClassCount);
    d.labels[static_cast<size_t>(i)] = label;
    float* img = d.images.data() + i * kImagePixels;
    const float* pat = patterns.data() + label * kImagePixels;
    for (int64_t j = 0; j < kImagePixels; ++j) {
      const double v = pat[j] + 0.15 * rng.normal();
      img[j] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return d;
}

void write_cifar10_layout(const Dataset& train, const Dataset& test,
                          const std::string& dir) {
  std::filesystem::create_directories(dir);
  const auto write_split = [](const Dataset& d, int64_t lo, int64_t hi,
                              const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write " + path);
    for (int64_t i = lo; i < hi; ++i) {
      const unsigned char label = static_cast<unsigned char>(d.labels[static_cast<size_t>(i)]);
      f.put(static_cast<char>(label));
      const float* img = d.image(i);
      for (int64_t j = 0; j < kImagePixels; ++j) {
        const int v = static_cast<int>(std::lround(img[j] * 255.0f));
        f.put(static_cast<char>(std::clamp(v, 0, 255)));
      }
    }
  };
  const int64_t per = (train.size() + 4) / 5;
  for (int i = 0; i < 5; ++i) {
    const int64_t lo = std::min<int64_t>(static_cast<int64_t>(i) * per, train.size());
    const int64_t hi = std::min<int64_t>(lo + per, train.size());
    write_split(train, lo, hi, dir + "/data_batch_" + std::to_string(i + 1) + ".bin");
  }
  write_split(test, 0, test.size(), dir + "/test_batch.bin");
}

}  // namespace lapp
