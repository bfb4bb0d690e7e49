#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "lapp/controller.hpp"
#include "lapp/harness.hpp"

using namespace lapp;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("lapp_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string str() const { return path.string(); }
};

}  // namespace

TEST_CASE("cifar10 loader reads the published layout and names bad files") {
  TempDir dir;
  Dataset train = make_synthetic_dataset(1000, 1);
  Dataset test = make_synthetic_dataset(200, 2);
  write_cifar10_layout(train, test, dir.str());

  auto [tr, te] = load_cifar10(dir.str());
  CHECK(tr.size() == 1000);
  CHECK(te.size() == 200);
  for (int64_t i = 0; i < tr.size(); ++i) CHECK(tr.labels[i] == train.labels[i]);
  // byte quantization bounds the round-trip error
  double worst = 0.0;
  for (size_t i = 0; i < tr.images.size(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(tr.images[i]) - train.images[i]));
  CHECK(worst <= 0.5 / 255.0 + 1e-6);

  // exactly balanced labels in the synthetic split
  std::array<int, 10> hist{};
  for (int l : tr.labels) hist[static_cast<size_t>(l)]++;
  for (int c = 0; c < 10; ++c) CHECK(hist[static_cast<size_t>(c)] == 100);

  // a missing batch file is reported by name
  fs::remove(dir.path / "data_batch_3.bin");
  try {
    load_cifar10(dir.str());
    FAIL("expected a missing-file error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("data_batch_3.bin") != std::string::npos);
  }

  // a size-corrupted file is reported by name
  {
    std::ofstream bad(dir.path / "data_batch_3.bin", std::ios::binary);
    bad << "short";
  }
  try {
    load_cifar10(dir.str());
    FAIL("expected a corrupt-file error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("data_batch_3.bin") != std::string::npos);
  }
}

TEST_CASE("stratified subset keeps class balance deterministically") {
  Dataset d = make_synthetic_dataset(1000, 3);
  Dataset s = stratified_subset(d, 250);
  CHECK(s.size() == 250);
  std::array<int, 10> hist{};
  for (int l : s.labels) hist[static_cast<size_t>(l)]++;
  for (int c = 0; c < 10; ++c) CHECK(hist[static_cast<size_t>(c)] == 25);
  Dataset s2 = stratified_subset(d, 250);
  CHECK(s.labels == s2.labels);
  CHECK(s.images == s2.images);
}

TEST_CASE("pad_crop and flip primitives") {
  Dataset d = make_synthetic_dataset(10, 4);
  float out[kImagePixels];

  // offset (4,4) recovers the original image
  pad_crop(d.image(0), out, 4, 4);
  for (int i = 0; i < kImagePixels; ++i) CHECK(out[i] == d.image(0)[i]);

  // other offsets shift content and zero-fill the border
  pad_crop(d.image(0), out, 0, 0);
  CHECK(out[0 * kImageSize * kImageSize + 31 * kImageSize + 31] == 0.0f);

  CHECK_THROWS_AS(pad_crop(d.image(0), out, 9, 0), std::domain_error);

  // flip twice is the identity
  float img[kImagePixels];
  std::copy_n(d.image(1), kImagePixels, img);
  hflip_inplace(img);
  hflip_inplace(img);
  for (int i = 0; i < kImagePixels; ++i) CHECK(img[i] == d.image(1)[i]);
}

TEST_CASE("standardization with computed stats zeros the channel moments") {
  Dataset d = make_synthetic_dataset(2000, 5);
  const auto [mean, stddev] = compute_channel_stats(d);
  std::array<double, 3> sum{}, sq{};
  std::vector<float> buf(kImagePixels);
  const int64_t plane = kImageSize * kImageSize;
  for (int64_t i = 0; i < d.size(); ++i) {
    standardize(d.image(i), buf.data(), mean, stddev);
    for (int c = 0; c < 3; ++c)
      for (int64_t j = 0; j < plane; ++j) {
        const double v = buf[static_cast<size_t>(c * plane + j)];
        sum[static_cast<size_t>(c)] += v;
        sq[static_cast<size_t>(c)] += v * v;
      }
  }
  const double count = static_cast<double>(d.size() * plane);
  for (int c = 0; c < 3; ++c) {
    CHECK(std::abs(sum[static_cast<size_t>(c)] / count) <= 1e-2);
    CHECK(std::abs(sq[static_cast<size_t>(c)] / count - 1.0) <= 1e-2);
  }
}

TEST_CASE("augmentation: flip frequency and determinism") {
  Dataset d = make_synthetic_dataset(10, 6);
  Rng rng(123);
  int flips = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    rng.below(9);
    rng.below(9);
    if (rng.coin(0.5)) ++flips;
  }
  const double freq = static_cast<double>(flips) / draws;
  CHECK(freq >= 0.48);
  CHECK(freq <= 0.52);

  float a[kImagePixels], b[kImagePixels];
  Rng r1(7), r2(7);
  augment_train(d.image(0), a, r1, {0.5, 0.5, 0.5}, {0.25, 0.25, 0.25});
  augment_train(d.image(0), b, r2, {0.5, 0.5, 0.5}, {0.25, 0.25, 0.25});
  for (int i = 0; i < kImagePixels; ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("lr schedule: x0.1 at 50% and 75%") {
  RunConfig c;
  c.total_epochs = 400;
  c.base_lr = 0.1;
  CHECK(lr_at(0, c) == doctest::Approx(0.1));
  CHECK(lr_at(199, c) == doctest::Approx(0.1));
  CHECK(lr_at(200, c) == doctest::Approx(0.01));
  CHECK(lr_at(299, c) == doctest::Approx(0.01));
  CHECK(lr_at(300, c) == doctest::Approx(0.001));
  CHECK(lr_at(399, c) == doctest::Approx(0.001));
  CHECK_THROWS_AS(lr_at(400, c), std::domain_error);
  CHECK_THROWS_AS(lr_at(-1, c), std::domain_error);
}

TEST_CASE("evaluate: constant logits score the majority-class rate") {
  Dataset test = make_synthetic_dataset(500, 7);
  auto net = build_baseline(build_arch_spec("resnet20"), 1);
  for (auto* p : net->params()) p->value.zero();  // all logits identical
  const double top1 = evaluate(*net, test, {0.5, 0.5, 0.5}, {0.25, 0.25, 0.25});
  CHECK(top1 == doctest::Approx(0.1).epsilon(1e-9));  // balanced labels, argmax -> class 0
}

TEST_CASE("config validation") {
  RunConfig c;
  c.validate();
  RunConfig bad = c;
  bad.c_target = 1.2;
  CHECK_THROWS_AS(bad.validate(), std::domain_error);
  bad = c;
  bad.total_epochs = bad.prune_epoch_cap;
  CHECK_THROWS_AS(bad.validate(), std::domain_error);
  bad = c;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::domain_error);
  CHECK(RunConfig::default_lambda1("resnet20") == 3e-5);
  CHECK(RunConfig::default_lambda1("vgg16_cifar") == 2e-5);
}

TEST_CASE("checkpoint round trip restores every array and the rng") {
  TempDir dir;
  RunConfig c;
  c.arch_name = "resnet20";
  c.seed = 99;
  TrainState st = init_run_state(c);
  st.epoch = 3;
  st.iteration = 1234;
  st.data_rng.normal();  // advance the stream
  for (auto* u : st.net->sbc_units()) u->recompute_masks();
  // make momentum nontrivial
  for (auto* p : st.net->params())
    for (int64_t i = 0; i < p->mom.numel(); ++i) p->mom[i] = 0.25f;

  const std::string path = dir.str() + "/state.ckpt";
  checkpoint_save(st, path);
  TrainState back = checkpoint_load(path);

  CHECK(back.epoch == 3);
  CHECK(back.iteration == 1234);
  CHECK(back.phase == "prune");
  CHECK(back.config.seed == 99);
  CHECK(back.data_rng.state() == st.data_rng.state());
  auto pa = st.net->params();
  auto pb = back.net->params();
  REQUIRE(pa.size() == pb.size());
  for (size_t i = 0; i < pa.size(); ++i) {
    REQUIRE(pa[i]->name == pb[i]->name);
    REQUIRE(pa[i]->value.shape() == pb[i]->value.shape());
    for (int64_t j = 0; j < pa[i]->value.numel(); ++j) {
      CHECK(pa[i]->value[j] == pb[i]->value[j]);
      CHECK(pa[i]->mom[j] == pb[i]->mom[j]);
    }
  }
  auto ba = st.net->buffers();
  auto bb = back.net->buffers();
  REQUIRE(ba.size() == bb.size());
  for (size_t i = 0; i < ba.size(); ++i)
    for (int64_t j = 0; j < ba[i].second->numel(); ++j)
      CHECK((*ba[i].second)[j] == (*bb[i].second)[j]);
  for (auto* u : back.net->sbc_units())
    CHECK(u->mask().kept_count == st.net->sbc_units().front()->mask().kept_count);

  // corrupted trailer: explicit error, no partial state
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-4, std::ios::end);
    f.put('X');
  }
  CHECK_THROWS_WITH_AS(checkpoint_load(path), doctest::Contains("corrupted"),
                       std::runtime_error);

  // flipped payload byte: checksum failure
  checkpoint_save(st, path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(64);
    f.put('!');
  }
  CHECK_THROWS_WITH_AS(checkpoint_load(path), doctest::Contains("checksum"),
                       std::runtime_error);

  CHECK_THROWS_AS(checkpoint_load(dir.str() + "/absent.ckpt"), std::runtime_error);
}

TEST_CASE("compact checkpoints rebuild narrow layers") {
  TempDir dir;
  RunConfig c;
  c.arch_name = "resnet20";
  c.seed = 7;
  TrainState st = init_run_state(c);
  Rng thr(3);
  for (auto* u : st.net->sbc_units()) {
    auto imp = importance_l1(u->sparse_weights().value);
    std::sort(imp.begin(), imp.end());
    u->threshold().value[0] = imp[static_cast<size_t>(thr.below(imp.size()))] * 0.999f;
    u->recompute_masks();
  }
  convert(*st.net);
  st.phase = "train";
  const std::string path = dir.str() + "/compact.ckpt";
  checkpoint_save(st, path);
  TrainState back = checkpoint_load(path);
  CHECK(back.phase == "train");
  const double dev = equivalence_check(*st.net, *back.net, 4);
  CHECK(dev == 0.0);
}
