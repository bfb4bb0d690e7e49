#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "lapp/surgery.hpp"
#include "testutil.hpp"

using namespace lapp;

namespace {

/// Deterministically set mixed masks: threshold at a per-module importance
/// quantile drawn from rng.
template <typename T>
void randomize_thresholds(Model<T>& net, Rng& rng) {
  for (auto* unit : net.sbc_units()) {
    auto imp = importance_l1(unit->sparse_weights().value);
    std::sort(imp.begin(), imp.end());
    const size_t q = static_cast<size_t>(rng.below(static_cast<int64_t>(imp.size())));
    unit->threshold().value[0] = imp[q] * T(0.999);
    unit->recompute_masks();
  }
}

void warm_batchnorm(Model<float>& net, uint64_t seed, int steps = 2) {
  Rng rng(seed);
  for (int i = 0; i < steps; ++i) {
    Tensor<float> x({4, 3, 32, 32});
    rng.fill_normal(x, 0.0, 1.0);
    net.forward(x, true);
  }
  net.release_caches();
}

}  // namespace

TEST_CASE("kept_indices") {
  CHECK(kept_indices({1, 0, 1, 1}) == std::vector<int64_t>{0, 2, 3});
  CHECK(kept_indices({0, 0, 0}).empty());
  CHECK(kept_indices({1, 1, 1, 1}) == std::vector<int64_t>{0, 1, 2, 3});
}

TEST_CASE("compact gather: weights, momentum, and round-trip scatter") {
  Rng rng(1);
  auto m = make_sbc<float>(3, 5, 3, 1, BypassKind::v2, 3, rng, true);
  // fabricate distinct momentum so the carryover is visible
  for (int64_t i = 0; i < m.sparse_weights().mom.numel(); ++i)
    m.sparse_weights().mom[i] = static_cast<float>(i);
  const Tensor<float> w_before = m.sparse_weights().value;
  const Tensor<float> mom_before = m.sparse_weights().mom;

  m.set_hard_mask({1, 0, 1, 0, 1});
  m.convert_to_compact();
  CHECK(m.kept_indices() == std::vector<int64_t>{0, 2, 4});
  CHECK(m.mode() == SbcModule<float>::Mode::compact);

  const int64_t row = 3 * 9;
  const auto& w = m.sparse_weights().value;
  const auto& mom = m.sparse_weights().mom;
  REQUIRE(w.shape() == std::vector<int64_t>{3, 3, 3, 3});
  for (int64_t j = 0; j < 3; ++j) {
    const int64_t src = m.kept_indices()[static_cast<size_t>(j)];
    for (int64_t i = 0; i < row; ++i) {
      CHECK(w[j * row + i] == w_before[src * row + i]);
      CHECK(mom[j * row + i] == mom_before[src * row + i]);
    }
  }

  // scatter back: kept rows identical, pruned rows zero
  Tensor<float> rebuilt({5, 3, 3, 3});
  for (int64_t j = 0; j < 3; ++j)
    std::copy_n(w.data() + j * row, row,
                rebuilt.data() + m.kept_indices()[static_cast<size_t>(j)] * row);
  Tensor<float> masked = w_before;
  for (int64_t f : {1, 3})
    for (int64_t i = 0; i < row; ++i) masked[f * row + i] = 0.0f;
  for (int64_t i = 0; i < rebuilt.numel(); ++i) CHECK(rebuilt[i] == masked[i]);

  CHECK_THROWS(m.convert_to_compact());  // single atomic transformation
}

TEST_CASE("full and empty masks degenerate correctly") {
  Rng rng(2);
  Tensor<float> x({2, 3, 8, 8});
  rng.fill_normal(x, 0.0, 1.0);

  auto full = make_sbc<float>(3, 4, 3, 1, BypassKind::v2, 4, rng, true);
  auto full_ref = full;
  full.set_hard_mask({1, 1, 1, 1});
  full_ref.set_hard_mask({1, 1, 1, 1});
  full.convert_to_compact();
  Tensor<float> a = full.forward(x, false);
  Tensor<float> b = full_ref.forward(x, false);
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-6));

  auto empty = full_ref;  // still masked mode
  empty.set_hard_mask({0, 0, 0, 0});
  auto empty_ref = empty;
  empty.convert_to_compact();
  CHECK(empty.kept_indices().empty());
  Tensor<float> c = empty.forward(x, false);
  Tensor<float> d = empty_ref.forward(x, false);  // masked path contributes zero
  for (int64_t i = 0; i < c.numel(); ++i) CHECK(c[i] == doctest::Approx(d[i]).epsilon(1e-6));
}

TEST_CASE("compact forward equals masked forward on mixed masks (double)") {
  Rng rng(3);
  auto masked = make_sbc<double>(4, 8, 3, 2, BypassKind::v2, 4, rng, true);
  auto imp = importance_l1(masked.sparse_weights().value);
  std::sort(imp.begin(), imp.end());
  masked.threshold().value[0] = 0.5 * (imp[3] + imp[4]);
  masked.recompute_masks();
  REQUIRE(masked.mask().kept_count == 4);

  auto compact = masked;
  compact.convert_to_compact();

  Tensor<double> x({3, 4, 9, 9});
  rng.fill_normal(x, 0.0, 1.0);
  Tensor<double> ym = masked.forward(x, false);
  Tensor<double> yc = compact.forward(x, false);
  REQUIRE(ym.shape() == yc.shape());
  for (int64_t i = 0; i < ym.numel(); ++i) CHECK(std::abs(ym[i] - yc[i]) <= 1e-10);
}

TEST_CASE("whole-network surgery preserves logits and optimizer flow") {
  const ArchSpec spec = build_arch_spec("resnet20");
  auto masked = build_sbcnet(spec, 0.4, BypassKind::v2, 21);
  auto compact = build_sbcnet(spec, 0.4, BypassKind::v2, 21);
  Rng thr_rng(5);
  randomize_thresholds(*masked, thr_rng);
  thr_rng = Rng(5);
  randomize_thresholds(*compact, thr_rng);
  warm_batchnorm(*masked, 17);
  warm_batchnorm(*compact, 17);

  int64_t kept_total = 0, c_total = 0;
  for (auto* u : masked->sbc_units()) {
    kept_total += u->kept_count();
    c_total += u->c_out();
  }
  REQUIRE(kept_total > 0);
  REQUIRE(kept_total < c_total);  // genuinely mixed masks

  convert(*compact);
  const double dev = equivalence_check(*masked, *compact, 8);
  CHECK(dev <= 1e-4);

  // identical networks have zero deviation
  auto clone = build_sbcnet(spec, 0.4, BypassKind::v2, 21);
  auto clone2 = build_sbcnet(spec, 0.4, BypassKind::v2, 21);
  CHECK(equivalence_check(*clone, *clone2, 4) == 0.0);

  // dropping one kept filter must surface as deviation
  for (auto* u : compact->sbc_units()) {
    if (u->kept_count() == 0) continue;
    auto& w = u->sparse_weights().value;
    for (int64_t i = 0; i < w.numel() / u->kept_count(); ++i) w[i] = 0.0f;
    break;
  }
  CHECK(equivalence_check(*masked, *compact, 8) > 0.0);
}

TEST_CASE("structural flops of the converted net equals mask-level accounting") {
  const ArchSpec spec = build_arch_spec("resnet20");
  auto net = build_sbcnet(spec, 0.4, BypassKind::v2, 31);
  Rng thr_rng(9);
  randomize_thresholds(*net, thr_rng);
  const auto kept = model_kept_counts(*net);
  const int64_t want = masked_network_flops(spec.layers, kept, net->bypasses());
  CHECK(structural_flops(*net) == want);
  convert(*net);
  CHECK(structural_flops(*net) == want);  // surgery changes nothing in count
  CHECK(masked_network_flops(spec.layers, model_kept_counts(*net), net->bypasses()) == want);
}

TEST_CASE("surgery manifest json round trip") {
  const ArchSpec spec = build_arch_spec("resnet20");
  auto net = build_sbcnet(spec, 0.4, BypassKind::v2, 41);
  Rng thr_rng(13);
  randomize_thresholds(*net, thr_rng);
  convert(*net);
  SurgeryManifest m = make_manifest(*net, 0.4, 3, 991);
  const std::string text = manifest_to_json(m);
  SurgeryManifest back = manifest_from_json(text);
  CHECK(back.arch == "resnet20");
  CHECK(back.bypass == "v2");
  CHECK(back.t_total == m.t_total);
  CHECK(back.t_kept == m.t_kept);
  CHECK(back.surgery_epoch == 3);
  REQUIRE(back.modules.size() == m.modules.size());
  for (size_t i = 0; i < back.modules.size(); ++i) {
    CHECK(back.modules[i].name == m.modules[i].name);
    CHECK(back.modules[i].kept == m.modules[i].kept);
    CHECK(back.modules[i].kept_list == m.modules[i].kept_list);
    CHECK(back.modules[i].rate ==
          doctest::Approx(1.0 - static_cast<double>(m.modules[i].kept) /
                                    static_cast<double>(m.modules[i].c_out)));
  }
}
