#include "lapp/network.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace lapp {

namespace {

LayerSpec conv_spec(std::string name, int64_t c_in, int64_t c_out, int64_t k,
                    int64_t stride, int64_t hw, bool prunable) {
  LayerSpec l;
  l.name = std::move(name);
  l.kind = LayerKind::conv;
  l.c_in = c_in;
  l.c_out = c_out;
  l.k = k;
  l.stride = stride;
  l.h_out = hw;
  l.w_out = hw;
  l.prunable = prunable;
  l.norm = true;
  return l;
}

int resnet_blocks_per_stage(const std::string& name) {
  if (name == "resnet20") return 3;
  if (name == "resnet32") return 5;
  if (name == "resnet56") return 9;
  return 0;
}

constexpr int kVggPlan[5] = {2, 2, 3, 3, 3};
constexpr int64_t kVggWidths[5] = {64, 128, 256, 512, 512};

}  // namespace

ArchSpec build_arch_spec(const std::string& name) {
  ArchSpec spec;
  spec.name = name;
  spec.class_count = 10;
  if (int n = resnet_blocks_per_stage(name); n > 0) {
    spec.layers.push_back(conv_spec("stem", 3, 16, 3, 1, 32, false));
    int64_t c_prev = 16;
    for (int s = 0; s < 3; ++s) {
      const int64_t width = 16 << s;
      const int64_t hw = 32 >> s;
      for (int b = 0; b < n; ++b) {
        const bool down = s > 0 && b == 0;
        const std::string base = "s" + std::to_string(s + 1) + "b" + std::to_string(b);
        spec.layers.push_back(
            conv_spec(base + ".conv1", c_prev, width, 3, down ? 2 : 1, hw, true));
        spec.layers.push_back(conv_spec(base + ".conv2", width, width, 3, 1, hw, true));
        if (down)
          spec.layers.push_back(
              conv_spec(base + ".shortcut", c_prev, width, 1, 2, hw, false));
        c_prev = width;
      }
    }
    LayerSpec fc;
    fc.name = "fc";
    fc.kind = LayerKind::linear;
    fc.c_in = 64;
    fc.c_out = 10;
    fc.k = 1;
    fc.stride = 1;
    fc.h_out = 1;
    fc.w_out = 1;
    fc.prunable = false;
    fc.norm = false;
    spec.layers.push_back(fc);
    return spec;
  }
  if (name == "vgg16_cifar") {
    int64_t c_prev = 3;
    int conv_idx = 0;
    for (int g = 0; g < 5; ++g) {
      const int64_t hw = 32 >> g;
      for (int j = 0; j < kVggPlan[g]; ++j) {
        const std::string lname =
            "conv" + std::to_string(g + 1) + "_" + std::to_string(j + 1);
        // the first conv is the stem and stays dense
        const bool prunable = conv_idx > 0;
        spec.layers.push_back(conv_spec(lname, c_prev, kVggWidths[g], 3, 1, hw, prunable));
        c_prev = kVggWidths[g];
        ++conv_idx;
      }
    }
    LayerSpec fc;
    fc.name = "fc";
    fc.kind = LayerKind::linear;
    fc.c_in = 512;
    fc.c_out = 10;
    fc.k = 1;
    fc.stride = 1;
    fc.h_out = 1;
    fc.w_out = 1;
    fc.prunable = false;
    fc.norm = false;
    spec.layers.push_back(fc);
    return spec;
  }
  throw std::invalid_argument("unknown architecture: " + name);
}

std::map<std::string, BypassSpec> bypass_specs_for(const ArchSpec& spec,
                                                   double c_target, BypassKind kind) {
  std::map<std::string, BypassSpec> out;
  if (kind == BypassKind::none) return out;
  for (const auto& l : spec.layers) {
    if (!l.prunable) continue;
    BypassSpec b;
    b.kind = kind;
    b.c_in = l.c_in;
    b.c_out = l.c_out;
    b.d = c_target < 1.0 ? select_bypass_width(l.c_out, c_target) : l.c_out;
    b.k = l.k;
    b.h_out = l.h_out;
    b.w_out = l.w_out;
    b.stride = l.stride;
    out.emplace(l.name, b);
  }
  return out;
}

namespace {

std::unique_ptr<Unit<float>> make_position(const LayerSpec& l, bool sbc, bool relu,
                                           double c_target, BypassKind kind, Rng& rng) {
  if (!sbc || !l.prunable) {
    return std::make_unique<PlainConvUnit<float>>(l.name, l.c_in, l.c_out, l.k,
                                                  l.stride, relu, rng);
  }
  const int64_t d = c_target < 1.0 ? select_bypass_width(l.c_out, c_target) : l.c_out;
  return std::make_unique<SbcUnit<float>>(
      make_sbc<float>(l.c_in, l.c_out, l.k, l.stride, kind, d, rng, relu, l.name));
}

std::unique_ptr<Model<float>> build_net(const ArchSpec& spec, bool sbc,
                                        double c_target, BypassKind kind,
                                        uint64_t seed) {
  Rng rng(seed);
  auto byp = sbc ? bypass_specs_for(spec, c_target, kind)
                 : std::map<std::string, BypassSpec>{};
  if (int n = resnet_blocks_per_stage(spec.name); n > 0) {
    auto stem = std::make_unique<PlainConvUnit<float>>("stem", 3, 16, 3, 1, true, rng);
    std::vector<BasicBlock<float>> blocks;
    for (int s = 0; s < 3; ++s) {
      for (int b = 0; b < n; ++b) {
        const std::string base = "s" + std::to_string(s + 1) + "b" + std::to_string(b);
        BasicBlock<float> blk;
        blk.conv1 = make_position(spec.layer(base + ".conv1"), sbc, true, c_target, kind, rng);
        blk.conv2 = make_position(spec.layer(base + ".conv2"), sbc, false, c_target, kind, rng);
        if (s > 0 && b == 0) {
          const auto& sl = spec.layer(base + ".shortcut");
          blk.shortcut = std::make_unique<PlainConvUnit<float>>(
              sl.name, sl.c_in, sl.c_out, sl.k, sl.stride, false, rng);
        }
        blocks.push_back(std::move(blk));
      }
    }
    Linear<float> fc(64, spec.class_count);
    fc.init_weights(rng);
    fc.w.name = "fc.w";
    fc.b.name = "fc.b";
    return std::make_unique<ResNetCifar<float>>(spec, std::move(stem), std::move(blocks),
                                                std::move(fc), std::move(byp));
  }
  if (spec.name == "vgg16_cifar") {
    std::vector<std::unique_ptr<Unit<float>>> convs;
    std::vector<int> pool_after;
    int idx = 0;
    for (int g = 0; g < 5; ++g) {
      for (int j = 0; j < kVggPlan[g]; ++j) {
        const std::string lname =
            "conv" + std::to_string(g + 1) + "_" + std::to_string(j + 1);
        convs.push_back(make_position(spec.layer(lname), sbc, true, c_target, kind, rng));
        ++idx;
      }
      pool_after.push_back(idx - 1);
    }
    Linear<float> fc(512, spec.class_count);
    fc.init_weights(rng);
    fc.w.name = "fc.w";
    fc.b.name = "fc.b";
    return std::make_unique<VggCifar<float>>(spec, std::move(convs), std::move(pool_after),
                                             std::move(fc), std::move(byp));
  }
  throw std::invalid_argument("unknown architecture: " + spec.name);
}

}  // namespace

std::unique_ptr<Model<float>> build_baseline(const ArchSpec& spec, uint64_t seed) {
  return build_net(spec, false, 0.5, BypassKind::none, seed);
}

std::unique_ptr<Model<float>> build_sbcnet(const ArchSpec& spec, double c_target,
                                           BypassKind kind, uint64_t seed) {
  return build_net(spec, true, c_target, kind, seed);
}

std::map<std::string, int64_t> uniform_kept_counts(const ArchSpec& spec, double p) {
  std::map<std::string, int64_t> kept;
  for (const auto& l : spec.layers) {
    if (!l.prunable) continue;
    const auto n = static_cast<int64_t>(
        std::ceil((1.0 - p) * static_cast<double>(l.c_out) - 1e-12));
    kept[l.name] = std::clamp<int64_t>(n, 1, l.c_out);
  }
  return kept;
}

std::map<std::string, int64_t> full_kept_counts(const ArchSpec& spec) {
  std::map<std::string, int64_t> kept;
  for (const auto& l : spec.layers)
    if (l.prunable) kept[l.name] = l.c_out;
  return kept;
}

UniformPruneResult uniform_prune_init(const ArchSpec& spec, double c_target,
                                      BypassKind kind, uint64_t seed) {
  if (c_target <= 0.0 || c_target > 1.0)
    throw std::domain_error("uniform_prune_init: c_target must be in (0, 1]");
  UniformPruneResult res;
  const auto byp = bypass_specs_for(spec, c_target, kind);
  const int64_t t_total = network_total_flops(spec.layers);
  const auto flops_at = [&](double p) {
    return masked_network_flops(spec.layers, uniform_kept_counts(spec, p), byp);
  };
  const double budget = c_target * static_cast<double>(t_total);
  if (static_cast<double>(flops_at(1.0)) > budget) {
    res.feasible = false;
    res.rate = 1.0;
    res.c_hat = compression_rate(flops_at(1.0), t_total);
    return res;
  }
  double lo = 0.0, hi = 1.0;
  if (static_cast<double>(flops_at(0.0)) <= budget) {
    hi = 0.0;
  } else {
    for (int it = 0; it < 200; ++it) {
      const double mid = 0.5 * (lo + hi);
      if (static_cast<double>(flops_at(mid)) <= budget)
        hi = mid;
      else
        lo = mid;
    }
  }
  res.rate = hi;
  res.kept = uniform_kept_counts(spec, hi);
  res.c_hat = compression_rate(flops_at(hi), t_total);
  res.net = build_sbcnet(spec, c_target, kind, seed);
  // fix masks on the top-n filters by initialization importance
  for (auto* unit : res.net->sbc_units()) {
    const int64_t n = res.kept.at(unit->name());
    const auto imp = importance_l1(unit->sparse_weights().value);
    std::vector<int64_t> order(imp.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
      return imp[static_cast<size_t>(a)] > imp[static_cast<size_t>(b)];
    });
    std::vector<uint8_t> mask(imp.size(), 0);
    for (int64_t i = 0; i < n; ++i) mask[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;
    unit->set_hard_mask(std::move(mask));
  }
  return res;
}

}  // namespace lapp
