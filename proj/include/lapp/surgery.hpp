#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lapp/network.hpp"
#include "lapp/rng.hpp"

namespace lapp {

/// Ascending zero-based indices of the kept filters.
inline std::vector<int64_t> kept_indices(const std::vector<uint8_t>& hard_mask) {
  std::vector<int64_t> out;
  for (size_t i = 0; i < hard_mask.size(); ++i)
    if (hard_mask[i]) out.push_back(static_cast<int64_t>(i));
  return out;
}

/// One-time conversion of a masked SBCNet into the compact network: every
/// SBC module physically drops its pruned filters, everything else is
/// untouched.
template <typename T>
void convert(Model<T>& net) {
  for (auto* unit : net.sbc_units()) unit->convert_to_compact();
}

template <typename T>
std::map<std::string, int64_t> model_kept_counts(Model<T>& net) {
  std::map<std::string, int64_t> out;
  for (auto* unit : net.sbc_units()) out[unit->name()] = unit->kept_count();
  return out;
}

/// FLOPs of the network computed from its live structure (the narrow convs
/// that surgery actually built), as opposed to the mask-level accounting.
template <typename T>
int64_t structural_flops(Model<T>& net) {
  int64_t total = 0;
  std::map<std::string, SbcModule<T>*> units;
  for (auto* u : net.sbc_units()) units[u->name()] = u;
  for (const auto& layer : net.arch().layers) {
    auto it = units.find(layer.name);
    if (it == units.end()) {
      total += conv_flops(layer, layer.c_out, layer.c_in);
      continue;
    }
    SbcModule<T>* m = it->second;
    total += conv_flops(layer, m->kept_count(), layer.c_in);
    switch (m->bypass_kind()) {
      case BypassKind::none:
        break;
      case BypassKind::v1:
        total += layer.h_out * layer.w_out * m->c_in() * m->k() * m->k() +
                 layer.h_out * layer.w_out * m->c_in() * m->c_out();
        break;
      case BypassKind::v2:
        total += bypass_flops(m->c_in(), m->c_out(), m->d(), m->k(), layer.h_out,
                              layer.w_out, m->stride());
        break;
    }
  }
  return total;
}

/// Maximum absolute logit deviation between two networks over random
/// inputs, both evaluated in inference mode.
template <typename T>
double equivalence_check(Model<T>& a, Model<T>& b, int64_t sample_count,
                         uint64_t seed = 99) {
  Rng rng(seed);
  double worst = 0.0;
  const int64_t chunk = 16;
  for (int64_t done = 0; done < sample_count; done += chunk) {
    const int64_t n = std::min(chunk, sample_count - done);
    Tensor<T> x({n, 3, 32, 32});
    rng.fill_normal(x, 0.0, 1.0);
    Tensor<T> ya = a.forward(x, false);
    Tensor<T> yb = b.forward(x, false);
    for (int64_t i = 0; i < ya.numel(); ++i)
      worst = std::max(worst, std::abs(static_cast<double>(ya[i]) - yb[i]));
  }
  return worst;
}

/// Per-module surgery record written next to the checkpoint.
struct SurgeryManifestEntry {
  std::string name;
  int64_t c_out = 0;
  int64_t kept = 0;
  double rate = 0.0;  // p = 1 - kept/c_out
  int64_t d = 0;
  std::vector<int64_t> kept_list;
};

struct SurgeryManifest {
  std::string arch;
  std::string bypass;
  double c_target = 0.0;
  int64_t t_total = 0;
  int64_t t_kept = 0;
  int64_t params_before = 0;
  int64_t params_after = 0;
  int surgery_epoch = -1;
  int64_t surgery_iteration = -1;
  std::vector<SurgeryManifestEntry> modules;
};

template <typename T>
SurgeryManifest make_manifest(Model<T>& net, double c_target, int epoch,
                              int64_t iteration) {
  SurgeryManifest m;
  m.arch = net.arch().name;
  m.c_target = c_target;
  m.surgery_epoch = epoch;
  m.surgery_iteration = iteration;
  m.t_total = network_total_flops(net.arch().layers);
  m.t_kept = masked_network_flops(net.arch().layers, model_kept_counts(net),
                                  net.bypasses());
  m.params_before = params_count(net.arch().layers,
                                 full_kept_counts(net.arch()), {});
  m.params_after = params_count(net.arch().layers, model_kept_counts(net),
                                net.bypasses());
  for (auto* unit : net.sbc_units()) {
    if (m.bypass.empty()) m.bypass = to_string(unit->bypass_kind());
    SurgeryManifestEntry e;
    e.name = unit->name();
    e.c_out = unit->c_out();
    e.kept = unit->kept_count();
    e.rate = 1.0 - static_cast<double>(e.kept) / static_cast<double>(e.c_out);
    e.d = unit->d();
    e.kept_list = unit->mode() == SbcModule<T>::Mode::compact
                      ? unit->kept_indices()
                      : kept_indices(unit->mask().hard);
    m.modules.push_back(std::move(e));
  }
  return m;
}

std::string manifest_to_json(const SurgeryManifest& m);
SurgeryManifest manifest_from_json(const std::string& text);
void manifest_save(const SurgeryManifest& m, const std::string& path);
SurgeryManifest manifest_load(const std::string& path);

}  // namespace lapp
