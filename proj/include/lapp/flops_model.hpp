#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace lapp {

enum class LayerKind { conv, depthwise_conv, pointwise_conv, linear };

const char* to_string(LayerKind k);
LayerKind layer_kind_from_string(const std::string& s);

/// Static description of one layer; the unit of FLOPs accounting.
/// One FLOP = one multiply-accumulate throughout.
struct LayerSpec {
  std::string name;
  LayerKind kind = LayerKind::conv;
  int64_t c_in = 1;
  int64_t c_out = 1;
  int64_t k = 1;       // square kernel
  int64_t stride = 1;
  int64_t h_out = 1;
  int64_t w_out = 1;
  bool prunable = false;
  bool norm = true;    // carries a per-channel scale-and-shift pair per output channel

  void validate() const;
};

enum class BypassKind { none, v1, v2 };

const char* to_string(BypassKind k);
BypassKind bypass_kind_from_string(const std::string& s);

/// Geometry of one bypass branch. v2 is 1x1 -> depthwise kxk -> 1x1 with
/// inner width d; v1 is depthwise kxk over c_in -> 1x1. The stride lives in
/// the depthwise conv, so the first 1x1 of v2 runs at input resolution.
struct BypassSpec {
  BypassKind kind = BypassKind::v2;
  int64_t c_in = 1;
  int64_t c_out = 1;
  int64_t d = 1;
  int64_t k = 3;
  int64_t h_out = 1;
  int64_t w_out = 1;
  int64_t stride = 1;

  int64_t flops() const;
  int64_t params() const;
};

/// FLOPs bookkeeping for one run. t_total is the ORIGINAL baseline count,
/// t_kept the current masked SBCNet count.
struct FlopsAccount {
  int64_t t_total = 0;
  int64_t t_kept = 0;
  double c_target = 0.0;

  double c_hat() const;
};

int64_t conv_flops(const LayerSpec& layer, int64_t active_out, int64_t active_in);
int64_t bypass_flops(int64_t c_in, int64_t c_out, int64_t d, int64_t k,
                     int64_t h_out, int64_t w_out, int64_t stride);
int64_t network_total_flops(const std::vector<LayerSpec>& arch);

/// Multiply-accumulates contributed by one kept filter of a prunable layer
/// (input counted at full width); this is the constant dT_kept/dn^l.
int64_t per_filter_flops(const LayerSpec& layer);

int64_t masked_network_flops(const std::vector<LayerSpec>& arch,
                             const std::map<std::string, int64_t>& kept_counts,
                             const std::map<std::string, BypassSpec>& bypasses);

double compression_rate(int64_t t_kept, int64_t t_total);

/// R(c_hat, c_target) = (c_hat / c_target - 1)^2.
double flops_regularizer(double c_hat, double c_target);
double flops_regularizer_grad(double c_hat, double c_target);

int64_t params_count(const std::vector<LayerSpec>& arch,
                     const std::map<std::string, int64_t>& kept_counts,
                     const std::map<std::string, BypassSpec>& bypasses);

/// Architecture description document: plain text, one record per layer with
/// the LayerSpec fields, so accounting is auditable without live networks.
std::string arch_document_write(const std::vector<LayerSpec>& arch);
std::vector<LayerSpec> arch_document_read(const std::string& text);

}  // namespace lapp
