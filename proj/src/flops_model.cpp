#include "lapp/flops_model.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace lapp {

const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::depthwise_conv: return "depthwise_conv";
    case LayerKind::pointwise_conv: return "pointwise_conv";
    case LayerKind::linear: return "linear";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "conv") return LayerKind::conv;
  if (s == "depthwise_conv") return LayerKind::depthwise_conv;
  if (s == "pointwise_conv") return LayerKind::pointwise_conv;
  if (s == "linear") return LayerKind::linear;
  throw std::invalid_argument("unknown layer kind: " + s);
}

const char* to_string(BypassKind k) {
  switch (k) {
    case BypassKind::none: return "none";
    case BypassKind::v1: return "v1";
    case BypassKind::v2: return "v2";
  }
  return "?";
}

BypassKind bypass_kind_from_string(const std::string& s) {
  if (s == "none") return BypassKind::none;
  if (s == "v1") return BypassKind::v1;
  if (s == "v2") return BypassKind::v2;
  throw std::invalid_argument("unknown bypass kind: " + s);
}

void LayerSpec::validate() const {
  if (c_in < 1 || c_out < 1 || k < 1 || stride < 1 || h_out < 1 || w_out < 1)
    throw std::domain_error("LayerSpec '" + name + "': all extents must be >= 1");
  if (kind == LayerKind::depthwise_conv && c_in != c_out)
    throw std::domain_error("LayerSpec '" + name + "': depthwise requires c_in == c_out");
}

int64_t conv_flops(const LayerSpec& layer, int64_t active_out, int64_t active_in) {
  layer.validate();
  if (active_out < 0 || active_out > layer.c_out)
    throw std::domain_error("conv_flops: active_out out of range for '" + layer.name + "'");
  if (active_in < 0 || active_in > layer.c_in)
    throw std::domain_error("conv_flops: active_in out of range for '" + layer.name + "'");
  const int64_t plane = layer.h_out * layer.w_out;
  switch (layer.kind) {
    case LayerKind::depthwise_conv:
      return plane * active_out * layer.k * layer.k;
    case LayerKind::linear:
      return active_in * active_out;
    case LayerKind::conv:
    case LayerKind::pointwise_conv:
      return plane * active_in * active_out * layer.k * layer.k;
  }
  return 0;
}

int64_t bypass_flops(int64_t c_in, int64_t c_out, int64_t d, int64_t k,
                     int64_t h_out, int64_t w_out, int64_t stride) {
  if (c_in < 1 || c_out < 1 || d < 1 || k < 1 || h_out < 1 || w_out < 1 || stride < 1)
    throw std::domain_error("bypass_flops: all arguments must be >= 1");
  // 1x1 at input resolution, depthwise carries the stride, 1x1 at output
  // resolution. For stride 1 and c_in == c_out == c this is hw(2cd + dk^2).
  const int64_t h_in = h_out * stride;
  const int64_t w_in = w_out * stride;
  return h_in * w_in * c_in * d + h_out * w_out * d * k * k +
         h_out * w_out * d * c_out;
}

int64_t BypassSpec::flops() const {
  switch (kind) {
    case BypassKind::none:
      return 0;
    case BypassKind::v1:
      // depthwise kxk over c_in (strided), then 1x1 c_in -> c_out.
      return h_out * w_out * c_in * k * k + h_out * w_out * c_in * c_out;
    case BypassKind::v2:
      return bypass_flops(c_in, c_out, d, k, h_out, w_out, stride);
  }
  return 0;
}

int64_t BypassSpec::params() const {
  switch (kind) {
    case BypassKind::none:
      return 0;
    case BypassKind::v1:
      return c_in * k * k + 2 * c_in + c_out * c_in + 2 * c_out;
    case BypassKind::v2:
      return d * c_in + 2 * d + d * k * k + 2 * d + c_out * d + 2 * c_out;
  }
  return 0;
}

double FlopsAccount::c_hat() const { return compression_rate(t_kept, t_total); }

int64_t network_total_flops(const std::vector<LayerSpec>& arch) {
  if (arch.empty()) throw std::invalid_argument("network_total_flops: empty architecture");
  int64_t total = 0;
  for (const auto& layer : arch) total += conv_flops(layer, layer.c_out, layer.c_in);
  return total;
}

int64_t per_filter_flops(const LayerSpec& layer) {
  layer.validate();
  switch (layer.kind) {
    case LayerKind::depthwise_conv:
      return layer.h_out * layer.w_out * layer.k * layer.k;
    case LayerKind::linear:
      return layer.c_in;
    case LayerKind::conv:
    case LayerKind::pointwise_conv:
      return layer.h_out * layer.w_out * layer.c_in * layer.k * layer.k;
  }
  return 0;
}

int64_t masked_network_flops(const std::vector<LayerSpec>& arch,
                             const std::map<std::string, int64_t>& kept_counts,
                             const std::map<std::string, BypassSpec>& bypasses) {
  int64_t total = 0;
  for (const auto& layer : arch) {
    if (layer.prunable) {
      auto it = kept_counts.find(layer.name);
      if (it == kept_counts.end())
        throw std::invalid_argument("masked_network_flops: no kept count for prunable layer '" +
                                    layer.name + "'");
      const int64_t n = it->second;
      if (n < 0 || n > layer.c_out)
        throw std::domain_error("masked_network_flops: kept count out of range for '" +
                                layer.name + "'");
      total += conv_flops(layer, n, layer.c_in);
      auto bp = bypasses.find(layer.name);
      if (bp != bypasses.end()) total += bp->second.flops();
    } else {
      total += conv_flops(layer, layer.c_out, layer.c_in);
    }
  }
  return total;
}

double compression_rate(int64_t t_kept, int64_t t_total) {
  if (t_total <= 0) throw std::domain_error("compression_rate: t_total must be > 0");
  return static_cast<double>(t_kept) / static_cast<double>(t_total);
}

double flops_regularizer(double c_hat, double c_target) {
  if (c_target <= 0.0) throw std::domain_error("flops_regularizer: c_target must be > 0");
  const double r = c_hat / c_target - 1.0;
  return r * r;
}

double flops_regularizer_grad(double c_hat, double c_target) {
  if (c_target <= 0.0) throw std::domain_error("flops_regularizer_grad: c_target must be > 0");
  return 2.0 * (c_hat / c_target - 1.0) / c_target;
}

static int64_t layer_params(const LayerSpec& layer, int64_t active_out) {
  int64_t weights = 0;
  switch (layer.kind) {
    case LayerKind::depthwise_conv:
      weights = active_out * layer.k * layer.k;
      break;
    case LayerKind::linear:
      weights = layer.c_in * active_out + active_out;  // weight + bias
      break;
    case LayerKind::conv:
    case LayerKind::pointwise_conv:
      weights = active_out * layer.c_in * layer.k * layer.k;
      break;
  }
  if (layer.norm) weights += 2 * active_out;
  return weights;
}

int64_t params_count(const std::vector<LayerSpec>& arch,
                     const std::map<std::string, int64_t>& kept_counts,
                     const std::map<std::string, BypassSpec>& bypasses) {
  int64_t total = 0;
  for (const auto& layer : arch) {
    if (layer.prunable) {
      auto it = kept_counts.find(layer.name);
      if (it == kept_counts.end())
        throw std::invalid_argument("params_count: no kept count for prunable layer '" +
                                    layer.name + "'");
      const int64_t n = it->second;
      if (n < 0 || n > layer.c_out)
        throw std::domain_error("params_count: kept count out of range for '" + layer.name + "'");
      total += layer_params(layer, n);
      auto bp = bypasses.find(layer.name);
      if (bp != bypasses.end()) total += bp->second.params();
    } else {
      total += layer_params(layer, layer.c_out);
    }
  }
  return total;
}

std::string arch_document_write(const std::vector<LayerSpec>& arch) {
  std::ostringstream os;
  os << "lapp-arch v1\n";
  os << "# name kind c_in c_out k stride h_out w_out prunable norm\n";
  for (const auto& l : arch) {
    os << l.name << " " << to_string(l.kind) << " " << l.c_in << " " << l.c_out
       << " " << l.k << " " << l.stride << " " << l.h_out << " " << l.w_out
       << " " << (l.prunable ? 1 : 0) << " " << (l.norm ? 1 : 0) << "\n";
  }
  return os.str();
}

std::vector<LayerSpec> arch_document_read(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line.rfind("lapp-arch v1", 0) != 0)
    throw std::runtime_error("arch document: missing 'lapp-arch v1' header");
  std::vector<LayerSpec> arch;
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    LayerSpec l;
    std::string kind;
    int prunable = 0, norm = 0;
    if (!(ls >> l.name >> kind >> l.c_in >> l.c_out >> l.k >> l.stride >>
          l.h_out >> l.w_out >> prunable >> norm))
      throw std::runtime_error("arch document: malformed record at line " +
                               std::to_string(lineno));
    l.kind = layer_kind_from_string(kind);
    l.prunable = prunable != 0;
    l.norm = norm != 0;
    l.validate();
    arch.push_back(std::move(l));
  }
  return arch;
}

}  // namespace lapp
