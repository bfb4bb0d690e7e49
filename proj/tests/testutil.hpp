#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "lapp/flops_model.hpp"
#include "lapp/rng.hpp"

namespace lapp::testutil {

/// Brute-force multiply count for one layer: walk every output element and
/// add its per-element multiply count. Independent of the closed forms in
/// flops_model.
inline int64_t brute_conv_flops(const LayerSpec& l, int64_t active_out, int64_t active_in) {
  int64_t total = 0;
  if (l.kind == LayerKind::linear) {
    for (int64_t o = 0; o < active_out; ++o) total += active_in;
    return total;
  }
  for (int64_t o = 0; o < active_out; ++o)
    for (int64_t y = 0; y < l.h_out; ++y)
      for (int64_t x = 0; x < l.w_out; ++x)
        total += (l.kind == LayerKind::depthwise_conv) ? l.k * l.k : active_in * l.k * l.k;
  return total;
}

inline int64_t brute_bypass_flops(const BypassSpec& b) {
  if (b.kind == BypassKind::none) return 0;
  int64_t total = 0;
  if (b.kind == BypassKind::v2) {
    // 1x1 at input resolution
    for (int64_t o = 0; o < b.d; ++o)
      for (int64_t y = 0; y < b.h_out * b.stride; ++y)
        for (int64_t x = 0; x < b.w_out * b.stride; ++x) total += b.c_in;
    // depthwise at output resolution
    for (int64_t o = 0; o < b.d; ++o)
      for (int64_t y = 0; y < b.h_out; ++y)
        for (int64_t x = 0; x < b.w_out; ++x) total += b.k * b.k;
    // 1x1 to c_out
    for (int64_t o = 0; o < b.c_out; ++o)
      for (int64_t y = 0; y < b.h_out; ++y)
        for (int64_t x = 0; x < b.w_out; ++x) total += b.d;
  } else {
    for (int64_t o = 0; o < b.c_in; ++o)
      for (int64_t y = 0; y < b.h_out; ++y)
        for (int64_t x = 0; x < b.w_out; ++x) total += b.k * b.k;
    for (int64_t o = 0; o < b.c_out; ++o)
      for (int64_t y = 0; y < b.h_out; ++y)
        for (int64_t x = 0; x < b.w_out; ++x) total += b.c_in;
  }
  return total;
}

inline int64_t brute_masked_flops(const std::vector<LayerSpec>& arch,
                                  const std::map<std::string, int64_t>& kept,
                                  const std::map<std::string, BypassSpec>& bypasses) {
  int64_t total = 0;
  for (const auto& l : arch) {
    const int64_t active = l.prunable ? kept.at(l.name) : l.c_out;
    total += brute_conv_flops(l, active, l.c_in);
    if (l.prunable) {
      auto it = bypasses.find(l.name);
      if (it != bypasses.end()) total += brute_bypass_flops(it->second);
    }
  }
  return total;
}

/// Random toy architecture: <= 4 layers, channels <= 8, spatial <= 8.
inline std::vector<LayerSpec> random_toy_arch(Rng& rng) {
  const int64_t layers = 1 + rng.below(4);
  std::vector<LayerSpec> arch;
  int64_t c_prev = 1 + rng.below(8);
  for (int64_t i = 0; i < layers; ++i) {
    LayerSpec l;
    l.name = "l" + std::to_string(i);
    const int64_t kind_pick = rng.below(3);
    l.c_in = c_prev;
    l.c_out = 1 + rng.below(8);
    l.k = 1 + 2 * rng.below(2);  // 1 or 3
    l.stride = 1 + rng.below(2);
    l.h_out = 1 + rng.below(8);
    l.w_out = 1 + rng.below(8);
    l.prunable = rng.coin(0.7);
    if (kind_pick == 0) {
      l.kind = LayerKind::conv;
    } else if (kind_pick == 1) {
      l.kind = LayerKind::pointwise_conv;
      l.k = 1;
    } else {
      l.kind = LayerKind::depthwise_conv;
      l.c_out = l.c_in;
    }
    c_prev = l.c_out;
    arch.push_back(l);
  }
  return arch;
}

inline std::map<std::string, int64_t> random_kept(const std::vector<LayerSpec>& arch,
                                                  Rng& rng) {
  std::map<std::string, int64_t> kept;
  for (const auto& l : arch)
    if (l.prunable) kept[l.name] = rng.below(l.c_out + 1);
  return kept;
}

inline std::map<std::string, BypassSpec> random_bypasses(const std::vector<LayerSpec>& arch,
                                                         Rng& rng) {
  std::map<std::string, BypassSpec> out;
  for (const auto& l : arch) {
    if (!l.prunable || !rng.coin(0.8)) continue;
    BypassSpec b;
    b.kind = rng.coin(0.5) ? BypassKind::v2 : BypassKind::v1;
    b.c_in = l.c_in;
    b.c_out = l.c_out;
    b.d = 1 + rng.below(l.c_out);
    b.k = l.k;
    b.h_out = l.h_out;
    b.w_out = l.w_out;
    b.stride = l.stride;
    out.emplace(l.name, b);
  }
  return out;
}

/// Central finite difference of a scalar function.
inline double central_diff(const std::function<double(double)>& f, double x,
                           double h = 1e-6) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

/// Central-difference gradient of a scalar loss with respect to every
/// element of t (t is restored afterwards).
template <typename T, typename F>
Tensor<T> numeric_grad(Tensor<T>& t, F&& loss, double h = 1e-6) {
  Tensor<T> g(t.shape());
  for (int64_t i = 0; i < t.numel(); ++i) {
    const T saved = t[i];
    t[i] = saved + static_cast<T>(h);
    const double up = loss();
    t[i] = saved - static_cast<T>(h);
    const double down = loss();
    t[i] = saved;
    g[i] = static_cast<T>((up - down) / (2.0 * h));
  }
  return g;
}

template <typename T>
double max_rel_err(const Tensor<T>& got, const Tensor<T>& want, double floor = 1e-6) {
  double worst = 0.0;
  for (int64_t i = 0; i < got.numel(); ++i) {
    const double denom = std::max(floor, std::abs(static_cast<double>(want[i])));
    worst = std::max(worst, std::abs(static_cast<double>(got[i]) - want[i]) / denom);
  }
  return worst;
}

/// Direct 7-loop convolution, independent of the im2col path.
template <typename T>
Tensor<T> naive_conv(const Tensor<T>& x, const Tensor<T>& w, int64_t stride, int64_t pad) {
  const int64_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int64_t co = w.dim(0), k = w.dim(2);
  const int64_t ho = (h + 2 * pad - k) / stride + 1;
  const int64_t wo = (wd + 2 * pad - k) / stride + 1;
  Tensor<T> y({n, co, ho, wo});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t o = 0; o < co; ++o)
      for (int64_t oy = 0; oy < ho; ++oy)
        for (int64_t ox = 0; ox < wo; ++ox) {
          double acc = 0.0;
          for (int64_t c = 0; c < ci; ++c)
            for (int64_t ky = 0; ky < k; ++ky)
              for (int64_t kx = 0; kx < k; ++kx) {
                const int64_t iy = oy * stride + ky - pad;
                const int64_t ix = ox * stride + kx - pad;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += static_cast<double>(w[((o * ci + c) * k + ky) * k + kx]) *
                       x[((i * ci + c) * h + iy) * wd + ix];
              }
          y[((i * co + o) * ho + oy) * wo + ox] = static_cast<T>(acc);
        }
  return y;
}

}  // namespace lapp::testutil
