#include "lapp/controller.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace lapp {

TrainState init_run_state(const RunConfig& config) {
  config.validate();
  TrainState st;
  st.config = config;
  st.spec = build_arch_spec(config.arch_name);
  const BypassKind kind = bypass_kind_from_string(config.bypass_kind);
  if (config.uniform) {
    UniformPruneResult up = uniform_prune_init(st.spec, config.c_target, kind, config.seed);
    if (!up.feasible)
      throw std::domain_error("uniform pruning: target " + std::to_string(config.c_target) +
                              " not attainable even at one filter per layer (c_hat " +
                              std::to_string(up.c_hat) + ")");
    st.net = std::move(up.net);
    st.uniform_rate = up.rate;
  } else {
    st.net = build_sbcnet(st.spec, config.c_target, kind, config.seed);
  }
  st.flops.t_total = network_total_flops(st.spec.layers);
  st.flops.c_target = config.c_target;
  st.flops.t_kept = masked_network_flops(st.spec.layers, model_kept_counts(*st.net),
                                         st.net->bypasses());
  st.data_rng = Rng(config.seed * 0x9e3779b97f4a7c15ull + 1);
  return st;
}

bool check_target(double c_hat, double c_target) {
  return c_hat <= c_target + 1e-9;
}

namespace {

double l1_norm_sum(Model<float>& net) {
  double acc = 0.0;
  for (auto* unit : net.sbc_units()) {
    const Tensor<float>& w = unit->sparse_weights().value;
    for (int64_t i = 0; i < w.numel(); ++i) acc += std::abs(static_cast<double>(w[i]));
  }
  return acc;
}

void add_l1_subgradient(Model<float>& net, double lambda1) {
  if (lambda1 == 0.0) return;
  for (auto* unit : net.sbc_units()) {
    Tensor<float>& w = unit->sparse_weights().value;
    Tensor<float>& g = unit->sparse_weights().grad;
    const float l = static_cast<float>(lambda1);
    for (int64_t i = 0; i < w.numel(); ++i) {
      if (w[i] > 0.0f)
        g[i] += l;
      else if (w[i] < 0.0f)
        g[i] -= l;
      // subgradient at zero is zero: dead weights stay dead
    }
  }
}

void zero_grads(Model<float>& net) {
  for (auto* p : net.params()) p->zero_grad();
}

}  // namespace

LossBreakdown total_loss(TrainState& state, const Tensor<float>& x,
                         const std::vector<int>& labels, bool train_mode,
                         Tensor<float>* dlogits) {
  LossBreakdown out;
  Tensor<float> logits = state.net->forward(x, train_mode);
  out.ce = softmax_cross_entropy(logits, labels, dlogits);
  if (state.phase == "prune") {
    out.l1 = l1_norm_sum(*state.net);
    out.flops_reg = flops_regularizer(state.flops.c_hat(), state.config.c_target);
    out.total = out.ce + state.config.lambda1 * out.l1 + state.config.lambda2 * out.flops_reg;
  } else {
    out.total = out.ce;
  }
  return out;
}

StepSummary prune_step(TrainState& state, const Tensor<float>& x,
                       const std::vector<int>& labels) {
  if (state.phase != "prune") throw std::runtime_error("prune_step: phase is not prune");
  StepSummary s;
  if (!state.config.uniform)
    for (auto* unit : state.net->sbc_units()) unit->recompute_masks();
  state.flops.t_kept = masked_network_flops(
      state.spec.layers, model_kept_counts(*state.net), state.net->bypasses());
  s.c_hat = state.flops.c_hat();
  if (state.closest_c_hat < 0.0 || s.c_hat < state.closest_c_hat)
    state.closest_c_hat = s.c_hat;

  if (check_target(s.c_hat, state.config.c_target)) {
    s.surgery = true;
    return s;  // surgery itself is handled by the run loop; no update here
  }

  zero_grads(*state.net);
  Tensor<float> dlogits;
  const LossBreakdown loss = total_loss(state, x, labels, true, &dlogits);
  if (!std::isfinite(loss.total))
    throw std::runtime_error("prune_step: non-finite loss at iteration " +
                             std::to_string(state.iteration) + " (ce=" +
                             std::to_string(loss.ce) + ")");
  s.loss = loss.total;

  // FLOPs pressure routed to each threshold through the STE chain:
  // dR/dM_i = lambda2 * R'(c_hat) * per_filter_flops / t_total.
  const double reg_grad =
      state.config.lambda2 *
      flops_regularizer_grad(s.c_hat, state.config.c_target) /
      static_cast<double>(state.flops.t_total);
  for (auto* unit : state.net->sbc_units()) {
    const double pf = static_cast<double>(per_filter_flops(state.spec.layer(unit->name())));
    unit->set_mask_grad_bias(static_cast<float>(reg_grad * pf));
  }
  state.net->backward(dlogits);
  add_l1_subgradient(*state.net, state.config.lambda1);

  auto params = state.net->params();
  sgd_update(params, lr_at(state.epoch, state.config), state.config.momentum,
             state.config.weight_decay);
  ++state.iteration;
  return s;
}

StepSummary train_step(TrainState& state, const Tensor<float>& x,
                       const std::vector<int>& labels) {
  if (state.phase != "train") throw std::runtime_error("train_step: phase is not train");
  StepSummary s;
  s.c_hat = state.flops.c_hat();
  zero_grads(*state.net);
  Tensor<float> dlogits;
  const LossBreakdown loss = total_loss(state, x, labels, true, &dlogits);
  if (!std::isfinite(loss.total))
    throw std::runtime_error("train_step: non-finite loss at iteration " +
                             std::to_string(state.iteration));
  s.loss = loss.total;
  state.net->backward(dlogits);
  auto params = state.net->params();
  sgd_update(params, lr_at(state.epoch, state.config), state.config.momentum,
             state.config.weight_decay);
  ++state.iteration;
  return s;
}

void sgd_update(std::vector<Param<float>*>& params, double lr, double momentum,
                double weight_decay) {
  const float m = static_cast<float>(momentum);
  const float wd = static_cast<float>(weight_decay);
  const float step = static_cast<float>(lr);
  for (auto* p : params) {
    const bool decay = p->decay && wd != 0.0f;
    for (int64_t i = 0; i < p->value.numel(); ++i) {
      float g = p->grad[i];
      if (decay) g += wd * p->value[i];
      p->mom[i] = m * p->mom[i] + g;
      p->value[i] -= step * p->mom[i];
    }
  }
}

namespace {

void perform_surgery(TrainState& state, const RunSinks& sinks) {
  if (sinks.on_surgery) sinks.on_surgery(state, "pre");
  convert(*state.net);
  state.phase = "train";
  state.surgery_epoch = state.epoch;
  state.surgery_iteration = state.iteration;
  state.flops.t_kept = masked_network_flops(
      state.spec.layers, model_kept_counts(*state.net), state.net->bypasses());
  if (sinks.on_surgery) sinks.on_surgery(state, "post");
}

}  // namespace

RunResult run(TrainState& state, const Dataset& train, const Dataset& test,
              const RunSinks& sinks) {
  state.config.validate();
  RunResult res;
  if (train.size() < 1 || test.size() < 1)
    throw std::runtime_error("run: empty dataset");

  // Uniform mode skips threshold learning entirely: record the initial
  // rate, then convert before the first update.
  if (state.config.uniform && state.phase == "prune") {
    const double c0 = state.flops.c_hat();
    if (sinks.on_c_hat) sinks.on_c_hat(state.iteration, c0);
    state.closest_c_hat = c0;
    perform_surgery(state, sinks);
  }

  std::vector<int64_t> order(static_cast<size_t>(train.size()));
  std::iota(order.begin(), order.end(), 0);

  for (; state.epoch < state.config.total_epochs; ++state.epoch) {
    // Fisher-Yates on the dedicated stream keeps runs reproducible
    for (int64_t i = train.size() - 1; i > 0; --i) {
      const int64_t j = state.data_rng.below(i + 1);
      std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
    }
    double epoch_loss = 0.0;
    int64_t steps = 0;
    for (int64_t start = 0; start < train.size(); start += state.config.batch_size) {
      const int64_t n = std::min<int64_t>(state.config.batch_size, train.size() - start);
      Tensor<float> x({n, kImageChannels, kImageSize, kImageSize});
      std::vector<int> labels(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) {
        const int64_t idx = order[static_cast<size_t>(start + i)];
        augment_train(train.image(idx), x.data() + i * kImagePixels, state.data_rng,
                      state.config.channel_mean, state.config.channel_std);
        labels[static_cast<size_t>(i)] = train.labels[static_cast<size_t>(idx)];
      }
      if (state.phase == "prune") {
        StepSummary s = prune_step(state, x, labels);
        if (sinks.on_c_hat) sinks.on_c_hat(state.iteration, s.c_hat);
        if (s.surgery) {
          perform_surgery(state, sinks);
          // the batch that met the target gets no weight update
          continue;
        }
        epoch_loss += s.loss;
        ++steps;
      } else {
        StepSummary s = train_step(state, x, labels);
        epoch_loss += s.loss;
        ++steps;
      }
    }
    const double top1 = evaluate(*state.net, test, state.config.channel_mean,
                                 state.config.channel_std);
    const double c_hat = state.flops.c_hat();
    if (sinks.on_accuracy) sinks.on_accuracy(state.epoch, top1);
    if (sinks.on_metrics)
      sinks.on_metrics(state.epoch, lr_at(state.epoch, state.config),
                       steps > 0 ? epoch_loss / static_cast<double>(steps) : 0.0,
                       c_hat, top1);
    if (sinks.on_epoch_end) sinks.on_epoch_end(state);
    res.final_top1 = top1;

    if (state.phase == "prune" && state.epoch + 1 >= state.config.prune_epoch_cap) {
      res.attained = false;
      res.closest_c_hat = state.closest_c_hat;
      res.final_c_hat = c_hat;
      res.failure = "target compression rate " + std::to_string(state.config.c_target) +
                    " not attained within " + std::to_string(state.config.prune_epoch_cap) +
                    " prune epochs; closest c_hat " + std::to_string(state.closest_c_hat);
      return res;
    }
  }

  res.attained = state.phase == "train";
  res.final_c_hat = state.flops.c_hat();
  res.surgery_epoch = state.surgery_epoch;
  res.closest_c_hat = state.closest_c_hat;
  if (!res.attained)
    res.failure = "run ended in prune phase";  // unreachable given the cap check
  return res;
}

}  // namespace lapp
