#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lapp/harness.hpp"
#include "lapp/network.hpp"
#include "lapp/surgery.hpp"

namespace lapp {

/// Mutable state of one pruning run. The epoch status moves prune -> train
/// exactly once, at surgery.
struct TrainState {
  RunConfig config;
  ArchSpec spec;
  std::unique_ptr<Model<float>> net;
  std::string phase = "prune";
  int epoch = 0;
  int64_t iteration = 0;
  int surgery_epoch = -1;
  int64_t surgery_iteration = -1;
  FlopsAccount flops;
  Rng data_rng{0};
  double closest_c_hat = -1.0;
  double uniform_rate = -1.0;  // shared p in uniform mode
};

/// Build the initial state: SBCNet (or the uniform-pruned variant) plus
/// FLOPs account against the original baseline.
TrainState init_run_state(const RunConfig& config);

/// Attainment test: true iff c_hat <= c_target (1e-9 slack; the rate moves
/// in discrete jumps so exact equality is not required).
bool check_target(double c_hat, double c_target);

struct LossBreakdown {
  double ce = 0.0;
  double l1 = 0.0;
  double flops_reg = 0.0;  // R(c_hat, c_target), before lambda2
  double total = 0.0;
};

/// Forward pass plus assembly of cross-entropy + lambda1 * l1(sparse
/// weights) + lambda2 * R(c_hat, c_target). In the train phase the
/// regularizer terms are dropped. dlogits, when given, receives the
/// cross-entropy gradient.
LossBreakdown total_loss(TrainState& state, const Tensor<float>& x,
                         const std::vector<int>& labels, bool train_mode,
                         Tensor<float>* dlogits = nullptr);

struct StepSummary {
  double c_hat = 0.0;
  double loss = 0.0;
  bool surgery = false;
};

/// One prune-phase step: recompute masks, account FLOPs, either trigger
/// surgery (target met; no weight update) or take one SGD step on
/// {sparse weights, bypass weights, thresholds}.
StepSummary prune_step(TrainState& state, const Tensor<float>& x,
                       const std::vector<int>& labels);

/// One train-phase step on the compact network: cross-entropy plus
/// optimizer weight decay only.
StepSummary train_step(TrainState& state, const Tensor<float>& x,
                       const std::vector<int>& labels);

/// SGD with momentum; decay skipped for parameters flagged decay=false
/// (thresholds).
void sgd_update(std::vector<Param<float>*>& params, double lr, double momentum,
                double weight_decay);

struct RunSinks {
  std::function<void(int64_t, double)> on_c_hat;                // iteration, c_hat
  std::function<void(int, double)> on_accuracy;                 // epoch, top1 fraction
  std::function<void(int, double, double, double, double)> on_metrics;  // epoch, lr, loss, c_hat, top1
  std::function<void(TrainState&, const std::string&)> on_surgery;      // tag: pre|post
  std::function<void(TrainState&)> on_epoch_end;
};

struct RunResult {
  bool attained = false;
  double final_top1 = 0.0;
  double final_c_hat = 0.0;
  int surgery_epoch = -1;
  double closest_c_hat = -1.0;
  std::string failure;
};

/// Execute the full schedule: prune phase until the target compression rate
/// is met (hard failure if the prune epoch cap passes first), surgery, then
/// compact training for the remaining epochs.
RunResult run(TrainState& state, const Dataset& train, const Dataset& test,
              const RunSinks& sinks);

/// Versioned single-archive checkpoint: weights, momentum, normalization
/// statistics, thresholds, masks, counters and the data random stream, so a
/// resumed run reproduces the unbroken one under serial data order.
void checkpoint_save(const TrainState& state, const std::string& path);
TrainState checkpoint_load(const std::string& path);

}  // namespace lapp
