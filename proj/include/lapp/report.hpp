#pragma once

#include <string>
#include <utility>
#include <vector>

#include "lapp/surgery.hpp"

namespace lapp {

struct RunReport {
  SurgeryManifest manifest;
  double final_top1 = -1.0;  // fraction
  std::vector<std::pair<int64_t, double>> c_hat_trajectory;
  std::vector<std::pair<int, double>> accuracy_trajectory;
};

/// Population standard deviation of the per-module pruning rates.
double rate_stddev(const SurgeryManifest& m);

/// Gather run artifacts (manifest, metrics, trajectory series) from a run
/// directory; throws listing every missing artifact.
RunReport collect_report(const std::string& run_dir);

/// Text table in the shape of the per-layer pruning results plus the
/// FLOPs/params reduction summary.
std::string render_report(const RunReport& r);

void append_jsonl_metrics(const std::string& path, int epoch, double lr, double loss,
                          double c_hat, double top1);
void append_csv(const std::string& path, const std::string& header,
                const std::string& line);

}  // namespace lapp
