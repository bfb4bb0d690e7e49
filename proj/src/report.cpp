#include "lapp/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "lapp/io_util.hpp"

namespace lapp {

using nlohmann::json;

double rate_stddev(const SurgeryManifest& m) {
  if (m.modules.empty()) return 0.0;
  double mean = 0.0;
  for (const auto& e : m.modules) mean += e.rate;
  mean /= static_cast<double>(m.modules.size());
  double var = 0.0;
  for (const auto& e : m.modules) var += (e.rate - mean) * (e.rate - mean);
  return std::sqrt(var / static_cast<double>(m.modules.size()));
}

RunReport collect_report(const std::string& run_dir) {
  const std::string manifest_path = run_dir + "/surgery_manifest.json";
  const std::string metrics_path = run_dir + "/metrics.jsonl";
  const std::string chat_path = run_dir + "/c_hat_trajectory.csv";
  const std::string acc_path = run_dir + "/accuracy_trajectory.csv";
  std::vector<std::string> missing;
  for (const auto& p : {manifest_path, metrics_path, chat_path, acc_path})
    if (!file_exists(p)) missing.push_back(p);
  if (!missing.empty()) {
    std::string msg = "incomplete run directory, missing:";
    for (const auto& p : missing) msg += "\n  " + p;
    throw std::runtime_error(msg);
  }

  RunReport r;
  r.manifest = manifest_load(manifest_path);

  std::istringstream metrics(read_file(metrics_path));
  std::string line;
  while (std::getline(metrics, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    r.final_top1 = j.at("top1").get<double>();
  }

  const auto read_series = [](const std::string& path, auto push) {
    std::istringstream is(read_file(path));
    std::string l;
    bool first = true;
    while (std::getline(is, l)) {
      if (first) {  // header
        first = false;
        continue;
      }
      if (l.empty()) continue;
      const size_t comma = l.find(',');
      if (comma == std::string::npos) continue;
      push(l.substr(0, comma), l.substr(comma + 1));
    }
  };
  read_series(chat_path, [&](const std::string& a, const std::string& b) {
    r.c_hat_trajectory.emplace_back(std::stoll(a), std::stod(b));
  });
  read_series(acc_path, [&](const std::string& a, const std::string& b) {
    r.accuracy_trajectory.emplace_back(std::stoi(a), std::stod(b));
  });
  return r;
}

std::string render_report(const RunReport& r) {
  const SurgeryManifest& m = r.manifest;
  std::ostringstream os;
  os << "run report: " << m.arch << "  (target C = " << m.c_target
     << ", bypass " << m.bypass << ")\n\n";
  os << std::left << std::setw(16) << "layer" << std::right << std::setw(8) << "c"
     << std::setw(8) << "n" << std::setw(10) << "p" << std::setw(8) << "d" << "\n";
  os << std::string(50, '-') << "\n";
  for (const auto& e : m.modules) {
    os << std::left << std::setw(16) << e.name << std::right << std::setw(8) << e.c_out
       << std::setw(8) << e.kept << std::setw(10) << std::fixed << std::setprecision(3)
       << e.rate << std::setw(8) << e.d << "\n";
  }
  os << "\n";
  const double flops_down =
      100.0 * (1.0 - static_cast<double>(m.t_kept) / static_cast<double>(m.t_total));
  const double params_down =
      100.0 * (1.0 - static_cast<double>(m.params_after) / static_cast<double>(m.params_before));
  os << "flops:  " << m.t_total << " -> " << m.t_kept << "   (down "
     << std::setprecision(1) << flops_down << "%)\n";
  os << "params: " << m.params_before << " -> " << m.params_after << "   (down "
     << params_down << "%)\n";
  os << "surgery epoch: " << m.surgery_epoch << " (iteration " << m.surgery_iteration
     << ")\n";
  if (r.final_top1 >= 0.0)
    os << "final top-1: " << std::setprecision(2) << 100.0 * r.final_top1 << "%\n";
  const double sd = rate_stddev(m);
  os << "rate std: " << std::setprecision(4) << sd
     << "  layer-adaptive: " << (sd > 0.0 ? "yes" : "no") << "\n";
  if (!r.c_hat_trajectory.empty()) {
    os << "c_hat: start " << std::setprecision(4) << r.c_hat_trajectory.front().second
       << " -> final " << r.c_hat_trajectory.back().second << " over "
       << r.c_hat_trajectory.size() << " records\n";
  }
  return os.str();
}

void append_jsonl_metrics(const std::string& path, int epoch, double lr, double loss,
                          double c_hat, double top1) {
  json j;
  j["epoch"] = epoch;
  j["lr"] = lr;
  j["loss"] = loss;
  j["c_hat"] = c_hat;
  j["top1"] = top1;
  std::ofstream f(path, std::ios::app);
  if (!f) throw std::runtime_error("cannot append to " + path);
  f << j.dump() << "\n";
}

void append_csv(const std::string& path, const std::string& header,
                const std::string& line) {
  const bool fresh = !file_exists(path);
  std::ofstream f(path, std::ios::app);
  if (!f) throw std::runtime_error("cannot append to " + path);
  if (fresh) f << header << "\n";
  f << line << "\n";
}

}  // namespace lapp
