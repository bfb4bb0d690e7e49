#include <cstdlib>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "lapp/controller.hpp"
#include "lapp/io_util.hpp"
#include "lapp/report.hpp"
#include "lapp/version.hpp"

namespace fs = std::filesystem;
using namespace lapp;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitNotAttained = 3;
constexpr int kExitArtifact = 4;

std::string env_data_dir() {
  const char* v = std::getenv("LAPP_DATA_DIR");
  return v ? v : "";
}

void write_resolved_config(const RunConfig& c, const std::string& path) {
  std::ostringstream os;
  os << "arch=" << c.arch_name << "\n"
     << "target-c=" << c.c_target << "\n"
     << "lambda1=" << c.lambda1 << "\n"
     << "lambda2=" << c.lambda2 << "\n"
     << "epochs=" << c.total_epochs << "\n"
     << "prune-epoch-cap=" << c.prune_epoch_cap << "\n"
     << "batch-size=" << c.batch_size << "\n"
     << "base-lr=" << c.base_lr << "\n"
     << "momentum=" << c.momentum << "\n"
     << "weight-decay=" << c.weight_decay << "\n"
     << "bypass=" << c.bypass_kind << "\n"
     << "uniform=" << (c.uniform ? 1 : 0) << "\n"
     << "seed=" << c.seed << "\n"
     << "data-dir=" << c.data_dir << "\n"
     << "out-dir=" << c.out_dir << "\n"
     << "train-subset=" << c.train_subset << "\n";
  write_file_atomic(path, os.str());
}

struct PruneArgs {
  RunConfig config;
  std::string profile = "desk";
  bool overwrite = false;
  bool lambda1_set = false;
  bool epochs_set = false;
  bool cap_set = false;
  std::string resume;
};

int run_prune(PruneArgs& a) {
  RunConfig& c = a.config;
  if (c.data_dir.empty()) c.data_dir = env_data_dir();
  if (c.data_dir.empty()) {
    std::cerr << "error: no data directory (use --data-dir or LAPP_DATA_DIR)\n";
    return kExitUsage;
  }
  if (c.out_dir.empty()) {
    std::cerr << "error: --out-dir is required\n";
    return kExitUsage;
  }
  if (a.profile == "paper") {
    if (!a.epochs_set) c.total_epochs = 400;
    if (!a.cap_set) c.prune_epoch_cap = 40;
  } else if (a.profile == "desk") {
    if (!a.epochs_set) c.total_epochs = 120;
    if (!a.cap_set) c.prune_epoch_cap = 40;
  } else {
    std::cerr << "error: unknown profile '" << a.profile << "' (desk or paper)\n";
    return kExitUsage;
  }
  if (!a.lambda1_set) c.lambda1 = RunConfig::default_lambda1(c.arch_name);
  c.validate();
  build_arch_spec(c.arch_name);  // rejects unknown names before any IO

  fs::create_directories(c.out_dir);
  const std::string final_ckpt = c.out_dir + "/final.ckpt";
  if (a.resume.empty()) {
    if (file_exists(final_ckpt) && !a.overwrite) {
      std::cout << "artifacts already present in " << c.out_dir
                << "; nothing to do (use --overwrite to redo)\n";
      return kExitOk;
    }
    if (a.overwrite) {
      for (const char* f :
           {"final.ckpt", "last.ckpt", "pre_surgery.ckpt", "post_surgery.ckpt",
            "surgery_manifest.json", "metrics.jsonl", "c_hat_trajectory.csv",
            "accuracy_trajectory.csv", "report.txt", "config.resolved"})
        fs::remove(c.out_dir + "/" + f);
    }
  }

  auto [train_full, test] = load_cifar10(c.data_dir);
  Dataset train = c.train_subset > 0 ? stratified_subset(train_full, c.train_subset)
                                     : std::move(train_full);
  std::cout << "train split: " << train.size() << "  test split: " << test.size() << "\n";

  TrainState st = a.resume.empty() ? init_run_state(c) : checkpoint_load(a.resume);
  if (!a.resume.empty()) {
    // the resumed run continues under its own recorded config except for paths
    st.config.data_dir = c.data_dir;
    st.config.out_dir = c.out_dir;
  }
  write_resolved_config(st.config, st.config.out_dir + "/config.resolved");

  const std::string out = st.config.out_dir;
  RunSinks sinks;
  sinks.on_c_hat = [&](int64_t iter, double c_hat) {
    append_csv(out + "/c_hat_trajectory.csv", "iteration,c_hat",
               std::to_string(iter) + "," + std::to_string(c_hat));
  };
  sinks.on_accuracy = [&](int epoch, double top1) {
    append_csv(out + "/accuracy_trajectory.csv", "epoch,top1",
               std::to_string(epoch) + "," + std::to_string(top1));
  };
  sinks.on_metrics = [&](int epoch, double lr, double loss, double c_hat, double top1) {
    append_jsonl_metrics(out + "/metrics.jsonl", epoch, lr, loss, c_hat, top1);
    std::cout << "epoch " << epoch << "  lr " << lr << "  loss " << loss << "  c_hat "
              << c_hat << "  top1 " << 100.0 * top1 << "%\n";
  };
  sinks.on_surgery = [&](TrainState& s, const std::string& tag) {
    checkpoint_save(s, out + "/" + tag + "_surgery.ckpt");
    if (tag == "post") {
      manifest_save(make_manifest(*s.net, s.config.c_target, s.epoch, s.iteration),
                    out + "/surgery_manifest.json");
      std::cout << "surgery at epoch " << s.epoch << ", iteration " << s.iteration
                << ", c_hat " << s.flops.c_hat() << "\n";
    }
  };
  sinks.on_epoch_end = [&](TrainState& s) {
    checkpoint_save(s, out + "/last.ckpt");
    if (s.phase == "train")
      append_csv(out + "/c_hat_trajectory.csv", "iteration,c_hat",
                 std::to_string(s.iteration) + "," + std::to_string(s.flops.c_hat()));
  };

  RunResult res = run(st, train, test, sinks);
  checkpoint_save(st, final_ckpt);
  if (!res.attained) {
    std::cerr << "FAILED: " << res.failure << "\n";
    return kExitNotAttained;
  }
  RunReport rep = collect_report(out);
  const std::string rendered = render_report(rep);
  write_file_atomic(out + "/report.txt", rendered);
  std::cout << rendered;
  return kExitOk;
}

int run_eval(const std::string& ckpt_path, std::string data_dir) {
  if (data_dir.empty()) data_dir = env_data_dir();
  if (data_dir.empty()) {
    std::cerr << "error: no data directory (use --data-dir or LAPP_DATA_DIR)\n";
    return kExitUsage;
  }
  TrainState st = checkpoint_load(ckpt_path);
  if (st.phase == "prune") {
    std::cerr << "error: checkpoint is pre-surgery; evaluation expects a compact network.\n"
              << "Resume the pruning run instead: lapp prune --resume " << ckpt_path << "\n";
    return kExitArtifact;
  }
  auto [train, test] = load_cifar10(data_dir);
  (void)train;
  const double top1 = evaluate(*st.net, test, st.config.channel_mean, st.config.channel_std);
  char buf[64];
  std::snprintf(buf, sizeof(buf), "top1=%.2f", 100.0 * top1);
  std::cout << buf << "\n";
  nlohmann::json j;
  j["checkpoint"] = ckpt_path;
  j["top1"] = top1;
  write_file_atomic(ckpt_path + ".eval.json", j.dump(2));
  return kExitOk;
}

int run_report(const std::string& run_dir) {
  RunReport rep = collect_report(run_dir);
  const std::string rendered = render_report(rep);
  write_file_atomic(run_dir + "/report.txt", rendered);
  std::cout << rendered;
  return kExitOk;
}

int run_check(const std::string& run_dir, std::string pre, std::string post,
              double tolerance, int samples) {
  if (pre.empty()) pre = run_dir + "/pre_surgery.ckpt";
  if (post.empty()) post = run_dir + "/post_surgery.ckpt";
  if (!file_exists(pre) || !file_exists(post)) {
    std::cerr << "error: need both surgery snapshots; missing "
              << (!file_exists(pre) ? pre : post) << "\n";
    return kExitArtifact;
  }
  TrainState a = checkpoint_load(pre);
  TrainState b = checkpoint_load(post);
  const double dev = equivalence_check(*a.net, *b.net, samples);
  const bool ok = dev <= tolerance;
  std::cout << (ok ? "PASS" : "FAIL") << " max_dev " << dev
            << (ok ? " <= " : " > ") << tolerance << "\n";
  return ok ? kExitOk : kExitArtifact;
}

int run_flops(const std::string& arch, const std::string& arch_doc,
              const std::string& export_path) {
  std::vector<LayerSpec> layers;
  if (!arch_doc.empty()) {
    layers = arch_document_read(read_file(arch_doc));
  } else {
    layers = build_arch_spec(arch).layers;
  }
  if (!export_path.empty()) {
    write_file_atomic(export_path, arch_document_write(layers));
    std::cout << "wrote " << export_path << "\n";
  }
  std::map<std::string, int64_t> full;
  for (const auto& l : layers)
    if (l.prunable) full[l.name] = l.c_out;
  std::cout << "layers: " << layers.size() << "\n";
  std::cout << "total flops: " << network_total_flops(layers) << "\n";
  std::cout << "total params: " << params_count(layers, full, {}) << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LAPP: layer adaptive progressive pruning"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  // prune
  auto* prune = app.add_subcommand("prune", "train from scratch with progressive pruning");
  PruneArgs pa;
  prune->set_config("--config", "", "flat key=value config file (flags win)");
  prune->add_option("--arch", pa.config.arch_name,
                    "architecture: resnet20|resnet32|resnet56|vgg16_cifar");
  prune->add_option("--target-c", pa.config.c_target, "target compression rate in (0,1)")
      ->check(CLI::Range(1e-9, 1.0 - 1e-9));
  auto* l1opt = prune->add_option("--lambda1", pa.config.lambda1, "l1 coefficient");
  prune->add_option("--lambda2", pa.config.lambda2, "FLOPs regularizer coefficient");
  auto* epochs_opt = prune->add_option("--epochs", pa.config.total_epochs, "total epochs");
  auto* cap_opt =
      prune->add_option("--prune-epoch-cap", pa.config.prune_epoch_cap, "prune phase budget");
  prune->add_option("--bypass", pa.config.bypass_kind, "bypass kind: v2|v1")
      ->check(CLI::IsMember({"v1", "v2"}));
  prune->add_flag("--uniform", pa.config.uniform, "uniform pruning baseline (no threshold learning)");
  prune->add_option("--seed", pa.config.seed, "random seed");
  prune->add_option("--batch-size", pa.config.batch_size, "mini-batch size");
  prune->add_option("--base-lr", pa.config.base_lr, "initial learning rate");
  prune->add_option("--momentum", pa.config.momentum, "SGD momentum");
  prune->add_option("--weight-decay", pa.config.weight_decay, "weight decay");
  prune->add_option("--data-dir", pa.config.data_dir, "CIFAR-10 binary directory");
  prune->add_option("--out-dir", pa.config.out_dir, "run artifact directory");
  prune->add_option("--train-subset", pa.config.train_subset,
                    "train on a stratified subset of this many images (0 = full)");
  prune->add_option("--profile", pa.profile, "desk (120 epochs) or paper (400 epochs)");
  prune->add_flag("--overwrite", pa.overwrite, "redo an existing run directory");
  prune->add_option("--resume", pa.resume, "resume from a checkpoint");

  // eval
  auto* eval = app.add_subcommand("eval", "top-1 accuracy of a compact checkpoint");
  std::string eval_ckpt, eval_data;
  eval->add_option("checkpoint", eval_ckpt, "post-surgery checkpoint")->required();
  eval->add_option("--data-dir", eval_data, "CIFAR-10 binary directory");

  // report
  auto* report = app.add_subcommand("report", "render the run report from artifacts");
  std::string report_dir;
  report->add_option("run_dir", report_dir, "run artifact directory")->required();

  // check
  auto* check = app.add_subcommand("check", "surgery equivalence verdict");
  std::string check_dir, check_pre, check_post;
  double check_tol = 1e-4;
  int check_samples = 64;
  check->add_option("run_dir", check_dir, "run directory with pre/post surgery snapshots");
  check->add_option("--pre", check_pre, "pre-surgery checkpoint");
  check->add_option("--post", check_post, "post-surgery checkpoint");
  check->add_option("--tolerance", check_tol, "max allowed logit deviation");
  check->add_option("--samples", check_samples, "random input count");

  // flops
  auto* flops = app.add_subcommand("flops", "FLOPs/params audit of an architecture");
  std::string flops_arch = "resnet20", flops_doc, flops_export;
  flops->add_option("--arch", flops_arch, "built-in architecture name");
  flops->add_option("--arch-doc", flops_doc, "architecture description document");
  flops->add_option("--export", flops_export, "write the architecture document here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (prune->parsed()) {
      pa.lambda1_set = l1opt->count() > 0;
      pa.epochs_set = epochs_opt->count() > 0;
      pa.cap_set = cap_opt->count() > 0;
      return run_prune(pa);
    }
    if (eval->parsed()) return run_eval(eval_ckpt, eval_data);
    if (report->parsed()) return run_report(report_dir);
    if (check->parsed()) return run_check(check_dir, check_pre, check_post, check_tol,
                                          check_samples);
    if (flops->parsed()) return run_flops(flops_arch, flops_doc, flops_export);
  } catch (const std::domain_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitArtifact;
  }
  return kExitUsage;
}
