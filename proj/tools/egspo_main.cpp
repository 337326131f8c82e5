/**
 * Command-line front end.
 *
 *   egspo train    --out DIR [--config PATH] [--seed N] [--variant V] [--rho F]
 *   egspo ablate   --out DIR [--config PATH] [--seed N]
 *   egspo audit    DUMP.jsonl [--variant V] [--rho F] [--seed N] [--out DIR]
 *   egspo export   RUN_DIR
 *   egspo selftest
 *
 * Exit codes: 0 success, 2 usage or configuration error, 3 training abort,
 * 4 malformed data. EGSPO_LOG={quiet,info,debug} controls stderr verbosity.
 */

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <unistd.h>

#include "egspo/audit.hpp"
#include "egspo/persistence.hpp"
#include "egspo/trainer.hpp"

namespace fs = std::filesystem;
using namespace egspo;

namespace {

// ============================================================================
// Logging
// ============================================================================

int verbosity() {
  const char* v = std::getenv("EGSPO_LOG");
  if (v == nullptr) return 1;
  const std::string s(v);
  if (s == "quiet") return 0;
  if (s == "debug") return 2;
  return 1;
}

void say(int level, const std::string& msg) {
  if (verbosity() >= level) std::cerr << "[egspo] " << msg << '\n';
}

// ============================================================================
// Shared helpers
// ============================================================================

/// Shortest round-trip decimal form, identical to the JSON encoding.
std::string num(double x) { return ordered_json(x).dump(); }

std::string csv_cell(const ordered_json& rec, const char* key) {
  if (!rec.contains(key) || rec.at(key).is_null()) return "";
  const ordered_json& v = rec.at(key);
  return v.is_string() ? v.get<std::string>() : v.dump();
}

struct Overrides {
  bool has_seed = false;
  uint64_t seed = 0;
  bool has_variant = false;
  std::string variant;
  bool has_rho = false;
  double rho = 0.0;
};

TrainConfig resolve_config(const std::string& config_path, const Overrides& ov) {
  TrainConfig cfg;
  if (!config_path.empty()) cfg = read_config(config_path);
  if (ov.has_seed) cfg.seed = ov.seed;
  if (ov.has_variant) cfg.gate.variant = variant_from_name(ov.variant);
  if (ov.has_rho) cfg.gate.rho = ov.rho;
  cfg.validate();
  return cfg;
}

// ============================================================================
// train
// ============================================================================

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const Overrides& ov, bool resume) {
  const TrainConfig cfg = resolve_config(config_path, ov);
  Trainer trainer(cfg, out_dir);
  say(1, std::string(resume ? "resuming" : "training") + " in " + out_dir +
             " (variant " + variant_name(cfg.gate.variant) + ", rho " +
             num(cfg.gate.rho) + ", seed " + std::to_string(cfg.seed) + ")");
  const double acc = resume ? trainer.resume() : trainer.run();
  say(1, "final holdout accuracy " + num(acc));
  return 0;
}

// ============================================================================
// ablate
// ============================================================================

/// Reads a finished cell's run directory and derives the audit columns.
struct CellMetrics {
  double direction_fraction = -1.0;  // -1 encodes "no eligible tokens"
  double overhead = 0.0;
};

CellMetrics cell_metrics(const Trainer& trainer, const TrainConfig& cfg) {
  const auto recs = read_jsonl(trainer.paths().runlog);
  int64_t n_low = 0, n_correct = 0;
  for (const auto& r : recs) {
    if (r.at("stage") != 3) continue;
    n_low += r.at("direction").at("n_low_neg_adv").get<int64_t>();
    n_correct += r.at("direction").at("n_correct").get<int64_t>();
  }

  // Overhead probe on the final round's trajectories under the final policy.
  std::vector<Trajectory> batch;
  {
    const auto dump = read_jsonl(trainer.paths().rollouts);
    int64_t last_round = -1;
    for (const auto& rec : dump) last_round = rec.at("round").get<int64_t>();
    int64_t line = 0;
    for (const auto& rec : dump) {
      ++line;
      if (rec.at("round").get<int64_t>() == last_round) {
        batch.push_back(parse_trajectory_record(rec, line));
      }
    }
  }
  CellMetrics m;
  if (n_low > 0) {
    m.direction_fraction =
        static_cast<double>(n_correct) / static_cast<double>(n_low);
  }
  const OverheadReport ov =
      measure_overhead(trainer.policy(), batch, cfg.gate, 5, cfg.seed);
  m.overhead = ov.overhead_fraction;
  return m;
}

int cmd_ablate(const std::string& config_path, const std::string& out_dir,
               const Overrides& ov) {
  TrainConfig base = resolve_config(config_path, ov);
  const uint64_t base_seed = base.seed;
  const GateVariant variants[] = {GateVariant::FULL_EGSPO, GateVariant::UNIFORM_PPO,
                                  GateVariant::NO_ADV_LOW_BRANCH,
                                  GateVariant::RANDOM_SELECTION};
  const double rhos[] = {0.05, 0.10, 0.20};
  constexpr int kSeeds = 5;

  fs::create_directories(out_dir);
  std::ofstream csv(fs::path(out_dir) / "ablation.csv", std::ios::trunc);
  if (!csv) throw IoError("cannot write ablation.csv in " + out_dir);
  csv << "variant,rho,seed,final_acc,direction_fraction,overhead\n";

  std::map<std::pair<std::string, double>, std::vector<double>> acc_by_cell;
  for (const GateVariant v : variants) {
    for (const double rho : rhos) {
      for (int s = 0; s < kSeeds; ++s) {
        TrainConfig cfg = base;
        cfg.gate.variant = v;
        cfg.gate.rho = rho;
        cfg.seed = base_seed + static_cast<uint64_t>(s);
        const std::string cell = std::string(variant_name(v)) + "_rho" + num(rho) +
                                 "_seed" + std::to_string(cfg.seed);
        csv << variant_name(v) << ',' << num(rho) << ',' << cfg.seed << ',';
        try {
          Trainer trainer(cfg, fs::path(out_dir) / cell);
          const double acc = trainer.run();
          const CellMetrics m = cell_metrics(trainer, cfg);
          csv << num(acc) << ','
              << (m.direction_fraction < 0.0 ? std::string("NA")
                                             : num(m.direction_fraction))
              << ',' << num(m.overhead) << '\n';
          acc_by_cell[{variant_name(v), rho}].push_back(acc);
          say(1, cell + ": acc " + num(acc));
        } catch (const std::exception& e) {
          csv << "NA,NA,NA\n";  // cell marked failed; sweep continues
          say(1, cell + " failed: " + e.what());
        }
        csv.flush();
      }
    }
  }

  // Companion mean/std table over the seeds that finished.
  std::ofstream sum(fs::path(out_dir) / "ablation_summary.csv", std::ios::trunc);
  sum << "variant,rho,n_ok,mean_acc,std_acc\n";
  for (const GateVariant v : variants) {
    for (const double rho : rhos) {
      const auto& accs = acc_by_cell[{variant_name(v), rho}];
      sum << variant_name(v) << ',' << num(rho) << ',' << accs.size() << ',';
      if (accs.empty()) {
        sum << "NA,NA\n";
        continue;
      }
      const double mean = kern::sum(accs.data(), static_cast<uint32_t>(accs.size())) /
                          static_cast<double>(accs.size());
      double var = 0.0;
      for (const double a : accs) var += (a - mean) * (a - mean);
      sum << num(mean) << ',';
      if (accs.size() < 2) {
        sum << "NA\n";
      } else {
        sum << num(std::sqrt(var / static_cast<double>(accs.size() - 1))) << '\n';
      }
    }
  }
  say(1, "ablation grid finished; tables in " + out_dir);
  return 0;
}

// ============================================================================
// audit
// ============================================================================

int cmd_audit(const std::string& dump_path, const std::string& out_dir,
              const Overrides& ov) {
  if (!fs::exists(dump_path)) throw ConfigError("rollout dump not found: " + dump_path);

  std::ifstream in(dump_path);
  if (!in) throw ConfigError("cannot open rollout dump: " + dump_path);
  std::vector<Trajectory> trajs;
  std::string line;
  uint64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    ordered_json rec;
    try {
      rec = ordered_json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw DataError("bad rollout dump record: " + std::string(e.what()), line_no);
    }
    trajs.push_back(parse_trajectory_record(rec, static_cast<int64_t>(line_no)));
  }
  if (trajs.empty()) throw DataError("rollout dump contains no records");

  GateConfig gate;
  if (ov.has_variant) gate.variant = variant_from_name(ov.variant);
  if (ov.has_rho) gate.rho = ov.rho;
  gate.validate();
  const uint64_t seed = ov.has_seed ? ov.seed : 0;

  RolloutGroup all;
  all.trajectories = trajs;
  const DirectionAudit da = audit_direction({all}, gate, seed);
  const EntropyReport er = entropy_report(trajs, gate, seed);
  const ordered_json report = audit_report_json(gate.variant, da, er);

  if (out_dir.empty()) {
    std::cout << report.dump(2) << '\n';
  } else {
    fs::create_directories(out_dir);
    std::ofstream out(fs::path(out_dir) / "audit.json", std::ios::trunc);
    if (!out) throw IoError("cannot write audit.json in " + out_dir);
    out << report.dump(2) << '\n';
    say(1, "audit written to " + (fs::path(out_dir) / "audit.json").string());
  }
  return 0;
}

// ============================================================================
// export
// ============================================================================

int cmd_export(const std::string& run_dir) {
  const fs::path runlog = fs::path(run_dir) / "runlog.jsonl";
  if (!fs::exists(runlog)) throw ConfigError("run log not found: " + runlog.string());
  const auto recs = read_jsonl(runlog);

  std::ofstream losses(fs::path(run_dir) / "losses.csv", std::ios::trunc);
  losses << "step,stage,phase_index,sft_loss,gated_loss,total_loss\n";
  std::ofstream acc(fs::path(run_dir) / "accuracy.csv", std::ios::trunc);
  acc << "step,stage,holdout_acc\n";
  std::ofstream gate(fs::path(run_dir) / "gate_stats.csv", std::ios::trunc);
  gate << "step,rho,variant,frac_high,mean_entropy_high,mean_entropy_low,"
          "mean_phi_low\n";

  for (const auto& r : recs) {
    const int stage = r.at("stage").get<int>();
    acc << csv_cell(r, "step") << ',' << stage << ',' << csv_cell(r, "holdout_acc")
        << '\n';
    if (stage == 1) {
      losses << csv_cell(r, "step") << ",1," << csv_cell(r, "epoch") << ','
             << csv_cell(r, "loss") << ",," << csv_cell(r, "loss") << '\n';
      continue;
    }
    const ordered_json& last = r.at("inner").back();  // post-step losses
    losses << csv_cell(r, "step") << ",3," << csv_cell(r, "round") << ','
           << csv_cell(last, "sft_loss") << ',' << csv_cell(last, "gated_loss") << ','
           << csv_cell(last, "total_loss") << '\n';
    gate << csv_cell(r, "step") << ',' << csv_cell(r, "rho") << ','
         << csv_cell(r, "variant") << ',' << csv_cell(r, "frac_high") << ','
         << csv_cell(r, "mean_entropy_high") << ',' << csv_cell(r, "mean_entropy_low")
         << ',' << csv_cell(r, "mean_phi_low") << '\n';
  }
  say(1, "exported losses.csv, accuracy.csv, gate_stats.csv to " + run_dir);
  return 0;
}

// ============================================================================
// selftest
// ============================================================================

int cmd_selftest() {
  const fs::path dir =
      fs::temp_directory_path() / ("egspo_selftest_" + std::to_string(::getpid()));
  fs::remove_all(dir);

  TrainConfig cfg;
  cfg.seed = 7;
  cfg.policy.d_model = 16;
  cfg.policy.context_len = 24;
  cfg.data.n_instances = 24;
  cfg.data.min_digits = 1;
  cfg.data.max_digits = 1;
  cfg.data.holdout = 12;
  cfg.stage1.epochs = 2;
  cfg.stage1.batch = 8;
  cfg.stage2.group_size = 4;
  cfg.stage2.max_len = 14;
  cfg.stage3.rounds = 1;
  cfg.stage3.prompts_per_round = 2;

  int failures = 0;
  auto check = [&](bool ok, const std::string& what) {
    std::cerr << (ok ? "  ok: " : "  FAIL: ") << what << '\n';
    if (!ok) ++failures;
  };

  try {
    Trainer trainer(cfg, dir);
    trainer.run();
    check(all_finite(trainer.policy().params()), "parameters finite after a round");
    check(fs::exists(dir / "summary.json"), "summary written");
    const auto recs = read_jsonl(dir / "runlog.jsonl");
    check(recs.size() == 3, "one record per epoch and round");
    bool direction_ok = true;
    for (const auto& r : recs) {
      if (r.at("stage") != 3) continue;
      const auto& frac = r.at("direction").at("fraction");
      direction_ok &= frac.is_null() || frac.get<double>() == 1.0;
    }
    check(direction_ok, "full gate never raises a negatively-advantaged token");
  } catch (const std::exception& e) {
    check(false, std::string("pipeline raised: ") + e.what());
  }
  fs::remove_all(dir);
  std::cerr << (failures == 0 ? "selftest ok" : "selftest FAILED") << '\n';
  return failures == 0 ? 0 : 1;
}

}  // namespace

// ============================================================================
// Entry point
// ============================================================================

int main(int argc, char** argv) {
  CLI::App app{"entropy-gated selective policy optimization"};
  app.require_subcommand(1);

  std::string config_path, out_dir, dump_path, run_dir;
  Overrides ov;
  bool resume = false;

  auto add_overrides = [&](CLI::App* sub, bool with_gate) {
    sub->add_option("--seed", ov.seed, "seed override")->each([&](const std::string&) {
      ov.has_seed = true;
    });
    if (!with_gate) return;
    sub->add_option("--variant", ov.variant,
                    "gate variant (FULL_EGSPO, UNIFORM_PPO, NO_ADV_LOW_BRANCH, "
                    "RANDOM_SELECTION)")
        ->each([&](const std::string&) { ov.has_variant = true; });
    sub->add_option("--rho", ov.rho, "fraction of tokens routed to the full branch")
        ->each([&](const std::string&) { ov.has_rho = true; });
  };

  CLI::App* train = app.add_subcommand("train", "run the three-stage pipeline");
  train->add_option("--config", config_path, "JSON config file");
  train->add_option("--out", out_dir, "output directory")->required();
  train->add_flag("--resume", resume, "continue from the checkpoint in --out");
  add_overrides(train, true);

  CLI::App* ablate = app.add_subcommand("ablate", "variant x rho x seed sweep");
  ablate->add_option("--config", config_path, "JSON base config file");
  ablate->add_option("--out", out_dir, "output directory")->required();
  add_overrides(ablate, false);

  CLI::App* audit = app.add_subcommand("audit", "offline gating and direction audit");
  audit->add_option("dump", dump_path, "rollout dump (JSONL)")->required();
  audit->add_option("--out", out_dir, "directory for audit.json (default: stdout)");
  add_overrides(audit, true);

  CLI::App* exp = app.add_subcommand("export", "CSV tables from a run directory");
  exp->add_option("run_dir", run_dir, "directory containing runlog.jsonl")->required();

  app.add_subcommand("selftest", "quick end-to-end smoke test");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (train->parsed()) return cmd_train(config_path, out_dir, ov, resume);
    if (ablate->parsed()) return cmd_ablate(config_path, out_dir, ov);
    if (audit->parsed()) return cmd_audit(dump_path, out_dir, ov);
    if (exp->parsed()) return cmd_export(run_dir);
    return cmd_selftest();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const TrainingAbort& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
