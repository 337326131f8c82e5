#pragma once

/**
 * Training configuration. Defaults keep smoke runs fast; the tuned reference
 * setup ships as configs/reference.json. Every knob can be overridden from a
 * config file, and unknown keys are rejected at load time.
 */

#include <cstdint>

#include "common.hpp"
#include "gate.hpp"
#include "policy.hpp"

namespace egspo {

struct DataConfig {
  uint64_t dataset_seed = 9001;   // instance stream, independent of train seed
  int n_instances = 512;
  int min_digits = 2;
  int max_digits = 2;
  int holdout = 200;              // held-out probe set size
};

struct Stage1Config {
  int epochs = 30;
  int batch = 16;
  double lr = 1e-3;
};

struct Stage2Config {
  int group_size = 8;       // G responses per prompt
  double temperature = 1.0;
  int max_len = 40;
  // EOS positions are response tokens; flipping this drops a trailing EOS
  // from routing and loss while keeping it in the stored trajectory.
  bool include_eos_token = true;
};

struct Stage3Config {
  int rounds = 30;
  int prompts_per_round = 8;
  double expert_fraction = 0.2;   // of samples in each joint update
  int inner_epochs = 2;
  double lr = 3e-4;
  double kl_coeff = 0.0;          // optional penalty hook, off by default
};

struct TrainConfig {
  uint64_t seed = 1;
  PolicyConfig policy{};
  DataConfig data{};
  Stage1Config stage1{};
  Stage2Config stage2{};
  Stage3Config stage3{};
  GateConfig gate{};
  double adv_eps = 1e-4;

  void validate() const {
    policy.validate();
    gate.validate();
    if (data.n_instances < 2) throw ConfigError("n_instances must be >= 2");
    if (data.min_digits < 1 || data.max_digits > 3 ||
        data.min_digits > data.max_digits) {
      throw ConfigError("digit range must lie within [1, 3]");
    }
    if (data.holdout < 1) throw ConfigError("holdout must be >= 1");
    if (stage1.epochs < 0) throw ConfigError("stage1.epochs must be >= 0");
    if (stage1.batch < 1) throw ConfigError("stage1.batch must be >= 1");
    if (!(stage1.lr > 0.0)) throw ConfigError("stage1.lr must be positive");
    if (stage2.group_size < 2) throw ConfigError("stage2.group_size must be >= 2");
    if (!(stage2.temperature > 0.0)) throw ConfigError("temperature must be positive");
    if (stage2.max_len < 1) throw ConfigError("stage2.max_len must be >= 1");
    if (stage3.rounds < 0) throw ConfigError("stage3.rounds must be >= 0");
    if (stage3.prompts_per_round < 1) {
      throw ConfigError("stage3.prompts_per_round must be >= 1");
    }
    if (!(stage3.expert_fraction > 0.0) || !(stage3.expert_fraction < 1.0)) {
      throw ConfigError("expert_fraction must lie in (0, 1)");
    }
    if (stage3.inner_epochs < 1) throw ConfigError("inner_epochs must be >= 1");
    if (!(stage3.lr > 0.0)) throw ConfigError("stage3.lr must be positive");
    if (stage3.kl_coeff < 0.0) throw ConfigError("kl_coeff must be >= 0");
    if (!(adv_eps > 0.0)) throw ConfigError("adv_eps must be positive");
  }
};

}  // namespace egspo
