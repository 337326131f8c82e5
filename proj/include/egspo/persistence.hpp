#pragma once

/**
 * File formats: binary checkpoints, JSONL logs and dumps, JSON configs.
 * Schemas and one example line per record type live in FORMATS.md.
 *
 * Checkpoints are raw little-endian binary and round-trip bit-exactly.
 * JSONL records keep stable key order (insertion order) and full 64-bit
 * float precision, so identical runs produce byte-identical logs; readers
 * preserve unknown keys for forward compatibility.
 */

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "common.hpp"
#include "config.hpp"
#include "policy.hpp"
#include "rollout.hpp"
#include "tasks.hpp"

namespace egspo {

using ordered_json = nlohmann::ordered_json;

// ============================================================================
// Binary checkpoint
// ============================================================================

constexpr char kCheckpointMagic[8] = {'E', 'G', 'S', 'P', 'O', 'C', 'K', 'P'};
constexpr uint32_t kCheckpointVersion = 1;

/// Everything needed to resume training mid-run. The derived-stream RNG
/// scheme makes (master_seed, counters) the complete RNG state.
struct Checkpoint {
  PolicyConfig policy_cfg{};
  std::vector<double> params;
  AdamState opt{};
  uint64_t master_seed = 0;
  uint64_t config_hash = 0;
  int32_t stage = 0;         // 1 after stage 1, 3 during/after stage 3
  int64_t rounds_done = 0;   // completed stage-3 rounds
  int64_t step_counter = 0;  // next RunLog step index
};

namespace detail {

template <class T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void read_pod(std::ifstream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("checkpoint truncated");
}

inline void write_doubles(std::ofstream& out, const std::vector<double>& v) {
  write_pod(out, static_cast<uint64_t>(v.size()));
  out.write(reinterpret_cast<const char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
}

inline void read_doubles(std::ifstream& in, std::vector<double>& v) {
  uint64_t n = 0;
  read_pod(in, n);
  if (n > (1u << 28)) throw IoError("checkpoint corrupt: implausible array size");
  v.resize(n);
  in.read(reinterpret_cast<char*>(v.data()),
          static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw IoError("checkpoint truncated");
}

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  out.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::write_pod(out, kCheckpointVersion);
  detail::write_pod(out, ck.policy_cfg.vocab.size);
  detail::write_pod(out, ck.policy_cfg.vocab.bos);
  detail::write_pod(out, ck.policy_cfg.vocab.eos);
  detail::write_pod(out, ck.policy_cfg.vocab.pad);
  detail::write_pod(out, ck.policy_cfg.d_model);
  detail::write_pod(out, ck.policy_cfg.n_blocks);
  detail::write_pod(out, ck.policy_cfg.context_len);
  detail::write_pod(out, ck.policy_cfg.norm_eps);
  detail::write_doubles(out, ck.params);
  detail::write_pod(out, ck.opt.step);
  detail::write_pod(out, ck.opt.beta1);
  detail::write_pod(out, ck.opt.beta2);
  detail::write_pod(out, ck.opt.eps);
  detail::write_doubles(out, ck.opt.m);
  detail::write_doubles(out, ck.opt.v);
  detail::write_pod(out, ck.master_seed);
  detail::write_pod(out, ck.config_hash);
  detail::write_pod(out, ck.stage);
  detail::write_pod(out, ck.rounds_done);
  detail::write_pod(out, ck.step_counter);
  if (!out) throw IoError("checkpoint write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw IoError("not a checkpoint file: " + path.string());
  }
  uint32_t version = 0;
  detail::read_pod(in, version);
  if (version > kCheckpointVersion) {
    throw IoError("checkpoint version " + std::to_string(version) +
                  " is newer than supported " + std::to_string(kCheckpointVersion));
  }
  Checkpoint ck;
  detail::read_pod(in, ck.policy_cfg.vocab.size);
  detail::read_pod(in, ck.policy_cfg.vocab.bos);
  detail::read_pod(in, ck.policy_cfg.vocab.eos);
  detail::read_pod(in, ck.policy_cfg.vocab.pad);
  detail::read_pod(in, ck.policy_cfg.d_model);
  detail::read_pod(in, ck.policy_cfg.n_blocks);
  detail::read_pod(in, ck.policy_cfg.context_len);
  detail::read_pod(in, ck.policy_cfg.norm_eps);
  detail::read_doubles(in, ck.params);
  detail::read_pod(in, ck.opt.step);
  detail::read_pod(in, ck.opt.beta1);
  detail::read_pod(in, ck.opt.beta2);
  detail::read_pod(in, ck.opt.eps);
  detail::read_doubles(in, ck.opt.m);
  detail::read_doubles(in, ck.opt.v);
  detail::read_pod(in, ck.master_seed);
  detail::read_pod(in, ck.config_hash);
  detail::read_pod(in, ck.stage);
  detail::read_pod(in, ck.rounds_done);
  detail::read_pod(in, ck.step_counter);
  return ck;
}

// ============================================================================
// JSONL
// ============================================================================

inline void append_jsonl(const std::filesystem::path& path, const ordered_json& record) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot open for append: " + path.string());
  out << record.dump() << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

/// Parses every line; parse failures carry the 1-based line number.
inline std::vector<ordered_json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path.string());
  std::vector<ordered_json> records;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      records.push_back(ordered_json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("bad JSONL record: " + std::string(e.what()), line_no);
    }
  }
  return records;
}

// ============================================================================
// Rollout dump records
// ============================================================================

inline ordered_json trajectory_record(size_t prompt_id, const Trajectory& t) {
  ordered_json rec;
  rec["prompt_id"] = prompt_id;
  rec["prompt"] = t.prompt;
  rec["tokens"] = t.response;
  rec["old_logprobs"] = t.old_logprob;
  rec["entropies"] = t.entropy;
  rec["reward"] = t.reward.value;
  rec["advantage"] = t.advantage;
  return rec;
}

/// Validating inverse of trajectory_record; line_no feeds error reports.
inline Trajectory parse_trajectory_record(const ordered_json& rec, int64_t line_no) {
  auto fail = [&](const std::string& why) -> void {
    throw DataError("rollout record: " + why, line_no);
  };
  Trajectory t;
  try {
    t.prompt = rec.at("prompt").get<TokenSeq>();
    t.response = rec.at("tokens").get<TokenSeq>();
    t.old_logprob = rec.at("old_logprobs").get<std::vector<double>>();
    t.entropy = rec.at("entropies").get<std::vector<double>>();
    t.reward.value = rec.at("reward").get<int32_t>();
    t.advantage = rec.at("advantage").get<double>();
  } catch (const nlohmann::json::exception& e) {
    fail(e.what());
  }
  if (t.response.empty()) fail("empty token list");
  if (t.old_logprob.size() != t.response.size() ||
      t.entropy.size() != t.response.size()) {
    fail("per-token array length mismatch");
  }
  for (double h : t.entropy) {
    if (!(h >= 0.0)) fail("entropy out of range");
  }
  for (double lp : t.old_logprob) {
    if (!(lp < 0.0) || !std::isfinite(lp)) fail("log-prob out of range");
  }
  if (t.reward.value != 1 && t.reward.value != -1) fail("reward must be +1 or -1");
  if (!std::isfinite(t.advantage)) fail("advantage must be finite");
  return t;
}

/// Dataset inspection record: {prompt_text, expert_text, truth}.
inline ordered_json instance_record(const TaskInstance& inst) {
  ordered_json rec;
  rec["prompt_text"] = decode_text(inst.prompt);
  rec["expert_text"] = decode_text(inst.expert_response);
  rec["truth"] = inst.truth;
  return rec;
}

// ============================================================================
// Config files
// ============================================================================

namespace detail {

inline void require_known_keys(const ordered_json& obj, const char* section,
                               std::initializer_list<const char*> known) {
  for (const auto& [key, value] : obj.items()) {
    bool ok = false;
    for (const char* k : known) {
      if (key == k) ok = true;
    }
    if (!ok) {
      throw ConfigError(std::string("unknown config key: ") + section + "." + key);
    }
  }
}

template <class T>
void maybe(const ordered_json& obj, const char* key, T& into) {
  if (obj.contains(key)) into = obj.at(key).get<T>();
}

}  // namespace detail

inline ordered_json config_to_json(const TrainConfig& cfg) {
  ordered_json j;
  j["seed"] = cfg.seed;
  j["adv_eps"] = cfg.adv_eps;
  j["policy"] = {{"d_model", cfg.policy.d_model},
                 {"n_blocks", cfg.policy.n_blocks},
                 {"context_len", cfg.policy.context_len},
                 {"norm_eps", cfg.policy.norm_eps}};
  j["data"] = {{"dataset_seed", cfg.data.dataset_seed},
               {"n_instances", cfg.data.n_instances},
               {"min_digits", cfg.data.min_digits},
               {"max_digits", cfg.data.max_digits},
               {"holdout", cfg.data.holdout}};
  j["stage1"] = {{"epochs", cfg.stage1.epochs},
                 {"batch", cfg.stage1.batch},
                 {"lr", cfg.stage1.lr}};
  j["stage2"] = {{"group_size", cfg.stage2.group_size},
                 {"temperature", cfg.stage2.temperature},
                 {"max_len", cfg.stage2.max_len},
                 {"include_eos_token", cfg.stage2.include_eos_token}};
  j["stage3"] = {{"rounds", cfg.stage3.rounds},
                 {"prompts_per_round", cfg.stage3.prompts_per_round},
                 {"expert_fraction", cfg.stage3.expert_fraction},
                 {"inner_epochs", cfg.stage3.inner_epochs},
                 {"lr", cfg.stage3.lr},
                 {"kl_coeff", cfg.stage3.kl_coeff}};
  j["gate"] = {{"rho", cfg.gate.rho},
               {"clip_eps", cfg.gate.clip_eps},
               {"variant", variant_name(cfg.gate.variant)},
               {"phi_from_live_policy", cfg.gate.phi_from_live_policy}};
  return j;
}

/// Applies a JSON object over defaults; unknown keys are configuration errors.
inline TrainConfig config_from_json(const ordered_json& j) {
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  TrainConfig cfg;
  try {
    detail::require_known_keys(
        j, "", {"seed", "adv_eps", "policy", "data", "stage1", "stage2", "stage3", "gate"});
    detail::maybe(j, "seed", cfg.seed);
    detail::maybe(j, "adv_eps", cfg.adv_eps);
    if (j.contains("policy")) {
      const auto& p = j.at("policy");
      detail::require_known_keys(p, "policy",
                                 {"d_model", "n_blocks", "context_len", "norm_eps"});
      detail::maybe(p, "d_model", cfg.policy.d_model);
      detail::maybe(p, "n_blocks", cfg.policy.n_blocks);
      detail::maybe(p, "context_len", cfg.policy.context_len);
      detail::maybe(p, "norm_eps", cfg.policy.norm_eps);
    }
    if (j.contains("data")) {
      const auto& d = j.at("data");
      detail::require_known_keys(
          d, "data", {"dataset_seed", "n_instances", "min_digits", "max_digits", "holdout"});
      detail::maybe(d, "dataset_seed", cfg.data.dataset_seed);
      detail::maybe(d, "n_instances", cfg.data.n_instances);
      detail::maybe(d, "min_digits", cfg.data.min_digits);
      detail::maybe(d, "max_digits", cfg.data.max_digits);
      detail::maybe(d, "holdout", cfg.data.holdout);
    }
    if (j.contains("stage1")) {
      const auto& s = j.at("stage1");
      detail::require_known_keys(s, "stage1", {"epochs", "batch", "lr"});
      detail::maybe(s, "epochs", cfg.stage1.epochs);
      detail::maybe(s, "batch", cfg.stage1.batch);
      detail::maybe(s, "lr", cfg.stage1.lr);
    }
    if (j.contains("stage2")) {
      const auto& s = j.at("stage2");
      detail::require_known_keys(
          s, "stage2", {"group_size", "temperature", "max_len", "include_eos_token"});
      detail::maybe(s, "group_size", cfg.stage2.group_size);
      detail::maybe(s, "temperature", cfg.stage2.temperature);
      detail::maybe(s, "max_len", cfg.stage2.max_len);
      detail::maybe(s, "include_eos_token", cfg.stage2.include_eos_token);
    }
    if (j.contains("stage3")) {
      const auto& s = j.at("stage3");
      detail::require_known_keys(s, "stage3",
                                 {"rounds", "prompts_per_round", "expert_fraction",
                                  "inner_epochs", "lr", "kl_coeff"});
      detail::maybe(s, "rounds", cfg.stage3.rounds);
      detail::maybe(s, "prompts_per_round", cfg.stage3.prompts_per_round);
      detail::maybe(s, "expert_fraction", cfg.stage3.expert_fraction);
      detail::maybe(s, "inner_epochs", cfg.stage3.inner_epochs);
      detail::maybe(s, "lr", cfg.stage3.lr);
      detail::maybe(s, "kl_coeff", cfg.stage3.kl_coeff);
    }
    if (j.contains("gate")) {
      const auto& g = j.at("gate");
      detail::require_known_keys(g, "gate",
                                 {"rho", "clip_eps", "variant", "phi_from_live_policy"});
      detail::maybe(g, "rho", cfg.gate.rho);
      detail::maybe(g, "clip_eps", cfg.gate.clip_eps);
      if (g.contains("variant")) {
        cfg.gate.variant = variant_from_name(g.at("variant").get<std::string>());
      }
      detail::maybe(g, "phi_from_live_policy", cfg.gate.phi_from_live_policy);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config value error: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

inline TrainConfig read_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path.string());
  ordered_json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config parse error: " + std::string(e.what()));
  }
  return config_from_json(j);
}

inline void write_config(const std::filesystem::path& path, const TrainConfig& cfg) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open config for writing: " + path.string());
  out << config_to_json(cfg).dump(2) << '\n';
}

// ============================================================================
// Config hash
// ============================================================================

/// FNV-1a over the canonical JSON dump; rendered as hex in log records.
inline uint64_t config_hash(const TrainConfig& cfg) {
  const std::string s = config_to_json(cfg).dump();
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hash_hex(uint64_t h) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return s;
}

}  // namespace egspo
