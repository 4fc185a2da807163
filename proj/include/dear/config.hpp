#pragma once

// Run configuration: one JSON document with strict validation. Unknown keys
// and wrongly typed values are ConfigErrors; unset keys take the defaults
// below.

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>

#include "dear/encoders.hpp"
#include "dear/fusion.hpp"
#include "dear/role_mask.hpp"
#include "dear/synthetic.hpp"

namespace dear {

struct LossConfig {
  double lambda_reg = kDefaultLambdaReg;
  double lambda_fusion = kDefaultLambdaFusion;
  double tau = kDefaultTau;
};

struct OptimConfig {
  double lr = 1e-3;
  double warmup_lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  int epochs = 10;
  int warmup_epochs = 1;
  std::size_t batch_size = 16;
  int fusion_freeze_epochs = 0;  // keep the fusion scalars fixed for this many epochs
};

/// Optional contrastive pretraining of the backbone on the synthetic factor
/// world before it is frozen. Zero steps keeps the seeded Gaussian backbone.
struct PretrainConfig {
  int steps = 0;
  std::size_t batch_size = 32;
  double lr = 1e-3;
  double noise = 0.5;
  double tau = 10.0;
};

struct AnalysisConfig {
  double q_low = 0.2;
  double q_high = 0.8;
  std::size_t min_cluster_size = 5;
  std::size_t min_samples = 5;
  bool exact_count = false;
  std::map<int, std::string> core_attribute_map;  // cluster id -> attribute label
  std::map<int, std::string> cluster_labels;      // optional names for the other clusters
};

enum class EvalMode { kFused, kDecoupled };
std::string mode_name(EvalMode m);
EvalMode mode_from_name(const std::string& name);

struct PathConfig {
  std::string phrases;
  std::string roles;
  std::string checkpoint = "checkpoint.bin";
  std::string metrics = "metrics.json";
};

struct RunConfig {
  ModelConfig model;
  PromptConfig prompt;
  LossConfig loss;
  OptimConfig optim;
  PretrainConfig pretrain;
  SyntheticTaskSpec task;
  AnalysisConfig analysis;
  std::uint64_t seed = 0;
  Ablation ablation = Ablation::kNone;
  EvalMode mode = EvalMode::kFused;
  PathConfig paths;

  /// Cross-field checks (model dims, task vs model shapes, optimizer ranges).
  void validate() const;
};

/// Parses and validates; ConfigError names the offending key.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const std::string& path);
/// Canonical JSON (sorted keys, two-space indent) of every resolved field.
std::string config_to_json(const RunConfig& cfg);

}  // namespace dear
