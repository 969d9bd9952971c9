#pragma once

// Group-relative REINFORCE on the hinted arithmetic task.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cotlab/interventions.hpp"
#include "cotlab/metrics.hpp"
#include "cotlab/task.hpp"
#include "cotlab/transformer.hpp"
#include "json.hpp"

namespace cotlab {

/// Rollouts were sampled from different weights than the ones being updated.
struct StaleRollout : std::logic_error {
  using std::logic_error::logic_error;
};

struct TrainConfig {
  std::size_t prompts_per_step = 64;
  std::size_t group_size = 4;
  std::size_t steps = 500;
  AdamWConfig optimizer{1e-4, 0.9, 0.999, 1e-8, 0.0, 10, 1.0};
  SampleParams decode{0.7, 0.9, 48, 0};
  /// PPO ratio clip with asymmetric bounds; off by default.
  bool clip = false;
  double clip_low = 0.2;
  double clip_high = 0.28;
  double kl_coef = 0.0;
  double entropy_coef = 0.0;
  /// Optimizer steps per rollout batch.
  std::size_t update_epochs = 1;
  InterventionConfig intervention;
  /// Probe evaluation interval and checkpoint interval, in steps.
  std::size_t probe_every = 10;
  std::size_t checkpoint_every = 50;
  /// Traces scored with the faithfulness metrics at each probe (<= probe set).
  std::size_t metric_probe_size = 64;
  std::uint64_t seed = 0;

  void validate(const ModelConfig& model) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct Rollout {
  Tokens tokens;
  std::size_t prompt_length = 0;
  /// Sampling-time log pi of each generated token.
  std::vector<double> old_logprobs;
  double reward = 0.0;
  double advantage = 0.0;
  bool well_formed = false;
};

struct RolloutGroup {
  std::size_t prompt_id = 0;
  std::uint64_t model_version = 0;
  std::vector<Rollout> traces;
};

/// (r - mean) / (population std + 1e-8); all zero when rewards are equal.
std::vector<double> group_advantages(const std::vector<double>& rewards);

/// K samples per example under full attention. Sample k of example i uses
/// seed mix(mix(base_seed, i), k), so rollouts depend only on the weights and
/// the seed.
std::vector<RolloutGroup> rollout(const Model& model, const std::vector<Example>& examples,
                                  const TrainConfig& cfg, std::uint64_t base_seed);

/// Sampled traces and rewards in a canonical text form, for byte comparison.
std::string rollout_fingerprint(const std::vector<RolloutGroup>& groups);

/// One JSON line per sampled trace.
std::string rollouts_jsonl(const std::vector<RolloutGroup>& groups, std::size_t step);

struct PolicyLoss {
  double loss = 0.0;
  std::size_t tokens = 0;
};

/// Token-mean over all generated tokens of -a * log pi (or the clipped
/// surrogate), plus the optional KL-to-reference and entropy terms, each
/// trace differentiated under the configured intervention. Accumulates into
/// `grads` when given. Throws StaleRollout unless the model version equals
/// group version + version_offset.
PolicyLoss policy_loss(const Model& model, const std::vector<RolloutGroup>& groups, const TrainConfig& cfg,
                       const Model* reference, ParamGrads* grads, std::uint64_t version_offset = 0);

struct ProbeSummary {
  BehavioralProbe behavior;
  /// Means over the metric subset; absent when no trace could be scored.
  std::optional<double> suff, kl_de, kl_nec, kl_de_ref, kl_nec_ref, grad_de, grad_nec, grad_ans, h_full;
  std::size_t metric_count = 0;
};

void to_json(nlohmann::json& j, const ProbeSummary& p);

/// Greedy decodes for each example.
std::vector<Tokens> greedy_decode(const Model& model, const std::vector<Example>& examples, std::size_t max_new);

/// Reports for every well-formed trace with a non-empty answer; ids index
/// into `traces`.
std::vector<ReportRow> score_traces(const std::vector<Tokens>& traces, const Model& p, const Model& q,
                                    std::size_t limit, std::int64_t step);

ProbeSummary summarize(const std::vector<Tokens>& traces, const std::vector<Example>& examples,
                       const std::vector<ReportRow>& reports);

struct TrainRow {
  std::size_t step = 0;
  double mean_reward = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double well_formed_rate = 0.0;
  double wall_seconds = 0.0;
  std::optional<ProbeSummary> probe;
};

void to_json(nlohmann::json& j, const TrainRow& r);

/// One GRPO step: sample prompts, roll out, score, update.
struct StepResult {
  std::vector<RolloutGroup> groups;
  double mean_reward = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double well_formed_rate = 0.0;
};

/// Prompts for a step; independent of weights and intervention.
std::vector<Example> step_prompts(const TaskConfig& task, const TrainConfig& cfg, std::size_t step);

StepResult train_step(Model& model, AdamW& opt, const TrainConfig& cfg, const TaskConfig& task,
                      std::size_t step, const Model* reference);

struct TrainerOutputs {
  /// JSONL trace, one row per step; empty path disables.
  std::filesystem::path trace_path;
  /// JSONL of every sampled trace with reward and advantage; empty disables.
  std::filesystem::path rollout_path;
  /// Directory for step-indexed checkpoints; empty disables.
  std::filesystem::path checkpoint_dir;
  /// Called after every step with the row just written.
  std::function<void(const TrainRow&)> on_step;
};

/// Runs cfg.steps GRPO steps. A fixed probe set is evaluated at step 0,
/// every probe_every steps and at the end. A NumericError stops training;
/// checkpoints already written stay intact and the error is rethrown.
std::vector<TrainRow> train(Model& model, const TrainConfig& cfg, const TaskConfig& task,
                            const std::vector<Example>& probe_set, const Model& reference,
                            const TrainerOutputs& out = {});

}  // namespace cotlab
