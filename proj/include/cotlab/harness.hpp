#pragma once

// Batch entry points: SFT warm start, RL training, evaluation, checkpoint
// comparison and plot-data emission. Every run writes into its own output
// directory together with a config echo and a manifest.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cotlab/grpo.hpp"
#include "cotlab/metrics.hpp"
#include "cotlab/task.hpp"
#include "cotlab/transformer.hpp"
#include "json.hpp"

namespace cotlab {

enum class RunMode : std::uint8_t { Sft, Rl, Eval, Compare };

const char* to_string(RunMode m);
RunMode run_mode_from_string(const std::string& s);

struct SftConfig {
  CorpusConfig corpus;
  std::size_t steps = 1500;
  std::size_t batch = 32;
  AdamWConfig optimizer{3e-3, 0.9, 0.999, 1e-8, 0.0, 20, 1.0};
};

void to_json(nlohmann::json& j, const SftConfig& c);
void from_json(const nlohmann::json& j, SftConfig& c);

struct RunConfig {
  RunMode mode = RunMode::Eval;
  /// Used by sft only; the other modes take the architecture from the checkpoint.
  ModelConfig model;
  TrainConfig train;
  TaskConfig task;
  SftConfig sft;
  /// rl: starting weights; eval: weights to score; compare: checkpoint a.
  std::filesystem::path checkpoint;
  /// Frozen reference q. Defaults to `checkpoint` for rl and eval, and to
  /// each compared model itself for compare.
  std::filesystem::path reference;
  /// compare: checkpoint b.
  std::filesystem::path checkpoint_b;
  std::filesystem::path output_dir;
  std::size_t probe_size = 512;
  std::uint64_t probe_seed = 0;
  /// Traces scored by eval/compare; 0 scores the whole probe set.
  std::size_t metric_limit = 0;
  std::size_t entropy_bins = 10;
  /// Run seed; required for sft and rl. Overrides model.seed and train.seed.
  std::optional<std::uint64_t> seed;

  /// Throws std::invalid_argument.
  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

/// FNV-1a of the canonical JSON dump.
std::uint64_t config_hash(const RunConfig& c);

/// Exit statuses of run().
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitInvalidConfig = 2;
inline constexpr int kExitNonFinite = 3;

/// Executes one run; errors are reported on stderr and mapped to an exit status.
int run(const RunConfig& config);

struct MetricComparison {
  std::string metric;
  double mean_a = 0.0;
  double mean_b = 0.0;
  std::size_t n_a = 0;
  std::size_t n_b = 0;
  MannWhitney test;
  /// "lower" or "higher": where a faithful checkpoint a should sit relative to b.
  std::string faithful_direction;
  /// Absent for metrics whose direction is not asserted.
  std::optional<bool> direction_ok;
};

void to_json(nlohmann::json& j, const MetricComparison& m);

struct CompareReport {
  std::size_t probe_size = 0;
  double alpha = 0.05;
  BehavioralProbe behavior_a;
  BehavioralProbe behavior_b;
  std::vector<MetricComparison> metrics;

  const MetricComparison& at(const std::string& metric) const;
};

void to_json(nlohmann::json& j, const CompareReport& r);

/// Greedy traces of both models on the same probe set, scored and tested
/// metric by metric. direction_ok holds when the mean sits on the faithful
/// side and p < alpha.
CompareReport compare_models(const Model& a, const Model& b, const Model& ref_a, const Model& ref_b,
                             const std::vector<Example>& probe, std::size_t metric_limit, std::size_t max_new,
                             double alpha = 0.05);

struct EvalResult {
  std::vector<Tokens> traces;
  std::vector<ReportRow> reports;
  BehavioralProbe behavior;
  std::vector<EntropyBin> bins;
};

EvalResult evaluate_model(const Model& model, const Model& reference, const std::vector<Example>& probe,
                          std::size_t metric_limit, std::size_t max_new, std::size_t bins);

/// One labelled TrainTrace JSONL file.
struct TraceSource {
  std::string label;
  std::filesystem::path path;
};

/// Writes one CSV per figure panel (step column, one column per source) and
/// a schema.json describing the columns. Steps without a probe are left out;
/// a source without a value at a step gets an empty cell. Returns the files
/// written.
std::vector<std::filesystem::path> emit_plot_data(const std::vector<TraceSource>& sources,
                                                  const std::filesystem::path& output_dir);

/// emit_plot_data plus a manifest; returns an exit status like run().
int run_plots(const std::vector<TraceSource>& sources, const std::filesystem::path& output_dir);

}  // namespace cotlab
