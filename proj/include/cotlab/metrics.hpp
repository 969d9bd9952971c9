#pragma once

// Faithfulness metrics over a single trace, the hint-perturbation score and
// the dataset-level diagnostics.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cotlab/random.hpp"
#include "cotlab/roles.hpp"
#include "cotlab/task.hpp"
#include "cotlab/transformer.hpp"
#include "json.hpp"

namespace cotlab {

struct FaithfulnessReport {
  double suff = 0.0;
  double kl_de = 0.0;
  double kl_nec = 0.0;
  double kl_de_ref = 0.0;
  double kl_nec_ref = 0.0;
  /// Absent when the answer loss sends no gradient to any role position.
  std::optional<double> grad_de;
  std::optional<double> grad_nec;
  std::optional<double> grad_ans;
  double h_full = 0.0;
};

void to_json(nlohmann::json& j, const FaithfulnessReport& r);
void from_json(const nlohmann::json& j, FaithfulnessReport& r);

/// Mean answer-row entropy of q when it sees only the CoT: prompt content is
/// replaced by PAD and answer queries cannot attend prompt positions.
double suff_entropy(const Tokens& trace, const RoleSpans& spans, const Model& q);

enum class KlKind : std::uint8_t { DirectEffect, Necessity };

/// Mean answer-row KL(full || blocked), where the blocked pass removes
/// answer-to-prompt (DirectEffect) or answer-to-CoT (Necessity) edges.
/// Pass the reference model for the _ref variants.
double masked_kl(const Tokens& trace, const RoleSpans& spans, const Model& model, KlKind kind);

struct GradFractions {
  double de = 0.0;
  double nec = 0.0;
  double ans = 0.0;
};

/// L2 norm of the answer-loss gradient at each position's input embedding
/// (token + position), summed per role. Delimiters are excluded.
std::optional<GradFractions> grad_fractions(const Tokens& trace, const RoleSpans& spans, const Model& model);
/// The per-position norms behind grad_fractions.
std::vector<double> embedding_grad_norms(const Tokens& trace, const RoleSpans& spans, const Model& model);

/// Mean answer-row entropy under full attention.
double answer_entropy(const Tokens& trace, const RoleSpans& spans, const Model& model);

/// All report fields for one trace; q is the frozen reference model.
FaithfulnessReport evaluate_trace(const Tokens& trace, const Model& p, const Model& q);

enum class HintPerturbation : std::uint8_t { SignFlip, Scale2x, Random };

const char* to_string(HintPerturbation p);
HintPerturbation hint_perturbation_from_string(const std::string& s);

struct CausalHintScore {
  double score = 0.0;
  double kl_prompt = 0.0;
  double kl_cot = 0.0;
  /// False when the CoT never states the hint; kl_cot is then 0.
  bool hint_in_cot = false;
  long new_value = 0;
};

/// Edits the hint value in the prompt only, then in the CoT only, and
/// compares answer distributions against the unedited trace:
/// (kl_cot - kl_prompt) / (kl_cot + kl_prompt), 0 when both vanish.
/// `support` is the answer range used by Random.
CausalHintScore causal_hint_score(const Tokens& trace, const RoleSpans& spans, const Model& p, long hint,
                                  HintPerturbation perturb, Rng& rng, const std::vector<long>& support);

/// Replaces token range `where` with `with`.
Tokens splice(const Tokens& tokens, Span where, const Tokens& with);

struct EntropyBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  std::optional<double> mean_kl_de;
  std::optional<double> mean_grad_de;
};

void to_json(nlohmann::json& j, const EntropyBin& b);

/// Equal-width bins over the observed h_full range.
std::vector<EntropyBin> entropy_binned_kl(const std::vector<FaithfulnessReport>& reports, std::size_t bins = 10);

/// Population standard deviation over mean; absent for empty input or zero mean.
std::optional<double> coefficient_of_variation(const std::vector<double>& values);

struct MannWhitney {
  /// U statistic of sample a: pairs with a > b, ties counted half.
  double u = 0.0;
  double p = 1.0;
  bool exact = false;
};

/// Two-sided test. Exact enumeration for n + m <= 12 without ties, else the
/// normal approximation with tie and continuity corrections.
MannWhitney mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b);

struct ReportRow {
  std::size_t example_id = 0;
  std::int64_t step = 0;
  FaithfulnessReport report;
};

std::string reports_jsonl(const std::vector<ReportRow>& rows);

}  // namespace cotlab
