#pragma once

// Update-time interventions. Each one changes only how the policy-gradient
// loss of an already sampled trace is differentiated.

#include <cstdint>
#include <functional>
#include <string>

#include "cotlab/intervention_ops.hpp"
#include "cotlab/transformer.hpp"
#include "json.hpp"

namespace cotlab {

enum class InterventionKind : std::uint8_t { None, UpdateMask, GradientMask, CotGradient, Fact };

const char* to_string(InterventionKind k);
InterventionKind intervention_from_string(const std::string& s);

struct InterventionConfig {
  InterventionKind kind = InterventionKind::None;
  double fact_epsilon = 0.05;
  std::size_t fact_layer = 0;

  void validate(const ModelConfig& model) const;
};

void to_json(nlohmann::json& j, const InterventionConfig& c);
void from_json(const nlohmann::json& j, InterventionConfig& c);

/// Answer queries lose their prompt keys; rollouts never use this.
AttentionPolicy update_mask_policy(const RoleSpans& spans);

/// Builds the scalar loss of one trace from its forward pass.
using TraceLoss = std::function<Var(const ForwardPass&)>;

/// epsilon * sign(dL/d delta) at delta = 0, on prompt rows of `layer`.
/// Returns an all-zero delta when the prompt is empty.
Tensor fact_delta(const Model& model, const Tokens& trace, const RoleSpans& spans, double epsilon,
                  std::size_t layer, const TraceLoss& loss);

/// Runs the update forward pass for one trace under `config`, adds the
/// parameter gradient of the loss into `grads` (when given) and returns the
/// loss value.
double apply_intervention(const InterventionConfig& config, const Model& model, const Tokens& trace,
                          const RoleSpans& spans, const TraceLoss& loss, ParamGrads* grads);

}  // namespace cotlab
