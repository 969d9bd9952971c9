#include "cotlab/interventions.hpp"

#include <stdexcept>

namespace cotlab {

const char* to_string(InterventionKind k) {
  switch (k) {
    case InterventionKind::None: return "none";
    case InterventionKind::UpdateMask: return "update_mask";
    case InterventionKind::GradientMask: return "gradient_mask";
    case InterventionKind::CotGradient: return "cot_gradient";
    case InterventionKind::Fact: return "fact";
  }
  throw std::invalid_argument("unknown intervention kind");
}

InterventionKind intervention_from_string(const std::string& s) {
  for (auto k : {InterventionKind::None, InterventionKind::UpdateMask, InterventionKind::GradientMask,
                 InterventionKind::CotGradient, InterventionKind::Fact}) {
    if (s == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown intervention '" + s + "'");
}

void InterventionConfig::validate(const ModelConfig& model) const {
  if (!(fact_epsilon >= 0.0)) throw std::invalid_argument("fact_epsilon must be >= 0");
  if (fact_layer > model.layers) throw std::invalid_argument("fact_layer exceeds model depth");
}

void to_json(nlohmann::json& j, const InterventionConfig& c) {
  j = {{"kind", to_string(c.kind)}, {"fact_epsilon", c.fact_epsilon}, {"fact_layer", c.fact_layer}};
}

void from_json(const nlohmann::json& j, InterventionConfig& c) {
  InterventionConfig d;
  c.kind = intervention_from_string(j.value("kind", std::string(to_string(d.kind))));
  c.fact_epsilon = j.value("fact_epsilon", d.fact_epsilon);
  c.fact_layer = j.value("fact_layer", d.fact_layer);
}

AttentionPolicy update_mask_policy(const RoleSpans& spans) {
  return {AttentionMode::BlockAnswerToPrompt, spans};
}

namespace {

double run(const Model& model, const Tokens& trace, const ForwardOptions& o, const TraceLoss& loss,
           ParamGrads* grads) {
  Graph g;
  ForwardPass pass = forward(g, model, trace, o, grads != nullptr);
  Var l = loss(pass);
  if (grads) accumulate_param_grads(*grads, g.backward(l), pass);
  return l.value().item();
}

}  // namespace

Tensor fact_delta(const Model& model, const Tokens& trace, const RoleSpans& spans, double epsilon,
                  std::size_t layer, const TraceLoss& loss) {
  const std::size_t T = trace.size(), d = model.config().width;
  Tensor delta = Tensor::matrix(T, d);
  if (spans.prompt.empty() || epsilon == 0.0) return delta;
  InjectionHook hook{layer, role_mask(spans, T, Role::Prompt), delta};
  ForwardOptions o;
  o.hook = &hook;
  o.hook_requires_grad = true;
  Graph g;
  ForwardPass pass = forward(g, model, trace, o, false);
  const Tensor grad = g.backward(loss(pass))[pass.injection];
  for (std::size_t i = 0; i < grad.size(); ++i) {
    delta[i] = grad[i] > 0.0 ? epsilon : (grad[i] < 0.0 ? -epsilon : 0.0);
  }
  return delta;
}

double apply_intervention(const InterventionConfig& config, const Model& model, const Tokens& trace,
                          const RoleSpans& spans, const TraceLoss& loss, ParamGrads* grads) {
  const std::size_t T = trace.size();
  ForwardOptions o;
  switch (config.kind) {
    case InterventionKind::None:
      return run(model, trace, o, loss, grads);
    case InterventionKind::UpdateMask:
      o.policy = update_mask_policy(spans);
      return run(model, trace, o, loss, grads);
    case InterventionKind::GradientMask: {
      const EdgeMask G = answer_to_prompt_edges(spans, T);
      o.gradient_block = &G;
      return run(model, trace, o, loss, grads);
    }
    case InterventionKind::CotGradient: {
      const RowMask m = role_mask(spans, T, Role::Cot);
      o.cot_rows = &m;
      return run(model, trace, o, loss, grads);
    }
    case InterventionKind::Fact: {
      if (spans.prompt.empty()) return run(model, trace, o, loss, grads);
      const InjectionHook hook{config.fact_layer, role_mask(spans, T, Role::Prompt),
                               fact_delta(model, trace, spans, config.fact_epsilon, config.fact_layer, loss)};
      o.hook = &hook;
      return run(model, trace, o, loss, grads);
    }
  }
  throw std::invalid_argument("unknown intervention kind");
}

}  // namespace cotlab
