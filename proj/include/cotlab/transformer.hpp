#pragma once

// Small pre-norm decoder-only transformer with learned absolute positions,
// a pluggable attention-edge policy and a hidden-state injection hook.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cotlab/random.hpp"
#include "cotlab/roles.hpp"
#include "cotlab/tensor.hpp"
#include "json.hpp"

namespace cotlab {

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t heads = 4;
  std::size_t width = 128;
  std::size_t max_positions = 128;
  std::size_t vocab = 24;
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return width / heads; }
  std::size_t mlp_width() const { return 4 * width; }
  /// Throws std::invalid_argument on inconsistent sizes.
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

enum class ParamKind : std::uint8_t { Embedding, Norm, LinearWeight, Bias };

template <class T>
struct LayerOf {
  T ln1_g, ln1_b;
  T wq, bq, wk, bk, wv, bv, wo, bo;
  T ln2_g, ln2_b;
  T w1, b1, w2, b2;
};

template <class T>
struct WeightsOf {
  T tok_emb, pos_emb;
  std::vector<LayerOf<T>> layers;
  T lnf_g, lnf_b;
  T w_out, b_out;
};

/// Visits every parameter slot in canonical (checkpoint) order as
/// f(name, slot, kind). Works for any WeightsOf<T>.
template <class W, class F>
void visit_params(W& w, F&& f) {
  f(std::string("tok_emb"), w.tok_emb, ParamKind::Embedding);
  f(std::string("pos_emb"), w.pos_emb, ParamKind::Embedding);
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    auto& L = w.layers[l];
    const std::string p = "layers." + std::to_string(l) + ".";
    f(p + "ln1_g", L.ln1_g, ParamKind::Norm);
    f(p + "ln1_b", L.ln1_b, ParamKind::Norm);
    f(p + "wq", L.wq, ParamKind::LinearWeight);
    f(p + "bq", L.bq, ParamKind::Bias);
    f(p + "wk", L.wk, ParamKind::LinearWeight);
    f(p + "bk", L.bk, ParamKind::Bias);
    f(p + "wv", L.wv, ParamKind::LinearWeight);
    f(p + "bv", L.bv, ParamKind::Bias);
    f(p + "wo", L.wo, ParamKind::LinearWeight);
    f(p + "bo", L.bo, ParamKind::Bias);
    f(p + "ln2_g", L.ln2_g, ParamKind::Norm);
    f(p + "ln2_b", L.ln2_b, ParamKind::Norm);
    f(p + "w1", L.w1, ParamKind::LinearWeight);
    f(p + "b1", L.b1, ParamKind::Bias);
    f(p + "w2", L.w2, ParamKind::LinearWeight);
    f(p + "b2", L.b2, ParamKind::Bias);
  }
  f(std::string("lnf_g"), w.lnf_g, ParamKind::Norm);
  f(std::string("lnf_b"), w.lnf_b, ParamKind::Norm);
  f(std::string("w_out"), w.w_out, ParamKind::LinearWeight);
  f(std::string("b_out"), w.b_out, ParamKind::Bias);
}

using Weights = WeightsOf<Tensor>;
using WeightVars = WeightsOf<Var>;
/// One tensor per parameter, in visit_params order.
using ParamGrads = std::vector<Tensor>;

class Model {
 public:
  Model() = default;
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  const Weights& weights() const { return weights_; }
  Weights& weights() { return weights_; }

  /// Incremented by every optimizer step; rollouts remember the version they
  /// were sampled from.
  std::uint64_t version() const { return version_; }
  void bump_version() { ++version_; }

  std::size_t parameter_count() const;
  /// FNV-1a over the raw weight bytes.
  std::uint64_t checksum() const;
  ParamGrads zero_grads() const;

  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
  static Model load(const std::filesystem::path& path, nlohmann::json* extra = nullptr);

 private:
  ModelConfig config_;
  Weights weights_;
  std::uint64_t version_ = 0;
};

enum class AttentionMode : std::uint8_t { Full, BlockAnswerToPrompt, BlockAnswerToCot };

struct AttentionPolicy {
  AttentionMode mode = AttentionMode::Full;
  RoleSpans spans;

  static AttentionPolicy full() { return {}; }
};

/// Causal edges minus the edges the policy removes. BOS and delimiter keys
/// are never removed.
EdgeMask attention_allowed(const AttentionPolicy& policy, std::size_t length);

/// Adds `delta` (length x width) to the residual stream on `positions` after
/// block `layer - 1`; layer 0 is the embedding output.
struct InjectionHook {
  std::size_t layer = 0;
  RowMask positions;
  Tensor delta;
};

struct ForwardOptions {
  AttentionPolicy policy;
  const InjectionHook* hook = nullptr;
  /// Make the injection a differentiable leaf (FACT inner pass).
  bool hook_requires_grad = false;
  /// Gradient-mask edges: stop-gradient on these pre-softmax logits.
  const EdgeMask* gradient_block = nullptr;
  /// CoT-gradient rows: every linear map routes parameter gradient only
  /// through these rows.
  const RowMask* cot_rows = nullptr;
  /// Detach the input embedding into its own differentiable leaf so its
  /// gradient is available without parameter gradients.
  bool embeddings_require_grad = false;
  /// When set, receives post-softmax attention, layer-major then head.
  std::vector<Tensor>* attention_dump = nullptr;
};

struct ForwardPass {
  WeightVars params;
  /// Token + position embedding, the input e_t of the first block.
  Var embeddings;
  /// Injection leaf when a hook is present.
  Var injection;
  /// Row t scores token t + 1.
  Var logits;
};

WeightVars bind_params(Graph& g, const Weights& w, bool requires_grad);

ForwardPass forward(Graph& g, const Model& model, const Tokens& tokens,
                    const ForwardOptions& opts = {}, bool params_require_grad = false);

/// Untaped convenience wrapper.
Tensor forward_logits(const Model& model, const Tokens& tokens,
                      const AttentionPolicy& policy = AttentionPolicy::full());

/// Adds the gradients of `pass.params` into `acc`.
void accumulate_param_grads(ParamGrads& acc, const Gradients& grads, const ForwardPass& pass);

/// Mean teacher-forced NLL over the answer targets, on the tape.
Var answer_nll(Var logits, const Tokens& tokens, const RoleSpans& spans);
double answer_nll(const Model& model, const Tokens& tokens, const RoleSpans& spans,
                  const AttentionPolicy& policy);

/// KV-cached incremental decoder under full causal attention.
class Decoder {
 public:
  explicit Decoder(const Model& model);
  /// Appends a token and returns next-token logits.
  std::vector<double> push(TokenId token);
  std::size_t position() const { return pos_; }

 private:
  const Model* model_;
  std::size_t pos_ = 0;
  std::vector<std::vector<double>> keys_, values_;  // per layer, pos-major
};

struct SampleParams {
  double temperature = 0.7;
  double top_p = 0.9;
  std::size_t max_new = 48;
  std::uint64_t seed = 0;
};

struct SampleResult {
  Tokens tokens;  // prompt followed by generated tokens
  std::size_t prompt_length = 0;
  /// log pi(token) of each generated token under the untempered policy.
  std::vector<double> logprobs;
};

/// Autoregressive sampling; stops after EOS or max_new tokens. temperature
/// <= 0 is greedy argmax.
SampleResult sample(const Model& model, const Tokens& prompt, const SampleParams& params);

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::size_t warmup_steps = 10;
  /// Global-norm clip; <= 0 disables.
  double clip_norm = 1.0;
};

void to_json(nlohmann::json& j, const AdamWConfig& c);
void from_json(const nlohmann::json& j, AdamWConfig& c);

/// Decoupled weight decay Adam with constant rate after a linear warm-up.
/// Weight decay applies to linear weights only.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const Model& model, AdamWConfig cfg);

  /// Clips, applies one update and bumps the model version. Returns the
  /// pre-clip global gradient norm.
  double step(Model& model, ParamGrads grads);
  std::size_t steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }

 private:
  AdamWConfig cfg_;
  ParamGrads m_, v_;
  std::size_t t_ = 0;
};

double global_norm(const ParamGrads& grads);

/// Position of the first token after <think>: generated tokens start here.
std::size_t generation_start(const Tokens& tokens);

/// One cross-entropy step on all tokens after <think> (prompt excluded).
/// Returns the token-mean loss; an empty batch is a no-op returning 0.
double sft_step(Model& model, AdamW& opt, const std::vector<Tokens>& batch);

/// Token-mean SFT loss without updating.
double sft_loss(const Model& model, const std::vector<Tokens>& batch);

}  // namespace cotlab
