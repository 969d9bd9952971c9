#include "cotlab/transformer.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "cotlab/intervention_ops.hpp"

namespace cotlab {

// ---- config -------------------------------------------------------------------

void ModelConfig::validate() const {
  if (layers == 0 || heads == 0 || width == 0 || max_positions == 0 || vocab == 0) {
    throw std::invalid_argument("model config: all sizes must be positive");
  }
  if (width % heads != 0) throw std::invalid_argument("model config: width must be divisible by heads");
  if (vocab < Vocab::standard().size()) {
    throw std::invalid_argument("model config: vocab smaller than the symbol table");
  }
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"layers", c.layers}, {"heads", c.heads},   {"width", c.width},
       {"max_positions", c.max_positions}, {"vocab", c.vocab}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.width = j.value("width", c.width);
  c.max_positions = j.value("max_positions", c.max_positions);
  c.vocab = j.value("vocab", c.vocab);
  c.seed = j.value("seed", c.seed);
}

void to_json(nlohmann::json& j, const AdamWConfig& c) {
  j = {{"lr", c.lr},
       {"beta1", c.beta1},
       {"beta2", c.beta2},
       {"eps", c.eps},
       {"weight_decay", c.weight_decay},
       {"warmup_steps", c.warmup_steps},
       {"clip_norm", c.clip_norm}};
}

void from_json(const nlohmann::json& j, AdamWConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.eps = j.value("eps", c.eps);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
}

// ---- model ----------------------------------------------------------------------

Model::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  Rng rng(config_.seed);
  const std::size_t d = config_.width, V = config_.vocab, F = config_.mlp_width();
  auto normal = [&](std::size_t r, std::size_t c, double stddev) {
    Tensor t = Tensor::matrix(r, c);
    for (double& v : t.data()) v = stddev * rng.normal();
    return t;
  };
  auto ones = [](std::size_t n) { return Tensor({n}, 1.0); };
  auto zeros = [](std::size_t n) { return Tensor({n}, 0.0); };

  const double residual_std = 0.02 / std::sqrt(2.0 * static_cast<double>(config_.layers));
  weights_.tok_emb = normal(V, d, 0.1);
  weights_.pos_emb = normal(config_.max_positions, d, 0.1);
  for (std::size_t l = 0; l < config_.layers; ++l) {
    LayerOf<Tensor> L;
    L.ln1_g = ones(d);
    L.ln1_b = zeros(d);
    L.wq = normal(d, d, 0.02);
    L.bq = zeros(d);
    L.wk = normal(d, d, 0.02);
    L.bk = zeros(d);
    L.wv = normal(d, d, 0.02);
    L.bv = zeros(d);
    L.wo = normal(d, d, residual_std);
    L.bo = zeros(d);
    L.ln2_g = ones(d);
    L.ln2_b = zeros(d);
    L.w1 = normal(d, F, 0.02);
    L.b1 = zeros(F);
    L.w2 = normal(F, d, residual_std);
    L.b2 = zeros(d);
    weights_.layers.push_back(std::move(L));
  }
  weights_.lnf_g = ones(d);
  weights_.lnf_b = zeros(d);
  weights_.w_out = normal(d, V, 0.02);
  weights_.b_out = zeros(V);
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  visit_params(weights_, [&](const std::string&, const Tensor& t, ParamKind) { n += t.size(); });
  return n;
}

std::uint64_t Model::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  visit_params(weights_, [&](const std::string&, const Tensor& t, ParamKind) {
    for (double v : t.data()) {
      const auto bits = std::bit_cast<std::uint64_t>(v);
      for (int b = 0; b < 8; ++b) {
        h ^= (bits >> (8 * b)) & 0xffU;
        h *= 0x100000001b3ULL;
      }
    }
  });
  return h;
}

ParamGrads Model::zero_grads() const {
  ParamGrads g;
  visit_params(weights_, [&](const std::string&, const Tensor& t, ParamKind) {
    g.emplace_back(t.shape(), 0.0);
  });
  return g;
}

namespace {

constexpr char kMagic[8] = {'C', 'O', 'T', 'L', 'A', 'B', 'C', 'K'};

void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xffU);
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw std::runtime_error("checkpoint truncated");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace

void Model::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  nlohmann::json header;
  header["format"] = 1;
  header["config"] = config_;
  header["version"] = version_;
  header["vocab"] = Vocab::standard().to_json();
  header["extra"] = extra.is_null() ? nlohmann::json::object() : extra;
  auto& index = header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  visit_params(weights_, [&](const std::string& name, const Tensor& t, ParamKind) {
    index.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}, {"count", t.size()}});
    offset += t.size();
  });
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write(kMagic, sizeof kMagic);
  write_u64(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  visit_params(weights_, [&](const std::string&, const Tensor& t, ParamKind) {
    for (double v : t.data()) write_u64(os, std::bit_cast<std::uint64_t>(v));
  });
  if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Model Model::load(const std::filesystem::path& path, nlohmann::json* extra) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw std::runtime_error("not a checkpoint: " + path.string());
  }
  const std::uint64_t len = read_u64(is);
  std::string text(len, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(len))) throw std::runtime_error("checkpoint truncated");
  const auto header = nlohmann::json::parse(text);
  Vocab::check_compatible(header.at("vocab"));

  Model m;
  m.config_ = header.at("config").get<ModelConfig>();
  m.config_.validate();
  m.version_ = header.value("version", std::uint64_t{0});
  Model shape_ref(m.config_);
  m.weights_ = shape_ref.weights_;
  const auto& index = header.at("tensors");
  std::size_t k = 0;
  visit_params(m.weights_, [&](const std::string& name, Tensor& t, ParamKind) {
    if (k >= index.size() || index[k].at("name") != name ||
        index[k].at("shape").get<std::vector<std::size_t>>() != t.shape()) {
      throw std::runtime_error("checkpoint tensor index mismatch at " + name);
    }
    for (double& v : t.data()) v = std::bit_cast<double>(read_u64(is));
    ++k;
  });
  if (extra) *extra = header.value("extra", nlohmann::json::object());
  return m;
}

// ---- forward ----------------------------------------------------------------------

EdgeMask attention_allowed(const AttentionPolicy& policy, std::size_t length) {
  EdgeMask allowed(length, length, false);
  for (std::size_t i = 0; i < length; ++i)
    for (std::size_t j = 0; j <= i; ++j) allowed.set(i, j, true);
  if (policy.mode == AttentionMode::Full) return allowed;

  const RoleSpans& s = policy.spans;
  if (s.prompt.end > length || s.cot.end > length || s.answer.end > length) {
    throw ShapeError("attention policy spans exceed sequence length");
  }
  const EdgeMask removed = policy.mode == AttentionMode::BlockAnswerToPrompt
                               ? answer_to_prompt_edges(s, length)
                               : answer_to_cot_edges(s, length);
  for (std::size_t k = 0; k < removed.bits.size(); ++k)
    if (removed.bits[k]) allowed.bits[k] = false;
  return allowed;
}

WeightVars bind_params(Graph& g, const Weights& w, bool requires_grad) {
  WeightVars out;
  out.layers.resize(w.layers.size());
  std::vector<Var*> slots;
  visit_params(out, [&](const std::string&, Var& v, ParamKind) { slots.push_back(&v); });
  std::size_t k = 0;
  visit_params(w, [&](const std::string&, const Tensor& t, ParamKind) {
    *slots[k++] = g.param(t, requires_grad);
  });
  return out;
}

ForwardPass forward(Graph& g, const Model& model, const Tokens& tokens, const ForwardOptions& o,
                    bool params_require_grad) {
  const ModelConfig& cfg = model.config();
  const std::size_t T = tokens.size();
  if (T == 0) throw ShapeError("forward: empty sequence");
  if (T > cfg.max_positions) {
    throw ShapeError("forward: sequence length " + std::to_string(T) + " exceeds " +
                     std::to_string(cfg.max_positions));
  }
  for (TokenId t : tokens)
    if (t >= cfg.vocab) throw ShapeError("forward: token id out of range");

  ForwardPass pass;
  pass.params = bind_params(g, model.weights(), params_require_grad);
  const WeightVars& P = pass.params;

  std::vector<std::size_t> positions(T);
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  Var x = add(gather_rows(P.tok_emb, tokens), gather_rows(P.pos_emb, positions));
  if (o.embeddings_require_grad && !params_require_grad) x = g.leaf(x.value(), true);
  pass.embeddings = x;

  if (o.hook) {
    const InjectionHook& h = *o.hook;
    if (h.layer > cfg.layers) throw ShapeError("injection layer out of range");
    if (h.positions.size() != T || h.delta.rows() != T || h.delta.cols() != cfg.width) {
      throw ShapeError("injection hook does not match sequence");
    }
    pass.injection = g.leaf(h.delta, o.hook_requires_grad);
  }
  auto inject = [&](std::size_t layer) {
    if (o.hook && o.hook->layer == layer) x = add(x, mask_rows(pass.injection, o.hook->positions));
  };
  auto lin = [&](Var in, Var w, Var b) {
    return o.cot_rows ? cot_gradient_linear(in, w, b, *o.cot_rows) : linear(in, w, b);
  };
  if (o.cot_rows && o.cot_rows->size() != T) throw ShapeError("cot row mask does not match sequence");
  if (o.gradient_block && (o.gradient_block->rows != T || o.gradient_block->cols != T)) {
    throw ShapeError("gradient-mask edge set does not match sequence");
  }

  const EdgeMask allowed = attention_allowed(o.policy, T);
  const std::size_t hd = cfg.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  inject(0);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const LayerOf<Var>& L = P.layers[l];
    Var h = layer_norm(x, L.ln1_g, L.ln1_b);
    Var q = lin(h, L.wq, L.bq);
    Var k = lin(h, L.wk, L.bk);
    Var v = lin(h, L.wv, L.bv);
    std::vector<Var> heads;
    heads.reserve(cfg.heads);
    for (std::size_t hh = 0; hh < cfg.heads; ++hh) {
      Var qh = slice_cols(q, hh * hd, hd);
      Var kh = slice_cols(k, hh * hd, hd);
      Var vh = slice_cols(v, hh * hd, hd);
      Var z = scale(matmul_nt(qh, kh), inv_sqrt);
      if (o.gradient_block) z = gradient_masked_attention(z, *o.gradient_block);
      Var a = masked_softmax(z, allowed);
      if (o.attention_dump) o.attention_dump->push_back(a.value());
      heads.push_back(matmul(a, vh));
    }
    x = add(x, lin(concat_cols(heads), L.wo, L.bo));
    Var h2 = layer_norm(x, L.ln2_g, L.ln2_b);
    x = add(x, lin(gelu(lin(h2, L.w1, L.b1)), L.w2, L.b2));
    inject(l + 1);
  }
  x = layer_norm(x, P.lnf_g, P.lnf_b);
  pass.logits = lin(x, P.w_out, P.b_out);
  return pass;
}

Tensor forward_logits(const Model& model, const Tokens& tokens, const AttentionPolicy& policy) {
  Graph g;
  ForwardOptions o;
  o.policy = policy;
  return forward(g, model, tokens, o, false).logits.value();
}

void accumulate_param_grads(ParamGrads& acc, const Gradients& grads, const ForwardPass& pass) {
  std::size_t k = 0;
  visit_params(pass.params, [&](const std::string&, const Var& v, ParamKind) {
    if (const Tensor* gt = grads.find(v)) {
      Tensor& a = acc[k];
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += (*gt)[i];
    }
    ++k;
  });
}

Var answer_nll(Var logits, const Tokens& tokens, const RoleSpans& spans) {
  const Span rows = answer_target_rows(spans);
  if (rows.empty()) throw std::invalid_argument("answer_nll: empty answer span");
  const std::size_t R = logits.value().rows();
  std::vector<std::size_t> index(R, 0);
  std::vector<double> weight(R, 0.0);
  for (std::size_t r = rows.begin; r < rows.end; ++r) {
    index[r] = tokens[r + 1];
    weight[r] = -1.0 / static_cast<double>(rows.size());
  }
  return weighted_sum(pick(log_softmax(logits), index), weight);
}

double answer_nll(const Model& model, const Tokens& tokens, const RoleSpans& spans,
                  const AttentionPolicy& policy) {
  Graph g;
  ForwardOptions o;
  o.policy = policy;
  return answer_nll(forward(g, model, tokens, o, false).logits, tokens, spans).value().item();
}

// ---- incremental decoding ----------------------------------------------------------

namespace {

using Vec = Eigen::VectorXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<const RowMat>;
using VecMap = Eigen::Map<const Vec>;

MatMap mat(const Tensor& t) {
  return MatMap(t.ptr(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols()));
}
VecMap vec(const Tensor& t) { return VecMap(t.ptr(), static_cast<Eigen::Index>(t.size())); }

Vec layer_norm_row(const Vec& x, const Tensor& g, const Tensor& b) {
  const double n = static_cast<double>(x.size());
  double mu = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) mu += x[i];
  mu /= n;
  double var = 0.0;
  for (Eigen::Index i = 0; i < x.size(); ++i) var += (x[i] - mu) * (x[i] - mu);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + 1e-5);
  Vec out(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) out[i] = g[i] * ((x[i] - mu) * inv) + b[i];
  return out;
}

Vec row_times(const Vec& x, const Tensor& w, const Tensor& b) {
  Vec out = mat(w).transpose() * x;
  out += vec(b);
  return out;
}

double gelu_scalar(double x) {
  constexpr double k = 0.7978845608028654;
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

}  // namespace

Decoder::Decoder(const Model& model)
    : model_(&model), keys_(model.config().layers), values_(model.config().layers) {}

std::vector<double> Decoder::push(TokenId token) {
  const ModelConfig& cfg = model_->config();
  const Weights& w = model_->weights();
  if (pos_ >= cfg.max_positions) throw ShapeError("decoder: exceeded max positions");
  if (token >= cfg.vocab) throw ShapeError("decoder: token id out of range");
  const std::size_t d = cfg.width, hd = cfg.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  Vec x(d);
  for (std::size_t c = 0; c < d; ++c) x[c] = w.tok_emb.at(token, c) + w.pos_emb.at(pos_, c);
  const std::size_t n = pos_ + 1;
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const LayerOf<Tensor>& L = w.layers[l];
    const Vec h = layer_norm_row(x, L.ln1_g, L.ln1_b);
    const Vec q = row_times(h, L.wq, L.bq);
    const Vec k = row_times(h, L.wk, L.bk);
    const Vec v = row_times(h, L.wv, L.bv);
    keys_[l].insert(keys_[l].end(), k.data(), k.data() + d);
    values_[l].insert(values_[l].end(), v.data(), v.data() + d);
    Vec att = Vec::Zero(static_cast<Eigen::Index>(d));
    std::vector<double> score(n);
    for (std::size_t hh = 0; hh < cfg.heads; ++hh) {
      const std::size_t off = hh * hd;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        const double* kj = keys_[l].data() + j * d + off;
        for (std::size_t c = 0; c < hd; ++c) s += q[static_cast<Eigen::Index>(off + c)] * kj[c];
        score[j] = s * inv_sqrt;
        mx = std::max(mx, score[j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        score[j] = std::exp(score[j] - mx);
        total += score[j];
      }
      for (std::size_t j = 0; j < n; ++j) {
        const double a = score[j] / total;
        const double* vj = values_[l].data() + j * d + off;
        for (std::size_t c = 0; c < hd; ++c) att[static_cast<Eigen::Index>(off + c)] += a * vj[c];
      }
    }
    x += row_times(att, L.wo, L.bo);
    const Vec h2 = layer_norm_row(x, L.ln2_g, L.ln2_b);
    Vec m = row_times(h2, L.w1, L.b1);
    for (Eigen::Index i = 0; i < m.size(); ++i) m[i] = gelu_scalar(m[i]);
    x += row_times(m, L.w2, L.b2);
  }
  const Vec out = row_times(layer_norm_row(x, w.lnf_g, w.lnf_b), w.w_out, w.b_out);
  ++pos_;
  std::vector<double> logits(out.data(), out.data() + out.size());
  for (double v : logits)
    if (!std::isfinite(v)) throw NumericError("decoder: non-finite logits");
  return logits;
}

namespace {

TokenId choose_token(const std::vector<double>& logits, const SampleParams& p, Rng& rng) {
  const std::size_t V = logits.size();
  if (p.temperature <= 0.0) {
    return static_cast<TokenId>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  std::vector<double> scaled(V);
  for (std::size_t i = 0; i < V; ++i) scaled[i] = logits[i] / p.temperature;
  const auto lp = log_softmax_row(scaled);
  std::vector<double> prob(V);
  for (std::size_t i = 0; i < V; ++i) prob[i] = std::exp(lp[i]);

  std::vector<std::size_t> order(V);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return prob[a] > prob[b]; });
  std::size_t keep = V;
  if (p.top_p < 1.0) {
    double cum = 0.0;
    for (std::size_t k = 0; k < V; ++k) {
      cum += prob[order[k]];
      if (cum >= p.top_p) {
        keep = k + 1;
        break;
      }
    }
  }
  double mass = 0.0;
  for (std::size_t k = 0; k < keep; ++k) mass += prob[order[k]];
  const double u = rng.uniform() * mass;
  double cum = 0.0;
  for (std::size_t k = 0; k < keep; ++k) {
    cum += prob[order[k]];
    if (u < cum) return order[k];
  }
  return order[keep - 1];
}

}  // namespace

SampleResult sample(const Model& model, const Tokens& prompt, const SampleParams& params) {
  const std::size_t s_max = model.config().max_positions;
  if (prompt.empty()) throw std::invalid_argument("sample: empty prompt");
  if (prompt.size() + params.max_new > s_max) {
    throw std::invalid_argument("sample: prompt + max_new exceeds max positions");
  }
  SampleResult out;
  out.tokens = prompt;
  out.prompt_length = prompt.size();
  Rng rng(params.seed);
  Decoder dec(model);
  std::vector<double> logits;
  for (TokenId t : prompt) logits = dec.push(t);
  for (std::size_t n = 0; n < params.max_new; ++n) {
    for (double z : logits)
      if (!std::isfinite(z)) throw NumericError("sample: non-finite logits");
    const TokenId next = choose_token(logits, params, rng);
    out.logprobs.push_back(log_softmax_row(logits)[next]);
    out.tokens.push_back(next);
    if (next == tok::kEos || n + 1 == params.max_new) break;
    logits = dec.push(next);
  }
  return out;
}

// ---- optimisation ------------------------------------------------------------------

double global_norm(const ParamGrads& grads) {
  double s = 0.0;
  for (const Tensor& g : grads)
    for (double v : g.data()) s += v * v;
  return std::sqrt(s);
}

AdamW::AdamW(const Model& model, AdamWConfig cfg)
    : cfg_(cfg), m_(model.zero_grads()), v_(model.zero_grads()) {}

double AdamW::step(Model& model, ParamGrads grads) {
  if (m_.empty()) {
    m_ = model.zero_grads();
    v_ = model.zero_grads();
  }
  if (grads.size() != m_.size()) throw ShapeError("AdamW: gradient count mismatch");
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw NumericError("AdamW: non-finite gradient norm");
  if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) {
    const double s = cfg_.clip_norm / norm;
    for (Tensor& g : grads)
      for (double& v : g.data()) v *= s;
  }
  ++t_;
  const double warm = cfg_.warmup_steps == 0
                          ? 1.0
                          : std::min(1.0, static_cast<double>(t_) / static_cast<double>(cfg_.warmup_steps));
  const double lr = cfg_.lr * warm;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  std::size_t k = 0;
  visit_params(model.weights(), [&](const std::string&, Tensor& w, ParamKind kind) {
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    const Tensor& g = grads[k];
    const double decay = kind == ParamKind::LinearWeight ? cfg_.weight_decay : 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      w[i] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) + decay * w[i]);
    }
    ++k;
  });
  model.bump_version();
  return norm;
}

std::size_t generation_start(const Tokens& tokens) {
  const auto it = std::find(tokens.begin(), tokens.end(), tok::kThinkOpen);
  if (it == tokens.end()) throw MalformedTrace("missing <think>");
  return static_cast<std::size_t>(it - tokens.begin()) + 1;
}

namespace {

/// Rows predicting generated, non-padding tokens.
std::vector<std::size_t> generated_target_rows(const Tokens& t) {
  std::vector<std::size_t> rows;
  for (std::size_t pos = generation_start(t); pos < t.size(); ++pos)
    if (t[pos] != tok::kPad) rows.push_back(pos - 1);
  return rows;
}

double sft_accumulate(const Model& model, const std::vector<Tokens>& batch, ParamGrads* grads) {
  std::size_t total = 0;
  for (const Tokens& t : batch) total += generated_target_rows(t).size();
  if (total == 0) return 0.0;
  double loss = 0.0;
  for (const Tokens& t : batch) {
    const auto rows = generated_target_rows(t);
    Graph g;
    ForwardPass pass = forward(g, model, t, {}, grads != nullptr);
    const std::size_t R = t.size();
    std::vector<std::size_t> index(R, 0);
    std::vector<double> weight(R, 0.0);
    for (std::size_t r : rows) {
      index[r] = t[r + 1];
      weight[r] = -1.0 / static_cast<double>(total);
    }
    Var l = weighted_sum(pick(log_softmax(pass.logits), index), weight);
    loss += l.value().item();
    if (grads) accumulate_param_grads(*grads, g.backward(l), pass);
  }
  return loss;
}

}  // namespace

double sft_step(Model& model, AdamW& opt, const std::vector<Tokens>& batch) {
  if (batch.empty()) return 0.0;
  ParamGrads grads = model.zero_grads();
  const double loss = sft_accumulate(model, batch, &grads);
  opt.step(model, std::move(grads));
  return loss;
}

double sft_loss(const Model& model, const std::vector<Tokens>& batch) {
  return sft_accumulate(model, batch, nullptr);
}

}  // namespace cotlab
