#include "cotlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <stdexcept>

#include "cotlab/intervention_ops.hpp"

namespace cotlab {

namespace {

nlohmann::json opt(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

std::optional<double> opt_from(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

std::span<const double> row(const Tensor& z, std::size_t r) { return {z.ptr() + r * z.cols(), z.cols()}; }

Span answer_rows_checked(const RoleSpans& spans, const char* who) {
  const Span rows = answer_target_rows(spans);
  if (rows.empty()) throw std::invalid_argument(std::string(who) + ": empty answer span");
  return rows;
}

double mean_row_entropy(const Tensor& z, Span rows) {
  double total = 0.0;
  for (std::size_t r = rows.begin; r < rows.end; ++r) total += entropy_from_logits(row(z, r));
  return total / static_cast<double>(rows.size());
}

/// Mean KL between answer rows of two logit tables whose answers may start
/// at different offsets.
double mean_row_kl(const Tensor& p, Span p_rows, const Tensor& q, Span q_rows) {
  if (p_rows.size() != q_rows.size()) throw std::invalid_argument("answer lengths differ");
  double total = 0.0;
  for (std::size_t k = 0; k < p_rows.size(); ++k) total += kl_from_logits(row(p, p_rows.begin + k), row(q, q_rows.begin + k));
  return total / static_cast<double>(p_rows.size());
}

}  // namespace

void to_json(nlohmann::json& j, const FaithfulnessReport& r) {
  j = {{"suff", r.suff},           {"kl_de", r.kl_de},           {"kl_nec", r.kl_nec},
       {"kl_de_ref", r.kl_de_ref}, {"kl_nec_ref", r.kl_nec_ref}, {"grad_de", opt(r.grad_de)},
       {"grad_nec", opt(r.grad_nec)}, {"grad_ans", opt(r.grad_ans)}, {"h_full", r.h_full}};
}

void from_json(const nlohmann::json& j, FaithfulnessReport& r) {
  r.suff = j.at("suff").get<double>();
  r.kl_de = j.at("kl_de").get<double>();
  r.kl_nec = j.at("kl_nec").get<double>();
  r.kl_de_ref = j.at("kl_de_ref").get<double>();
  r.kl_nec_ref = j.at("kl_nec_ref").get<double>();
  r.grad_de = opt_from(j, "grad_de");
  r.grad_nec = opt_from(j, "grad_nec");
  r.grad_ans = opt_from(j, "grad_ans");
  r.h_full = j.at("h_full").get<double>();
}

double suff_entropy(const Tokens& trace, const RoleSpans& spans, const Model& q) {
  const Span rows = answer_rows_checked(spans, "suff_entropy");
  Tokens blind = trace;
  for (std::size_t i = spans.prompt.begin; i < spans.prompt.end; ++i) blind[i] = tok::kPad;
  const Tensor z = forward_logits(q, blind, {AttentionMode::BlockAnswerToPrompt, spans});
  return mean_row_entropy(z, rows);
}

double masked_kl(const Tokens& trace, const RoleSpans& spans, const Model& model, KlKind kind) {
  const Span rows = answer_rows_checked(spans, "masked_kl");
  const Tensor full = forward_logits(model, trace);
  const AttentionMode mode =
      kind == KlKind::DirectEffect ? AttentionMode::BlockAnswerToPrompt : AttentionMode::BlockAnswerToCot;
  const Tensor blocked = forward_logits(model, trace, {mode, spans});
  return mean_row_kl(full, rows, blocked, rows);
}

double answer_entropy(const Tokens& trace, const RoleSpans& spans, const Model& model) {
  const Span rows = answer_rows_checked(spans, "answer_entropy");
  return mean_row_entropy(forward_logits(model, trace), rows);
}

std::vector<double> embedding_grad_norms(const Tokens& trace, const RoleSpans& spans, const Model& model) {
  Graph g;
  ForwardOptions o;
  o.embeddings_require_grad = true;
  ForwardPass pass = forward(g, model, trace, o, false);
  const Gradients grads = g.backward(answer_nll(pass.logits, trace, spans));
  const Tensor de = grads[pass.embeddings];
  std::vector<double> norms(trace.size(), 0.0);
  for (std::size_t t = 0; t < trace.size(); ++t) {
    double s = 0.0;
    for (double v : row(de, t)) s += v * v;
    norms[t] = std::sqrt(s);
  }
  return norms;
}

std::optional<GradFractions> grad_fractions(const Tokens& trace, const RoleSpans& spans, const Model& model) {
  const std::vector<double> g = embedding_grad_norms(trace, spans, model);
  auto mass = [&](Span s) {
    double total = 0.0;
    for (std::size_t t = s.begin; t < s.end; ++t) total += g[t];
    return total;
  };
  const double p = mass(spans.prompt), c = mass(spans.cot), a = mass(spans.answer);
  const double total = p + c + a;
  if (!(total > 0.0)) return std::nullopt;
  return GradFractions{p / total, c / total, a / total};
}

FaithfulnessReport evaluate_trace(const Tokens& trace, const Model& p, const Model& q) {
  const RoleSpans spans = segment(trace);
  FaithfulnessReport r;
  r.suff = suff_entropy(trace, spans, q);
  r.kl_de = masked_kl(trace, spans, p, KlKind::DirectEffect);
  r.kl_nec = masked_kl(trace, spans, p, KlKind::Necessity);
  r.kl_de_ref = masked_kl(trace, spans, q, KlKind::DirectEffect);
  r.kl_nec_ref = masked_kl(trace, spans, q, KlKind::Necessity);
  if (const auto f = grad_fractions(trace, spans, p)) {
    r.grad_de = f->de;
    r.grad_nec = f->nec;
    r.grad_ans = f->ans;
  }
  r.h_full = answer_entropy(trace, spans, p);
  return r;
}

// ---- causal hint perturbation -------------------------------------------------------

const char* to_string(HintPerturbation p) {
  switch (p) {
    case HintPerturbation::SignFlip: return "sign_flip";
    case HintPerturbation::Scale2x: return "scale_2x";
    case HintPerturbation::Random: return "random";
  }
  throw std::invalid_argument("unknown hint perturbation");
}

HintPerturbation hint_perturbation_from_string(const std::string& s) {
  for (auto p : {HintPerturbation::SignFlip, HintPerturbation::Scale2x, HintPerturbation::Random})
    if (s == to_string(p)) return p;
  throw std::invalid_argument("unknown hint perturbation '" + s + "'");
}

Tokens splice(const Tokens& tokens, Span where, const Tokens& with) {
  Tokens out(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(where.begin));
  out.insert(out.end(), with.begin(), with.end());
  out.insert(out.end(), tokens.begin() + static_cast<std::ptrdiff_t>(where.end), tokens.end());
  return out;
}

namespace {

long perturbed_value(long hint, HintPerturbation perturb, Rng& rng, const std::vector<long>& support) {
  switch (perturb) {
    case HintPerturbation::SignFlip: return -hint;
    case HintPerturbation::Scale2x: return 2 * hint;
    case HintPerturbation::Random: {
      std::vector<long> pool;
      for (long v : support)
        if (v != hint) pool.push_back(v);
      if (pool.empty()) throw std::invalid_argument("causal_hint_score: no alternative hint values");
      return pool[rng.below(pool.size())];
    }
  }
  throw std::invalid_argument("unknown hint perturbation");
}

/// Replaces the given ranges (ascending, disjoint) with `with`.
Tokens splice_all(const Tokens& tokens, const std::vector<Span>& where, const Tokens& with) {
  Tokens out = tokens;
  for (auto it = where.rbegin(); it != where.rend(); ++it) out = splice(out, *it, with);
  return out;
}

double edited_kl(const Model& p, const Tensor& base, Span base_rows, const Tokens& edited) {
  const RoleSpans s = segment(edited);
  return mean_row_kl(base, base_rows, forward_logits(p, edited), answer_target_rows(s));
}

}  // namespace

CausalHintScore causal_hint_score(const Tokens& trace, const RoleSpans& spans, const Model& p, long hint,
                                  HintPerturbation perturb, Rng& rng, const std::vector<long>& support) {
  const Span rows = answer_rows_checked(spans, "causal_hint_score");
  // The prompt hint is the number right after the marker.
  std::vector<Span> in_prompt;
  for (const Span& s : find_number(trace, spans.prompt, hint))
    if (s.begin > spans.prompt.begin && trace[s.begin - 1] == tok::kHint) in_prompt.push_back(s);
  if (in_prompt.empty()) throw std::invalid_argument("causal_hint_score: hint not found in prompt");
  const std::vector<Span> in_cot = find_number(trace, spans.cot, hint);

  CausalHintScore out;
  out.new_value = perturbed_value(hint, perturb, rng, support);
  const Tokens replacement = number_tokens(out.new_value);
  const Tensor base = forward_logits(p, trace);
  out.kl_prompt = edited_kl(p, base, rows, splice_all(trace, in_prompt, replacement));
  out.hint_in_cot = !in_cot.empty();
  if (out.hint_in_cot) out.kl_cot = edited_kl(p, base, rows, splice_all(trace, in_cot, replacement));
  const double den = std::abs(out.kl_cot) + std::abs(out.kl_prompt);
  out.score = den > 0.0 ? (std::abs(out.kl_cot) - std::abs(out.kl_prompt)) / den : 0.0;
  return out;
}

// ---- dataset diagnostics ------------------------------------------------------------

void to_json(nlohmann::json& j, const EntropyBin& b) {
  j = {{"h_lo", b.lo},
       {"h_hi", b.hi},
       {"count", b.count},
       {"mean_kl_de", opt(b.mean_kl_de)},
       {"mean_grad_de", opt(b.mean_grad_de)}};
}

std::vector<EntropyBin> entropy_binned_kl(const std::vector<FaithfulnessReport>& reports, std::size_t bins) {
  if (reports.empty()) throw std::invalid_argument("entropy_binned_kl: no reports");
  if (bins == 0) throw std::invalid_argument("entropy_binned_kl: zero bins");
  double lo = reports[0].h_full, hi = reports[0].h_full;
  for (const auto& r : reports) {
    lo = std::min(lo, r.h_full);
    hi = std::max(hi, r.h_full);
  }
  const double width = (hi - lo) / static_cast<double>(bins);
  std::vector<EntropyBin> out(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    out[b].lo = lo + width * static_cast<double>(b);
    out[b].hi = b + 1 == bins ? hi : lo + width * static_cast<double>(b + 1);
  }
  std::vector<double> kl_sum(bins, 0.0), grad_sum(bins, 0.0);
  std::vector<std::size_t> grad_n(bins, 0);
  for (const auto& r : reports) {
    std::size_t b = width > 0.0 ? static_cast<std::size_t>((r.h_full - lo) / width) : 0;
    b = std::min(b, bins - 1);
    ++out[b].count;
    kl_sum[b] += r.kl_de;
    if (r.grad_de) {
      grad_sum[b] += *r.grad_de;
      ++grad_n[b];
    }
  }
  for (std::size_t b = 0; b < bins; ++b) {
    if (out[b].count) out[b].mean_kl_de = kl_sum[b] / static_cast<double>(out[b].count);
    if (grad_n[b]) out[b].mean_grad_de = grad_sum[b] / static_cast<double>(grad_n[b]);
  }
  return out;
}

std::optional<double> coefficient_of_variation(const std::vector<double>& values) {
  if (values.empty()) return std::nullopt;
  const double n = static_cast<double>(values.size());
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (mean == 0.0) return std::nullopt;
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  return std::sqrt(var / n) / std::abs(mean);
}

namespace {

/// counts[u] = number of rank arrangements giving U = u for sizes n, m.
std::vector<double> u_distribution(std::size_t n, std::size_t m) {
  // f[i][j] is the distribution for i a-values and j b-values.
  std::vector<std::vector<std::vector<double>>> f(n + 1, std::vector<std::vector<double>>(m + 1));
  for (std::size_t i = 0; i <= n; ++i) {
    for (std::size_t j = 0; j <= m; ++j) {
      f[i][j].assign(i * j + 1, 0.0);
      if (i == 0 || j == 0) {
        f[i][j][0] = 1.0;
        continue;
      }
      // Largest value is an a (beats all j b's) or a b (adds nothing).
      for (std::size_t u = 0; u < f[i - 1][j].size(); ++u) f[i][j][u + j] += f[i - 1][j][u];
      for (std::size_t u = 0; u < f[i][j - 1].size(); ++u) f[i][j][u] += f[i][j - 1][u];
    }
  }
  return f[n][m];
}

double normal_sf(double z) { return 0.5 * std::erfc(z / std::sqrt(2.0)); }

}  // namespace

MannWhitney mann_whitney_u(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.empty() || b.empty()) throw std::invalid_argument("mann_whitney_u: empty sample");
  const std::size_t n = a.size(), m = b.size(), N = n + m;

  // Midranks over the pooled sample.
  std::vector<std::pair<double, bool>> pooled;
  pooled.reserve(N);
  for (double v : a) pooled.emplace_back(v, true);
  for (double v : b) pooled.emplace_back(v, false);
  std::sort(pooled.begin(), pooled.end(), [](const auto& x, const auto& y) { return x.first < y.first; });
  double rank_sum_a = 0.0, tie_term = 0.0;
  bool ties = false;
  for (std::size_t i = 0; i < N;) {
    std::size_t j = i;
    while (j < N && pooled[j].first == pooled[i].first) ++j;
    const double t = static_cast<double>(j - i);
    const double mid = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k)
      if (pooled[k].second) rank_sum_a += mid;
    if (t > 1) {
      ties = true;
      tie_term += t * t * t - t;
    }
    i = j;
  }
  const double dn = static_cast<double>(n), dm = static_cast<double>(m), dN = static_cast<double>(N);
  MannWhitney out;
  out.u = rank_sum_a - dn * (dn + 1.0) / 2.0;

  if (N <= 12 && !ties) {
    const std::vector<double> dist = u_distribution(n, m);
    const double total = std::accumulate(dist.begin(), dist.end(), 0.0);
    const auto u = static_cast<std::size_t>(std::llround(out.u));
    double lower = 0.0, upper = 0.0;
    for (std::size_t k = 0; k <= u; ++k) lower += dist[k];
    for (std::size_t k = u; k < dist.size(); ++k) upper += dist[k];
    out.p = std::min(1.0, 2.0 * std::min(lower, upper) / total);
    out.exact = true;
    return out;
  }

  const double mean = dn * dm / 2.0;
  const double var = dn * dm / 12.0 * ((dN + 1.0) - tie_term / (dN * (dN - 1.0)));
  if (!(var > 0.0)) {
    out.p = 1.0;
    return out;
  }
  const double z = std::max(0.0, std::abs(out.u - mean) - 0.5) / std::sqrt(var);
  out.p = std::min(1.0, 2.0 * normal_sf(z));
  return out;
}

std::string reports_jsonl(const std::vector<ReportRow>& rows) {
  std::string out;
  for (const ReportRow& r : rows) {
    nlohmann::json j = r.report;
    j["example_id"] = r.example_id;
    j["step"] = r.step;
    out += j.dump() + "\n";
  }
  return out;
}

}  // namespace cotlab
