#include <gtest/gtest.h>

#include <cmath>

#include "cotlab/metrics.hpp"
#include "support/finite_difference.hpp"
#include "support/reference_model.hpp"

namespace cotlab {
namespace {

const Vocab& V = Vocab::standard();

ModelConfig tiny(std::size_t layers = 2, std::uint64_t seed = 1) {
  ModelConfig c;
  c.layers = layers;
  c.heads = 2;
  c.width = 16;
  c.max_positions = 48;
  c.seed = seed;
  return c;
}

Model loud(ModelConfig c, double scale = 6.0) {
  Model m(c);
  visit_params(m.weights(), [&](const std::string&, Tensor& t, ParamKind k) {
    if (k == ParamKind::LinearWeight)
      for (double& v : t.data()) v *= scale;
  });
  return m;
}

Tokens trace(const char* text = "<bos>7*8*3#168<think>7*8*3 7*8=56 56*3=168</think><answer>168</answer><eos>") {
  return V.encode(text);
}

double uniform_rows_entropy(std::size_t vocab) { return std::log(static_cast<double>(vocab)); }

TEST(Suff, UniformReferenceGivesLogV) {
  ModelConfig c = tiny();
  c.vocab = 32;
  Model q(c);
  for (double& v : q.weights().w_out.data()) v = 0.0;
  const Tokens t = trace();
  EXPECT_NEAR(suff_entropy(t, segment(t), q), uniform_rows_entropy(32), 1e-12);
  EXPECT_NEAR(std::log(32.0), 3.4657, 1e-4);
}

TEST(Suff, DeterministicReferenceGivesZero) {
  Model q(tiny());
  for (double& v : q.weights().w_out.data()) v = 0.0;
  q.weights().b_out[tok::digit(5)] = 200.0;
  const Tokens t = trace();
  EXPECT_LT(suff_entropy(t, segment(t), q), 1e-60);
}

TEST(Suff, MatchesEnumerationOracle) {
  Model q = loud(tiny());
  const Tokens t = trace();
  const RoleSpans s = segment(t);
  Tokens blind = t;
  for (std::size_t i = s.prompt.begin; i < s.prompt.end; ++i) blind[i] = tok::kPad;
  const Tensor z = testing::naive_logits(q, blind, testing::oracle_edges(t, AttentionMode::BlockAnswerToPrompt));
  double total = 0.0;
  const Span rows = answer_target_rows(s);
  for (std::size_t r = rows.begin; r < rows.end; ++r) {
    double den = 0.0;
    for (std::size_t v = 0; v < z.cols(); ++v) den += std::exp(z.at(r, v));
    for (std::size_t v = 0; v < z.cols(); ++v) {
      const double p = std::exp(z.at(r, v)) / den;
      total -= p * std::log(p);
    }
  }
  const double want = total / static_cast<double>(rows.size());
  EXPECT_LT(std::abs(suff_entropy(t, s, q) - want) / want, 1e-10);
}

TEST(MaskedKl, EmptySpansGiveZero) {
  Model p = loud(tiny());
  const Tokens no_prompt = trace("<bos><think>7*8=56</think><answer>56</answer><eos>");
  EXPECT_EQ(masked_kl(no_prompt, segment(no_prompt), p, KlKind::DirectEffect), 0.0);
  const Tokens no_cot = trace("<bos>7*8#56<think></think><answer>56</answer><eos>");
  EXPECT_EQ(masked_kl(no_cot, segment(no_cot), p, KlKind::Necessity), 0.0);
}

TEST(MaskedKl, MatchesIndependentMaskOracle) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Model p = loud(tiny(2, seed));
    const Tokens t = trace();
    const RoleSpans s = segment(t);
    const Span rows = answer_target_rows(s);
    for (auto [kind, mode] : {std::pair{KlKind::DirectEffect, AttentionMode::BlockAnswerToPrompt},
                              std::pair{KlKind::Necessity, AttentionMode::BlockAnswerToCot}}) {
      const Tensor full = testing::naive_logits(p, t, testing::oracle_edges(t, AttentionMode::Full));
      const Tensor blocked = testing::naive_logits(p, t, testing::oracle_edges(t, mode));
      double total = 0.0;
      for (std::size_t r = rows.begin; r < rows.end; ++r) {
        double dp = 0.0, dq = 0.0;
        for (std::size_t v = 0; v < full.cols(); ++v) {
          dp += std::exp(full.at(r, v));
          dq += std::exp(blocked.at(r, v));
        }
        for (std::size_t v = 0; v < full.cols(); ++v) {
          const double pv = std::exp(full.at(r, v)) / dp, qv = std::exp(blocked.at(r, v)) / dq;
          total += pv * std::log(pv / qv);
        }
      }
      const double want = total / static_cast<double>(rows.size());
      const double got = masked_kl(t, s, p, kind);
      EXPECT_GT(want, 0.0);
      EXPECT_LT(std::abs(got - want) / want, 1e-8) << "seed " << seed;
    }
  }
}

TEST(MaskedKl, InvariantToTrailingPadding) {
  Model p = loud(tiny());
  const Tokens t = trace();
  Tokens padded = t;
  padded.insert(padded.end(), 4, tok::kPad);
  // Equal up to GEMM summation order on the longer sequence.
  const nlohmann::json a = evaluate_trace(t, p, p), b = evaluate_trace(padded, p, p);
  for (const auto& [key, value] : a.items()) {
    if (value.is_null()) {
      EXPECT_TRUE(b.at(key).is_null());
      continue;
    }
    const double x = value.get<double>(), y = b.at(key).get<double>();
    EXPECT_NEAR(x, y, 1e-12 * std::max(1.0, std::abs(x))) << key;
  }
}

TEST(GradFractions, PartitionSumsToOne) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Model p = loud(tiny(2, seed), 3.0);
    const Tokens t = trace();
    const auto f = grad_fractions(t, segment(t), p);
    ASSERT_TRUE(f.has_value());
    EXPECT_NEAR(f->de + f->nec + f->ans, 1.0, 1e-12);
    EXPECT_GE(f->de, 0.0);
    EXPECT_GE(f->nec, 0.0);
  }
}

TEST(GradFractions, SingleTokenAnswerHasNoAnswerMass) {
  Model p = loud(tiny(), 3.0);
  const Tokens t = trace("<bos>2*4#8<think>2*4=8</think><answer>8</answer><eos>");
  const auto f = grad_fractions(t, segment(t), p);
  ASSERT_TRUE(f.has_value());
  EXPECT_EQ(f->ans, 0.0);
  EXPECT_NEAR(f->de + f->nec, 1.0, 1e-12);
}

TEST(GradFractions, ZeroMassIsAbsent) {
  Model p(tiny());
  for (double& v : p.weights().w_out.data()) v = 0.0;
  const Tokens t = trace();
  EXPECT_FALSE(grad_fractions(t, segment(t), p).has_value());
}

TEST(GradFractions, NormsMatchFiniteDifferences) {
  Model p = loud(tiny(2, 3), 3.0);
  const Tokens t = trace();
  const RoleSpans s = segment(t);
  const std::vector<double> norms = embedding_grad_norms(t, s, p);
  // Perturb the position embedding row: its gradient is exactly the input
  // embedding gradient at that position.
  for (std::size_t pos : {2ul, 5ul, 12ul, 20ul}) {
    Tensor& pe = p.weights().pos_emb;
    std::vector<double> g(pe.cols());
    for (std::size_t c = 0; c < pe.cols(); ++c) {
      const double keep = pe.at(pos, c);
      pe.at(pos, c) = keep + 1e-5;
      const double up = answer_nll(p, t, s, AttentionPolicy::full());
      pe.at(pos, c) = keep - 1e-5;
      const double down = answer_nll(p, t, s, AttentionPolicy::full());
      pe.at(pos, c) = keep;
      g[c] = (up - down) / 2e-5;
    }
    double n = 0.0;
    for (double v : g) n += v * v;
    n = std::sqrt(n);
    EXPECT_NEAR(norms[pos], n, 0.05 * n + 1e-12) << "position " << pos;
  }
}

TEST(CausalHint, ScoreBoundaries) {
  Model p = loud(tiny());
  const Tokens t = trace();
  const RoleSpans s = segment(t);
  Rng rng(1);
  const auto support = answer_support(TaskConfig{});
  for (auto kind : {HintPerturbation::SignFlip, HintPerturbation::Scale2x, HintPerturbation::Random}) {
    const CausalHintScore c = causal_hint_score(t, s, p, 168, kind, rng, support);
    EXPECT_TRUE(c.hint_in_cot);
    EXPECT_GE(c.score, -1.0);
    EXPECT_LE(c.score, 1.0);
    EXPECT_NEAR(c.score, (c.kl_cot - c.kl_prompt) / (c.kl_cot + c.kl_prompt), 1e-12);
  }
  // Hint never stated in the CoT: the CoT edit is a no-op.
  const Tokens silent = trace("<bos>7*8*3#168<think>7*8*3</think><answer>168</answer><eos>");
  const CausalHintScore c = causal_hint_score(silent, segment(silent), p, 168, HintPerturbation::Scale2x, rng, support);
  EXPECT_FALSE(c.hint_in_cot);
  EXPECT_EQ(c.kl_cot, 0.0);
  EXPECT_EQ(c.score, -1.0);
  EXPECT_THROW(causal_hint_score(silent, segment(silent), p, 170, HintPerturbation::Scale2x, rng, support),
               std::invalid_argument);
}

TEST(CausalHint, PromptBlindModelIsCotDominant) {
  // Answer queries cannot see the prompt in the model below, so editing the
  // prompt hint can only move the answer through the CoT rows, which do not
  // change either; the score must be +1 when the CoT edit matters.
  Model p = loud(tiny());
  const Tokens t = trace("<bos>7*8*3#168<think>#168</think><answer>168</answer><eos>");
  const RoleSpans s = segment(t);
  Rng rng(2);
  const auto support = answer_support(TaskConfig{});
  const CausalHintScore c = causal_hint_score(t, s, p, 168, HintPerturbation::Scale2x, rng, support);
  EXPECT_GT(c.kl_cot, 0.0);
  EXPECT_GT(c.kl_prompt, 0.0);  // mediated through CoT keys
  EXPECT_NEAR(std::abs(c.score), std::abs((c.kl_cot - c.kl_prompt) / (c.kl_cot + c.kl_prompt)), 1e-12);
}

TEST(EntropyBins, Examples) {
  FaithfulnessReport r;
  r.h_full = 0.3;
  r.kl_de = 2.0;
  r.grad_de = 0.4;
  auto one = entropy_binned_kl({r});
  std::size_t occupied = 0;
  for (const auto& b : one) occupied += b.count > 0;
  EXPECT_EQ(occupied, 1u);

  std::vector<FaithfulnessReport> many;
  Rng rng(5);
  for (int i = 0; i < 200; ++i) {
    r.h_full = rng.uniform() * 3.0;
    many.push_back(r);
  }
  std::size_t total = 0;
  for (const auto& b : entropy_binned_kl(many)) {
    total += b.count;
    if (b.count) EXPECT_DOUBLE_EQ(*b.mean_kl_de, 2.0);
    else EXPECT_FALSE(b.mean_kl_de.has_value());
  }
  EXPECT_EQ(total, 200u);
}

TEST(CoefficientOfVariation, Basics) {
  EXPECT_EQ(*coefficient_of_variation({2.0, 2.0, 2.0}), 0.0);
  EXPECT_NEAR(*coefficient_of_variation({1.0, 3.0}), 0.5, 1e-15);
  EXPECT_FALSE(coefficient_of_variation({}).has_value());
}

// Enumerates every split of the pooled ranks.
double brute_force_p(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> pooled = a;
  pooled.insert(pooled.end(), b.begin(), b.end());
  const std::size_t N = pooled.size(), n = a.size();
  auto u_of = [&](unsigned mask) {
    double u = 0.0;
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j)
        if ((mask >> i & 1u) && !(mask >> j & 1u)) u += pooled[i] > pooled[j] ? 1.0 : 0.0;
    return u;
  };
  const double observed = u_of((1u << n) - 1u);
  const double center = static_cast<double>(n * (N - n)) / 2.0;
  double hits = 0.0, total = 0.0;
  for (unsigned mask = 0; mask < (1u << N); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != n) continue;
    total += 1.0;
    hits += std::abs(u_of(mask) - center) >= std::abs(observed - center) - 1e-12;
  }
  return hits / total;
}

TEST(MannWhitney, Examples) {
  const MannWhitney r = mann_whitney_u({1, 2, 3}, {4, 5, 6});
  EXPECT_EQ(r.u, 0.0);
  EXPECT_NEAR(r.p, 0.1, 1e-15);
  EXPECT_TRUE(r.exact);
  EXPECT_NEAR(brute_force_p({1, 2, 3}, {4, 5, 6}), 0.1, 1e-15);

  const MannWhitney same = mann_whitney_u({1, 2, 3, 4}, {1, 2, 3, 4});
  EXPECT_EQ(same.u, 8.0);
  EXPECT_GT(same.p, 0.9);

  const MannWhitney ab = mann_whitney_u({0.3, 1.7, 2.2, 5.0}, {0.1, 0.2, 4.0});
  const MannWhitney ba = mann_whitney_u({0.1, 0.2, 4.0}, {0.3, 1.7, 2.2, 5.0});
  EXPECT_EQ(ab.u, 12.0 - ba.u);
  EXPECT_EQ(ab.p, ba.p);
}

TEST(MannWhitney, ExactMatchesBruteForce) {
  Rng rng(12);
  for (int trial = 0; trial < 40; ++trial) {
    const std::size_t n = 1 + rng.below(6), m = 1 + rng.below(12 - n);
    std::vector<double> a(n), b(m);
    for (double& v : a) v = rng.normal();
    for (double& v : b) v = rng.normal() + 0.5;
    const MannWhitney r = mann_whitney_u(a, b);
    ASSERT_TRUE(r.exact);
    EXPECT_NEAR(r.p, std::min(1.0, brute_force_p(a, b)), 1e-12);
  }
}

TEST(MannWhitney, NormalApproximationSeparatesShiftedSamples) {
  Rng rng(13);
  std::vector<double> a(200), b(200);
  for (double& v : a) v = rng.normal();
  for (double& v : b) v = rng.normal() + 1.0;
  const MannWhitney r = mann_whitney_u(a, b);
  EXPECT_FALSE(r.exact);
  EXPECT_LT(r.p, 1e-10);
  EXPECT_LT(r.u, 200.0 * 200.0 / 2.0);
  // Heavy ties
  const MannWhitney t = mann_whitney_u(std::vector<double>(30, 1.0), std::vector<double>(30, 1.0));
  EXPECT_EQ(t.p, 1.0);
}

TEST(Reports, JsonlCarriesIdsAndAbsentFields) {
  FaithfulnessReport r;
  r.kl_de = 0.5;
  const std::string line = reports_jsonl({{7, 30, r}});
  const auto j = nlohmann::json::parse(line);
  EXPECT_EQ(j.at("example_id"), 7);
  EXPECT_EQ(j.at("step"), 30);
  EXPECT_TRUE(j.at("grad_de").is_null());
  EXPECT_EQ(j.get<FaithfulnessReport>().kl_de, 0.5);
}

TEST(Reports, ReferenceModelIsNotMutated) {
  Model p = loud(tiny());
  Model q = loud(tiny(2, 8));
  const std::uint64_t before = q.checksum();
  evaluate_trace(trace(), p, q);
  EXPECT_EQ(q.checksum(), before);
}

}  // namespace
}  // namespace cotlab
