#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "cotlab/intervention_ops.hpp"
#include "cotlab/transformer.hpp"
#include "support/finite_difference.hpp"

namespace cotlab {
namespace {

ModelConfig tiny(std::size_t layers = 2, std::uint64_t seed = 1) {
  ModelConfig c;
  c.layers = layers;
  c.heads = 2;
  c.width = 16;
  c.max_positions = 32;
  c.seed = seed;
  return c;
}

/// Larger init so that differences between policies are visible.
Model loud(ModelConfig c, double scale = 8.0) {
  Model m(c);
  visit_params(m.weights(), [&](const std::string&, Tensor& t, ParamKind k) {
    if (k == ParamKind::LinearWeight)
      for (double& v : t.data()) v *= scale;
  });
  return m;
}

const Tokens& trace() {
  static const Tokens t = Vocab::standard().encode("<bos>7*8#56<think>7*8=56</think><answer>56</answer><eos>");
  return t;
}

TEST(ModelConfig, Validation) {
  ModelConfig c = tiny();
  c.heads = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  EXPECT_THROW(Model{c}, std::invalid_argument);
  ModelConfig back = nlohmann::json(tiny()).get<ModelConfig>();
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(tiny()));
}

TEST(Forward, RejectsOverLength) {
  Model m(tiny());
  Tokens t(33, tok::kSpace);
  Graph g;
  EXPECT_THROW(forward(g, m, t), ShapeError);
}

TEST(Forward, FullAndBlockAgreeBeforeAnswerQueries) {
  Model m = loud(tiny());
  const RoleSpans s = segment(trace());
  const Tensor full = forward_logits(m, trace());
  for (AttentionMode mode : {AttentionMode::BlockAnswerToPrompt, AttentionMode::BlockAnswerToCot}) {
    const Tensor blocked = forward_logits(m, trace(), {mode, s});
    const std::size_t first = answer_query_rows(s).begin;
    bool differs_later = false;
    for (std::size_t r = 0; r < full.rows(); ++r)
      for (std::size_t c = 0; c < full.cols(); ++c) {
        if (r < first) EXPECT_EQ(full.at(r, c), blocked.at(r, c));
        else differs_later |= full.at(r, c) != blocked.at(r, c);
      }
    EXPECT_TRUE(differs_later);
  }
}

TEST(Forward, ZeroHookIsExact) {
  Model m = loud(tiny());
  const Tensor plain = forward_logits(m, trace());
  const RoleSpans s = segment(trace());
  for (std::size_t layer = 0; layer <= 2; ++layer) {
    InjectionHook h{layer, role_mask(s, trace().size(), Role::Prompt), Tensor::matrix(trace().size(), 16)};
    ForwardOptions o;
    o.hook = &h;
    Graph g;
    EXPECT_EQ(forward(g, m, trace(), o).logits.value(), plain);
  }
}

TEST(Forward, AttentionDumpZeroOnBlockedEdges) {
  Model m = loud(tiny());
  const RoleSpans s = segment(trace());
  const std::size_t T = trace().size();
  const EdgeMask G = answer_to_prompt_edges(s, T);
  ASSERT_GT(G.count(), 0u);
  std::vector<Tensor> dump;
  ForwardOptions o;
  o.policy = {AttentionMode::BlockAnswerToPrompt, s};
  o.attention_dump = &dump;
  Graph g;
  forward(g, m, trace(), o);
  ASSERT_EQ(dump.size(), 2u * 2u);
  for (const Tensor& a : dump) {
    for (std::size_t i = 0; i < T; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < T; ++j) {
        if (G(i, j) || j > i) EXPECT_EQ(a.at(i, j), 0.0);
        row += a.at(i, j);
      }
      EXPECT_NEAR(row, 1.0, 1e-6);
    }
  }
}

TEST(Forward, InjectionIsLinearForSmallDeltas) {
  Model m = loud(tiny(1), 1.0);
  const std::size_t T = trace().size();
  Rng rng(4);
  RowMask all(T, true);
  const Tensor base = forward_logits(m, trace());
  Tensor d = testing::random_tensor({T, 16}, rng, 1e-4);
  Tensor nd = d;
  for (double& v : nd.data()) v = -v;
  auto run = [&](const Tensor& delta) {
    InjectionHook h{0, all, delta};
    ForwardOptions o;
    o.hook = &h;
    Graph g;
    return forward(g, m, trace(), o).logits.value();
  };
  const Tensor up = run(d), down = run(nd);
  double worst = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < base.size(); ++i) {
    worst = std::max(worst, std::abs((up[i] - base[i]) + (down[i] - base[i])));
    scale = std::max(scale, std::abs(up[i] - base[i]));
  }
  EXPECT_GT(scale, 0.0);
  EXPECT_LT(worst, 1e-6);
}

TEST(Forward, FiniteDifferenceThroughWholeModel) {
  Model m = loud(tiny(2, 9), 4.0);
  const RoleSpans s = segment(trace());
  // Perturb the token embedding and one attention projection.
  for (const char* which : {"tok_emb", "layers.1.wk", "layers.0.w1"}) {
    Tensor* slot = nullptr;
    std::size_t index = 0, k = 0;
    visit_params(m.weights(), [&](const std::string& n, Tensor& t, ParamKind) {
      if (n == which) { slot = &t; index = k; }
      ++k;
    });
    const Tensor x0 = *slot;
    auto eval = [&](const Tensor& x) {
      *slot = x;
      return answer_nll(m, trace(), s, AttentionPolicy::full());
    };
    Graph g;
    ForwardPass pass = forward(g, m, trace(), {}, true);
    ParamGrads grads = m.zero_grads();
    accumulate_param_grads(grads, g.backward(answer_nll(pass.logits, trace(), s)), pass);
    const Tensor numeric = testing::numeric_gradient(eval, x0);
    *slot = x0;
    EXPECT_LT(testing::relative_error(grads[index], numeric), 1e-6) << which;
  }
}

TEST(AnswerNll, UniformLogitsGiveLogV) {
  ModelConfig c = tiny();
  c.vocab = 32;
  Model m(c);
  Tensor& w = m.weights().w_out;
  for (double& v : w.data()) v = 0.0;
  const RoleSpans s = segment(trace());
  EXPECT_NEAR(answer_nll(m, trace(), s, AttentionPolicy::full()), std::log(32.0), 1e-12);
  EXPECT_NEAR(std::log(32.0), 3.4657, 1e-4);
}

TEST(AnswerNll, OneHotCorrectIsNearZero) {
  const Tokens t = Vocab::standard().encode("<bos>1<think>2</think><answer>3</answer>");
  const RoleSpans s = segment(t);
  Graph g;
  Tensor z = Tensor::matrix(t.size(), 24);
  z.at(answer_target_rows(s).begin, tok::digit(3)) = 50.0;
  EXPECT_LT(answer_nll(g.leaf(z), t, s).value().item(), 1e-20);
}

TEST(AnswerNll, MatchesPerTokenOracle) {
  Model m = loud(tiny());
  const RoleSpans s = segment(trace());
  const Tensor z = forward_logits(m, trace());
  double total = 0.0;
  const Span rows = answer_target_rows(s);
  for (std::size_t r = rows.begin; r < rows.end; ++r) {
    double den = 0.0;
    for (std::size_t v = 0; v < z.cols(); ++v) den += std::exp(z.at(r, v));
    total += -std::log(std::exp(z.at(r, trace()[r + 1])) / den);
  }
  EXPECT_NEAR(answer_nll(m, trace(), s, AttentionPolicy::full()), total / rows.size(), 1e-12);
  RoleSpans empty = s;
  empty.answer = {s.answer.begin, s.answer.begin};
  EXPECT_THROW(answer_nll(m, trace(), empty, AttentionPolicy::full()), std::invalid_argument);
}

TEST(Decoder, MatchesGraphForward) {
  Model m = loud(tiny(), 3.0);
  const Tensor z = forward_logits(m, trace());
  Decoder d(m);
  for (std::size_t t = 0; t < trace().size(); ++t) {
    const auto row = d.push(trace()[t]);
    for (std::size_t v = 0; v < row.size(); ++v) EXPECT_NEAR(row[v], z.at(t, v), 1e-10);
  }
}

TEST(Sample, GreedyAndDeterministic) {
  Model m = loud(tiny(), 3.0);
  const Tokens prompt = Vocab::standard().encode("<bos>7*8#56<think>");
  SampleParams greedy{0.0, 0.9, 10, 5};
  const SampleResult a = sample(m, prompt, greedy);
  Tokens manual = prompt;
  for (std::size_t i = 0; i < a.tokens.size() - prompt.size(); ++i) {
    const Tensor z = forward_logits(m, manual);
    std::size_t best = 0;
    for (std::size_t v = 1; v < z.cols(); ++v)
      if (z.at(manual.size() - 1, v) > z.at(manual.size() - 1, best)) best = v;
    manual.push_back(best);
  }
  EXPECT_EQ(a.tokens, manual);
  EXPECT_EQ(a.logprobs.size(), a.tokens.size() - prompt.size());

  SampleParams hot{1.0, 0.9, 20, 77};
  EXPECT_EQ(sample(m, prompt, hot).tokens, sample(m, prompt, hot).tokens);
  EXPECT_EQ(sample(m, prompt, hot).logprobs, sample(m, prompt, hot).logprobs);
}

TEST(Sample, FrequenciesMatchSoftmax) {
  Model m = loud(tiny(), 3.0);
  const Tokens prompt = Vocab::standard().encode("<bos>3*4#12<think>");
  const Tensor z = forward_logits(m, prompt);
  const std::size_t last = prompt.size() - 1;
  std::vector<double> p(z.cols());
  double den = 0.0;
  for (std::size_t v = 0; v < p.size(); ++v) den += p[v] = std::exp(z.at(last, v));
  for (double& v : p) v /= den;

  const int n = 10000;
  std::vector<int> counts(p.size(), 0);
  for (int i = 0; i < n; ++i) {
    SampleParams sp{1.0, 1.0, 1, static_cast<std::uint64_t>(i)};
    ++counts[sample(m, prompt, sp).tokens.back()];
  }
  for (std::size_t v = 0; v < p.size(); ++v) {
    const double sigma = std::sqrt(n * p[v] * (1.0 - p[v]));
    EXPECT_LE(std::abs(counts[v] - n * p[v]), 3.0 * sigma + 1.0) << "token " << v;
  }
}

TEST(Sample, StopsAtEosOrBudget) {
  Model m(tiny());
  const Tokens prompt = Vocab::standard().encode("<bos>3<think>");
  const SampleResult r = sample(m, prompt, {0.7, 0.9, 6, 3});
  const std::size_t added = r.tokens.size() - prompt.size();
  EXPECT_LE(added, 6u);
  if (added < 6) EXPECT_EQ(r.tokens.back(), tok::kEos);
}

TEST(Sft, InitLossNearLogVAndEmptyBatch) {
  Model m(tiny());
  const double init = sft_loss(m, {trace()});
  EXPECT_NEAR(init, std::log(24.0), 0.1 * std::log(24.0));
  AdamW opt(m, {});
  const std::uint64_t before = m.checksum();
  EXPECT_EQ(sft_step(m, opt, {}), 0.0);
  EXPECT_EQ(m.checksum(), before);
  EXPECT_EQ(m.version(), 0u);
}

TEST(Sft, LossDecreases) {
  Model m(tiny());
  AdamWConfig cfg;
  cfg.lr = 3e-3;
  cfg.warmup_steps = 2;
  AdamW opt(m, cfg);
  const double first = sft_loss(m, {trace()});
  for (int i = 0; i < 40; ++i) sft_step(m, opt, {trace()});
  EXPECT_LT(sft_loss(m, {trace()}), 0.5 * first);
  EXPECT_EQ(m.version(), 40u);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Model m = loud(tiny(2, 33), 1.7);
  const auto path = std::filesystem::temp_directory_path() / "cotlab_ckpt_test.bin";
  m.save(path, {{"step", 12}});
  nlohmann::json extra;
  const Model back = Model::load(path, &extra);
  EXPECT_EQ(extra.at("step"), 12);
  EXPECT_EQ(back.checksum(), m.checksum());
  std::size_t k = 0;
  std::vector<const Tensor*> a;
  visit_params(m.weights(), [&](const std::string&, const Tensor& t, ParamKind) { a.push_back(&t); });
  visit_params(back.weights(), [&](const std::string&, const Tensor& t, ParamKind) {
    EXPECT_EQ(t, *a[k++]);
  });
  EXPECT_EQ(forward_logits(back, trace()), forward_logits(m, trace()));
  std::filesystem::remove(path);
}

TEST(Checkpoint, RejectsGarbage) {
  const auto path = std::filesystem::temp_directory_path() / "cotlab_garbage.bin";
  { std::ofstream(path) << "not a checkpoint"; }
  EXPECT_THROW(Model::load(path), std::runtime_error);
  std::filesystem::remove(path);
}

}  // namespace
}  // namespace cotlab
