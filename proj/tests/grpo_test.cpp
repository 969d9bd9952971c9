#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "cotlab/grpo.hpp"
#include "support/finite_difference.hpp"

namespace cotlab {
namespace {

ModelConfig tiny(std::uint64_t seed = 1) {
  ModelConfig c;
  c.layers = 2;
  c.heads = 2;
  c.width = 16;
  c.max_positions = 64;
  c.seed = seed;
  return c;
}

/// A quick warm start so that some rollouts are well formed.
Model warm(std::uint64_t seed = 1, int steps = 60, TaskConfig task = {}) {
  Model m(tiny(seed));
  AdamWConfig oc;
  oc.lr = 1e-2;
  oc.warmup_steps = 1;
  AdamW opt(m, oc);
  const auto corpus = sft_corpus(seed, task, {}, 16 * static_cast<std::size_t>(steps));
  for (int s = 0; s < steps; ++s) {
    std::vector<Tokens> batch(corpus.begin() + 16 * s, corpus.begin() + 16 * (s + 1));
    sft_step(m, opt, batch);
  }
  return m;
}

TrainConfig small_cfg() {
  TrainConfig c;
  c.prompts_per_step = 4;
  c.group_size = 4;
  c.steps = 2;
  c.decode.max_new = 24;
  c.decode.temperature = 1.0;
  c.optimizer.lr = 1e-3;
  c.probe_every = 1;
  c.metric_probe_size = 3;
  c.seed = 5;
  return c;
}

TEST(GroupAdvantages, Examples) {
  EXPECT_EQ(group_advantages({1, 0, 1, 0}), (std::vector<double>{1 / (1 + 2e-8), -1 / (1 + 2e-8), 1 / (1 + 2e-8), -1 / (1 + 2e-8)}));
  for (double a : group_advantages({1, 0, 1, 0})) EXPECT_NEAR(std::abs(a), 1.0, 1e-7);
  EXPECT_EQ(group_advantages({1, 1, 1, 1}), (std::vector<double>{0, 0, 0, 0}));
  // Direct formula: mean 0.25, population std sqrt(3)/4.
  const double sd = std::sqrt(3.0) / 4.0;
  const auto a = group_advantages({1, 0, 0, 0});
  EXPECT_NEAR(a[0], 0.75 / (sd + 1e-8), 1e-15);
  EXPECT_NEAR(a[0], 1.7320508, 1e-6);
  for (int k = 1; k < 4; ++k) EXPECT_NEAR(a[k], -0.25 / (sd + 1e-8), 1e-15);
  EXPECT_THROW(group_advantages({1}), std::invalid_argument);
}

TEST(GroupAdvantages, MeanZeroOnRandomGroups) {
  Rng rng(3);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> r(2 + rng.below(7));
    for (double& v : r) v = static_cast<double>(rng.below(2));
    const auto a = group_advantages(r);
    EXPECT_LT(std::abs(std::accumulate(a.begin(), a.end(), 0.0)), 1e-9);
  }
}

TEST(Rollout, ShapeDeterminismAndRewards) {
  Model m = warm();
  TrainConfig cfg = small_cfg();
  const auto prompts = step_prompts(TaskConfig{}, cfg, 1);
  const auto a = rollout(m, prompts, cfg, 11);
  const auto b = rollout(m, prompts, cfg, 11);
  ASSERT_EQ(a.size(), prompts.size());
  for (const auto& g : a) {
    EXPECT_EQ(g.traces.size(), cfg.group_size);
    for (const auto& r : g.traces) {
      EXPECT_TRUE(r.reward == 0.0 || r.reward == 1.0);
      EXPECT_EQ(r.old_logprobs.size(), r.tokens.size() - r.prompt_length);
      if (!r.well_formed) EXPECT_EQ(r.reward, 0.0);
    }
  }
  EXPECT_EQ(rollout_fingerprint(a), rollout_fingerprint(b));
  EXPECT_NE(rollout_fingerprint(a), rollout_fingerprint(rollout(m, prompts, cfg, 12)));
}

RolloutGroup fixed_group(const Model& m, const std::vector<double>& advantages, bool identical) {
  const Vocab& V = Vocab::standard();
  RolloutGroup g;
  g.model_version = m.version();
  const char* texts[] = {"<bos>7*8#56<think>7*8</think><answer>56</answer><eos>",
                         "<bos>7*8#56<think>7*8 #56</think><answer>56</answer><eos>"};
  for (std::size_t k = 0; k < advantages.size(); ++k) {
    Rollout r;
    r.tokens = V.encode(texts[identical ? 0 : k % 2]);
    r.prompt_length = generation_start(r.tokens);
    const Tensor z = forward_logits(m, r.tokens);
    for (std::size_t pos = r.prompt_length; pos < r.tokens.size(); ++pos)
      r.old_logprobs.push_back(log_softmax_row({z.ptr() + (pos - 1) * z.cols(), z.cols()})[r.tokens[pos]]);
    r.advantage = advantages[k];
    g.traces.push_back(r);
  }
  return g;
}

TEST(PolicyLoss, ZeroAdvantagesGiveZeroLossAndNoUpdate) {
  Model m = warm();
  TrainConfig cfg = small_cfg();
  ParamGrads grads = m.zero_grads();
  const PolicyLoss pl = policy_loss(m, {fixed_group(m, {0, 0, 0, 0}, false)}, cfg, nullptr, &grads);
  EXPECT_EQ(pl.loss, 0.0);
  EXPECT_EQ(global_norm(grads), 0.0);
  const std::uint64_t before = m.checksum();
  AdamW opt(m, cfg.optimizer);
  opt.step(m, grads);
  EXPECT_EQ(m.checksum(), before);
}

TEST(PolicyLoss, OpposedAdvantagesOnIdenticalTracesCancel) {
  Model m = warm();
  ParamGrads grads = m.zero_grads();
  const PolicyLoss pl = policy_loss(m, {fixed_group(m, {1, -1}, true)}, small_cfg(), nullptr, &grads);
  EXPECT_NEAR(pl.loss, 0.0, 1e-15);
  EXPECT_LT(global_norm(grads), 1e-14);
}

TEST(PolicyLoss, ClippedEqualsUnclippedOnPolicy) {
  Model m = warm();
  TrainConfig cfg = small_cfg();
  const RolloutGroup g = fixed_group(m, {1.2, -0.4, 0.3, -1.1}, false);
  ParamGrads plain = m.zero_grads(), clipped = m.zero_grads();
  const double l0 = policy_loss(m, {g}, cfg, nullptr, &plain).loss;
  cfg.clip = true;
  const double l1 = policy_loss(m, {g}, cfg, nullptr, &clipped).loss;
  // Unclipped is -a log pi, clipped is -a * ratio; at ratio 1 the gradients
  // coincide and the values differ by the constant -a (log pi - 1) offset.
  double expected_offset = 0.0;
  std::size_t n = 0;
  for (const auto& r : g.traces) n += r.old_logprobs.size();
  for (const auto& r : g.traces)
    for (double lp : r.old_logprobs) expected_offset += -r.advantage * (lp - 1.0) / static_cast<double>(n);
  EXPECT_NEAR(l0 - l1, expected_offset, 1e-12);
  for (std::size_t k = 0; k < plain.size(); ++k) EXPECT_LT(testing::relative_error(plain[k], clipped[k], 1e-12), 1e-9);
}

TEST(PolicyLoss, KlAndEntropyTerms) {
  Model m = warm();
  TrainConfig cfg = small_cfg();
  const RolloutGroup g = fixed_group(m, {0, 0}, false);
  cfg.kl_coef = 0.5;
  // Against itself the k3 estimate is exactly zero.
  EXPECT_NEAR(policy_loss(m, {g}, cfg, &m, nullptr).loss, 0.0, 1e-12);
  Model other = warm(2);
  EXPECT_GT(policy_loss(m, {g}, cfg, &other, nullptr).loss, 0.0);
  cfg.kl_coef = 0.0;
  cfg.entropy_coef = 0.1;
  EXPECT_LT(policy_loss(m, {g}, cfg, nullptr, nullptr).loss, 0.0);
}

TEST(PolicyLoss, StaleRolloutsRejected) {
  Model m = warm();
  RolloutGroup g = fixed_group(m, {1, -1}, false);
  m.bump_version();
  EXPECT_THROW(policy_loss(m, {g}, small_cfg(), nullptr, nullptr), StaleRollout);
  EXPECT_NO_THROW(policy_loss(m, {g}, small_cfg(), nullptr, nullptr, 1));
}

TEST(TrainStep, ZeroLearningRateKeepsWeights) {
  Model m = warm();
  TrainConfig cfg = small_cfg();
  cfg.optimizer.lr = 0.0;
  const std::uint64_t before = m.checksum();
  const auto rows = train(m, cfg, TaskConfig{}, gen_examples(99, TaskConfig{}, 3), m);
  EXPECT_EQ(m.checksum(), before);
  ASSERT_EQ(rows.size(), 3u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].step, i);
    ASSERT_TRUE(rows[i].probe.has_value());
    EXPECT_EQ(rows[i].probe->behavior.count, 3u);
  }
}

TEST(TrainStep, GradientMaskSharesForwardButNotUpdate) {
  // An easy task so that groups disagree on reward.
  TaskConfig task;
  task.operand_max = 3;
  task.chained = false;
  const Model start = warm(1, 60, task);
  TrainConfig cfg = small_cfg();
  cfg.prompts_per_step = 8;
  cfg.optimizer.warmup_steps = 1;
  Model a = start, b = start;
  AdamW oa(a, cfg.optimizer), ob(b, cfg.optimizer);
  const StepResult ra = train_step(a, oa, cfg, task, 1, &start);
  cfg.intervention.kind = InterventionKind::GradientMask;
  const StepResult rb = train_step(b, ob, cfg, task, 1, &start);
  EXPECT_EQ(rollout_fingerprint(ra.groups), rollout_fingerprint(rb.groups));
  EXPECT_EQ(ra.loss, rb.loss);
  EXPECT_NE(ra.loss, 0.0);
  EXPECT_NE(a.checksum(), b.checksum());
}

TEST(Train, DeterministicAndWritesArtifacts) {
  const Model start = warm();
  TrainConfig cfg = small_cfg();
  cfg.checkpoint_every = 1;
  const auto dir = std::filesystem::temp_directory_path() / "cotlab_grpo_test";
  std::filesystem::remove_all(dir);
  Model a = start, b = start;
  const auto probes = gen_examples(7, TaskConfig{}, 4);
  auto ra = train(a, cfg, TaskConfig{}, probes, start, {.trace_path = dir / "trace.jsonl", .checkpoint_dir = dir});
  auto rb = train(b, cfg, TaskConfig{}, probes, start);
  ASSERT_EQ(ra.size(), rb.size());
  for (std::size_t i = 0; i < ra.size(); ++i) {
    ra[i].wall_seconds = rb[i].wall_seconds = 0.0;
    EXPECT_EQ(nlohmann::json(ra[i]).dump(), nlohmann::json(rb[i]).dump());
  }
  EXPECT_EQ(a.checksum(), b.checksum());
  EXPECT_TRUE(std::filesystem::exists(dir / "ckpt_step_000001.ckpt"));
  EXPECT_EQ(Model::load(dir / "ckpt_step_000002.ckpt").checksum(), a.checksum());
  std::ifstream in(dir / "trace.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    EXPECT_EQ(nlohmann::json::parse(line).at("step"), lines);
    ++lines;
  }
  EXPECT_EQ(lines, 3u);
  std::filesystem::remove_all(dir);
}

TEST(TrainConfig, JsonRoundTrip) {
  TrainConfig c = small_cfg();
  c.intervention = {InterventionKind::Fact, 0.1, 1};
  c.clip = true;
  nlohmann::json j = c;
  EXPECT_EQ(nlohmann::json(j.get<TrainConfig>()), j);
  c.group_size = 1;
  EXPECT_THROW(c.validate(tiny()), std::invalid_argument);
}

}  // namespace
}  // namespace cotlab
