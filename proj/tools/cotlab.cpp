// Command-line front end: cotlab {sft,rl,eval,compare,plots} [flags]

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cotlab/harness.hpp"

using namespace cotlab;

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> probe_size, probe_seed, metric_limit, bins, max_new;
  std::string checkpoint, reference, checkpoint_b;
  // task
  std::optional<int> operand_min, operand_max;
  std::optional<bool> chained;
  std::optional<double> divide_prob, hint_prob;
  std::optional<std::uint64_t> task_seed;
  // model and sft
  std::optional<std::size_t> layers, heads, width, max_positions;
  std::optional<std::size_t> sft_steps, sft_batch;
  std::optional<double> sft_lr, corpus_hint_prob;
  std::vector<double> mix;
  // rl
  std::optional<std::size_t> steps, batch, group_size, update_epochs, probe_every, checkpoint_every,
      metric_probe_size;
  std::optional<double> lr, temperature, top_p, kl, entropy, fact_epsilon;
  std::optional<std::size_t> fact_layer;
  std::optional<bool> clip;
  std::string intervention;
};

template <class T, class U>
void set(const std::optional<T>& v, U& target) {
  if (v) target = *v;
}

void add_common(CLI::App* c, Flags& f) {
  c->add_option("--config", f.config, "JSON run config; flags override its fields")->check(CLI::ExistingFile);
  c->add_option("--out", f.out, "output directory");
  c->add_option("--probe-size", f.probe_size, "held-out probe examples (default 512)");
  c->add_option("--probe-seed", f.probe_seed, "seed of the probe set");
  c->add_option("--max-new", f.max_new, "decode budget in tokens");
  c->add_option("--operand-min", f.operand_min);
  c->add_option("--operand-max", f.operand_max);
  c->add_option("--chained", f.chained, "add a third operand");
  c->add_option("--divide-prob", f.divide_prob);
  c->add_option("--hint-prob", f.hint_prob, "probability that the prompt hint is correct");
  c->add_option("--task-seed", f.task_seed);
}

void add_metrics(CLI::App* c, Flags& f) {
  c->add_option("--reference", f.reference, "frozen reference checkpoint q");
  c->add_option("--metric-limit", f.metric_limit, "traces scored (0 = all)");
}

RunConfig assemble(RunMode mode, const Flags& f) {
  RunConfig c;
  if (!f.config.empty()) {
    std::ifstream in(f.config);
    c = nlohmann::json::parse(in).get<RunConfig>();
  }
  c.mode = mode;
  if (!f.out.empty()) c.output_dir = f.out;
  set(f.seed, c.seed);
  set(f.probe_size, c.probe_size);
  set(f.probe_seed, c.probe_seed);
  set(f.metric_limit, c.metric_limit);
  set(f.bins, c.entropy_bins);
  set(f.max_new, c.train.decode.max_new);
  if (!f.checkpoint.empty()) c.checkpoint = f.checkpoint;
  if (!f.reference.empty()) c.reference = f.reference;
  if (!f.checkpoint_b.empty()) c.checkpoint_b = f.checkpoint_b;
  set(f.operand_min, c.task.operand_min);
  set(f.operand_max, c.task.operand_max);
  set(f.chained, c.task.chained);
  set(f.divide_prob, c.task.divide_prob);
  set(f.hint_prob, c.task.hint_correct_prob);
  set(f.task_seed, c.task.seed);
  set(f.layers, c.model.layers);
  set(f.heads, c.model.heads);
  set(f.width, c.model.width);
  set(f.max_positions, c.model.max_positions);
  set(f.sft_steps, c.sft.steps);
  set(f.sft_batch, c.sft.batch);
  set(f.sft_lr, c.sft.optimizer.lr);
  set(f.corpus_hint_prob, c.sft.corpus.hint_correct_prob);
  if (!f.mix.empty()) {
    if (f.mix.size() != kCotStyles) throw std::invalid_argument("--mix takes four weights");
    for (std::size_t i = 0; i < kCotStyles; ++i) c.sft.corpus.mix[i] = f.mix[i];
  }
  set(f.steps, c.train.steps);
  set(f.batch, c.train.prompts_per_step);
  set(f.group_size, c.train.group_size);
  set(f.update_epochs, c.train.update_epochs);
  set(f.probe_every, c.train.probe_every);
  set(f.checkpoint_every, c.train.checkpoint_every);
  set(f.metric_probe_size, c.train.metric_probe_size);
  set(f.lr, c.train.optimizer.lr);
  set(f.temperature, c.train.decode.temperature);
  set(f.top_p, c.train.decode.top_p);
  set(f.kl, c.train.kl_coef);
  set(f.entropy, c.train.entropy_coef);
  set(f.clip, c.train.clip);
  if (!f.intervention.empty()) c.train.intervention.kind = intervention_from_string(f.intervention);
  set(f.fact_epsilon, c.train.intervention.fact_epsilon);
  set(f.fact_layer, c.train.intervention.fact_layer);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chain-of-thought faithfulness lab"};
  app.require_subcommand(1);
  Flags f;
  std::vector<std::string> traces;

  auto* sft = app.add_subcommand("sft", "warm-start a model on a rendered trace corpus");
  add_common(sft, f);
  sft->add_option("--seed", f.seed, "run seed")->required();
  sft->add_option("--layers", f.layers);
  sft->add_option("--heads", f.heads);
  sft->add_option("--width", f.width);
  sft->add_option("--max-positions", f.max_positions);
  sft->add_option("--sft-steps", f.sft_steps);
  sft->add_option("--sft-batch", f.sft_batch);
  sft->add_option("--sft-lr", f.sft_lr);
  sft->add_option("--corpus-hint-prob", f.corpus_hint_prob, "hint reliability inside the corpus");
  sft->add_option("--mix", f.mix, "weights of compute, silent_truth, silent_copy, mention_copy")->expected(4);

  auto* rl = app.add_subcommand("rl", "GRPO training from a checkpoint");
  add_common(rl, f);
  add_metrics(rl, f);
  rl->add_option("--seed", f.seed, "run seed")->required();
  rl->add_option("--checkpoint", f.checkpoint, "initial weights");
  rl->add_option("--steps", f.steps);
  rl->add_option("--batch", f.batch, "prompts per step");
  rl->add_option("--group-size", f.group_size, "rollouts per prompt");
  rl->add_option("--update-epochs", f.update_epochs);
  rl->add_option("--lr", f.lr);
  rl->add_option("--temperature", f.temperature);
  rl->add_option("--top-p", f.top_p);
  rl->add_option("--clip", f.clip);
  rl->add_option("--kl", f.kl, "KL-to-reference coefficient");
  rl->add_option("--entropy", f.entropy, "entropy bonus coefficient");
  rl->add_option("--intervention", f.intervention, "none, update_mask, gradient_mask, cot_gradient or fact");
  rl->add_option("--fact-epsilon", f.fact_epsilon);
  rl->add_option("--fact-layer", f.fact_layer);
  rl->add_option("--probe-every", f.probe_every);
  rl->add_option("--checkpoint-every", f.checkpoint_every);
  rl->add_option("--metric-probe-size", f.metric_probe_size);

  auto* ev = app.add_subcommand("eval", "score a checkpoint on the probe set");
  add_common(ev, f);
  add_metrics(ev, f);
  ev->add_option("--checkpoint", f.checkpoint, "weights to score");
  ev->add_option("--bins", f.bins, "entropy bins");

  auto* cmp = app.add_subcommand("compare", "test two checkpoints against each other");
  add_common(cmp, f);
  add_metrics(cmp, f);
  cmp->add_option("--a", f.checkpoint, "checkpoint expected to be more faithful");
  cmp->add_option("--b", f.checkpoint_b, "checkpoint compared against");

  auto* plots = app.add_subcommand("plots", "CSV series from training traces");
  plots->add_option("--trace", traces, "LABEL=PATH of a trace.jsonl; repeatable")->required();
  plots->add_option("--out", f.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInvalidConfig;
  }

  if (plots->parsed()) {
    std::vector<TraceSource> sources;
    for (const auto& t : traces) {
      const auto eq = t.find('=');
      if (eq == std::string::npos) {
        sources.push_back({std::filesystem::path(t).parent_path().filename().string(), t});
      } else {
        sources.push_back({t.substr(0, eq), t.substr(eq + 1)});
      }
    }
    return run_plots(sources, f.out);
  }

  RunMode mode = RunMode::Eval;
  if (sft->parsed()) mode = RunMode::Sft;
  if (rl->parsed()) mode = RunMode::Rl;
  if (cmp->parsed()) mode = RunMode::Compare;
  RunConfig cfg;
  try {
    cfg = assemble(mode, f);
  } catch (const std::exception& e) {
    std::cerr << "invalid config: " << e.what() << '\n';
    return kExitInvalidConfig;
  }
  return run(cfg);
}
