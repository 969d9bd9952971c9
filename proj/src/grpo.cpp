#include "cotlab/grpo.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

namespace cotlab {

void TrainConfig::validate(const ModelConfig& model) const {
  if (group_size < 2) throw std::invalid_argument("group_size must be at least 2");
  if (prompts_per_step == 0) throw std::invalid_argument("prompts_per_step must be positive");
  if (update_epochs == 0) throw std::invalid_argument("update_epochs must be positive");
  if (probe_every == 0 || checkpoint_every == 0) throw std::invalid_argument("intervals must be positive");
  if (clip && (clip_low < 0.0 || clip_low >= 1.0 || clip_high < 0.0)) throw std::invalid_argument("bad clip bounds");
  if (optimizer.lr < 0.0) throw std::invalid_argument("negative learning rate");
  if (decode.top_p <= 0.0 || decode.top_p > 1.0) throw std::invalid_argument("top_p outside (0,1]");
  intervention.validate(model);
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"prompts_per_step", c.prompts_per_step},
       {"group_size", c.group_size},
       {"steps", c.steps},
       {"optimizer", c.optimizer},
       {"temperature", c.decode.temperature},
       {"top_p", c.decode.top_p},
       {"max_new", c.decode.max_new},
       {"clip", c.clip},
       {"clip_low", c.clip_low},
       {"clip_high", c.clip_high},
       {"kl_coef", c.kl_coef},
       {"entropy_coef", c.entropy_coef},
       {"update_epochs", c.update_epochs},
       {"intervention", c.intervention},
       {"probe_every", c.probe_every},
       {"checkpoint_every", c.checkpoint_every},
       {"metric_probe_size", c.metric_probe_size},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.prompts_per_step = j.value("prompts_per_step", d.prompts_per_step);
  c.group_size = j.value("group_size", d.group_size);
  c.steps = j.value("steps", d.steps);
  c.optimizer = j.contains("optimizer") ? j.at("optimizer").get<AdamWConfig>() : d.optimizer;
  c.decode.temperature = j.value("temperature", d.decode.temperature);
  c.decode.top_p = j.value("top_p", d.decode.top_p);
  c.decode.max_new = j.value("max_new", d.decode.max_new);
  c.clip = j.value("clip", d.clip);
  c.clip_low = j.value("clip_low", d.clip_low);
  c.clip_high = j.value("clip_high", d.clip_high);
  c.kl_coef = j.value("kl_coef", d.kl_coef);
  c.entropy_coef = j.value("entropy_coef", d.entropy_coef);
  c.update_epochs = j.value("update_epochs", d.update_epochs);
  c.intervention = j.contains("intervention") ? j.at("intervention").get<InterventionConfig>() : d.intervention;
  c.probe_every = j.value("probe_every", d.probe_every);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.metric_probe_size = j.value("metric_probe_size", d.metric_probe_size);
  c.seed = j.value("seed", d.seed);
}

std::vector<double> group_advantages(const std::vector<double>& rewards) {
  if (rewards.size() < 2) throw std::invalid_argument("group_advantages: need at least two rewards");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double var = 0.0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> a(rewards.size(), 0.0);
  if (sd == 0.0) return a;
  for (std::size_t k = 0; k < a.size(); ++k) a[k] = (rewards[k] - mean) / (sd + 1e-8);
  return a;
}

std::vector<RolloutGroup> rollout(const Model& model, const std::vector<Example>& examples,
                                  const TrainConfig& cfg, std::uint64_t base_seed) {
  std::vector<RolloutGroup> groups;
  groups.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    RolloutGroup g;
    g.prompt_id = i;
    g.model_version = model.version();
    std::vector<double> rewards;
    for (std::size_t k = 0; k < cfg.group_size; ++k) {
      SampleParams sp = cfg.decode;
      sp.seed = mix_seed(mix_seed(base_seed, i), k);
      SampleResult s = sample(model, examples[i].prompt, sp);
      Rollout r;
      r.tokens = std::move(s.tokens);
      r.prompt_length = s.prompt_length;
      r.old_logprobs = std::move(s.logprobs);
      r.well_formed = parse_answer(r.tokens).has_value();
      r.reward = reward(r.tokens, examples[i]);
      rewards.push_back(r.reward);
      g.traces.push_back(std::move(r));
    }
    const std::vector<double> adv = group_advantages(rewards);
    for (std::size_t k = 0; k < adv.size(); ++k) g.traces[k].advantage = adv[k];
    groups.push_back(std::move(g));
  }
  return groups;
}

std::string rollout_fingerprint(const std::vector<RolloutGroup>& groups) {
  std::ostringstream os;
  os.precision(17);
  const Vocab& v = Vocab::standard();
  for (const auto& g : groups) {
    for (const auto& r : g.traces) {
      os << g.prompt_id << '\t' << v.decode(r.tokens) << '\t' << r.reward << '\t' << r.advantage;
      for (double lp : r.old_logprobs) os << ' ' << lp;
      os << '\n';
    }
  }
  return os.str();
}

std::string rollouts_jsonl(const std::vector<RolloutGroup>& groups, std::size_t step) {
  const Vocab& v = Vocab::standard();
  std::string out;
  for (const auto& g : groups) {
    for (std::size_t k = 0; k < g.traces.size(); ++k) {
      const Rollout& r = g.traces[k];
      const nlohmann::json j = {{"step", step},
                                {"prompt_id", g.prompt_id},
                                {"sample", k},
                                {"model_version", g.model_version},
                                {"text", v.decode(r.tokens)},
                                {"prompt_length", r.prompt_length},
                                {"reward", r.reward},
                                {"advantage", r.advantage},
                                {"old_logprobs", r.old_logprobs}};
      out += j.dump() + "\n";
    }
  }
  return out;
}

namespace {

Tensor full_like(std::size_t n, double value) { return Tensor(std::vector<std::size_t>{n}, value); }

/// Loss of one trace; `total` is the batch-wide generated-token count.
TraceLoss trace_loss(const Rollout& r, const TrainConfig& cfg, const std::vector<double>* ref_logprobs,
                     double total) {
  return [&r, &cfg, ref_logprobs, total](const ForwardPass& pass) {
    const Tokens& t = r.tokens;
    const std::size_t R = t.size();
    std::vector<std::size_t> idx(R, 0);
    std::vector<double> w(R, 0.0), unit(R, 0.0);
    for (std::size_t pos = r.prompt_length; pos < R; ++pos) {
      idx[pos - 1] = t[pos];
      w[pos - 1] = -r.advantage / total;
      unit[pos - 1] = 1.0 / total;
    }
    Graph& g = *pass.logits.graph();
    Var lp = pick(log_softmax(pass.logits), idx);
    Var loss;
    if (!cfg.clip) {
      loss = weighted_sum(lp, w);
    } else {
      // Rows outside the generated range carry their own value as "old".
      Tensor old = lp.value();
      for (std::size_t pos = r.prompt_length; pos < R; ++pos) old[pos - 1] = r.old_logprobs[pos - r.prompt_length];
      Var ratio = exp(sub(lp, g.constant(old)));
      const Tensor adv = full_like(R, r.advantage);
      Var surrogate = minimum(mul_const(ratio, adv), mul_const(clamp(ratio, 1.0 - cfg.clip_low, 1.0 + cfg.clip_high), adv));
      std::vector<double> neg(unit.size());
      for (std::size_t i = 0; i < unit.size(); ++i) neg[i] = -unit[i];
      loss = weighted_sum(surrogate, neg);
    }
    if (cfg.kl_coef != 0.0 && ref_logprobs) {
      // k3 estimator exp(lq - lp) - (lq - lp) - 1 on sampled tokens.
      Tensor lq = lp.value();
      for (std::size_t pos = r.prompt_length; pos < R; ++pos) lq[pos - 1] = (*ref_logprobs)[pos - r.prompt_length];
      Var d = sub(g.constant(lq), lp);
      std::vector<double> wk(R);
      double constant = 0.0;
      for (std::size_t i = 0; i < R; ++i) {
        wk[i] = cfg.kl_coef * unit[i];
        constant -= wk[i];
      }
      loss = add(loss, add(weighted_sum(sub(exp(d), d), wk), g.constant(Tensor::scalar(constant))));
    }
    if (cfg.entropy_coef != 0.0) {
      std::vector<double> we(R);
      for (std::size_t i = 0; i < R; ++i) we[i] = -cfg.entropy_coef * unit[i];
      loss = add(loss, weighted_sum(row_entropy(pass.logits), we));
    }
    return loss;
  };
}

std::vector<double> reference_logprobs(const Model& ref, const Rollout& r) {
  const Tensor z = forward_logits(ref, r.tokens);
  std::vector<double> out;
  for (std::size_t pos = r.prompt_length; pos < r.tokens.size(); ++pos) {
    const auto ls = log_softmax_row({z.ptr() + (pos - 1) * z.cols(), z.cols()});
    out.push_back(ls[r.tokens[pos]]);
  }
  return out;
}

}  // namespace

PolicyLoss policy_loss(const Model& model, const std::vector<RolloutGroup>& groups, const TrainConfig& cfg,
                       const Model* reference, ParamGrads* grads, std::uint64_t version_offset) {
  PolicyLoss out;
  for (const auto& g : groups) {
    if (g.model_version + version_offset != model.version()) {
      throw StaleRollout("rollouts from model version " + std::to_string(g.model_version) +
                         " used to update version " + std::to_string(model.version()));
    }
    for (const auto& r : g.traces) out.tokens += r.tokens.size() - r.prompt_length;
  }
  if (out.tokens == 0) return out;
  const double total = static_cast<double>(out.tokens);
  const bool extra_terms = (cfg.kl_coef != 0.0 && reference) || cfg.entropy_coef != 0.0;
  for (const auto& g : groups) {
    for (const auto& r : g.traces) {
      if (r.tokens.size() == r.prompt_length) continue;
      // A zero advantage contributes neither loss nor gradient.
      if (r.advantage == 0.0 && !extra_terms) continue;
      std::vector<double> ref_lp;
      if (cfg.kl_coef != 0.0 && reference) ref_lp = reference_logprobs(*reference, r);
      const RoleSpans spans = segment_lenient(r.tokens);
      out.loss += apply_intervention(cfg.intervention, model, r.tokens, spans,
                                     trace_loss(r, cfg, ref_lp.empty() ? nullptr : &ref_lp, total), grads);
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const ProbeSummary& p) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  j = {{"behavior", p.behavior},
       {"metric_count", p.metric_count},
       {"suff", opt(p.suff)},
       {"kl_de", opt(p.kl_de)},
       {"kl_nec", opt(p.kl_nec)},
       {"kl_de_ref", opt(p.kl_de_ref)},
       {"kl_nec_ref", opt(p.kl_nec_ref)},
       {"grad_de", opt(p.grad_de)},
       {"grad_nec", opt(p.grad_nec)},
       {"grad_ans", opt(p.grad_ans)},
       {"h_full", opt(p.h_full)}};
}

std::vector<Tokens> greedy_decode(const Model& model, const std::vector<Example>& examples, std::size_t max_new) {
  std::vector<Tokens> out;
  out.reserve(examples.size());
  for (const Example& ex : examples) out.push_back(sample(model, ex.prompt, {0.0, 1.0, max_new, 0}).tokens);
  return out;
}

std::vector<ReportRow> score_traces(const std::vector<Tokens>& traces, const Model& p, const Model& q,
                                    std::size_t limit, std::int64_t step) {
  std::vector<ReportRow> rows;
  for (std::size_t i = 0; i < traces.size() && i < limit; ++i) {
    RoleSpans s;
    try {
      s = segment(traces[i]);
    } catch (const MalformedTrace&) {
      continue;
    }
    if (answer_target_rows(s).empty()) continue;
    rows.push_back({i, step, evaluate_trace(traces[i], p, q)});
  }
  return rows;
}

ProbeSummary summarize(const std::vector<Tokens>& traces, const std::vector<Example>& examples,
                       const std::vector<ReportRow>& reports) {
  ProbeSummary s;
  s.behavior = behavioral_probe(traces, examples);
  s.metric_count = reports.size();
  auto mean = [&](auto field) -> std::optional<double> {
    double total = 0.0;
    std::size_t n = 0;
    for (const auto& r : reports) {
      const std::optional<double> v = field(r.report);
      if (v) {
        total += *v;
        ++n;
      }
    }
    return n ? std::optional<double>(total / static_cast<double>(n)) : std::nullopt;
  };
  using R = FaithfulnessReport;
  s.suff = mean([](const R& r) { return std::optional<double>(r.suff); });
  s.kl_de = mean([](const R& r) { return std::optional<double>(r.kl_de); });
  s.kl_nec = mean([](const R& r) { return std::optional<double>(r.kl_nec); });
  s.kl_de_ref = mean([](const R& r) { return std::optional<double>(r.kl_de_ref); });
  s.kl_nec_ref = mean([](const R& r) { return std::optional<double>(r.kl_nec_ref); });
  s.grad_de = mean([](const R& r) { return r.grad_de; });
  s.grad_nec = mean([](const R& r) { return r.grad_nec; });
  s.grad_ans = mean([](const R& r) { return r.grad_ans; });
  s.h_full = mean([](const R& r) { return std::optional<double>(r.h_full); });
  return s;
}

void to_json(nlohmann::json& j, const TrainRow& r) {
  j = {{"step", r.step},
       {"mean_reward", r.mean_reward},
       {"loss", r.loss},
       {"grad_norm", r.grad_norm},
       {"well_formed_rate", r.well_formed_rate},
       {"wall_seconds", r.wall_seconds},
       {"probe", r.probe ? nlohmann::json(*r.probe) : nlohmann::json(nullptr)}};
}

std::vector<Example> step_prompts(const TaskConfig& task, const TrainConfig& cfg, std::size_t step) {
  return gen_examples(mix_seed(mix_seed(cfg.seed, task.seed), 2 * step + 1), task, cfg.prompts_per_step);
}

StepResult train_step(Model& model, AdamW& opt, const TrainConfig& cfg, const TaskConfig& task,
                      std::size_t step, const Model* reference) {
  StepResult out;
  const std::vector<Example> prompts = step_prompts(task, cfg, step);
  out.groups = rollout(model, prompts, cfg, mix_seed(cfg.seed, 2 * step));
  double reward_sum = 0.0, formed = 0.0, n = 0.0;
  for (const auto& g : out.groups)
    for (const auto& r : g.traces) {
      reward_sum += r.reward;
      formed += r.well_formed;
      n += 1.0;
    }
  out.mean_reward = reward_sum / n;
  out.well_formed_rate = formed / n;
  for (std::size_t e = 0; e < cfg.update_epochs; ++e) {
    ParamGrads grads = model.zero_grads();
    const PolicyLoss pl = policy_loss(model, out.groups, cfg, reference, &grads, e);
    const double norm = opt.step(model, std::move(grads));
    if (e == 0) {
      out.loss = pl.loss;
      out.grad_norm = norm;
    }
  }
  return out;
}

namespace {

std::string step_name(std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_step_%06zu.ckpt", step);
  return buf;
}

ProbeSummary run_probe(const Model& model, const Model& reference, const std::vector<Example>& probe_set,
                       const TrainConfig& cfg, std::size_t step) {
  const std::vector<Tokens> traces = greedy_decode(model, probe_set, cfg.decode.max_new);
  const auto reports = score_traces(traces, model, reference, cfg.metric_probe_size, static_cast<std::int64_t>(step));
  return summarize(traces, probe_set, reports);
}

}  // namespace

std::vector<TrainRow> train(Model& model, const TrainConfig& cfg, const TaskConfig& task,
                            const std::vector<Example>& probe_set, const Model& reference,
                            const TrainerOutputs& out) {
  cfg.validate(model.config());
  AdamW opt(model, cfg.optimizer);
  if (!out.checkpoint_dir.empty()) std::filesystem::create_directories(out.checkpoint_dir);
  std::ofstream trace;
  if (!out.trace_path.empty()) {
    if (out.trace_path.has_parent_path()) std::filesystem::create_directories(out.trace_path.parent_path());
    trace.open(out.trace_path);
    if (!trace) throw std::runtime_error("cannot write " + out.trace_path.string());
  }
  std::ofstream rollouts;
  if (!out.rollout_path.empty()) {
    if (out.rollout_path.has_parent_path()) std::filesystem::create_directories(out.rollout_path.parent_path());
    rollouts.open(out.rollout_path);
    if (!rollouts) throw std::runtime_error("cannot write " + out.rollout_path.string());
  }
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<TrainRow> rows;
  auto emit = [&](TrainRow row) {
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (trace) trace << nlohmann::json(row).dump() << '\n' << std::flush;
    if (out.on_step) out.on_step(row);
    rows.push_back(std::move(row));
  };

  TrainRow initial;
  if (!probe_set.empty()) initial.probe = run_probe(model, reference, probe_set, cfg, 0);
  emit(std::move(initial));

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    const StepResult r = train_step(model, opt, cfg, task, step, &reference);
    if (rollouts) rollouts << rollouts_jsonl(r.groups, step) << std::flush;
    TrainRow row;
    row.step = step;
    row.mean_reward = r.mean_reward;
    row.loss = r.loss;
    row.grad_norm = r.grad_norm;
    row.well_formed_rate = r.well_formed_rate;
    if (!probe_set.empty() && (step % cfg.probe_every == 0 || step == cfg.steps)) {
      row.probe = run_probe(model, reference, probe_set, cfg, step);
    }
    if (!out.checkpoint_dir.empty() && (step % cfg.checkpoint_every == 0 || step == cfg.steps)) {
      model.save(out.checkpoint_dir / step_name(step), {{"step", step}});
    }
    emit(std::move(row));
  }
  return rows;
}

}  // namespace cotlab
