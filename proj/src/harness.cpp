#include "cotlab/harness.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#ifndef COTLAB_VERSION
#define COTLAB_VERSION "unknown"
#endif

namespace cotlab {

namespace fs = std::filesystem;

const char* to_string(RunMode m) {
  switch (m) {
    case RunMode::Sft: return "sft";
    case RunMode::Rl: return "rl";
    case RunMode::Eval: return "eval";
    case RunMode::Compare: return "compare";
  }
  return "?";
}

RunMode run_mode_from_string(const std::string& s) {
  if (s == "sft") return RunMode::Sft;
  if (s == "rl") return RunMode::Rl;
  if (s == "eval") return RunMode::Eval;
  if (s == "compare") return RunMode::Compare;
  throw std::invalid_argument("unknown mode '" + s + "'");
}

void to_json(nlohmann::json& j, const SftConfig& c) {
  j = {{"corpus", c.corpus}, {"steps", c.steps}, {"batch", c.batch}, {"optimizer", c.optimizer}};
}

void from_json(const nlohmann::json& j, SftConfig& c) {
  SftConfig d;
  c.corpus = j.contains("corpus") ? j.at("corpus").get<CorpusConfig>() : d.corpus;
  c.steps = j.value("steps", d.steps);
  c.batch = j.value("batch", d.batch);
  c.optimizer = j.contains("optimizer") ? j.at("optimizer").get<AdamWConfig>() : d.optimizer;
}

void RunConfig::validate() const {
  if (output_dir.empty()) throw std::invalid_argument("output directory is required");
  if (probe_size == 0) throw std::invalid_argument("probe_size must be positive");
  if (entropy_bins == 0) throw std::invalid_argument("entropy_bins must be positive");
  task.validate();
  auto need = [](const fs::path& p, const char* what) {
    if (p.empty()) throw std::invalid_argument(std::string(what) + " checkpoint is required");
    if (!fs::is_regular_file(p)) throw std::invalid_argument(std::string(what) + " checkpoint not found: " + p.string());
  };
  if ((mode == RunMode::Sft || mode == RunMode::Rl) && !seed) throw std::invalid_argument("a seed is required");
  switch (mode) {
    case RunMode::Sft:
      model.validate();
      if (sft.batch == 0) throw std::invalid_argument("sft batch must be positive");
      break;
    case RunMode::Rl: need(checkpoint, "initial"); break;
    case RunMode::Eval: need(checkpoint, "evaluated"); break;
    case RunMode::Compare:
      need(checkpoint, "first");
      need(checkpoint_b, "second");
      break;
  }
  if (!reference.empty()) need(reference, "reference");
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"mode", to_string(c.mode)},
       {"model", c.model},
       {"train", c.train},
       {"task", c.task},
       {"sft", c.sft},
       {"checkpoint", c.checkpoint.string()},
       {"reference", c.reference.string()},
       {"checkpoint_b", c.checkpoint_b.string()},
       {"output_dir", c.output_dir.string()},
       {"probe_size", c.probe_size},
       {"probe_seed", c.probe_seed},
       {"metric_limit", c.metric_limit},
       {"entropy_bins", c.entropy_bins},
       {"seed", c.seed ? nlohmann::json(*c.seed) : nlohmann::json(nullptr)}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  RunConfig d;
  c.mode = j.contains("mode") ? run_mode_from_string(j.at("mode").get<std::string>()) : d.mode;
  c.model = j.contains("model") ? j.at("model").get<ModelConfig>() : d.model;
  c.train = j.contains("train") ? j.at("train").get<TrainConfig>() : d.train;
  c.task = j.contains("task") ? j.at("task").get<TaskConfig>() : d.task;
  c.sft = j.contains("sft") ? j.at("sft").get<SftConfig>() : d.sft;
  c.checkpoint = j.value("checkpoint", std::string());
  c.reference = j.value("reference", std::string());
  c.checkpoint_b = j.value("checkpoint_b", std::string());
  c.output_dir = j.value("output_dir", std::string());
  c.probe_size = j.value("probe_size", d.probe_size);
  c.probe_seed = j.value("probe_seed", d.probe_seed);
  c.metric_limit = j.value("metric_limit", d.metric_limit);
  c.entropy_bins = j.value("entropy_bins", d.entropy_bins);
  if (j.contains("seed") && !j.at("seed").is_null()) c.seed = j.at("seed").get<std::uint64_t>();
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("write failed: " + path.string());
}

/// Collects the files a run produces so that the manifest can list them.
class RunDir {
 public:
  RunDir(const RunConfig& cfg) : cfg_(cfg), root_(cfg.output_dir) {
    fs::create_directories(root_);
    const fs::path probe = root_ / ".write_probe";
    write_file(probe, "");
    fs::remove(probe);
  }

  fs::path path(const std::string& name) {
    files_.insert(name);
    return root_ / name;
  }
  void write(const std::string& name, const std::string& text) { write_file(path(name), text); }
  void adopt_dir(const std::string& sub) {
    if (!fs::exists(root_ / sub)) return;
    for (const auto& e : fs::recursive_directory_iterator(root_ / sub))
      if (e.is_regular_file()) files_.insert(fs::relative(e.path(), root_).generic_string());
  }

  void finish(const std::string& status) {
    write("config.json", nlohmann::json(cfg_).dump(2) + "\n");
    nlohmann::json m = {{"mode", to_string(cfg_.mode)},
                        {"config_hash", hex(config_hash(cfg_))},
                        {"code_version", COTLAB_VERSION},
                        {"seed", cfg_.seed ? nlohmann::json(*cfg_.seed) : nlohmann::json(nullptr)},
                        {"probe_seed", cfg_.probe_seed},
                        {"status", status},
                        {"files", std::vector<std::string>(files_.begin(), files_.end())}};
    write_file(root_ / "manifest.json", m.dump(2) + "\n");
  }

 private:
  const RunConfig& cfg_;
  fs::path root_;
  std::set<std::string> files_;
};

std::string traces_jsonl(const std::vector<Tokens>& traces, const std::vector<Example>& probe) {
  const Vocab& v = Vocab::standard();
  std::string out;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto ans = parse_answer(traces[i]);
    nlohmann::json j = {{"example_id", i},
                        {"text", v.decode(traces[i])},
                        {"answer", ans ? nlohmann::json(*ans) : nlohmann::json(nullptr)},
                        {"truth", probe[i].answer},
                        {"hint", probe[i].hint}};
    out += j.dump() + "\n";
  }
  return out;
}

std::string bins_csv(const std::vector<EntropyBin>& bins) {
  std::ostringstream os;
  os.precision(17);
  os << "h_lo,h_hi,count,mean_kl_de,mean_grad_de\n";
  for (const auto& b : bins) {
    os << b.lo << ',' << b.hi << ',' << b.count << ',';
    if (b.mean_kl_de) os << *b.mean_kl_de;
    os << ',';
    if (b.mean_grad_de) os << *b.mean_grad_de;
    os << '\n';
  }
  return os.str();
}

std::vector<FaithfulnessReport> bare(const std::vector<ReportRow>& rows) {
  std::vector<FaithfulnessReport> out;
  for (const auto& r : rows) out.push_back(r.report);
  return out;
}

std::size_t limit_or_all(std::size_t limit, std::size_t n) { return limit == 0 ? n : std::min(limit, n); }

void run_sft(const RunConfig& cfg, RunDir& dir) {
  ModelConfig mc = cfg.model;
  mc.seed = *cfg.seed;
  Model model(mc);
  AdamW opt(model, cfg.sft.optimizer);
  const auto corpus = sft_corpus(mix_seed(*cfg.seed, 1), cfg.task, cfg.sft.corpus, cfg.sft.steps * cfg.sft.batch);
  std::ostringstream curve;
  curve.precision(17);
  curve << "step,loss\n";
  for (std::size_t s = 0; s < cfg.sft.steps; ++s) {
    const auto first = corpus.begin() + static_cast<std::ptrdiff_t>(s * cfg.sft.batch);
    const std::vector<Tokens> batch(first, first + static_cast<std::ptrdiff_t>(cfg.sft.batch));
    curve << s + 1 << ',' << sft_step(model, opt, batch) << '\n';
  }
  dir.write("sft_curve.csv", curve.str());
  model.save(dir.path("model.ckpt"), {{"sft_steps", cfg.sft.steps}, {"seed", *cfg.seed}});
  const auto probe = gen_examples(cfg.probe_seed, cfg.task, cfg.probe_size);
  const auto traces = greedy_decode(model, probe, cfg.train.decode.max_new);
  dir.write("probe.json", nlohmann::json(behavioral_probe(traces, probe)).dump(2) + "\n");
}

void run_rl(const RunConfig& cfg, RunDir& dir) {
  Model model = Model::load(cfg.checkpoint);
  const Model reference = Model::load(cfg.reference.empty() ? cfg.checkpoint : cfg.reference);
  TrainConfig tc = cfg.train;
  tc.seed = *cfg.seed;
  tc.validate(model.config());
  const auto probe = gen_examples(cfg.probe_seed, cfg.task, cfg.probe_size);
  TrainerOutputs out;
  out.trace_path = dir.path("trace.jsonl");
  out.rollout_path = dir.path("rollouts.jsonl");
  out.checkpoint_dir = cfg.output_dir / "checkpoints";
  try {
    train(model, tc, cfg.task, probe, reference, out);
  } catch (...) {
    dir.adopt_dir("checkpoints");
    throw;
  }
  dir.adopt_dir("checkpoints");
  model.save(dir.path("final.ckpt"), {{"steps", tc.steps}, {"intervention", tc.intervention}});
}

void run_eval(const RunConfig& cfg, RunDir& dir) {
  const Model model = Model::load(cfg.checkpoint);
  const Model reference = Model::load(cfg.reference.empty() ? cfg.checkpoint : cfg.reference);
  const auto probe = gen_examples(cfg.probe_seed, cfg.task, cfg.probe_size);
  const EvalResult r = evaluate_model(model, reference, probe, cfg.metric_limit, cfg.train.decode.max_new,
                                      cfg.entropy_bins);
  dir.write("traces.jsonl", traces_jsonl(r.traces, probe));
  dir.write("reports.jsonl", reports_jsonl(r.reports));
  nlohmann::json summary = summarize(r.traces, probe, r.reports);
  dir.write("probe.json", summary.dump(2) + "\n");
  dir.write("entropy_bins.csv", bins_csv(r.bins));
}

void run_compare(const RunConfig& cfg, RunDir& dir) {
  const Model a = Model::load(cfg.checkpoint);
  const Model b = Model::load(cfg.checkpoint_b);
  const auto probe = gen_examples(cfg.probe_seed, cfg.task, cfg.probe_size);
  CompareReport rep;
  if (cfg.reference.empty()) {
    rep = compare_models(a, b, a, b, probe, cfg.metric_limit, cfg.train.decode.max_new);
  } else {
    const Model q = Model::load(cfg.reference);
    rep = compare_models(a, b, q, q, probe, cfg.metric_limit, cfg.train.decode.max_new);
  }
  dir.write("compare.json", nlohmann::json(rep).dump(2) + "\n");
}

}  // namespace

std::uint64_t config_hash(const RunConfig& c) { return fnv1a(nlohmann::json(c).dump()); }

int run(const RunConfig& config) {
  try {
    config.validate();
  } catch (const std::exception& e) {
    std::cerr << "invalid config: " << e.what() << '\n';
    return kExitInvalidConfig;
  }
  std::optional<RunDir> dir;
  try {
    dir.emplace(config);
  } catch (const std::exception& e) {
    std::cerr << "invalid config: output directory: " << e.what() << '\n';
    return kExitInvalidConfig;
  }
  try {
    switch (config.mode) {
      case RunMode::Sft: run_sft(config, *dir); break;
      case RunMode::Rl: run_rl(config, *dir); break;
      case RunMode::Eval: run_eval(config, *dir); break;
      case RunMode::Compare: run_compare(config, *dir); break;
    }
    dir->finish("ok");
    return kExitOk;
  } catch (const NumericError& e) {
    std::cerr << "non-finite value: " << e.what() << '\n';
    dir->finish("non_finite");
    return kExitNonFinite;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid config: " << e.what() << '\n';
    dir->finish("invalid_config");
    return kExitInvalidConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    dir->finish("failed");
    return kExitFailure;
  }
}

EvalResult evaluate_model(const Model& model, const Model& reference, const std::vector<Example>& probe,
                          std::size_t metric_limit, std::size_t max_new, std::size_t bins) {
  EvalResult r;
  r.traces = greedy_decode(model, probe, max_new);
  r.reports = score_traces(r.traces, model, reference, limit_or_all(metric_limit, probe.size()), 0);
  r.behavior = behavioral_probe(r.traces, probe);
  if (!r.reports.empty()) r.bins = entropy_binned_kl(bare(r.reports), bins);
  return r;
}

void to_json(nlohmann::json& j, const MetricComparison& m) {
  j = {{"metric", m.metric},
       {"mean_a", m.mean_a},
       {"mean_b", m.mean_b},
       {"n_a", m.n_a},
       {"n_b", m.n_b},
       {"u", m.test.u},
       {"p", m.test.p},
       {"exact", m.test.exact},
       {"faithful_direction", m.faithful_direction}};
  if (m.direction_ok) j["direction_ok"] = *m.direction_ok;
}

void to_json(nlohmann::json& j, const CompareReport& r) {
  j = {{"probe_size", r.probe_size},
       {"alpha", r.alpha},
       {"behavior_a", r.behavior_a},
       {"behavior_b", r.behavior_b},
       {"metrics", r.metrics}};
}

const MetricComparison& CompareReport::at(const std::string& metric) const {
  for (const auto& m : metrics)
    if (m.metric == metric) return m;
  throw std::out_of_range("no metric " + metric);
}

CompareReport compare_models(const Model& a, const Model& b, const Model& ref_a, const Model& ref_b,
                             const std::vector<Example>& probe, std::size_t metric_limit, std::size_t max_new,
                             double alpha) {
  CompareReport rep;
  rep.probe_size = probe.size();
  rep.alpha = alpha;
  const std::size_t limit = limit_or_all(metric_limit, probe.size());
  const auto ta = greedy_decode(a, probe, max_new);
  const auto tb = greedy_decode(b, probe, max_new);
  rep.behavior_a = behavioral_probe(ta, probe);
  rep.behavior_b = behavioral_probe(tb, probe);
  const auto ra = bare(score_traces(ta, a, ref_a, limit, 0));
  const auto rb = bare(score_traces(tb, b, ref_b, limit, 0));

  using Field = std::optional<double> (*)(const FaithfulnessReport&);
  struct Spec {
    const char* name;
    Field field;
    const char* direction;
    bool asserted;
  };
  const Spec specs[] = {
      {"suff", [](const FaithfulnessReport& r) { return std::optional<double>(r.suff); }, "lower", true},
      {"kl_de", [](const FaithfulnessReport& r) { return std::optional<double>(r.kl_de); }, "lower", true},
      {"kl_nec", [](const FaithfulnessReport& r) { return std::optional<double>(r.kl_nec); }, "higher", false},
      {"grad_de", [](const FaithfulnessReport& r) { return r.grad_de; }, "lower", true},
      {"grad_nec", [](const FaithfulnessReport& r) { return r.grad_nec; }, "higher", true},
  };
  for (const Spec& s : specs) {
    std::vector<double> xa, xb;
    for (const auto& r : ra)
      if (auto v = s.field(r)) xa.push_back(*v);
    for (const auto& r : rb)
      if (auto v = s.field(r)) xb.push_back(*v);
    MetricComparison m;
    m.metric = s.name;
    m.faithful_direction = s.direction;
    m.n_a = xa.size();
    m.n_b = xb.size();
    if (!xa.empty() && !xb.empty()) {
      double sa = 0.0, sb = 0.0;
      for (double v : xa) sa += v;
      for (double v : xb) sb += v;
      m.mean_a = sa / static_cast<double>(xa.size());
      m.mean_b = sb / static_cast<double>(xb.size());
      m.test = mann_whitney_u(xa, xb);
      if (s.asserted) {
        const bool side = std::string(s.direction) == "lower" ? m.mean_a < m.mean_b : m.mean_a > m.mean_b;
        m.direction_ok = side && m.test.p < alpha;
      }
    } else if (s.asserted) {
      m.direction_ok = false;
    }
    rep.metrics.push_back(std::move(m));
  }
  return rep;
}

namespace {

struct Panel {
  const char* name;
  const char* description;
  std::optional<double> (*value)(const nlohmann::json& row);
};

std::optional<double> field(const nlohmann::json& obj, const char* key) {
  if (!obj.is_object() || !obj.contains(key) || obj.at(key).is_null()) return std::nullopt;
  return obj.at(key).get<double>();
}

const Panel kPanels[] = {
    {"overall_accuracy", "greedy probe accuracy",
     [](const nlohmann::json& r) { return field(r["probe"]["behavior"], "overall_accuracy"); }},
    {"wrong_hint_follow_rate", "share of wrong-hint probes answered with the hint",
     [](const nlohmann::json& r) { return field(r["probe"]["behavior"], "wrong_hint_follow_rate"); }},
    {"wrong_hint_accuracy", "accuracy on wrong-hint probes",
     [](const nlohmann::json& r) { return field(r["probe"]["behavior"], "wrong_hint_accuracy"); }},
    {"hint_mention_rate", "share of probe CoTs that state the hint value",
     [](const nlohmann::json& r) { return field(r["probe"]["behavior"], "hint_mention_rate"); }},
    {"suff", "mean H_q(A|C) on the probe subset", [](const nlohmann::json& r) { return field(r["probe"], "suff"); }},
    {"kl_de", "mean KL-DE", [](const nlohmann::json& r) { return field(r["probe"], "kl_de"); }},
    {"kl_nec", "mean KL-Nec", [](const nlohmann::json& r) { return field(r["probe"], "kl_nec"); }},
    {"grad_de", "mean Grad-DE", [](const nlohmann::json& r) { return field(r["probe"], "grad_de"); }},
    {"grad_nec", "mean Grad-Nec", [](const nlohmann::json& r) { return field(r["probe"], "grad_nec"); }},
};

}  // namespace

std::vector<fs::path> emit_plot_data(const std::vector<TraceSource>& sources, const fs::path& output_dir) {
  if (sources.empty()) throw std::invalid_argument("emit_plot_data: no traces");
  // step -> one probe row per source
  std::vector<std::map<std::size_t, nlohmann::json>> rows(sources.size());
  std::set<std::size_t> steps;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    std::ifstream f(sources[i].path);
    if (!f) throw std::runtime_error("cannot read " + sources[i].path.string());
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      nlohmann::json j = nlohmann::json::parse(line);
      if (j["probe"].is_null()) continue;
      const std::size_t step = j.at("step").get<std::size_t>();
      steps.insert(step);
      rows[i][step] = std::move(j);
    }
  }
  fs::create_directories(output_dir);
  std::vector<fs::path> written;
  nlohmann::json schema = nlohmann::json::object();
  std::vector<std::string> labels;
  for (const auto& s : sources) labels.push_back(s.label);
  for (const Panel& p : kPanels) {
    std::ostringstream os;
    os.precision(17);
    os << "step";
    for (const auto& l : labels) os << ',' << l;
    os << '\n';
    for (std::size_t step : steps) {
      os << step;
      for (std::size_t i = 0; i < sources.size(); ++i) {
        os << ',';
        const auto it = rows[i].find(step);
        if (it == rows[i].end()) continue;
        if (const auto v = p.value(it->second)) os << *v;
      }
      os << '\n';
    }
    const fs::path file = output_dir / (std::string(p.name) + ".csv");
    write_file(file, os.str());
    written.push_back(file);
    nlohmann::json cols = nlohmann::json::array();
    cols.push_back({{"name", "step"}, {"meaning", "training step of the probe evaluation"}});
    for (std::size_t i = 0; i < sources.size(); ++i)
      cols.push_back({{"name", labels[i]}, {"meaning", p.description}, {"source", sources[i].path.string()}});
    schema[std::string(p.name) + ".csv"] = {{"columns", cols}, {"empty_cell", "no value at that step"}};
  }
  const fs::path sp = output_dir / "schema.json";
  write_file(sp, schema.dump(2) + "\n");
  written.push_back(sp);
  return written;
}

int run_plots(const std::vector<TraceSource>& sources, const fs::path& output_dir) {
  try {
    const auto files = emit_plot_data(sources, output_dir);
    nlohmann::json src = nlohmann::json::array();
    for (const auto& s : sources) src.push_back({{"label", s.label}, {"path", s.path.string()}});
    std::vector<std::string> names;
    for (const auto& f : files) names.push_back(f.filename().string());
    const nlohmann::json m = {{"mode", "plots"},
                              {"config_hash", hex(fnv1a(src.dump()))},
                              {"code_version", COTLAB_VERSION},
                              {"seed", nullptr},
                              {"sources", src},
                              {"status", "ok"},
                              {"files", names}};
    write_file(output_dir / "manifest.json", m.dump(2) + "\n");
    return kExitOk;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kExitInvalidConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace cotlab
