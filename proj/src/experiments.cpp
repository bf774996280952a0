#include "dlm2/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dlm2/datagen.hpp"
#include "dlm2/error.hpp"
#include "dlm2/io.hpp"
#include "dlm2/rng.hpp"

namespace dlm2 {

ToyTask prepare_toy_task(const ToyTaskConfig& cfg, std::uint64_t seed) {
  const Grammar grammar = make_grammar(cfg.vocab, cfg.rule_seed);
  const auto corpus = sample_grammar_corpus(grammar, cfg.max_len, derive_seed(cfg.rule_seed, 0xc0de),
                                            cfg.corpus_size);
  if (corpus.empty()) throw DataError("toy corpus is empty");

  ToyTask task;
  TransformerConfig tc{cfg.vocab, cfg.teacher_d_model, cfg.teacher_layers, 2, 2 * cfg.teacher_d_model,
                       cfg.max_len};
  task.teacher = std::make_unique<TinyTransformerLM>(tc, derive_seed(cfg.rule_seed, 0x7eac));
  SftConfig sft{cfg.teacher_sft_steps, cfg.sft_learning_rate, cfg.sft_batch_size,
                derive_seed(cfg.rule_seed, 0x5f7), 0};
  train_sft(*task.teacher, corpus, sft);

  TransformerConfig sc{cfg.vocab, cfg.student_d_model, cfg.student_layers, 2, 2 * cfg.student_d_model,
                       cfg.max_len};
  task.student = std::make_unique<TinyTransformerLM>(sc, derive_seed(seed, 0x57d));
  const auto subset_n = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(cfg.student_subset * static_cast<double>(corpus.size()))));
  const std::span<const CorpusRecord> subset(corpus.data(), std::min(subset_n, corpus.size()));
  sft.steps = cfg.student_sft_steps;
  sft.seed = derive_seed(seed, 0x5f8);
  train_sft(*task.student, subset, sft);

  const auto prompts = sample_grammar_corpus(grammar, cfg.max_len, derive_seed(cfg.rule_seed, 0x9a0),
                                             cfg.train_prompts + cfg.eval_prompts);
  task.eval.sample_seed = derive_seed(cfg.rule_seed, 0xe5a1);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (i < cfg.train_prompts) {
      task.train_prompts.push_back(prompts[i].prompt);
    } else {
      task.eval.prompts.push_back(prompts[i].prompt);
      const std::size_t k = task.eval.prompts.size() - 1;
      const DecodeConfig dc{1.0, cfg.max_len, derive_seed(task.eval.sample_seed, k, 0)};
      task.eval.references.push_back(sample(*task.teacher, prompts[i].prompt, dc));
    }
  }
  return task;
}

// ---------------------------------------------------------------------------

double tail_mass(std::span<const double> row, std::size_t first_bin) {
  double s = 0.0;
  for (std::size_t i = first_bin; i < row.size(); ++i) s += row[i];
  return s;
}

double total_variation(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("rows differ in length");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::abs(a[i] - b[i]);
  return 0.5 * s;
}

CategoricalFit fit_categorical(const CategoricalFitConfig& cfg, LossKind kind) {
  if (kind != LossKind::KL && kind != LossKind::RKL) {
    throw ContractError("categorical fit supports KL and RKL");
  }
  if (cfg.log_every == 0) throw ParameterError("log_every must be >= 1");
  CategoricalFit fit;
  fit.target = make_longtail_target(cfg.vocab, cfg.head_mass, cfg.decay);
  std::vector<double> logp(fit.target.size());
  std::transform(fit.target.begin(), fit.target.end(), logp.begin(), [](double p) { return std::log(p); });
  const Tensor lp = Tensor::from({1, cfg.vocab}, logp);
  Tensor logits = Tensor::zeros({1, cfg.vocab}, true);
  NamedTensor param{"logits", logits};

  auto log_row = [&] {
    Graph g(false);
    const Tensor lq = g.log_softmax(logits);
    std::vector<double> q(lq.values().begin(), lq.values().end());
    for (auto& x : q) x = std::exp(x);
    fit.steps.push_back(fit.steps.empty() ? 0 : fit.steps.back());
    fit.rows.push_back(std::move(q));
  };
  log_row();
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    Graph g;
    const Tensor loss = g.sum(row_divergence(g, lp, g.log_softmax(logits), kind));
    g.backward(loss);
    sgd_step(std::span<NamedTensor>(&param, 1), cfg.learning_rate);
    if (step % cfg.log_every == 0 || step == cfg.steps) {
      log_row();
      fit.steps.back() = step;
    }
  }
  return fit;
}

// ---------------------------------------------------------------------------

namespace {

void write_run(const std::filesystem::path& dir, const std::string& name, const LossRun& run) {
  std::vector<MetricsRecord> all{run.result.initial};
  all.insert(all.end(), run.result.records.begin(), run.result.records.end());
  write_text(dir / (name + ".csv"), metrics_csv(all));
}

LossRun distill(const std::string& name, TrainConfig cfg, const ToyTask& task) {
  auto student = task.student->clone();
  LossRun run{name, cfg, {}};
  run.result = run_distillation(cfg, *task.teacher, *student, task.train_prompts, task.eval);
  return run;
}

}  // namespace

Fig2bConfig default_fig2b_config() {
  Fig2bConfig cfg;
  cfg.train.epochs = 1;
  cfg.train.iterations = 500;
  cfg.train.batch_size = 8;
  cfg.train.learning_rate = 0.3;
  cfg.train.log_every = 25;
  cfg.train.lambda = 0.1;
  return cfg;
}

std::vector<LossRun> run_fig2b(const Fig2bConfig& cfg, const std::optional<std::filesystem::path>& out_dir) {
  const ToyTask task = prepare_toy_task(cfg.task, cfg.seed);
  std::vector<LossRun> runs;
  for (LossKind kind : {LossKind::KL, LossKind::RKL, LossKind::SKL, LossKind::SRKL, LossKind::DPKD,
                        LossKind::CALD}) {
    TrainConfig tc = cfg.train;
    tc.kind = kind;
    tc.seed = cfg.seed;
    // Forward-type losses train on teacher responses, reverse-type on the
    // student's own; the contrastive ones need both.
    switch (kind) {
      case LossKind::KL:
      case LossKind::SKL:
        tc.response = ResponseKind::Teacher;
        break;
      case LossKind::RKL:
      case LossKind::SRKL:
        tc.response = ResponseKind::Student;
        break;
      default:
        tc.response = ResponseKind::Both;
    }
    runs.push_back(distill(to_string(kind), tc, task));
  }
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    for (const auto& r : runs) write_run(*out_dir, "fig2b_" + r.name, r);
  }
  return runs;
}

Fig2cConfig default_fig2c_config() {
  Fig2cConfig cfg;
  cfg.train.epochs = 3;
  cfg.train.iterations = 100;
  cfg.train.batch_size = 8;
  cfg.train.learning_rate = 0.05;
  cfg.train.log_every = 10;
  // A weaker starting student and more eval prompts than the defaults, so
  // the ROUGE-L curves have room to separate above sampling noise.
  cfg.task.student_sft_steps = 60;
  cfg.task.eval_prompts = 256;
  return cfg;
}

std::vector<Fig2cSeedRuns> run_fig2c(const Fig2cConfig& cfg,
                                     const std::optional<std::filesystem::path>& out_dir) {
  std::vector<Fig2cSeedRuns> out;
  for (std::uint64_t seed : cfg.seeds) {
    const ToyTask task = prepare_toy_task(cfg.task, seed);
    Fig2cSeedRuns s{seed, {}};
    TrainConfig base = cfg.train;
    base.seed = seed;
    base.gamma = cfg.gamma;

    TrainConfig c = base;
    c.kind = LossKind::CALD;
    s.runs.push_back(distill("CALD", c, task));
    c = base;
    c.kind = LossKind::SKL;
    c.response = ResponseKind::Teacher;
    s.runs.push_back(distill("SKL", c, task));
    c.kind = LossKind::SRKL;
    c.response = ResponseKind::Student;
    s.runs.push_back(distill("SRKL", c, task));
    c.kind = LossKind::INTERP;
    c.response = ResponseKind::Teacher;
    s.runs.push_back(distill("INTERP_TGO", c, task));
    c.response = ResponseKind::Student;
    s.runs.push_back(distill("INTERP_SGO", c, task));

    if (out_dir) {
      std::filesystem::create_directories(*out_dir);
      for (const auto& r : s.runs) write_run(*out_dir, "fig2c_seed" + std::to_string(seed) + "_" + r.name, r);
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::optional<int> first_reaching(const DistillResult& run, int iterations_per_epoch, double level) {
  if (run.initial.rouge_l >= level) return 0;
  for (const auto& r : run.records) {
    if (r.rouge_l >= level) return (r.epoch - 1) * iterations_per_epoch + r.iter;
  }
  return std::nullopt;
}

double median(std::vector<double> values) {
  if (values.empty()) throw DataError("median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}


Fig2cSummary summarize_fig2c(std::span<const Fig2cSeedRuns> seeds, int iterations_per_epoch, int epochs) {
  if (seeds.empty()) throw DataError("no seeds to summarize");
  auto find = [](const Fig2cSeedRuns& s, const std::string& name) -> const DistillResult& {
    for (const auto& r : s.runs) {
      if (r.name == name) return r.result;
    }
    throw DataError("seed " + std::to_string(s.seed) + " has no run " + name);
  };
  auto final_rouge = [](const DistillResult& r) {
    return r.records.empty() ? r.initial.rouge_l : r.records.back().rouge_l;
  };
  Fig2cSummary out;
  std::vector<double> ratios;
  std::map<std::string, std::vector<double>> finals;
  const double total = static_cast<double>(iterations_per_epoch) * epochs;
  for (const auto& s : seeds) {
    const auto reach = first_reaching(find(s, "CALD"), iterations_per_epoch, final_rouge(find(s, "SKL")));
    ratios.push_back(reach ? *reach / total : std::numeric_limits<double>::infinity());
    for (const auto& r : s.runs) finals[r.name].push_back(final_rouge(r.result));
  }
  out.median_reach_ratio = median(ratios);
  for (auto& [name, v] : finals) out.median_final[name] = median(std::move(v));
  return out;
}

}  // namespace dlm2
