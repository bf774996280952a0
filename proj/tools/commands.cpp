#include "commands.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>

#include "dlm2/checkpoint.hpp"
#include "dlm2/config.hpp"
#include "dlm2/error.hpp"
#include "dlm2/experiments.hpp"
#include "dlm2/io.hpp"
#include "dlm2/metrics.hpp"
#include "dlm2/oracle.hpp"

#ifndef DLM2_VERSION
#define DLM2_VERSION "unknown"
#endif

namespace dlm2::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename Fn>
int guarded(Fn&& fn) {
  try {
    return fn();
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "filesystem error: " << e.what() << "\n";
    return kUsage;
  }
}

Config load_config(const GlobalOptions& g) {
  return g.config ? Config::load(*g.config) : Config::parse("");
}

const fs::path& require_out(const GlobalOptions& g) {
  if (!g.out) throw ConfigError("--out DIR is required");
  return *g.out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

struct Manifest {
  std::string command;
  std::uint64_t seed = 0;
  json config = json::object();
  json inputs = json::object();
  json outputs = json::array();

  void add_config(const std::vector<std::pair<std::string, std::string>>& kv) {
    for (const auto& [k, v] : kv) config[k] = v;
  }
  void add_input(const std::string& name, const fs::path& path) {
    inputs[name] = {{"path", path.string()}, {"digest", file_digest(path)}};
  }
  void write(const GlobalOptions& g, const fs::path& out) {
    if (g.config) add_input("config", *g.config);
    const json j = {{"command", command}, {"version", DLM2_VERSION}, {"seed", seed},
                    {"config", config},   {"inputs", inputs},         {"outputs", outputs}};
    fs::create_directories(out);
    write_text(out / "manifest.json", j.dump(2) + "\n");
  }
};

std::unique_ptr<TinyTransformerLM> load_model(const fs::path& path) {
  return std::make_unique<TinyTransformerLM>(TinyTransformerLM::from_tensors(load_checkpoint(path)));
}

// Replaces the toy-task models with checkpoints when the config names them.
void override_models(ToyTask& task, const fs::path& teacher_ckpt, const fs::path& student_ckpt,
                     Manifest& m) {
  if (!teacher_ckpt.empty()) {
    task.teacher = load_model(teacher_ckpt);
    m.add_input("teacher_checkpoint", teacher_ckpt);
  }
  if (!student_ckpt.empty()) {
    task.student = load_model(student_ckpt);
    m.add_input("student_checkpoint", student_ckpt);
  }
}

void print_record(const MetricsRecord& r) {
  std::cout << "epoch " << r.epoch << " iter " << r.iter << " loss " << fmt(r.loss) << " beta "
            << fmt(r.beta) << " nll_tgo " << fmt(r.nll_tgo) << " nll_sgo " << fmt(r.nll_sgo)
            << " rouge_l " << fmt(r.rouge_l) << "\n";
}

}  // namespace

int cmd_distill(const GlobalOptions& g) {
  return guarded([&] {
    Config c = load_config(g);
    ToyTaskConfig task_cfg;
    TrainConfig train;
    fs::path teacher_ckpt, student_ckpt;
    c.bind(task_cfg);
    c.bind(train);
    c.bind_path("teacher_checkpoint", teacher_ckpt);
    c.bind_path("student_checkpoint", student_ckpt);
    c.check_all_used();
    if (g.seed) train.seed = *g.seed;
    const fs::path& out = require_out(g);

    Manifest m{"distill", train.seed};
    m.add_config(describe(task_cfg));
    m.add_config(describe(train));
    m.outputs.push_back("metrics.csv");
    for (int e = 1; e <= train.epochs; ++e) {
      m.outputs.push_back("data_epoch" + std::to_string(e) + ".jsonl");
      m.outputs.push_back("ckpt_epoch" + std::to_string(e) + ".bin");
    }
    if (!teacher_ckpt.empty()) m.add_input("teacher_checkpoint", teacher_ckpt);
    if (!student_ckpt.empty()) m.add_input("student_checkpoint", student_ckpt);
    m.write(g, out);

    ToyTask task = prepare_toy_task(task_cfg, train.seed);
    Manifest unused;
    override_models(task, teacher_ckpt, student_ckpt, unused);
    DistillOptions opts;
    opts.out_dir = out;
    if (!g.quiet) opts.on_record = print_record;
    const auto result = run_distillation(train, *task.teacher, *task.student, task.train_prompts, task.eval, opts);
    if (!g.quiet) {
      std::cout << "wrote " << result.records.size() << " metrics rows and " << train.epochs
                << " checkpoints to " << out.string() << "\n";
    }
    return static_cast<int>(kOk);
  });
}

int cmd_oracles(const GlobalOptions& g, bool inject_fault) {
  return guarded([&] {
    OracleSuiteOptions opts;
    opts.inject_gradient_fault = inject_fault;
    if (g.seed) opts.seed = *g.seed;
    const auto checks = run_oracle_suite(opts);
    bool ok = true;
    json report = json::array();
    for (const auto& c : checks) {
      ok = ok && c.passed;
      if (!g.quiet) {
        std::printf("%-4s  %-36s value=%-12.4g tol=%-10.3g %s\n", c.passed ? "PASS" : "FAIL", c.name.c_str(),
                    c.value, c.tolerance, c.detail.c_str());
      }
      report.push_back({{"name", c.name}, {"passed", c.passed}, {"value", c.value},
                        {"tolerance", c.tolerance}, {"detail", c.detail}});
    }
    std::cout << (ok ? "all " : "FAILED: not all ") << checks.size() << " oracle checks passed\n";
    if (g.out) {
      fs::create_directories(*g.out);
      write_text(*g.out / "oracles.json", report.dump(2) + "\n");
    }
    return static_cast<int>(ok ? kOk : kCheckFailed);
  });
}

namespace {

int fig2a(const GlobalOptions& g) {
  Config c = load_config(g);
  CategoricalFitConfig cfg;
  c.bind(cfg);
  c.check_all_used();
  const fs::path& out = require_out(g);
  Manifest m{"fig2a", 0};
  m.add_config(describe(cfg));
  m.outputs = {"fig2a_rows.csv", "summary.json"};
  m.write(g, out);

  const auto kl = fit_categorical(cfg, LossKind::KL);
  const auto rkl = fit_categorical(cfg, LossKind::RKL);
  std::ostringstream csv;
  csv << "loss,step";
  for (std::size_t i = 0; i < cfg.vocab; ++i) csv << ",q" << i;
  csv << "\n";
  auto row = [&](const std::string& name, std::size_t step, const std::vector<double>& q) {
    csv << name << "," << step;
    for (double x : q) csv << "," << fmt(x);
    csv << "\n";
  };
  row("TARGET", 0, kl.target);
  for (const auto* fit : {&kl, &rkl}) {
    const std::string name = fit == &kl ? "KL" : "RKL";
    for (std::size_t i = 0; i < fit->rows.size(); ++i) row(name, fit->steps[i], fit->rows[i]);
  }
  write_text(out / "fig2a_rows.csv", csv.str());
  const std::size_t tail = cfg.vocab / 2;
  const json summary = {{"tail_first_bin", tail},
                        {"tail_mass_target", tail_mass(kl.target, tail)},
                        {"tail_mass_kl", tail_mass(kl.rows.back(), tail)},
                        {"tail_mass_rkl", tail_mass(rkl.rows.back(), tail)},
                        {"tv_kl_target", total_variation(kl.rows.back(), kl.target)},
                        {"tv_rkl_target", total_variation(rkl.rows.back(), rkl.target)}};
  write_text(out / "summary.json", summary.dump(2) + "\n");
  if (!g.quiet) std::cout << summary.dump(2) << "\n";
  return static_cast<int>(kOk);
}

int fig2b(const GlobalOptions& g) {
  Config c = load_config(g);
  Fig2bConfig cfg = default_fig2b_config();
  c.bind(cfg.task);
  c.bind(cfg.train);
  c.check_all_used();
  if (g.seed) cfg.train.seed = *g.seed;
  cfg.seed = cfg.train.seed;
  const fs::path& out = require_out(g);
  Manifest m{"fig2b", cfg.seed};
  m.add_config(describe(cfg.task));
  m.add_config(describe(cfg.train));
  for (const char* k : {"KL", "RKL", "SKL", "SRKL", "DPKD", "CALD"}) {
    m.outputs.push_back(std::string("fig2b_") + k + ".csv");
  }
  m.outputs.push_back("summary.json");
  m.write(g, out);

  const auto runs = run_fig2b(cfg, out);
  json summary = json::object();
  for (const auto& r : runs) {
    const auto& last = r.result.records.empty() ? r.result.initial : r.result.records.back();
    summary[r.name] = {{"initial_nll_tgo", r.result.initial.nll_tgo},
                       {"initial_nll_sgo", r.result.initial.nll_sgo},
                       {"final_nll_tgo", last.nll_tgo},
                       {"final_nll_sgo", last.nll_sgo}};
  }
  write_text(out / "summary.json", summary.dump(2) + "\n");
  if (!g.quiet) std::cout << summary.dump(2) << "\n";
  return static_cast<int>(kOk);
}

int fig2c(const GlobalOptions& g) {
  Config c = load_config(g);
  Fig2cConfig cfg = default_fig2c_config();
  c.bind(cfg);
  c.check_all_used();
  if (g.seed) cfg.seeds = {*g.seed};
  const fs::path& out = require_out(g);
  Manifest m{"fig2c", cfg.seeds.front()};
  m.add_config(describe(cfg.task));
  m.add_config(describe(cfg.train));
  std::string seeds;
  for (auto s : cfg.seeds) seeds += (seeds.empty() ? "" : ",") + std::to_string(s);
  m.config["seeds"] = seeds;
  m.config["gamma"] = fmt(cfg.gamma);
  m.outputs = {"fig2c_rouge.csv", "summary.json"};
  m.write(g, out);

  const auto all = run_fig2c(cfg, out);
  std::ostringstream csv;
  csv << "seed,run,iter,rouge_l\n";
  for (const auto& s : all) {
    for (const auto& r : s.runs) {
      csv << s.seed << "," << r.name << ",0," << fmt(r.result.initial.rouge_l) << "\n";
      for (const auto& rec : r.result.records) {
        csv << s.seed << "," << r.name << "," << (rec.epoch - 1) * cfg.train.iterations + rec.iter << ","
            << fmt(rec.rouge_l) << "\n";
      }
    }
  }
  write_text(out / "fig2c_rouge.csv", csv.str());
  const auto sum = summarize_fig2c(all, cfg.train.iterations, cfg.train.epochs);
  json summary = {{"median_reach_ratio", std::isfinite(sum.median_reach_ratio) ? json(sum.median_reach_ratio)
                                                                               : json("inf")}};
  for (const auto& [name, v] : sum.median_final) summary["median_final_rouge_l"][name] = v;
  write_text(out / "summary.json", summary.dump(2) + "\n");
  if (!g.quiet) std::cout << summary.dump(2) << "\n";
  return static_cast<int>(kOk);
}

}  // namespace

int cmd_fig2(const GlobalOptions& g, char variant) {
  return guarded([&] {
    switch (variant) {
      case 'a':
        return fig2a(g);
      case 'b':
        return fig2b(g);
      case 'c':
        return fig2c(g);
      default:
        throw ConfigError(std::string("unknown fig2 variant '") + variant + "'");
    }
  });
}

int cmd_gen_data(const GlobalOptions& g, std::optional<double> epsilon) {
  return guarded([&] {
    Config c = load_config(g);
    ToyTaskConfig task_cfg;
    TrainConfig train;
    SpecConfig spec;
    fs::path teacher_ckpt, student_ckpt;
    const bool speculative = epsilon.has_value() || c.has("epsilon");
    c.bind(task_cfg);
    c.bind(train);
    c.bind(spec);
    c.bind_path("teacher_checkpoint", teacher_ckpt);
    c.bind_path("student_checkpoint", student_ckpt);
    c.check_all_used();
    if (epsilon) spec.epsilon = *epsilon;
    if (g.seed) train.seed = *g.seed;
    const fs::path& out = require_out(g);

    ToyTask task = prepare_toy_task(task_cfg, train.seed);
    Manifest m{"gen-data", train.seed};
    override_models(task, teacher_ckpt, student_ckpt, m);
    m.add_config(describe(task_cfg));
    m.add_config(describe(train));
    if (speculative) m.add_config(describe(spec));
    m.config["pipeline"] = speculative ? "speculative" : "batched";
    m.config["student_snapshot_digest"] = state_digest(task.student->state());
    m.outputs = {"data.jsonl"};
    m.write(g, out);

    const SamplingConfig sc{train.temperature, train.max_response, train.seed, 1, train.threads};
    const auto triples = speculative
                             ? speculative_onpolicy_sample(task.train_prompts, *task.teacher, *task.student, sc, spec)
                             : batched_onpolicy_sample(task.train_prompts, *task.teacher, *task.student, sc);
    write_triples(out / "data.jsonl", triples);
    if (!g.quiet) {
      std::cout << "wrote " << triples.size() << " triples (" << (speculative ? "speculative" : "batched")
                << ") to " << (out / "data.jsonl").string() << "\n";
    }
    return static_cast<int>(kOk);
  });
}

int cmd_eval(const GlobalOptions& g) {
  return guarded([&] {
    Config c = load_config(g);
    ToyTaskConfig task_cfg;
    TrainConfig train;
    fs::path teacher_ckpt, student_ckpt;
    c.bind(task_cfg);
    c.bind(train);
    c.bind_path("teacher_checkpoint", teacher_ckpt);
    c.bind_path("student_checkpoint", student_ckpt);
    c.check_all_used();
    if (g.seed) train.seed = *g.seed;

    ToyTask task = prepare_toy_task(task_cfg, train.seed);
    Manifest m{"eval", train.seed};
    override_models(task, teacher_ckpt, student_ckpt, m);
    const auto& ev = task.eval;
    const json result = {
        {"nll_references", eval_nll(*task.student, ev.references, ev.prompts)},
        {"rouge_l", mean_rouge_l(*task.student, ev.prompts, ev.references, train.max_response,
                                 train.rouge_samples, ev.sample_seed)},
        {"tok_acc", token_accuracy(*task.student, ev.references, ev.prompts)},
        {"teacher_nll_references", eval_nll(*task.teacher, ev.references, ev.prompts)}};
    std::cout << result.dump(2) << "\n";
    if (g.out) {
      m.add_config(describe(task_cfg));
      m.add_config(describe(train));
      m.outputs = {"eval.json"};
      m.write(g, *g.out);
      write_text(*g.out / "eval.json", result.dump(2) + "\n");
    }
    return static_cast<int>(kOk);
  });
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Contrastive distillation lab on tiny language models"};
  app.set_version_flag("--version", DLM2_VERSION);
  app.require_subcommand(1);

  GlobalOptions g;
  std::string config, out;
  std::uint64_t seed = 0;
  auto add_globals = [&](CLI::App* sub) {
    sub->add_option("--config", config, "key=value configuration file");
    sub->add_option("--out", out, "output directory");
    sub->add_option("--seed", seed, "seed, overrides the config");
    sub->add_flag("--quiet", g.quiet, "suppress progress output");
  };

  auto* distill = app.add_subcommand("distill", "run the distillation loop on the toy task");
  add_globals(distill);
  auto* oracles = app.add_subcommand("oracles", "run the oracle suite");
  add_globals(oracles);
  bool inject = false;
  oracles->add_flag("--inject-fault", inject)->group("");
  auto* fig2 = app.add_subcommand("fig2", "toy loss-behaviour experiments");
  add_globals(fig2);
  std::string variant;
  fig2->add_option("variant", variant, "a, b or c")->required()->check(CLI::IsMember({"a", "b", "c"}));
  auto* gen = app.add_subcommand("gen-data", "sample a teacher/student triple dataset");
  add_globals(gen);
  double eps = 0.0;
  auto* eps_opt = gen->add_option("--epsilon", eps, "use speculative student responses");
  auto* eval = app.add_subcommand("eval", "evaluate a student on the toy eval set");
  add_globals(eval);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? static_cast<int>(kOk) : static_cast<int>(kUsage);
  }
  CLI::App* sub = app.get_subcommands().front();
  if (!config.empty()) g.config = config;
  if (!out.empty()) g.out = out;
  if (sub->count("--seed") > 0) g.seed = seed;

  if (sub == distill) return cmd_distill(g);
  if (sub == oracles) return cmd_oracles(g, inject);
  if (sub == fig2) return cmd_fig2(g, variant.front());
  if (sub == gen) return cmd_gen_data(g, eps_opt->count() > 0 ? std::optional<double>(eps) : std::nullopt);
  return cmd_eval(g);
}

}  // namespace dlm2::cli
