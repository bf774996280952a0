#pragma once

// Toy reproductions of the three loss-behaviour experiments: a free
// categorical fit to a long-tailed target, NLL dynamics per loss on a
// grammar task, and ROUGE-L convergence of the contrastive loss against
// single-divergence baselines.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlm2/trainer.hpp"

namespace dlm2 {

struct ToyTaskConfig {
  std::size_t vocab = 12;
  std::size_t max_len = 16;
  std::uint64_t rule_seed = 11;
  std::size_t corpus_size = 4000;
  std::size_t teacher_d_model = 32;
  std::size_t teacher_layers = 2;
  std::size_t teacher_sft_steps = 800;
  std::size_t student_d_model = 16;
  std::size_t student_layers = 1;
  std::size_t student_sft_steps = 300;
  double student_subset = 0.1;
  double sft_learning_rate = 0.1;
  std::size_t sft_batch_size = 16;
  std::size_t train_prompts = 256;
  std::size_t eval_prompts = 64;
};

struct ToyTask {
  std::unique_ptr<TinyTransformerLM> teacher;
  std::unique_ptr<TinyTransformerLM> student;  // after SFT, before distillation
  std::vector<TokenSeq> train_prompts;
  EvalSet eval;  // references are teacher samples on the coupled streams
};

// The teacher depends only on the task config; `seed` selects the student
// initialization, its SFT subset order and nothing else.
ToyTask prepare_toy_task(const ToyTaskConfig& cfg, std::uint64_t seed);

// --- free categorical fit

struct CategoricalFitConfig {
  std::size_t vocab = 20;
  double head_mass = 0.5;
  double decay = 0.7;
  std::size_t steps = 2000;
  double learning_rate = 1.0;
  std::size_t log_every = 100;
};

struct CategoricalFit {
  std::vector<double> target;
  std::vector<std::size_t> steps;          // logged step numbers, starting at 0
  std::vector<std::vector<double>> rows;  // q at each logged step
};

// Gradient descent on the logits of q (initialized uniform) for
// KL(p || q) or KL(q || p).
CategoricalFit fit_categorical(const CategoricalFitConfig& cfg, LossKind kind);

double tail_mass(std::span<const double> row, std::size_t first_bin);
double total_variation(std::span<const double> a, std::span<const double> b);

// --- per-loss NLL dynamics

struct LossRun {
  std::string name;
  TrainConfig config;
  DistillResult result;
};

struct Fig2bConfig {
  ToyTaskConfig task;
  TrainConfig train;  // kind and alpha/beta fields are overwritten per run
  std::uint64_t seed = 0;
};

Fig2bConfig default_fig2b_config();

// One run per loss in {KL, RKL, SKL, SRKL, DPKD, CALD} from the same student.
std::vector<LossRun> run_fig2b(const Fig2bConfig& cfg,
                               const std::optional<std::filesystem::path>& out_dir = std::nullopt);

// --- convergence comparison

struct Fig2cConfig {
  ToyTaskConfig task;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  double gamma = 0.5;
};

Fig2cConfig default_fig2c_config();

// Run names: CALD, SKL, SRKL, INTERP_TGO, INTERP_SGO.
struct Fig2cSeedRuns {
  std::uint64_t seed = 0;
  std::vector<LossRun> runs;
};

std::vector<Fig2cSeedRuns> run_fig2c(const Fig2cConfig& cfg,
                                     const std::optional<std::filesystem::path>& out_dir = std::nullopt);

// First logged global iteration at which `curve` reaches `level`, or
// nullopt. Iterations count across epochs.
std::optional<int> first_reaching(const DistillResult& run, int iterations_per_epoch, double level);

double median(std::vector<double> values);

// Per seed, the first iteration at which CALD reaches SKL's final ROUGE-L,
// divided by the total iterations E*T (infinity if it never does); the
// median is over seeds. Final ROUGE-L medians are keyed by run name.
struct Fig2cSummary {
  double median_reach_ratio = 0.0;
  std::map<std::string, double> median_final;
};

Fig2cSummary summarize_fig2c(std::span<const Fig2cSeedRuns> seeds, int iterations_per_epoch, int epochs);

}  // namespace dlm2
