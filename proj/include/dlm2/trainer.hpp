#pragma once

// The distillation loop: per epoch, freeze a student snapshot, sample a
// teacher and a student response for every training prompt, then take T
// SGD steps on the configured loss with the alpha/beta schedules.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlm2/divergence.hpp"
#include "dlm2/lm.hpp"
#include "dlm2/schedule.hpp"

namespace dlm2 {

struct TrainConfig {
  int epochs = 3;
  int iterations = 100;  // T, steps per epoch
  std::size_t batch_size = 8;
  double learning_rate = 1e-2;
  double alpha0 = 0.1;
  double beta0 = 0.5;
  LossKind kind = LossKind::DISTILLM2;
  TokenMode token_mode = TokenMode::FULL_SUPPORT;
  Reduction reduction = Reduction::MeanTokens;
  ResponseKind response = ResponseKind::Both;
  double gamma = 0.5;
  double lambda = 1.0;
  double replay_ratio = 0.0;
  std::uint64_t seed = 0;
  double temperature = 1.0;
  std::size_t max_response = 16;
  int log_every = 10;
  std::size_t probe_size = 64;
  // Eval ROUGE-L: 0 decodes greedily, n > 0 averages n sampled responses.
  std::size_t rouge_samples = 1;
  bool wall_clock = false;  // off: wall_ms is logged as 0 so CSVs are reproducible
  std::size_t threads = 0;
  double clip_lo = 0.01;
  double clip_hi = 0.1;
  BetaMode beta_mode = BetaMode::Verbatim;
  bool straight_pairing = false;
  // DISTILLM2 only: adapt alpha from epoch 2 on and raise beta per step.
  bool curriculum = true;

  void validate() const;
};

struct MetricsRecord {
  int epoch = 0;
  int iter = 0;
  double loss = 0.0;
  double alpha_t = 0.0;
  double alpha_s = 0.0;
  double beta = 0.0;
  double m = 0.0;  // 0 until the reference gap is set
  double nll_tgo = 0.0;
  double nll_sgo = 0.0;
  double rouge_l = 0.0;
  double tok_acc = 0.0;
  double wall_ms = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "epoch,iter,loss,alpha_t,alpha_s,beta,m,nll_tgo,nll_sgo,rouge_l,tok_acc,wall_ms";

std::string metrics_csv_row(const MetricsRecord& r);
std::string metrics_csv(std::span<const MetricsRecord> records);

// Held-out prompts with reference responses for ROUGE-L and token accuracy.
// Sampled evaluation draws response k of prompt i from the stream
// derive_seed(sample_seed, i, k); references drawn from the teacher with the
// k = 0 stream make ROUGE-L a coupled comparison that reaches 1 when the
// student matches the teacher.
struct EvalSet {
  std::vector<TokenSeq> prompts;
  std::vector<TokenSeq> references;
  std::uint64_t sample_seed = 0;
};

struct DistillResult {
  MetricsRecord initial;  // evaluation before the first step (epoch 0, iter 0)
  std::vector<MetricsRecord> records;
};

struct DistillOptions {
  // When set, data_epoch{e}.jsonl, ckpt_epoch{e}.bin and metrics.csv are
  // written here.
  std::optional<std::filesystem::path> out_dir;
  // DPO reference; defaults to a copy of the student before training.
  const LanguageModel* reference = nullptr;
  std::function<void(const MetricsRecord&)> on_record;
};

// A non-finite value aborts the run: the diagnostic is written to
// out_dir/failure.txt and the NumericError is rethrown.
DistillResult run_distillation(const TrainConfig& cfg, const LanguageModel& teacher,
                               LanguageModel& student, std::span<const TokenSeq> train_prompts,
                               const EvalSet& eval, const DistillOptions& opts = {});

}  // namespace dlm2
