#include "dlm2/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "dlm2/checkpoint.hpp"
#include "dlm2/datagen.hpp"
#include "dlm2/error.hpp"
#include "dlm2/io.hpp"
#include "dlm2/metrics.hpp"
#include "dlm2/rng.hpp"

namespace dlm2 {

void TrainConfig::validate() const {
  if (epochs < 1) throw ParameterError("epochs must be >= 1");
  if (iterations < 0) throw ParameterError("iterations must be >= 0");
  if (batch_size == 0) throw ParameterError("batch_size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ParameterError("learning_rate must be finite and >= 0");
  }
  if (!(alpha0 > 0.0 && alpha0 <= 1.0)) throw ParameterError("alpha0 must lie in (0, 1]");
  if (!(beta0 >= 0.0 && beta0 <= 1.0)) throw ParameterError("beta0 must lie in [0, 1]");
  if (!(replay_ratio >= 0.0 && replay_ratio <= 1.0)) {
    throw ParameterError("replay_ratio must lie in [0, 1]");
  }
  if (!(temperature > 0.0)) throw ParameterError("temperature must be > 0");
  if (max_response == 0) throw ParameterError("max_response must be >= 1");
  if (log_every < 1) throw ParameterError("log_every must be >= 1");
  if (!(clip_lo > 0.0 && clip_lo <= clip_hi && clip_hi <= 1.0)) {
    throw ParameterError("need 0 < clip_lo <= clip_hi <= 1");
  }
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

struct Probe {
  std::vector<TokenSeq> prompts;
  std::vector<TokenSeq> teacher_responses;
  std::vector<TokenSeq> student_responses;
};

class Evaluator {
 public:
  Evaluator(const TrainConfig& cfg, const LanguageModel& teacher, const LanguageModel& student,
            const EvalSet& eval)
      : cfg_(cfg), eval_(eval) {
    if (eval.prompts.empty()) throw DataError("empty evaluation set");
    if (eval.prompts.size() != eval.references.size()) {
      throw DimensionError("evaluation prompts and references are not aligned");
    }
    const std::size_t n = std::min(std::max<std::size_t>(cfg.probe_size, 1), eval.prompts.size());
    probe_.prompts.assign(eval.prompts.begin(), eval.prompts.begin() + static_cast<std::ptrdiff_t>(n));
    SamplingConfig sc{cfg.temperature, cfg.max_response, derive_seed(cfg.seed, 0x9e0be), 0,
                      cfg.threads};
    for (auto& t : batched_onpolicy_sample(probe_.prompts, teacher, student, sc)) {
      probe_.teacher_responses.push_back(std::move(t.teacher_response));
      probe_.student_responses.push_back(std::move(t.student_response));
    }
  }

  void fill(const LanguageModel& student, MetricsRecord& r) const {
    r.nll_tgo = eval_nll(student, probe_.teacher_responses, probe_.prompts);
    r.nll_sgo = eval_nll(student, probe_.student_responses, probe_.prompts);
    r.rouge_l = mean_rouge_l(student, eval_.prompts, eval_.references, cfg_.max_response,
                             cfg_.rouge_samples, eval_.sample_seed);
    r.tok_acc = token_accuracy(student, eval_.references, eval_.prompts);
  }

 private:
  const TrainConfig& cfg_;
  const EvalSet& eval_;
  Probe probe_;
};

std::vector<double> concat(std::vector<double> a, const std::vector<double>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

std::string metrics_csv_row(const MetricsRecord& r) {
  return std::to_string(r.epoch) + "," + std::to_string(r.iter) + "," + fmt(r.loss) + "," +
         fmt(r.alpha_t) + "," + fmt(r.alpha_s) + "," + fmt(r.beta) + "," + fmt(r.m) + "," +
         fmt(r.nll_tgo) + "," + fmt(r.nll_sgo) + "," + fmt(r.rouge_l) + "," + fmt(r.tok_acc) + "," +
         fmt(r.wall_ms);
}

std::string metrics_csv(std::span<const MetricsRecord> records) {
  std::string out = std::string(kMetricsHeader) + "\n";
  for (const auto& r : records) out += metrics_csv_row(r) + "\n";
  return out;
}

DistillResult run_distillation(const TrainConfig& cfg, const LanguageModel& teacher,
                               LanguageModel& student, std::span<const TokenSeq> train_prompts,
                               const EvalSet& eval, const DistillOptions& opts) {
  cfg.validate();
  if (train_prompts.empty()) throw DataError("no training prompts");

  LossSpec spec;
  spec.kind = cfg.kind;
  spec.alpha_t = spec.alpha_s = cfg.alpha0;
  spec.beta = cfg.beta0;
  spec.gamma = cfg.gamma;
  spec.lambda = cfg.lambda;
  spec.token_mode = cfg.token_mode;
  spec.reduction = cfg.reduction;
  spec.response = cfg.response;
  spec.validate();

  ScheduleState sched;
  sched.alpha0 = sched.alpha_t = sched.alpha_s = cfg.alpha0;
  sched.beta0 = sched.beta = cfg.beta0;
  sched.clip_lo = cfg.clip_lo;
  sched.clip_hi = cfg.clip_hi;
  sched.straight_pairing = cfg.straight_pairing;
  sched.beta_mode = cfg.beta_mode;
  const bool scheduled = cfg.kind == LossKind::DISTILLM2 && cfg.curriculum;

  std::unique_ptr<LanguageModel> owned_reference;
  const LanguageModel* reference = opts.reference;
  if (cfg.kind == LossKind::DPO && reference == nullptr) {
    owned_reference = student.clone();
    reference = owned_reference.get();
  }

  const auto& out_dir = opts.out_dir;
  if (out_dir) std::filesystem::create_directories(*out_dir);

  const auto start = std::chrono::steady_clock::now();
  auto elapsed_ms = [&] {
    if (!cfg.wall_clock) return 0.0;
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  };

  DistillResult result;
  const Evaluator evaluator(cfg, teacher, student, eval);
  auto snapshot_record = [&](int e, int tau, double loss) {
    MetricsRecord r;
    r.epoch = e;
    r.iter = tau;
    r.loss = loss;
    r.alpha_t = spec.alpha_t;
    r.alpha_s = spec.alpha_s;
    r.beta = spec.beta;
    r.m = sched.m.value_or(0.0);
    evaluator.fill(student, r);
    r.wall_ms = elapsed_ms();
    return r;
  };
  result.initial = snapshot_record(0, 0, std::nan(""));

  auto params = student.parameters();
  ReplayBuffer buffer;
  int e = 0, tau = 0;
  try {
    for (e = 1; e <= cfg.epochs; ++e) {
      tau = 0;
      const auto snapshot = student.clone();
      const std::string digest = state_digest(snapshot->state());
      const SamplingConfig sc{cfg.temperature, cfg.max_response, cfg.seed, e, cfg.threads};
      std::vector<SampleTriple> data = batched_onpolicy_sample(train_prompts, teacher, *snapshot, sc);
      if (cfg.replay_ratio > 0.0) {
        data = replay_mix(data, buffer, cfg.replay_ratio, derive_seed(cfg.seed, e, 0x5e71a7)).data;
      }
      if (out_dir) {
        write_triples(*out_dir / ("data_epoch" + std::to_string(e) + ".jsonl"), data, digest);
      }

      Rng order_rng(derive_seed(cfg.seed, e, 0xba7c));
      std::vector<std::size_t> order(data.size());
      std::size_t cursor = order.size();
      std::vector<SampleTriple> batch;

      for (tau = 1; tau <= cfg.iterations; ++tau) {
        batch.clear();
        while (batch.size() < cfg.batch_size) {
          if (cursor == order.size()) {
            std::iota(order.begin(), order.end(), std::size_t{0});
            for (std::size_t i = order.size(); i > 1; --i) {
              std::swap(order[i - 1], order[order_rng.index(i)]);
            }
            cursor = 0;
          }
          batch.push_back(data[order[cursor++]]);
        }

        if (scheduled) {
          if (e >= 2) {
            if (tau == 1) {
              const auto gaps = concat(sample_gaps(teacher, student, batch, ResponseKind::Teacher),
                                       sample_gaps(teacher, student, batch, ResponseKind::Student));
              set_reference_gap(sched, gaps);
            }
            update_alpha(sched, gap_statistic(teacher, student, batch, ResponseKind::Teacher),
                         gap_statistic(teacher, student, batch, ResponseKind::Student));
          }
          // The formula drops at epoch boundaries; the running max keeps the
          // SRKL weight from ever decreasing.
          sched.beta = std::max(sched.beta,
                                update_beta(e, cfg.epochs, tau, cfg.iterations, cfg.beta0, cfg.beta_mode));
          spec.alpha_t = sched.alpha_t;
          spec.alpha_s = sched.alpha_s;
          spec.beta = sched.beta;
        }

        Graph g;
        const Tensor loss = compute_loss(g, spec, batch, student, teacher, reference);
        const double loss_value = loss.item();
        g.backward(loss);
        sgd_step(params, cfg.learning_rate);

        if (tau % cfg.log_every == 0 || tau == cfg.iterations) {
          result.records.push_back(snapshot_record(e, tau, loss_value));
          if (opts.on_record) opts.on_record(result.records.back());
        }
      }
      if (out_dir) {
        save_checkpoint(*out_dir / ("ckpt_epoch" + std::to_string(e) + ".bin"), student.state());
      }
    }
  } catch (const NumericError& err) {
    if (out_dir) {
      write_text(*out_dir / "failure.txt", "epoch=" + std::to_string(e) + "\niter=" + std::to_string(tau) +
                                               "\nerror=" + err.what() + "\n");
      write_text(*out_dir / "metrics.csv", metrics_csv(result.records));
    }
    throw;
  }
  if (out_dir) write_text(*out_dir / "metrics.csv", metrics_csv(result.records));
  return result;
}

}  // namespace dlm2
