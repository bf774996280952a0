#include "dlm2/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dlm2/checkpoint.hpp"
#include "dlm2/datagen.hpp"
#include "dlm2/error.hpp"
#include "dlm2/rng.hpp"
#include "dlm2/schedule.hpp"

namespace dlm2 {

// ---------------------------------------------------------------------------
// Enumeration

std::vector<TokenSeq> enumerate_responses(std::size_t vocab, std::size_t length,
                                          const EnumerationBudget& budget) {
  if (vocab > budget.max_vocab || length > budget.max_length) {
    throw BudgetError("enumeration over V=" + std::to_string(vocab) + ", L=" + std::to_string(length) +
                      " exceeds the budget");
  }
  double space = std::pow(static_cast<double>(vocab), static_cast<double>(length));
  if (space > static_cast<double>(budget.max_sequences)) {
    throw BudgetError("enumeration space V^L exceeds " + std::to_string(budget.max_sequences));
  }
  if (length == 0) throw ParameterError("enumeration length must be positive");
  std::vector<TokenSeq> out;
  TokenSeq cur;
  std::function<void()> rec = [&] {
    for (std::size_t t = 0; t < vocab; ++t) {
      cur.push_back(static_cast<TokenId>(t));
      if (static_cast<TokenId>(t) == kEos || cur.size() == length) {
        out.push_back(cur);
      } else {
        rec();
      }
      cur.pop_back();
    }
  };
  rec();
  return out;
}

double sequence_prob(const TabularLM& model, const TokenSeq& prompt, const TokenSeq& response) {
  TokenSeq seq = prompt;
  double p = 1.0;
  for (TokenId t : response) {
    p *= model.prob(seq, t);
    seq.push_back(t);
  }
  return p;
}

namespace {

void check_pair(const TabularLM& teacher, const TabularLM& student, const TokenSeq& prompt,
                std::size_t length) {
  if (teacher.vocab_size() != student.vocab_size()) throw DimensionError("vocabularies differ");
  const std::size_t need = prompt.size() + length;
  if (need > teacher.max_length() || need > student.max_length()) {
    throw LengthError("prompt plus enumeration length exceeds model length");
  }
}

}  // namespace

double exact_sequence_kl(const TabularLM& teacher, const TabularLM& student, const TokenSeq& prompt,
                         std::size_t length, const EnumerationBudget& budget) {
  check_pair(teacher, student, prompt, length);
  double total = 0.0;
  for (const auto& y : enumerate_responses(teacher.vocab_size(), length, budget)) {
    const double p = sequence_prob(teacher, prompt, y);
    const double q = sequence_prob(student, prompt, y);
    if (p > 0.0) total += p * std::log(p / q);
  }
  return total;
}

double expected_token_kl(const TabularLM& teacher, const TabularLM& student, const TokenSeq& prompt,
                         std::size_t length, const EnumerationBudget& budget) {
  check_pair(teacher, student, prompt, length);
  double total = 0.0;
  for (const auto& y : enumerate_responses(teacher.vocab_size(), length, budget)) {
    const double p = sequence_prob(teacher, prompt, y);
    const auto in = divergence_inputs(teacher, student, prompt, y);
    total += p * seq_divergence(in, LossKind::KL, 0.0, TokenMode::FULL_SUPPORT);
  }
  return total;
}

double remark1_check(const SampleTriple& triple, const TabularLM& teacher, const TabularLM& student,
                     double alpha, double lambda) {
  if (!(lambda > 0.0)) throw ParameterError("lambda must be positive");
  Graph g(false);
  const double cald = cald_loss(g, std::span(&triple, 1), student, teacher, alpha, TokenMode::SEQUENCE,
                                Reduction::Sum)
                          .item();
  const double p_t = sequence_prob(teacher, triple.prompt, triple.teacher_response);
  const double q_t = sequence_prob(student, triple.prompt, triple.teacher_response);
  const double p_s = sequence_prob(teacher, triple.prompt, triple.student_response);
  const double q_s = sequence_prob(student, triple.prompt, triple.student_response);
  const double q_tilde = alpha * p_t + (1.0 - alpha) * q_t;
  const double p_tilde = alpha * q_s + (1.0 - alpha) * p_s;
  const double contrastive =
      -(1.0 / lambda) * (p_t * lambda * std::log(q_tilde / p_t) - q_s * lambda * std::log(q_s / p_tilde));
  return std::abs(2.0 * cald - contrastive);
}

double remark1_expectation_residual(const TabularLM& teacher, const TabularLM& student,
                                    const TokenSeq& prompt, std::size_t length, double alpha,
                                    const EnumerationBudget& budget) {
  check_pair(teacher, student, prompt, length);
  const auto outcomes = enumerate_responses(teacher.vocab_size(), length, budget);
  double separate = 0.0;
  std::vector<double> p(outcomes.size());
  std::vector<double> q(outcomes.size());
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const auto in = divergence_inputs(teacher, student, prompt, outcomes[i]);
    separate += seq_divergence(in, LossKind::SKL, alpha, TokenMode::SEQUENCE);
    separate += seq_divergence(in, LossKind::SRKL, alpha, TokenMode::SEQUENCE);
    p[i] = sequence_prob(teacher, prompt, outcomes[i]);
    q[i] = sequence_prob(student, prompt, outcomes[i]);
  }
  double joint = 0.0;
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    const double pull = std::log(p[i] / (alpha * p[i] + (1.0 - alpha) * q[i]));
    for (std::size_t j = 0; j < outcomes.size(); ++j) {
      const double push = std::log((alpha * q[j] + (1.0 - alpha) * p[j]) / q[j]);
      joint += p[i] * q[j] * (pull - push);
    }
  }
  return std::abs(separate - joint);
}

// ---------------------------------------------------------------------------
// Mercator

double mercator_log_ratio(double p, double q, double alpha) {
  if (!(p > 0.0 && p <= 1.0 && q > 0.0 && q <= 1.0)) {
    throw ParameterError("Mercator arguments must lie in (0, 1]");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ParameterError("alpha must lie in [0, 1]");
  return std::log(p) - std::log(alpha * p + (1.0 - alpha) * q);
}

double mercator_residual(double p, double q, double alpha) {
  return std::abs(mercator_log_ratio(p, q, alpha) - (1.0 - alpha) * (p - q));
}

// ---------------------------------------------------------------------------
// Finite differences

double finite_diff_gradcheck(const LossClosure& loss, std::span<NamedTensor> params,
                             const GradcheckOptions& opts) {
  for (auto& p : params) p.tensor.zero_grad();
  {
    Graph g;
    Tensor l = loss(g);
    if (!std::isfinite(l.item())) throw NumericError("non-finite loss");
    g.backward(l);
  }
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    std::vector<double> a(p.tensor.size(), 0.0);
    if (p.tensor.has_grad()) {
      auto gr = p.tensor.grad();
      for (std::size_t i = 0; i < a.size(); ++i) a[i] = opts.analytic_scale * gr[i];
    }
    analytic.push_back(std::move(a));
    p.tensor.zero_grad();
  }
  auto eval = [&] {
    Graph g(false);
    return loss(g).item();
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto values = params[k].tensor.mutable_values();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + opts.step;
      const double up = eval();
      values[i] = orig - opts.step;
      const double down = eval();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * opts.step);
      const double a = analytic[k][i];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opts.floor});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

GradcheckFixture make_gradcheck_fixture(std::uint64_t seed) {
  TransformerConfig cfg;
  cfg.vocab = 6;
  cfg.d_model = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.d_ff = 16;
  cfg.max_len = 12;
  GradcheckFixture fx;
  fx.teacher = std::make_unique<TinyTransformerLM>(cfg, derive_seed(seed, 1));
  fx.student = std::make_unique<TinyTransformerLM>(cfg, derive_seed(seed, 2));
  fx.reference = std::make_unique<TinyTransformerLM>(cfg, derive_seed(seed, 3));
  const std::vector<TokenSeq> prompts{{kBos, 2}, {kBos, 3, 4}};
  SamplingConfig sc;
  sc.max_response = 4;
  sc.seed = derive_seed(seed, 4);
  sc.threads = 1;
  fx.batch = batched_onpolicy_sample(prompts, *fx.teacher, *fx.student, sc);
  return fx;
}

// ---------------------------------------------------------------------------
// Suite

namespace {

OracleCheck bounded(std::string name, double value, double tol, std::string detail = {}) {
  return {std::move(name), value <= tol, value, tol, std::move(detail)};
}

OracleCheck boolean(std::string name, bool ok, std::string detail = {}) {
  return {std::move(name), ok, ok ? 1.0 : 0.0, 1.0, std::move(detail)};
}

}  // namespace

std::vector<OracleCheck> run_oracle_suite(const OracleSuiteOptions& opts) {
  std::vector<OracleCheck> out;
  Rng rng(opts.seed);
  GradcheckOptions gopts;
  if (opts.inject_gradient_fault) gopts.analytic_scale = 1.01;

  // gradcore
  {
    std::vector<double> av(12), bv(8);
    for (auto& v : av) v = 4.0 * rng.uniform() - 2.0;
    for (auto& v : bv) v = 4.0 * rng.uniform() - 2.0;
    std::vector<NamedTensor> params{{"a", Tensor::from({3, 4}, av, true)}, {"b", Tensor::from({4, 2}, bv, true)}};
    const Tensor a = params[0].tensor;
    const Tensor b = params[1].tensor;
    const double err = finite_diff_gradcheck([&](Graph& g) { return g.sum(g.matmul(a, b)); }, params, gopts);
    out.push_back(bounded("gradcore.matmul_gradcheck", err, 1e-6));
  }
  {
    std::vector<double> xv(5 * 7);
    for (auto& v : xv) v = 10.0 * rng.uniform() - 5.0;
    Graph g(false);
    Tensor y = g.log_softmax(Tensor::from({5, 7}, xv));
    double worst = 0.0;
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 7; ++c) s += std::exp(y.at(r, c));
      worst = std::max(worst, std::abs(s - 1.0));
    }
    out.push_back(bounded("gradcore.log_softmax_normalization", worst, 1e-12));
  }
  {
    std::vector<NamedTensor> params{{"x", Tensor::from({2, 5}, std::vector<double>(10, 0.3), true)}};
    for (auto& v : params[0].tensor.mutable_values()) v = 4.0 * rng.uniform() - 2.0;
    const Tensor x = params[0].tensor;
    const std::vector<std::size_t> idx{3, 1};
    const double err = finite_diff_gradcheck(
        [&](Graph& g) { return g.mean(g.gather(g.log_softmax(x), idx)); }, params, gopts);
    out.push_back(bounded("gradcore.composite_gradcheck", err, 1e-4));
  }

  // divergence identities on random rows
  {
    double worst_neg = 0.0;
    double worst_end = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
      const std::size_t v = 2 + rng.index(7);
      std::vector<double> p(v), q(v);
      double sp = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < v; ++i) {
        sp += (p[i] = std::exp(2.0 * rng.normal()));
        sq += (q[i] = std::exp(2.0 * rng.normal()));
      }
      for (std::size_t i = 0; i < v; ++i) {
        p[i] /= sp;
        q[i] /= sq;
      }
      const double a = rng.uniform();
      worst_neg = std::max({worst_neg, -skl_row(p, q, a), -srkl_row(p, q, a)});
      worst_end = std::max({worst_end, std::abs(skl_row(p, q, 0.0) - kl_row(p, q)),
                            std::abs(srkl_row(p, q, 0.0) - kl_row(q, p)), std::abs(skl_row(p, q, 1.0)),
                            std::abs(srkl_row(p, q, 1.0))});
    }
    out.push_back(bounded("divergence.nonnegativity", worst_neg, 1e-12));
    out.push_back(bounded("divergence.skew_endpoints", worst_end, 1e-12));
  }

  // enumeration oracles
  {
    double worst = 0.0;
    for (int trial = 0; trial < 5; ++trial) {
      const auto t = TabularLM::random(4, 2, 8, derive_seed(opts.seed, 10, trial));
      const auto s = TabularLM::random(4, 2, 8, derive_seed(opts.seed, 11, trial));
      const TokenSeq prompt{kBos, 2};
      worst = std::max(worst, std::abs(exact_sequence_kl(t, s, prompt, 4) - expected_token_kl(t, s, prompt, 4)));
    }
    out.push_back(bounded("oracle.chain_rule", worst, 1e-8));
  }
  {
    const auto t = TabularLM::random(4, 2, 10, derive_seed(opts.seed, 12));
    const auto s = TabularLM::random(4, 2, 10, derive_seed(opts.seed, 13));
    const TokenSeq prompt{kBos, 3};
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
      DecodeConfig dc{1.0, 5, derive_seed(opts.seed, 14, trial)};
      DecodeConfig ds{1.0, 5, derive_seed(opts.seed, 15, trial)};
      SampleTriple tr{prompt, sample(t, prompt, dc), sample(s, prompt, ds), 1};
      const double a = rng.uniform();
      for (double lambda : {0.5, 1.0, 2.0}) worst = std::max(worst, remark1_check(tr, t, s, a, lambda));
    }
    out.push_back(bounded("oracle.remark1_per_sample", worst, 1e-9));
    out.push_back(bounded("oracle.remark1_expectation",
                          remark1_expectation_residual(t, s, prompt, 4, 0.1), 1e-9));
  }

  // Mercator
  {
    bool signs = true;
    for (int i = 0; i < 1000; ++i) {
      const double p = 1e-3 + (1.0 - 1e-3) * rng.uniform();
      const double q = 1e-3 + (1.0 - 1e-3) * rng.uniform();
      const double a = rng.uniform();
      const double lr = mercator_log_ratio(p, q, a);
      if ((lr > 0) != (p - q > 0) && p != q && a < 1.0) signs = false;
    }
    out.push_back(boolean("oracle.mercator_sign", signs));
    // The residual itself must vanish as q -> p.
    double prev = 1e300;
    bool shrinking = true;
    for (double d : {0.1, 0.01, 0.001}) {
      const double r = mercator_residual(0.9, 0.9 + d, 0.1);
      shrinking = shrinking && r < prev;
      prev = r;
    }
    out.push_back(boolean("oracle.mercator_vanishing", shrinking && prev < 1e-3));
  }

  // loss gradients on a 2-layer transformer
  {
    auto fx = make_gradcheck_fixture(opts.seed);
    auto params = fx.student->parameters();
    const auto& batch = fx.batch;
    const auto& st = *fx.student;
    const auto& te = *fx.teacher;
    const double cald = finite_diff_gradcheck(
        [&](Graph& g) { return cald_loss(g, batch, st, te, 0.1); }, params, gopts);
    out.push_back(bounded("loss.cald_gradcheck", cald, 1e-4));
    double dm2 = 0.0;
    for (double beta : {0.0, 0.5, 1.0}) {
      dm2 = std::max(dm2, finite_diff_gradcheck(
                              [&](Graph& g) { return distillm2_loss(g, batch, st, te, 0.1, 0.05, beta); },
                              params, gopts));
    }
    out.push_back(bounded("loss.distillm2_gradcheck", dm2, 1e-4));
    const double dpkd = finite_diff_gradcheck(
        [&](Graph& g) { return dpkd_loss(g, batch, st, te, 1.0); }, params, gopts);
    out.push_back(bounded("loss.dpkd_gradcheck", dpkd, 1e-4));
  }

  // speculative filter
  {
    const auto t = TabularLM::random(6, 1, 16, derive_seed(opts.seed, 20));
    const auto s = TabularLM::random(6, 1, 16, derive_seed(opts.seed, 21));
    const std::vector<TokenSeq> prompts{{kBos}};
    const auto stream = draft_stream(t, s, prompts, 2000, 8, derive_seed(opts.seed, 22));
    double prev = 2.0;
    bool monotone = true;
    std::ostringstream detail;
    for (double eps : {0.0, 0.25, 0.5, 1.0}) {
      const double r = acceptance_rate(stream, eps);
      detail << "eps=" << eps << ":" << r << " ";
      monotone = monotone && r <= prev;
      if (eps == 0.0) monotone = monotone && r == 1.0;
      prev = r;
    }
    out.push_back(boolean("datagen.typical_monotone", monotone, detail.str()));
  }

  // checkpoint and schedule
  {
    std::vector<NamedTensor> ts{{"w", Tensor::from({2, 3}, {0.1, -2.5, 3.0, 1e-7, 7.25, -0.3})},
                                {"b", Tensor::from({3}, {1.0, 2.0, 3.0})}};
    const auto once = decode_checkpoint(encode_checkpoint(ts));
    const auto twice = decode_checkpoint(encode_checkpoint(once));
    bool same = once.size() == ts.size();
    for (std::size_t i = 0; same && i < once.size(); ++i) {
      same = once[i].name == twice[i].name && once[i].tensor.shape() == twice[i].tensor.shape() &&
             std::equal(once[i].tensor.values().begin(), once[i].tensor.values().end(),
                        twice[i].tensor.values().begin());
      for (std::size_t k = 0; same && k < ts[i].tensor.size(); ++k) {
        same = once[i].tensor.at(k) == static_cast<double>(static_cast<float>(ts[i].tensor.at(k)));
      }
    }
    out.push_back(boolean("checkpoint.roundtrip", same));
  }
  {
    const bool ok = update_beta(3, 3, 8, 8, 0.5) == 1.0 && update_beta(1, 3, 0, 8, 0.5) == 0.5 &&
                    std::abs(update_beta(1, 3, 2, 8, 0.5) - (1.0 / 3.0 + 0.25)) < 1e-15;
    ScheduleState st;
    st.m = 0.2;
    bool band = true;
    for (int i = 0; i < 200; ++i) {
      auto [at, as] = update_alpha(st, 1e-6 + rng.uniform(), 1e-6 + rng.uniform());
      band = band && at >= 0.01 && at <= 0.1 && as >= 0.01 && as <= 0.1;
    }
    out.push_back(boolean("schedule.examples_and_band", ok && band));
  }
  return out;
}

}  // namespace dlm2
