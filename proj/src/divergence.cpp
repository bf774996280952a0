#include "dlm2/divergence.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "dlm2/error.hpp"

namespace dlm2 {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double log_or_neginf(double x) { return x > 0.0 ? std::log(x) : kNegInf; }

double lae(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double hi = std::max(a, b);
  return hi + std::log1p(std::exp(-std::abs(a - b)));
}

// log(wa * exp(a) + wb * exp(b))
double mix(double a, double b, double wa, double wb) {
  return lae(log_or_neginf(wa) + a, log_or_neginf(wb) + b);
}

// e^{x} (x - y), with the 0 log 0 = 0 convention.
double weighted_gap(double x, double y) { return x == kNegInf ? 0.0 : std::exp(x) * (x - y); }

void check_alpha(double alpha) {
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw ParameterError("skew coefficient must lie in [0, 1], got " + std::to_string(alpha));
  }
}

void check_rows(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("divergence rows differ in width");
}

// Divergence between two log-rows over the full support.
double row_term(std::span<const double> lp, std::span<const double> lq, LossKind kind, double alpha) {
  check_rows(lp, lq);
  double total = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) {
    switch (kind) {
      case LossKind::KL: total += weighted_gap(lp[i], lq[i]); break;
      case LossKind::RKL: total += weighted_gap(lq[i], lp[i]); break;
      case LossKind::SKL: total += weighted_gap(lp[i], mix(lp[i], lq[i], alpha, 1.0 - alpha)); break;
      case LossKind::SRKL: total += weighted_gap(lq[i], mix(lp[i], lq[i], 1.0 - alpha, alpha)); break;
      default: throw ContractError("row divergence needs KL, RKL, SKL or SRKL");
    }
  }
  return total;
}

// The same divergence restricted to one (realized token or sequence) outcome.
double point_term(double lp, double lq, LossKind kind, double alpha) {
  switch (kind) {
    case LossKind::KL: return weighted_gap(lp, lq);
    case LossKind::RKL: return weighted_gap(lq, lp);
    case LossKind::SKL: return weighted_gap(lp, mix(lp, lq, alpha, 1.0 - alpha));
    case LossKind::SRKL: return weighted_gap(lq, mix(lp, lq, 1.0 - alpha, alpha));
    default: throw ContractError("point divergence needs KL, RKL, SKL or SRKL");
  }
}

std::vector<double> log_row(std::span<const double> p) {
  std::vector<double> out(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out[i] = log_or_neginf(p[i]);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Names

std::string to_string(LossKind kind) {
  switch (kind) {
    case LossKind::KL: return "KL";
    case LossKind::RKL: return "RKL";
    case LossKind::SKL: return "SKL";
    case LossKind::SRKL: return "SRKL";
    case LossKind::CALD: return "CALD";
    case LossKind::DISTILLM2: return "DISTILLM2";
    case LossKind::DPO: return "DPO";
    case LossKind::DPKD: return "DPKD";
    case LossKind::INTERP: return "INTERP";
  }
  return "?";
}

std::string to_string(TokenMode mode) {
  switch (mode) {
    case TokenMode::FULL_SUPPORT: return "FULL_SUPPORT";
    case TokenMode::REALIZED: return "REALIZED";
    case TokenMode::SEQUENCE: return "SEQUENCE";
  }
  return "?";
}

std::string to_string(Reduction r) { return r == Reduction::Sum ? "SUM" : "MEAN_TOKENS"; }

std::string to_string(ResponseKind r) {
  switch (r) {
    case ResponseKind::Teacher: return "TEACHER";
    case ResponseKind::Student: return "STUDENT";
    case ResponseKind::Both: return "BOTH";
  }
  return "?";
}

LossKind parse_loss_kind(const std::string& s) {
  for (auto k : {LossKind::KL, LossKind::RKL, LossKind::SKL, LossKind::SRKL, LossKind::CALD,
                 LossKind::DISTILLM2, LossKind::DPO, LossKind::DPKD, LossKind::INTERP}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown loss kind '" + s + "'");
}

TokenMode parse_token_mode(const std::string& s) {
  for (auto m : {TokenMode::FULL_SUPPORT, TokenMode::REALIZED, TokenMode::SEQUENCE}) {
    if (to_string(m) == s) return m;
  }
  throw ConfigError("unknown token mode '" + s + "'");
}

Reduction parse_reduction(const std::string& s) {
  if (s == "SUM") return Reduction::Sum;
  if (s == "MEAN_TOKENS") return Reduction::MeanTokens;
  throw ConfigError("unknown reduction '" + s + "'");
}

ResponseKind parse_response_kind(const std::string& s) {
  for (auto r : {ResponseKind::Teacher, ResponseKind::Student, ResponseKind::Both}) {
    if (to_string(r) == s) return r;
  }
  throw ConfigError("unknown response kind '" + s + "'");
}

void LossSpec::validate() const {
  auto unit = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ParameterError(std::string(name) + " must lie in [0, 1], got " + std::to_string(v));
    }
  };
  unit(alpha_t, "alpha_t");
  unit(alpha_s, "alpha_s");
  unit(beta, "beta");
  unit(gamma, "gamma");
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ParameterError("lambda must be positive");
}

// ---------------------------------------------------------------------------
// Value-level

double kl_row(std::span<const double> p, std::span<const double> q) {
  return row_term(log_row(p), log_row(q), LossKind::KL, 0.0);
}

double skl_row(std::span<const double> p, std::span<const double> q, double alpha) {
  check_alpha(alpha);
  return row_term(log_row(p), log_row(q), LossKind::SKL, alpha);
}

double srkl_row(std::span<const double> p, std::span<const double> q, double alpha) {
  check_alpha(alpha);
  return row_term(log_row(p), log_row(q), LossKind::SRKL, alpha);
}

double token_divergence(std::span<const double> teacher_logrow, std::span<const double> student_logrow,
                        std::size_t token, LossKind kind, double alpha, TokenMode mode) {
  check_alpha(alpha);
  check_rows(teacher_logrow, student_logrow);
  if (mode == TokenMode::FULL_SUPPORT) return row_term(teacher_logrow, student_logrow, kind, alpha);
  if (token >= teacher_logrow.size()) throw IndexError("realized token outside vocabulary");
  return point_term(teacher_logrow[token], student_logrow[token], kind, alpha);
}

double seq_divergence(const TokenDivergenceInputs& in, LossKind kind, double alpha, TokenMode mode) {
  check_alpha(alpha);
  const std::size_t n = in.tokens.size();
  if (in.teacher_logrows.size() != n || in.student_logrows.size() != n ||
      (!in.mask.empty() && in.mask.size() != n)) {
    throw ContractError("divergence inputs are not aligned");
  }
  auto counted = [&](std::size_t i) { return in.mask.empty() || in.mask[i]; };
  if (mode == TokenMode::SEQUENCE) {
    double lp = 0.0;
    double lq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!counted(i)) continue;
      lp += in.teacher_logrows[i].at(in.tokens[i]);
      lq += in.student_logrows[i].at(in.tokens[i]);
    }
    return point_term(lp, lq, kind, alpha);
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!counted(i)) continue;
    total += token_divergence(in.teacher_logrows[i], in.student_logrows[i], in.tokens[i], kind, alpha, mode);
  }
  return total;
}

TokenDivergenceInputs divergence_inputs(const LanguageModel& teacher, const LanguageModel& student,
                                        const TokenSeq& prompt, const TokenSeq& response) {
  TeacherForcedBatch batch;
  batch.add(prompt, response);
  Graph g(false);
  Tensor t = response_rows(g, teacher, batch);
  Tensor s = response_rows(g, student, batch);
  TokenDivergenceInputs in;
  const std::size_t v = t.cols();
  if (s.cols() != v) throw DimensionError("teacher and student vocabularies differ");
  for (std::size_t i = 0; i < batch.total_tokens(); ++i) {
    auto tr = t.values().subspan(i * v, v);
    auto sr = s.values().subspan(i * v, v);
    in.teacher_logrows.emplace_back(tr.begin(), tr.end());
    in.student_logrows.emplace_back(sr.begin(), sr.end());
  }
  in.tokens.assign(batch.targets().begin(), batch.targets().end());
  return in;
}

// ---------------------------------------------------------------------------
// Graph-level

namespace {

struct ResponseRows {
  Tensor student;   // [P x V], differentiable
  Tensor constant;  // [P x V], teacher or reference rows
  std::vector<std::size_t> targets;
  std::vector<std::size_t> lengths;
};

// Rows along the teacher responses and/or student responses of the batch,
// evaluated with one stacked student forward.
std::vector<ResponseRows> collect_rows(Graph& g, std::span<const SampleTriple> batch,
                                       const LanguageModel& student, const LanguageModel& constant,
                                       std::initializer_list<ResponseKind> kinds) {
  if (batch.empty()) throw DataError("empty batch");
  if (student.vocab_size() != constant.vocab_size()) {
    throw DimensionError("teacher and student vocabularies differ");
  }
  TeacherForcedBatch all;
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (auto kind : kinds) {
    const std::size_t start = all.total_tokens();
    for (const auto& tr : batch) {
      const auto& resp = kind == ResponseKind::Teacher ? tr.teacher_response : tr.student_response;
      if (resp.empty()) throw DataError("triple with an empty response");
      all.add(tr.prompt, resp);
    }
    ranges.emplace_back(start, all.total_tokens());
  }
  Tensor s_all = response_rows(g, student, all);
  Graph cg(false);
  Tensor c_all = response_rows(cg, constant, all);
  const std::size_t v = s_all.cols();

  std::vector<ResponseRows> out;
  for (std::size_t k = 0; k < ranges.size(); ++k) {
    const auto [lo, hi] = ranges[k];
    ResponseRows r;
    if (ranges.size() == 1) {
      r.student = s_all;
      r.constant = c_all;
    } else {
      std::vector<std::size_t> idx(hi - lo);
      std::iota(idx.begin(), idx.end(), lo);
      r.student = g.select_rows(s_all, idx);
      auto cv = c_all.values().subspan(lo * v, (hi - lo) * v);
      r.constant = Tensor::from({hi - lo, v}, {cv.begin(), cv.end()});
    }
    r.targets.assign(all.targets().begin() + lo, all.targets().begin() + hi);
    r.lengths.assign(all.lengths().begin() + k * batch.size(),
                     all.lengths().begin() + (k + 1) * batch.size());
    out.push_back(std::move(r));
  }
  return out;
}

Tensor constant_like(const Tensor& t, double (*f)(double)) {
  std::vector<double> v(t.values().begin(), t.values().end());
  for (auto& x : v) x = f(x);
  return Tensor::from(t.shape(), std::move(v));
}

Tensor shifted(const Tensor& t, double offset) {
  std::vector<double> v(t.values().begin(), t.values().end());
  for (auto& x : v) x += offset;
  return Tensor::from(t.shape(), std::move(v));
}

double expd(double x) { return std::exp(x); }

// Per-element divergence terms between constant teacher log values `lp` and
// differentiable student log values `lq` (same shape). Returns a tensor of
// the same shape, summed by the caller.
Tensor elementwise_terms(Graph& g, const Tensor& lp, const Tensor& lq, LossKind kind, double alpha) {
  if ((kind == LossKind::SKL || kind == LossKind::SRKL) && alpha == 1.0) {
    return Tensor::zeros(lp.shape());
  }
  if (kind == LossKind::SKL && alpha == 0.0) kind = LossKind::KL;
  if (kind == LossKind::SRKL && alpha == 0.0) kind = LossKind::RKL;
  switch (kind) {
    case LossKind::KL:
      return g.mul(constant_like(lp, expd), g.sub(lp, lq));
    case LossKind::RKL:
      return g.mul(g.exp(lq), g.sub(lq, lp));
    case LossKind::SKL: {
      Tensor m = g.log_add_exp(shifted(lp, std::log(alpha)), g.add_scalar(lq, std::log1p(-alpha)));
      return g.mul(constant_like(lp, expd), g.sub(lp, m));
    }
    case LossKind::SRKL: {
      Tensor m = g.log_add_exp(shifted(lp, std::log1p(-alpha)), g.add_scalar(lq, std::log(alpha)));
      return g.mul(g.exp(lq), g.sub(lq, m));
    }
    default:
      throw ContractError("elementwise divergence needs KL, RKL, SKL or SRKL");
  }
}

// Per-sample divergence values, shape [B].
Tensor per_sample(Graph& g, const ResponseRows& r, LossKind kind, double alpha, TokenMode mode) {
  check_alpha(alpha);
  switch (mode) {
    case TokenMode::FULL_SUPPORT:
      return g.segment_sum(g.sum_rows(elementwise_terms(g, r.constant, r.student, kind, alpha)),
                           r.lengths);
    case TokenMode::REALIZED: {
      Tensor lp = g.gather(r.constant, r.targets);
      Tensor lq = g.gather(r.student, r.targets);
      return g.segment_sum(elementwise_terms(g, lp, lq, kind, alpha), r.lengths);
    }
    case TokenMode::SEQUENCE: {
      Tensor lp = g.segment_sum(g.gather(r.constant, r.targets), r.lengths);
      Tensor lq = g.segment_sum(g.gather(r.student, r.targets), r.lengths);
      return elementwise_terms(g, lp, lq, kind, alpha);
    }
  }
  throw ContractError("unknown token mode");
}

// Sum over samples, optionally dividing each by its token count.
Tensor reduce(Graph& g, const Tensor& values, std::span<const std::size_t> lengths, Reduction r) {
  if (r == Reduction::Sum) return g.sum(values);
  std::vector<double> w(lengths.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = 1.0 / static_cast<double>(lengths[i]);
  const std::size_t n = w.size();
  return g.sum(g.mul(values, Tensor::from({n}, std::move(w))));
}

Tensor term(Graph& g, const ResponseRows& r, LossKind kind, double alpha, TokenMode mode,
            Reduction red, double coef) {
  return g.scale(reduce(g, per_sample(g, r, kind, alpha, mode), r.lengths, red), coef);
}

Tensor two_sided(Graph& g, std::span<const SampleTriple> batch, const LanguageModel& student,
                 const LanguageModel& teacher, LossKind kind_t, double alpha_t, double coef_t,
                 LossKind kind_s, double alpha_s, double coef_s, TokenMode mode, Reduction red) {
  auto rows = collect_rows(g, batch, student, teacher, {ResponseKind::Teacher, ResponseKind::Student});
  return g.add(term(g, rows[0], kind_t, alpha_t, mode, red, coef_t),
               term(g, rows[1], kind_s, alpha_s, mode, red, coef_s));
}

Tensor interp(Graph& g, std::span<const SampleTriple> batch, const LanguageModel& student,
              const LanguageModel& teacher, double gamma, double alpha_skl, double alpha_srkl,
              ResponseKind response, TokenMode mode, Reduction red) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ParameterError("gamma must lie in [0, 1]");
  if (response == ResponseKind::Both) {
    throw ParameterError("interpolation is defined on a single response type");
  }
  auto rows = collect_rows(g, batch, student, teacher, {response});
  const double inv = 1.0 / static_cast<double>(batch.size());
  return g.add(term(g, rows[0], LossKind::SKL, alpha_skl, mode, red, gamma * inv),
               term(g, rows[0], LossKind::SRKL, alpha_srkl, mode, red, (1.0 - gamma) * inv));
}

Tensor preference(Graph& g, std::span<const SampleTriple> batch, const LanguageModel& student,
                  const LanguageModel& reference, double lambda) {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ParameterError("lambda must be >= 0");
  auto rows = collect_rows(g, batch, student, reference, {ResponseKind::Teacher, ResponseKind::Student});
  const std::size_t b = batch.size();
  auto seq = [&](const ResponseRows& r) {
    return g.segment_sum(g.gather(r.student, r.targets), r.lengths);
  };
  auto ref_seq = [&](const ResponseRows& r) {
    Graph cg(false);
    return cg.segment_sum(cg.gather(r.constant, r.targets), r.lengths);
  };
  Tensor margin_w = g.sub(seq(rows[0]), ref_seq(rows[0]));
  Tensor margin_l = g.sub(seq(rows[1]), ref_seq(rows[1]));
  Tensor z = g.scale(g.sub(margin_w, margin_l), lambda);
  return g.scale(g.sum(g.log_sigmoid(z)), -1.0 / static_cast<double>(b));
}

}  // namespace

Tensor row_divergence(Graph& g, const Tensor& teacher_logrows, const Tensor& student_logrows,
                      LossKind kind, double alpha) {
  check_alpha(alpha);
  if (teacher_logrows.shape() != student_logrows.shape() || teacher_logrows.rank() != 2) {
    throw DimensionError("row_divergence needs two equal [m x V] tensors");
  }
  return g.sum_rows(elementwise_terms(g, teacher_logrows, student_logrows, kind, alpha));
}

Tensor divergence_loss(Graph& g, std::span<const SampleTriple> batch, const LanguageModel& student,
                       const LanguageModel& teacher, LossKind kind, double alpha,
                       ResponseKind response, TokenMode mode, Reduction reduction) {
  if (kind != LossKind::KL && kind != LossKind::RKL && kind != LossKind::SKL && kind != LossKind::SRKL) {
    throw ContractError("divergence_loss needs KL, RKL, SKL or SRKL");
  }
  if (batch.empty()) throw DataError("empty batch");
  const double b = static_cast<double>(batch.size());
  if (response == ResponseKind::Both) {
    return two_sided(g, batch, student, teacher, kind, alpha, 0.5 / b, kind, alpha, 0.5 / b, mode,
                     reduction);
  }
  auto rows = collect_rows(g, batch, student, teacher, {response});
  return term(g, rows[0], kind, alpha, mode, reduction, 1.0 / b);
}

Tensor cald_loss(Graph& g, std::span<const SampleTriple> batch, const LanguageModel& student,
                 const LanguageModel& teacher, double alpha, TokenMode mode, Reduction reduction) {
  if (batch.empty()) throw DataError("empty batch");
  const double c = 0.5 / static_cast<double>(batch.size());
  return two_sided(g, batch, student, teacher, LossKind::SKL, alpha, c, LossKind::SRKL, alpha, c, mode,
                   reduction);
}

Tensor distillm2_loss(Graph& g, std::span<const SampleTriple> batch, const LanguageModel& student,
                      const LanguageModel& teacher, double alpha_t, double alpha_s, double beta,
                      TokenMode mode, Reduction reduction) {
  if (batch.empty()) throw DataError("empty batch");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ParameterError("beta must lie in [0, 1]");
  const double c = 0.5 / static_cast<double>(batch.size());
  return two_sided(g, batch, student, teacher, LossKind::SKL, alpha_t, (1.0 - beta) * c, LossKind::SRKL,
                   alpha_s, beta * c, mode, reduction);
}

Tensor dpo_loss(Graph& g, std::span<const SampleTriple> batch, const LanguageModel& student,
                const LanguageModel* reference, double lambda) {
  if (reference == nullptr) throw ConfigError("DPO needs a reference model");
  return preference(g, batch, student, *reference, lambda);
}

Tensor dpkd_loss(Graph& g, std::span<const SampleTriple> batch, const LanguageModel& student,
                 const LanguageModel& teacher, double lambda) {
  return preference(g, batch, student, teacher, lambda);
}

Tensor interp_single_response_loss(Graph& g, std::span<const SampleTriple> batch,
                                   const LanguageModel& student, const LanguageModel& teacher,
                                   double gamma, double alpha, ResponseKind response, TokenMode mode,
                                   Reduction reduction) {
  return interp(g, batch, student, teacher, gamma, alpha, alpha, response, mode, reduction);
}

Tensor compute_loss(Graph& g, const LossSpec& spec, std::span<const SampleTriple> batch,
                    const LanguageModel& student, const LanguageModel& teacher,
                    const LanguageModel* reference) {
  spec.validate();
  switch (spec.kind) {
    case LossKind::KL:
    case LossKind::RKL:
    case LossKind::SKL:
      return divergence_loss(g, batch, student, teacher, spec.kind, spec.alpha_t, spec.response,
                             spec.token_mode, spec.reduction);
    case LossKind::SRKL:
      return divergence_loss(g, batch, student, teacher, spec.kind, spec.alpha_s, spec.response,
                             spec.token_mode, spec.reduction);
    case LossKind::CALD: {
      if (batch.empty()) throw DataError("empty batch");
      const double c = 0.5 / static_cast<double>(batch.size());
      return two_sided(g, batch, student, teacher, LossKind::SKL, spec.alpha_t, c, LossKind::SRKL,
                       spec.alpha_s, c, spec.token_mode, spec.reduction);
    }
    case LossKind::DISTILLM2:
      return distillm2_loss(g, batch, student, teacher, spec.alpha_t, spec.alpha_s, spec.beta,
                            spec.token_mode, spec.reduction);
    case LossKind::DPO:
      return dpo_loss(g, batch, student, reference, spec.lambda);
    case LossKind::DPKD:
      return dpkd_loss(g, batch, student, teacher, spec.lambda);
    case LossKind::INTERP:
      return interp(g, batch, student, teacher, spec.gamma, spec.alpha_t, spec.alpha_s, spec.response,
                    spec.token_mode, spec.reduction);
  }
  throw ContractError("unknown loss kind");
}

}  // namespace dlm2
