#include "dlm2/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dlm2/error.hpp"

namespace dlm2 {

std::string to_string(BetaMode mode) {
  return mode == BetaMode::Normalized ? "normalized" : "verbatim";
}

BetaMode parse_beta_mode(const std::string& s) {
  if (s == "verbatim") return BetaMode::Verbatim;
  if (s == "normalized") return BetaMode::Normalized;
  throw ConfigError("unknown beta mode '" + s + "'");
}

namespace {

std::vector<double> raw_gaps(const LanguageModel& teacher, const LanguageModel& student,
                             std::span<const SampleTriple> batch, ResponseKind response) {
  if (batch.empty()) throw DataError("gap statistic over an empty batch");
  if (response == ResponseKind::Both) throw ParameterError("gap statistic needs one response type");
  TeacherForcedBatch tf;
  for (const auto& tr : batch) {
    tf.add(tr.prompt, response == ResponseKind::Teacher ? tr.teacher_response : tr.student_response);
  }
  Graph g(false);
  Tensor lp = g.gather(response_rows(g, teacher, tf), tf.targets());
  Tensor lq = g.gather(response_rows(g, student, tf), tf.targets());
  std::vector<double> out;
  std::size_t pos = 0;
  for (std::size_t len : tf.lengths()) {
    double s = 0.0;
    for (std::size_t k = 0; k < len; ++k, ++pos) s += std::exp(lp.at(pos)) - std::exp(lq.at(pos));
    out.push_back(s / static_cast<double>(len));
  }
  return out;
}

}  // namespace

std::vector<double> sample_gaps(const LanguageModel& teacher, const LanguageModel& student,
                                std::span<const SampleTriple> batch, ResponseKind response) {
  auto gaps = raw_gaps(teacher, student, batch, response);
  for (auto& v : gaps) v = std::max(v, kGapFloor);
  return gaps;
}

double gap_statistic(const LanguageModel& teacher, const LanguageModel& student,
                     std::span<const SampleTriple> batch, ResponseKind response) {
  const auto gaps = raw_gaps(teacher, student, batch, response);
  const double mean = std::accumulate(gaps.begin(), gaps.end(), 0.0) / static_cast<double>(gaps.size());
  return std::max(mean, kGapFloor);
}

void set_reference_gap(ScheduleState& state, std::span<const double> first_batch_gaps) {
  if (first_batch_gaps.empty()) throw DataError("reference gap from an empty batch");
  state.m = std::accumulate(first_batch_gaps.begin(), first_batch_gaps.end(), 0.0) /
            static_cast<double>(first_batch_gaps.size());
}

double raw_alpha(double alpha0, double m, double gap) {
  if (!(gap > 0.0)) throw ParameterError("gap must be positive");
  return 1.0 - (1.0 - alpha0) * m / gap;
}

std::pair<double, double> update_alpha(ScheduleState& state, double gap_t, double gap_s) {
  if (!state.m) throw StateError("reference gap m is not set");
  auto clip = [&](double a) { return std::clamp(a, state.clip_lo, state.clip_hi); };
  const double from_t = clip(raw_alpha(state.alpha0, *state.m, gap_t));
  const double from_s = clip(raw_alpha(state.alpha0, *state.m, gap_s));
  if (state.straight_pairing) {
    state.alpha_t = from_t;
    state.alpha_s = from_s;
  } else {
    state.alpha_t = from_s;
    state.alpha_s = from_t;
  }
  return {state.alpha_t, state.alpha_s};
}

double update_beta(int e, int E, int tau, int T, double beta0, BetaMode mode) {
  if (E < 1 || T < 1 || e < 1 || e > E || tau < 0 || tau > T) {
    throw ParameterError("update_beta needs 1 <= e <= E and 0 <= tau <= T");
  }
  const double de = e;
  const double dE = E;
  const double dt = tau;
  const double dT = T;
  const double progress =
      mode == BetaMode::Verbatim ? de / dE + dt / dT : (de - 1.0) / dE + dt / (dE * dT);
  return std::clamp(progress, beta0, 1.0);
}

}  // namespace dlm2
