#pragma once

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "dlm2/divergence.hpp"
#include "dlm2/lm.hpp"

namespace dlm2 {

enum class BetaMode {
  Verbatim,    // clip(e/E + tau/T, beta0, 1)
  Normalized,  // clip((e-1)/E + tau/(E*T), beta0, 1)
};

std::string to_string(BetaMode mode);
BetaMode parse_beta_mode(const std::string& s);

struct ScheduleState {
  double alpha0 = 0.1;
  double alpha_t = 0.1;
  double alpha_s = 0.1;
  double beta0 = 0.5;
  double beta = 0.5;
  std::optional<double> m;  // reference gap
  double clip_lo = 0.01;
  double clip_hi = 0.1;
  // Algorithm-as-written pairs alpha_t with the y_s gap; this flag uses the
  // y_t gap for alpha_t instead.
  bool straight_pairing = false;
  BetaMode beta_mode = BetaMode::Verbatim;
};

inline constexpr double kGapFloor = 1e-6;

// Per sample: mean over response positions of p(token|prefix) - q(token|prefix),
// clamped below at kGapFloor.
std::vector<double> sample_gaps(const LanguageModel& teacher, const LanguageModel& student,
                                std::span<const SampleTriple> batch, ResponseKind response);

// Mean of the per-sample averages (unclamped), then clamped below at kGapFloor.
double gap_statistic(const LanguageModel& teacher, const LanguageModel& student,
                     std::span<const SampleTriple> batch, ResponseKind response);

void set_reference_gap(ScheduleState& state, std::span<const double> first_batch_gaps);

// 1 - (1 - alpha0) m / gap, before clipping.
double raw_alpha(double alpha0, double m, double gap);

// Returns (alpha_t, alpha_s) and stores them in the state.
std::pair<double, double> update_alpha(ScheduleState& state, double gap_t, double gap_s);

double update_beta(int e, int E, int tau, int T, double beta0, BetaMode mode = BetaMode::Verbatim);

}  // namespace dlm2
