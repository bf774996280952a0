#pragma once

// Brute-force and analytic checks. Enumeration works on TabularLM pairs
// only, where conditionals are available in closed form.

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dlm2/divergence.hpp"
#include "dlm2/lm.hpp"

namespace dlm2 {

struct EnumerationBudget {
  std::size_t max_vocab = 6;
  std::size_t max_length = 6;
  std::size_t max_sequences = 50000;
};

// Every generation outcome after a prompt with at most `length` response
// tokens: EOS-terminated responses, plus each unterminated length-`length`
// response as its own outcome.
std::vector<TokenSeq> enumerate_responses(std::size_t vocab, std::size_t length,
                                          const EnumerationBudget& budget = {});

// Product of table entries along the response.
double sequence_prob(const TabularLM& model, const TokenSeq& prompt, const TokenSeq& response);

// sum_y P(y) log(P(y) / Q(y)) over enumerate_responses.
double exact_sequence_kl(const TabularLM& teacher, const TabularLM& student, const TokenSeq& prompt,
                         std::size_t length, const EnumerationBudget& budget = {});

// sum_y P(y) * (token-decomposed full-support KL along y), with the
// per-response value taken from the divergence module.
double expected_token_kl(const TabularLM& teacher, const TabularLM& student, const TokenSeq& prompt,
                         std::size_t length, const EnumerationBudget& budget = {});

// |2 * CALD(triple) - (contrastive form)| for one triple, where CALD is
// evaluated per sequence with the graph loss, and the contrastive form
//   -(1/lambda) [P(y_t) lambda log(q~(y_t)/P(y_t)) - Q(y_s) lambda log(Q(y_s)/p~(y_s))]
// is built from linear-space table products.
double remark1_check(const SampleTriple& triple, const TabularLM& teacher, const TabularLM& student,
                     double alpha, double lambda);

// Expectation form: sum over y_t of the SKL sequence term plus sum over y_s
// of the SRKL term, against the joint expectation over independent
// (y_t ~ p, y_s ~ q) pairs.
double remark1_expectation_residual(const TabularLM& teacher, const TabularLM& student,
                                    const TokenSeq& prompt, std::size_t length, double alpha,
                                    const EnumerationBudget& budget = {});

// |log(p / (alpha p + (1-alpha) q)) - (1-alpha)(p - q)|
double mercator_residual(double p, double q, double alpha);
// Signed log(p / (alpha p + (1-alpha) q)).
double mercator_log_ratio(double p, double q, double alpha);

struct GradcheckOptions {
  double step = 1e-5;
  double floor = 1e-6;         // denominator floor of the relative error
  double analytic_scale = 1.0;  // != 1 only for negative-control runs
};

using LossClosure = std::function<Tensor(Graph&)>;

// Central differences on every coordinate of `params`; returns the largest
// |analytic - numeric| / max(|analytic|, |numeric|, floor).
double finite_diff_gradcheck(const LossClosure& loss, std::span<NamedTensor> params,
                             const GradcheckOptions& opts = {});

// Small 2-layer transformer pair with a few sampled triples.
struct GradcheckFixture {
  std::unique_ptr<TinyTransformerLM> teacher;
  std::unique_ptr<TinyTransformerLM> student;
  std::unique_ptr<TinyTransformerLM> reference;
  std::vector<SampleTriple> batch;
};
GradcheckFixture make_gradcheck_fixture(std::uint64_t seed);

struct OracleCheck {
  std::string name;
  bool passed = false;
  double value = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

struct OracleSuiteOptions {
  bool inject_gradient_fault = false;
  std::uint64_t seed = 7;
};

std::vector<OracleCheck> run_oracle_suite(const OracleSuiteOptions& opts = {});

}  // namespace dlm2
