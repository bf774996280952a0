#pragma once

// Token- and sequence-level divergences between a teacher p and a student q,
// and the batch losses built from them.
//
// Skewed mixtures are formed in log space:
//   SKL_a(p, q)  = KL(p || a p + (1-a) q)
//   SRKL_a(p, q) = KL(q || (1-a) p + a q)

#include <span>
#include <string>
#include <vector>

#include "dlm2/lm.hpp"
#include "dlm2/tensor.hpp"

namespace dlm2 {

enum class LossKind { KL, RKL, SKL, SRKL, CALD, DISTILLM2, DPO, DPKD, INTERP };
enum class TokenMode {
  FULL_SUPPORT,  // full conditional rows at every response position
  REALIZED,      // single-token terms at the realized token
  SEQUENCE,      // one term per response from sequence probabilities
};
enum class Reduction { MeanTokens, Sum };
enum class ResponseKind { Teacher, Student, Both };

std::string to_string(LossKind kind);
std::string to_string(TokenMode mode);
std::string to_string(Reduction r);
std::string to_string(ResponseKind r);
LossKind parse_loss_kind(const std::string& s);
TokenMode parse_token_mode(const std::string& s);
Reduction parse_reduction(const std::string& s);
ResponseKind parse_response_kind(const std::string& s);

struct LossSpec {
  LossKind kind = LossKind::DISTILLM2;
  double alpha_t = 0.1;  // skew of SKL-type terms
  double alpha_s = 0.1;  // skew of SRKL-type terms
  double beta = 0.5;
  double gamma = 0.5;
  double lambda = 1.0;
  TokenMode token_mode = TokenMode::FULL_SUPPORT;
  Reduction reduction = Reduction::MeanTokens;
  // Which responses KL/RKL/SKL/SRKL/INTERP are evaluated on.
  ResponseKind response = ResponseKind::Both;

  void validate() const;
};

struct SampleTriple {
  TokenSeq prompt;
  TokenSeq teacher_response;
  TokenSeq student_response;
  int epoch = 0;
  bool operator==(const SampleTriple&) const = default;
};

// Value-level row divergences over probability rows. Zero entries follow
// the 0 log 0 = 0 convention.
double kl_row(std::span<const double> p, std::span<const double> q);
double skl_row(std::span<const double> p, std::span<const double> q, double alpha);
double srkl_row(std::span<const double> p, std::span<const double> q, double alpha);

// Token-level divergence on a single position. `kind` is one of KL, RKL,
// SKL, SRKL. Rows are log-probabilities.
double token_divergence(std::span<const double> teacher_logrow, std::span<const double> student_logrow,
                        std::size_t token, LossKind kind, double alpha, TokenMode mode);

struct TokenDivergenceInputs {
  std::vector<std::vector<double>> teacher_logrows;
  std::vector<std::vector<double>> student_logrows;
  std::vector<std::size_t> tokens;
  std::vector<bool> mask;  // empty: every position counts
};

// Per-sample sum over unmasked positions (FULL_SUPPORT or REALIZED) or the
// single sequence-level term (SEQUENCE).
double seq_divergence(const TokenDivergenceInputs& in, LossKind kind, double alpha, TokenMode mode);

// Assembles the inputs for one response with a value-only forward.
TokenDivergenceInputs divergence_inputs(const LanguageModel& teacher, const LanguageModel& student,
                                        const TokenSeq& prompt, const TokenSeq& response);

// Graph-level losses. The student is differentiated; teacher and reference
// rows are constants. An empty batch raises DataError.
Tensor compute_loss(Graph& g, const LossSpec& spec, std::span<const SampleTriple> batch,
                    const LanguageModel& student, const LanguageModel& teacher,
                    const LanguageModel* reference = nullptr);

// Per-row divergence between constant teacher log rows and differentiable
// student log rows, both [m x V]; returns [m]. `kind` is KL, RKL, SKL or SRKL.
Tensor row_divergence(Graph& g, const Tensor& teacher_logrows, const Tensor& student_logrows,
                      LossKind kind, double alpha = 0.0);

// (1/2|D|) sum [D(y_t) + D(y_s)] for one of KL, RKL, SKL, SRKL (response Both),
// or (1/|D|) sum D(y) on a single response type.
Tensor divergence_loss(Graph& g, std::span<const SampleTriple> batch, const LanguageModel& student,
                       const LanguageModel& teacher, LossKind kind, double alpha,
                       ResponseKind response = ResponseKind::Both,
                       TokenMode mode = TokenMode::FULL_SUPPORT,
                       Reduction reduction = Reduction::MeanTokens);

Tensor cald_loss(Graph& g, std::span<const SampleTriple> batch, const LanguageModel& student,
                 const LanguageModel& teacher, double alpha, TokenMode mode = TokenMode::FULL_SUPPORT,
                 Reduction reduction = Reduction::MeanTokens);

Tensor distillm2_loss(Graph& g, std::span<const SampleTriple> batch, const LanguageModel& student,
                      const LanguageModel& teacher, double alpha_t, double alpha_s, double beta,
                      TokenMode mode = TokenMode::FULL_SUPPORT,
                      Reduction reduction = Reduction::MeanTokens);

// y_t is the preferred response and y_s the rejected one.
Tensor dpo_loss(Graph& g, std::span<const SampleTriple> batch, const LanguageModel& student,
                const LanguageModel* reference, double lambda);
Tensor dpkd_loss(Graph& g, std::span<const SampleTriple> batch, const LanguageModel& student,
                 const LanguageModel& teacher, double lambda);

// (1/|D|) sum [gamma SKL(y) + (1-gamma) SRKL(y)] on one response type.
Tensor interp_single_response_loss(Graph& g, std::span<const SampleTriple> batch,
                                   const LanguageModel& student, const LanguageModel& teacher,
                                   double gamma, double alpha, ResponseKind response,
                                   TokenMode mode = TokenMode::FULL_SUPPORT,
                                   Reduction reduction = Reduction::MeanTokens);

}  // namespace dlm2
