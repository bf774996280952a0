#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dlm2/lm.hpp"

namespace dlm2 {

std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b);

// LCS F-measure with equal weight on precision and recall. An empty
// candidate scores 0; an empty reference raises DataError.
double rouge_l(const TokenSeq& candidate, const TokenSeq& reference);

// Mean per-token NLL of responses[i] given prompts[i].
double eval_nll(const LanguageModel& model, std::span<const TokenSeq> responses,
                std::span<const TokenSeq> prompts);

// Fraction of response tokens that are the model's argmax under teacher
// forcing.
double token_accuracy(const LanguageModel& model, std::span<const TokenSeq> responses,
                      std::span<const TokenSeq> prompts);

TokenSeq strip_eos(TokenSeq seq);

// Mean ROUGE-L of model generations against references (trailing EOS
// removed from both). samples == 0 decodes greedily; otherwise each prompt
// gets `samples` temperature-1 draws from fixed per-prompt streams.
double mean_rouge_l(const LanguageModel& model, std::span<const TokenSeq> prompts,
                    std::span<const TokenSeq> references, std::size_t max_response,
                    std::size_t samples = 0, std::uint64_t seed = 0);

}  // namespace dlm2
