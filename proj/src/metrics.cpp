#include "dlm2/metrics.hpp"

#include <algorithm>

#include "dlm2/error.hpp"
#include "dlm2/rng.hpp"

namespace dlm2 {

namespace {

void check_aligned(std::span<const TokenSeq> responses, std::span<const TokenSeq> prompts) {
  if (responses.empty()) throw DataError("empty evaluation set");
  if (responses.size() != prompts.size()) {
    throw DimensionError("prompts and responses are not aligned");
  }
}

// Runs teacher-forced forwards in chunks and hands each chunk's rows to fn.
template <typename Fn>
void for_each_chunk(const LanguageModel& model, std::span<const TokenSeq> responses,
                    std::span<const TokenSeq> prompts, Fn&& fn) {
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < responses.size(); start += kChunk) {
    TeacherForcedBatch batch;
    for (std::size_t i = start; i < std::min(responses.size(), start + kChunk); ++i) {
      batch.add(prompts[i], responses[i]);
    }
    Graph g(false);
    fn(batch, response_rows(g, model, batch));
  }
}

}  // namespace

std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double rouge_l(const TokenSeq& candidate, const TokenSeq& reference) {
  if (reference.empty()) throw DataError("ROUGE-L needs a nonempty reference");
  const auto lcs = static_cast<double>(lcs_length(candidate, reference));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(candidate.size());
  const double r = lcs / static_cast<double>(reference.size());
  return 2.0 * p * r / (p + r);
}

double eval_nll(const LanguageModel& model, std::span<const TokenSeq> responses,
                std::span<const TokenSeq> prompts) {
  check_aligned(responses, prompts);
  double total = 0.0;
  std::size_t tokens = 0;
  for_each_chunk(model, responses, prompts, [&](const TeacherForcedBatch& batch, const Tensor& rows) {
    Graph g(false);
    const Tensor picked = g.gather(rows, batch.targets());
    for (double v : picked.values()) total -= v;
    tokens += batch.total_tokens();
  });
  return total / static_cast<double>(tokens);
}

double token_accuracy(const LanguageModel& model, std::span<const TokenSeq> responses,
                      std::span<const TokenSeq> prompts) {
  check_aligned(responses, prompts);
  std::size_t hits = 0, tokens = 0;
  for_each_chunk(model, responses, prompts, [&](const TeacherForcedBatch& batch, const Tensor& rows) {
    const std::size_t v = rows.cols();
    auto targets = batch.targets();
    for (std::size_t t = 0; t < targets.size(); ++t) {
      auto row = rows.values().subspan(t * v, v);
      const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
      hits += best == targets[t] ? 1 : 0;
    }
    tokens += targets.size();
  });
  return static_cast<double>(hits) / static_cast<double>(tokens);
}

TokenSeq strip_eos(TokenSeq seq) {
  if (!seq.empty() && seq.back() == kEos) seq.pop_back();
  return seq;
}

double mean_rouge_l(const LanguageModel& model, std::span<const TokenSeq> prompts,
                    std::span<const TokenSeq> references, std::size_t max_response,
                    std::size_t samples, std::uint64_t seed) {
  check_aligned(references, prompts);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const TokenSeq ref = strip_eos(references[i]);
    if (ref.empty()) continue;
    if (samples == 0) {
      total += rouge_l(strip_eos(greedy(model, prompts[i], max_response)), ref);
      ++count;
      continue;
    }
    for (std::size_t k = 0; k < samples; ++k) {
      DecodeConfig dc{1.0, max_response, derive_seed(seed, i, k)};
      total += rouge_l(strip_eos(sample(model, prompts[i], dc)), ref);
      ++count;
    }
  }
  if (count == 0) throw DataError("every reference is empty");
  return total / static_cast<double>(count);
}

}  // namespace dlm2
