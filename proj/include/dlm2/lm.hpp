#pragma once

// Tiny autoregressive models. Token 0 is BOS and token 1 is EOS; every
// context handed to a model starts with at least one token (normally BOS).

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dlm2/rng.hpp"
#include "dlm2/tensor.hpp"

namespace dlm2 {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;

inline constexpr TokenId kBos = 0;
inline constexpr TokenId kEos = 1;

struct DecodeConfig {
  double temperature = 1.0;
  std::size_t max_length = 16;  // response tokens, EOS included
  std::uint64_t seed = 0;
};

class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  virtual std::size_t vocab_size() const = 0;
  // Longest context (prompt + response) the model accepts.
  virtual std::size_t max_length() const = 0;

  // Row i of context c is log p(. | c[0..i]). Rows of all contexts are
  // stacked in order into a [sum |c| x V] tensor.
  virtual Tensor forward(Graph& g, std::span<const TokenSeq> contexts) const = 0;

  virtual std::vector<double> next_logprobs(const TokenSeq& prefix) const;

  // Live handles; writing through them updates the model.
  virtual std::vector<NamedTensor> parameters() { return {}; }
  virtual std::unique_ptr<LanguageModel> clone() const = 0;

  std::vector<std::vector<double>> logprob_rows(const TokenSeq& prefix) const;

  // Deep copies of the parameters, suitable for checkpointing.
  std::vector<NamedTensor> state() const;

 protected:
  void check_context(const TokenSeq& context) const;
};

// Exact n-gram model: the next-token row depends on the last min(n, len)
// tokens. Rows are floored at 1e-12 and renormalized.
class TabularLM final : public LanguageModel {
 public:
  TabularLM(std::size_t vocab, std::size_t order, std::size_t max_len,
            std::vector<std::vector<double>> rows);

  static TabularLM uniform(std::size_t vocab, std::size_t order, std::size_t max_len);
  // Every row one-hot (after flooring) on a seeded random token.
  static TabularLM deterministic(std::size_t vocab, std::size_t order, std::size_t max_len,
                                 std::uint64_t seed);
  // Softmax of N(0, spread^2) logits per row.
  static TabularLM random(std::size_t vocab, std::size_t order, std::size_t max_len,
                          std::uint64_t seed, double spread = 1.0);

  static std::size_t context_count(std::size_t vocab, std::size_t order);

  std::size_t vocab_size() const override { return vocab_; }
  std::size_t max_length() const override { return max_len_; }
  std::size_t order() const { return order_; }

  Tensor forward(Graph& g, std::span<const TokenSeq> contexts) const override;
  std::vector<double> next_logprobs(const TokenSeq& prefix) const override;
  std::unique_ptr<LanguageModel> clone() const override;

  std::size_t context_index(std::span<const TokenId> prefix) const;
  std::span<const double> row(std::span<const TokenId> prefix) const;
  double prob(std::span<const TokenId> prefix, TokenId token) const {
    return row(prefix)[static_cast<std::size_t>(token)];
  }
  const std::vector<std::vector<double>>& rows() const { return rows_; }

 private:
  std::size_t vocab_;
  std::size_t order_;
  std::size_t max_len_;
  std::vector<std::vector<double>> rows_;
};

struct TransformerConfig {
  std::size_t vocab = 16;
  std::size_t d_model = 16;
  std::size_t layers = 1;
  std::size_t heads = 2;
  std::size_t d_ff = 32;
  std::size_t max_len = 32;
};

// Pre-LN decoder: token + learned position embeddings, causal multi-head
// attention, GELU feed-forward, final LN and an output projection.
class TinyTransformerLM final : public LanguageModel {
 public:
  TinyTransformerLM(const TransformerConfig& cfg, std::uint64_t seed);
  // Rebuilds a model from checkpoint tensors; architecture is inferred.
  static TinyTransformerLM from_tensors(std::vector<NamedTensor> tensors);

  const TransformerConfig& config() const { return cfg_; }
  std::size_t vocab_size() const override { return cfg_.vocab; }
  std::size_t max_length() const override { return cfg_.max_len; }

  Tensor forward(Graph& g, std::span<const TokenSeq> contexts) const override;
  std::vector<NamedTensor> parameters() override { return params_; }
  std::unique_ptr<LanguageModel> clone() const override;

 private:
  struct Head {
    Tensor wq, wk, wv, wo;
  };
  struct Layer {
    Tensor ln1_g, ln1_b;
    std::vector<Head> heads;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
  };

  TinyTransformerLM() = default;
  void bind();  // fills the typed views from params_

  TransformerConfig cfg_;
  std::vector<NamedTensor> params_;
  Tensor tok_emb_, pos_emb_, lnf_g_, lnf_b_, out_w_, out_b_;
  std::vector<Layer> layers_;
};

// Teacher-forcing layout for (prompt, response) pairs: the context for each
// pair is prompt ++ response[0..n-2], and the rows that predict response
// tokens are picked out of the stacked forward output.
class TeacherForcedBatch {
 public:
  void add(const TokenSeq& prompt, const TokenSeq& response);

  std::size_t size() const { return lengths_.size(); }
  std::span<const TokenSeq> contexts() const { return contexts_; }
  std::span<const std::size_t> row_indices() const { return rows_; }
  std::span<const std::size_t> targets() const { return targets_; }
  std::span<const std::size_t> lengths() const { return lengths_; }
  std::size_t total_tokens() const { return targets_.size(); }

 private:
  std::vector<TokenSeq> contexts_;
  std::vector<std::size_t> rows_;
  std::vector<std::size_t> targets_;
  std::vector<std::size_t> lengths_;
  std::size_t offset_ = 0;
};

// [total_tokens x V] log-prob rows aligned with batch.targets().
Tensor response_rows(Graph& g, const LanguageModel& model, const TeacherForcedBatch& batch);

double sequence_logprob(const LanguageModel& model, const TokenSeq& prompt,
                        const TokenSeq& response);

// Ancestral sampling at the configured temperature. Returns the response
// only; it ends with EOS unless a length cap was hit first.
TokenSeq sample(const LanguageModel& model, const TokenSeq& prompt, const DecodeConfig& cfg);
TokenSeq sample(const LanguageModel& model, const TokenSeq& prompt, const DecodeConfig& cfg,
                Rng& rng);
// Draws one token from a log-prob row at the given temperature.
TokenId sample_token(std::span<const double> logprobs, double temperature, Rng& rng);
TokenSeq greedy(const LanguageModel& model, const TokenSeq& prompt, std::size_t max_length);

struct CorpusRecord {
  TokenSeq prompt;
  TokenSeq response;
  bool operator==(const CorpusRecord&) const = default;
};

struct SftConfig {
  std::size_t steps = 200;
  double learning_rate = 0.05;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::size_t eval_every = 0;  // 0: only before and after
};

// Mean per-token NLL of the responses.
double corpus_nll(const LanguageModel& model, std::span<const CorpusRecord> corpus);

// Minibatch SGD on response-token NLL. Returns corpus NLL at every
// evaluation point, first entry before any update.
std::vector<double> train_sft(LanguageModel& model, std::span<const CorpusRecord> corpus,
                              const SftConfig& cfg);

void sgd_step(std::span<NamedTensor> params, double learning_rate);

}  // namespace dlm2
