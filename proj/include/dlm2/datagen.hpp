#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dlm2/divergence.hpp"
#include "dlm2/lm.hpp"

namespace dlm2 {

struct SamplingConfig {
  double temperature = 1.0;
  std::size_t max_response = 16;
  std::uint64_t seed = 0;
  int epoch = 0;
  std::size_t threads = 0;  // 0: hardware concurrency, capped by DLM2_THREADS
};

// Worker count after applying the DLM2_THREADS cap.
std::size_t worker_count(std::size_t requested, std::size_t jobs);

// Runs fn(i) for i in [0, n) on up to `threads` workers. The first
// exception thrown by any job is rethrown after all workers join.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn);

// One teacher and one student response per prompt. Prompt i uses streams
// derived from (seed, epoch, i), so output does not depend on worker count.
std::vector<SampleTriple> batched_onpolicy_sample(std::span<const TokenSeq> prompts,
                                                  const LanguageModel& teacher,
                                                  const LanguageModel& student,
                                                  const SamplingConfig& cfg);

struct SpecConfig {
  std::size_t K = 4;
  double epsilon = 0.0;
};

double entropy_nats(std::span<const double> probs);

// Accept iff q > min(eps^2, eps * exp(-H(teacher_row))).
bool typical_accept(double q_draft_prob, std::span<const double> teacher_row, double epsilon);

struct SpeculativeResult {
  TokenSeq response;
  std::size_t drafted = 0;
  std::size_t accepted = 0;
};

// Student drafts up to K tokens, the teacher checks them in order and the
// first rejected token is replaced by a draw from the teacher row. Drafts
// use the same stream as sample(), so eps = 0 reproduces pure student
// sampling exactly.
SpeculativeResult speculative_generate(const LanguageModel& teacher, const LanguageModel& student,
                                       const TokenSeq& prompt, const SpecConfig& spec,
                                       const DecodeConfig& decode);

// One drafted token: the student's probability for it and the teacher row
// at the same prefix.
struct DraftObservation {
  double q = 0.0;
  std::vector<double> teacher_row;
};

// Student-sampled tokens (temperature 1) with their teacher rows, collected
// from repeated generations over `prompts` until `tokens` are gathered.
std::vector<DraftObservation> draft_stream(const LanguageModel& teacher, const LanguageModel& student,
                                           std::span<const TokenSeq> prompts, std::size_t tokens,
                                           std::size_t max_response, std::uint64_t seed);

double acceptance_rate(std::span<const DraftObservation> stream, double epsilon);

// batched_onpolicy_sample with student responses from speculative_generate.
std::vector<SampleTriple> speculative_onpolicy_sample(std::span<const TokenSeq> prompts,
                                                      const LanguageModel& teacher,
                                                      const LanguageModel& student,
                                                      const SamplingConfig& cfg, const SpecConfig& spec);

// Earlier epochs' triples, FIFO over whole epochs.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t max_epochs = 4) : max_epochs_(max_epochs) {}

  void push_epoch(std::vector<SampleTriple> triples);
  std::size_t size() const;
  bool empty() const { return size() == 0; }
  std::size_t epochs() const { return epochs_.size(); }
  const SampleTriple& at(std::size_t i) const;

 private:
  std::size_t max_epochs_;
  std::deque<std::vector<SampleTriple>> epochs_;
};

struct ReplayResult {
  std::vector<SampleTriple> data;
  std::size_t replayed = 0;
  std::string warning;  // non-empty when replay was requested but impossible
};

// Replaces ceil(ratio * N) positions of `fresh` with triples drawn from the
// buffer, then appends `fresh` to the buffer as a new epoch.
ReplayResult replay_mix(std::span<const SampleTriple> fresh, ReplayBuffer& buffer, double ratio,
                        std::uint64_t seed);

// head_mass on bin 0, the rest geometrically decaying over bins 1..V-1.
std::vector<double> make_longtail_target(std::size_t vocab, double head_mass, double decay);

struct Grammar {
  std::size_t vocab = 0;
  // transition[a][b]: probability of b after a, for a in {BOS} + content
  // tokens. Row EOS is unused.
  std::vector<std::vector<double>> transition;
};

struct GrammarConfig {
  std::size_t branching = 3;
  double eos_prob = 0.15;
  double sharpness = 1.5;
};

Grammar make_grammar(std::size_t vocab, std::uint64_t rule_seed, const GrammarConfig& cfg = {});

// Prompts are BOS plus 1-3 content tokens; responses continue the chain
// until EOS or total length L.
std::vector<CorpusRecord> make_grammar_corpus(std::size_t vocab, std::size_t max_len,
                                              std::uint64_t rule_seed, std::size_t n,
                                              const GrammarConfig& cfg = {});
std::vector<CorpusRecord> sample_grammar_corpus(const Grammar& grammar, std::size_t max_len,
                                                std::uint64_t seed, std::size_t n);

// Transition frequencies observed inside responses, rows normalized.
std::vector<std::vector<double>> response_bigrams(std::span<const CorpusRecord> corpus,
                                                  std::size_t vocab);

}  // namespace dlm2
