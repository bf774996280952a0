#include "dlm2/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>

#include "dlm2/error.hpp"
#include "dlm2/rng.hpp"

namespace dlm2 {

namespace {
constexpr std::uint64_t kTeacherRole = 1;
constexpr std::uint64_t kStudentRole = 2;
constexpr std::uint64_t kResampleRole = 3;
}  // namespace

std::size_t worker_count(std::size_t requested, std::size_t jobs) {
  std::size_t n = requested > 0 ? requested : std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DLM2_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1) n = std::min(n, static_cast<std::size_t>(cap));
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = worker_count(threads, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  std::mutex mu;
  std::size_t next = 0;
  auto run = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next >= n || error) return;
        i = next++;
      }
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(run);
  pool.clear();
  if (error) std::rethrow_exception(error);
}

std::vector<SampleTriple> batched_onpolicy_sample(std::span<const TokenSeq> prompts,
                                                  const LanguageModel& teacher,
                                                  const LanguageModel& student,
                                                  const SamplingConfig& cfg) {
  if (prompts.empty()) throw DataError("no prompts to sample from");
  std::vector<SampleTriple> out(prompts.size());
  const auto epoch = static_cast<std::uint64_t>(cfg.epoch);
  parallel_for(prompts.size(), cfg.threads, [&](std::size_t i) {
    DecodeConfig dt{cfg.temperature, cfg.max_response, derive_seed(cfg.seed, epoch, i, kTeacherRole)};
    DecodeConfig ds{cfg.temperature, cfg.max_response, derive_seed(cfg.seed, epoch, i, kStudentRole)};
    out[i] = SampleTriple{prompts[i], sample(teacher, prompts[i], dt), sample(student, prompts[i], ds),
                          cfg.epoch};
  });
  return out;
}

// ---------------------------------------------------------------------------
// Speculative filter

double entropy_nats(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

bool typical_accept(double q_draft_prob, std::span<const double> teacher_row, double epsilon) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ParameterError("epsilon must lie in [0, 1]");
  const double threshold = std::min(epsilon * epsilon, epsilon * std::exp(-entropy_nats(teacher_row)));
  return q_draft_prob > threshold;
}

SpeculativeResult speculative_generate(const LanguageModel& teacher, const LanguageModel& student,
                                       const TokenSeq& prompt, const SpecConfig& spec,
                                       const DecodeConfig& decode) {
  if (spec.K == 0) throw ParameterError("draft length K must be positive");
  if (!(spec.epsilon >= 0.0 && spec.epsilon <= 1.0)) throw ParameterError("epsilon must lie in [0, 1]");
  if (prompt.empty()) throw ContractError("empty prompt");
  Rng draft_rng(decode.seed);
  Rng resample_rng(derive_seed(decode.seed, kResampleRole));
  SpeculativeResult result;
  TokenSeq seq = prompt;
  auto room = [&] {
    return result.response.size() < decode.max_length && seq.size() < student.max_length();
  };
  bool done = false;
  while (!done && room()) {
    // Draft.
    TokenSeq draft_seq = seq;
    std::vector<double> draft_q;
    const std::size_t room_left = std::min(decode.max_length - result.response.size(),
                                     student.max_length() - seq.size());
    for (std::size_t k = 0; k < spec.K && k < room_left; ++k) {
      const auto lq = student.next_logprobs(draft_seq);
      const TokenId t = sample_token(lq, decode.temperature, draft_rng);
      draft_q.push_back(std::exp(lq[static_cast<std::size_t>(t)]));
      draft_seq.push_back(t);
      if (t == kEos) break;
    }
    // Verify in order against the teacher rows along the drafted sequence.
    const auto rows = teacher.logprob_rows(draft_seq);
    for (std::size_t k = 0; k < draft_q.size(); ++k) {
      const auto& lrow = rows[seq.size() - 1];
      std::vector<double> prow(lrow.size());
      std::transform(lrow.begin(), lrow.end(), prow.begin(), [](double v) { return std::exp(v); });
      ++result.drafted;
      const TokenId drafted = draft_seq[seq.size()];
      const bool ok = typical_accept(draft_q[k], prow, spec.epsilon);
      TokenId t = drafted;
      if (ok) {
        ++result.accepted;
      } else {
        t = sample_token(lrow, decode.temperature, resample_rng);
      }
      seq.push_back(t);
      result.response.push_back(t);
      if (t == kEos) {
        done = true;
        break;
      }
      if (!ok) break;
    }
  }
  return result;
}

std::vector<DraftObservation> draft_stream(const LanguageModel& teacher, const LanguageModel& student,
                                           std::span<const TokenSeq> prompts, std::size_t tokens,
                                           std::size_t max_response, std::uint64_t seed) {
  if (prompts.empty()) throw DataError("no prompts to sample from");
  Rng rng(seed);
  std::vector<DraftObservation> out;
  out.reserve(tokens);
  for (std::size_t i = 0; out.size() < tokens; ++i) {
    TokenSeq seq = prompts[i % prompts.size()];
    for (std::size_t k = 0; k < max_response && seq.size() < student.max_length() && out.size() < tokens; ++k) {
      const auto lq = student.next_logprobs(seq);
      const TokenId t = sample_token(lq, 1.0, rng);
      const auto lp = teacher.next_logprobs(seq);
      DraftObservation obs;
      obs.q = std::exp(lq[static_cast<std::size_t>(t)]);
      obs.teacher_row.resize(lp.size());
      std::transform(lp.begin(), lp.end(), obs.teacher_row.begin(), [](double v) { return std::exp(v); });
      out.push_back(std::move(obs));
      seq.push_back(t);
      if (t == kEos) break;
    }
  }
  return out;
}

double acceptance_rate(std::span<const DraftObservation> stream, double epsilon) {
  if (stream.empty()) throw DataError("empty draft stream");
  std::size_t accepted = 0;
  for (const auto& obs : stream) accepted += typical_accept(obs.q, obs.teacher_row, epsilon) ? 1 : 0;
  return static_cast<double>(accepted) / static_cast<double>(stream.size());
}

std::vector<SampleTriple> speculative_onpolicy_sample(std::span<const TokenSeq> prompts,
                                                      const LanguageModel& teacher,
                                                      const LanguageModel& student,
                                                      const SamplingConfig& cfg, const SpecConfig& spec) {
  if (prompts.empty()) throw DataError("no prompts to sample from");
  std::vector<SampleTriple> out(prompts.size());
  const auto epoch = static_cast<std::uint64_t>(cfg.epoch);
  parallel_for(prompts.size(), cfg.threads, [&](std::size_t i) {
    DecodeConfig dt{cfg.temperature, cfg.max_response, derive_seed(cfg.seed, epoch, i, kTeacherRole)};
    DecodeConfig ds{cfg.temperature, cfg.max_response, derive_seed(cfg.seed, epoch, i, kStudentRole)};
    out[i] = SampleTriple{prompts[i], sample(teacher, prompts[i], dt),
                          speculative_generate(teacher, student, prompts[i], spec, ds).response, cfg.epoch};
  });
  return out;
}

// ---------------------------------------------------------------------------
// Replay

void ReplayBuffer::push_epoch(std::vector<SampleTriple> triples) {
  if (max_epochs_ == 0) return;
  epochs_.push_back(std::move(triples));
  while (epochs_.size() > max_epochs_) epochs_.pop_front();
}

std::size_t ReplayBuffer::size() const {
  std::size_t n = 0;
  for (const auto& e : epochs_) n += e.size();
  return n;
}

const SampleTriple& ReplayBuffer::at(std::size_t i) const {
  for (const auto& e : epochs_) {
    if (i < e.size()) return e[i];
    i -= e.size();
  }
  throw IndexError("replay index out of range");
}

ReplayResult replay_mix(std::span<const SampleTriple> fresh, ReplayBuffer& buffer, double ratio,
                        std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ParameterError("replay ratio must lie in [0, 1]");
  ReplayResult result;
  result.data.assign(fresh.begin(), fresh.end());
  const std::size_t n = fresh.size();
  const auto k = static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - 1e-9));
  if (k > 0 && buffer.empty()) {
    result.warning = "replay requested but the buffer is empty; using fresh data only";
  } else if (k > 0) {
    Rng rng(seed);
    std::vector<std::size_t> slots(n);
    for (std::size_t i = 0; i < n; ++i) slots[i] = i;
    for (std::size_t i = 0; i < k; ++i) std::swap(slots[i], slots[i + rng.index(n - i)]);
    const std::size_t pool = buffer.size();
    std::vector<std::size_t> picks(pool);
    for (std::size_t i = 0; i < pool; ++i) picks[i] = i;
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t src;
      if (k <= pool) {
        std::swap(picks[i], picks[i + rng.index(pool - i)]);
        src = picks[i];
      } else {
        src = rng.index(pool);
      }
      result.data[slots[i]] = buffer.at(src);
    }
    result.replayed = k;
  }
  buffer.push_epoch({fresh.begin(), fresh.end()});
  return result;
}

// ---------------------------------------------------------------------------
// Synthetic targets and corpora

std::vector<double> make_longtail_target(std::size_t vocab, double head_mass, double decay) {
  if (vocab < 4) throw ParameterError("long-tail target needs V >= 4");
  if (!(head_mass > 0.0 && head_mass < 1.0)) throw ParameterError("head mass must lie in (0, 1)");
  if (!(decay > 0.0 && decay <= 1.0)) throw ParameterError("decay must lie in (0, 1]");
  std::vector<double> row(vocab);
  row[0] = head_mass;
  double total = 0.0;
  double w = 1.0;
  for (std::size_t i = 1; i < vocab; ++i, w *= decay) {
    row[i] = w;
    total += w;
  }
  for (std::size_t i = 1; i < vocab; ++i) row[i] *= (1.0 - head_mass) / total;
  return row;
}

Grammar make_grammar(std::size_t vocab, std::uint64_t rule_seed, const GrammarConfig& cfg) {
  if (vocab < 4) throw ParameterError("grammar needs V >= 4");
  if (cfg.branching == 0 || !(cfg.eos_prob > 0.0 && cfg.eos_prob < 1.0)) {
    throw ParameterError("invalid grammar configuration");
  }
  Rng rng(rule_seed);
  const std::size_t content = vocab - 2;
  Grammar g{vocab, std::vector<std::vector<double>>(vocab, std::vector<double>(vocab, 0.0))};
  for (std::size_t a = 0; a < vocab; ++a) {
    if (static_cast<TokenId>(a) == kEos) continue;
    auto& row = g.transition[a];
    if (static_cast<TokenId>(a) == kBos) {
      for (std::size_t b = 2; b < vocab; ++b) row[b] = 1.0 / static_cast<double>(content);
      continue;
    }
    // A few distinct successors with skewed weights.
    std::vector<std::size_t> succ;
    const std::size_t k = std::min(cfg.branching, content);
    while (succ.size() < k) {
      const std::size_t b = 2 + rng.index(content);
      if (std::find(succ.begin(), succ.end(), b) == succ.end()) succ.push_back(b);
    }
    double total = 0.0;
    std::vector<double> w(k);
    for (auto& x : w) total += (x = std::exp(cfg.sharpness * rng.normal()));
    for (std::size_t j = 0; j < k; ++j) row[succ[j]] = (1.0 - cfg.eos_prob) * w[j] / total;
    row[static_cast<std::size_t>(kEos)] = cfg.eos_prob;
  }
  return g;
}

std::vector<CorpusRecord> sample_grammar_corpus(const Grammar& grammar, std::size_t max_len,
                                                std::uint64_t seed, std::size_t n) {
  if (max_len < 6) throw ParameterError("grammar corpus needs L >= 6");
  Rng rng(seed);
  std::vector<CorpusRecord> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    CorpusRecord rec;
    rec.prompt.push_back(kBos);
    const std::size_t extra = 1 + rng.index(3);
    for (std::size_t j = 0; j < extra; ++j) {
      std::vector<double> w = grammar.transition[static_cast<std::size_t>(rec.prompt.back())];
      w[static_cast<std::size_t>(kEos)] = 0.0;
      rec.prompt.push_back(static_cast<TokenId>(rng.categorical(w)));
    }
    TokenId last = rec.prompt.back();
    while (rec.prompt.size() + rec.response.size() < max_len) {
      const auto t = static_cast<TokenId>(rng.categorical(grammar.transition[static_cast<std::size_t>(last)]));
      rec.response.push_back(t);
      if (t == kEos) break;
      last = t;
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<CorpusRecord> make_grammar_corpus(std::size_t vocab, std::size_t max_len,
                                              std::uint64_t rule_seed, std::size_t n,
                                              const GrammarConfig& cfg) {
  if (n < 1) throw ParameterError("corpus size must be >= 1");
  return sample_grammar_corpus(make_grammar(vocab, rule_seed, cfg), max_len,
                               derive_seed(rule_seed, 0xc0de), n);
}

std::vector<std::vector<double>> response_bigrams(std::span<const CorpusRecord> corpus,
                                                  std::size_t vocab) {
  std::vector<std::vector<double>> counts(vocab, std::vector<double>(vocab, 0.0));
  for (const auto& rec : corpus) {
    TokenId prev = rec.prompt.back();
    for (TokenId t : rec.response) {
      counts[static_cast<std::size_t>(prev)][static_cast<std::size_t>(t)] += 1.0;
      prev = t;
    }
  }
  for (auto& row : counts) {
    double total = 0.0;
    for (double c : row) total += c;
    if (total > 0.0)
      for (auto& c : row) c /= total;
  }
  return counts;
}

}  // namespace dlm2
