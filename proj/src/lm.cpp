#include "dlm2/lm.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "dlm2/error.hpp"

namespace dlm2 {

namespace {

constexpr double kFloor = 1e-12;

std::vector<double> floor_and_normalize(std::vector<double> row) {
  double total = 0.0;
  for (auto& v : row) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ParameterError("table entry must be finite and >= 0");
    v = std::max(v, kFloor);
    total += v;
  }
  for (auto& v : row) v /= total;
  return row;
}

}  // namespace

// ---------------------------------------------------------------------------
// LanguageModel

void LanguageModel::check_context(const TokenSeq& context) const {
  if (context.empty()) throw ContractError("empty context");
  if (context.size() > max_length()) {
    throw LengthError("context of length " + std::to_string(context.size()) +
                      " exceeds model limit " + std::to_string(max_length()));
  }
  for (TokenId t : context) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_size()) {
      throw IndexError("token id " + std::to_string(t) + " outside vocabulary");
    }
  }
}

std::vector<double> LanguageModel::next_logprobs(const TokenSeq& prefix) const {
  Graph g(false);
  Tensor rows = forward(g, std::span(&prefix, 1));
  const std::size_t v = vocab_size();
  auto vals = rows.values().subspan((prefix.size() - 1) * v, v);
  return {vals.begin(), vals.end()};
}

std::vector<std::vector<double>> LanguageModel::logprob_rows(const TokenSeq& prefix) const {
  Graph g(false);
  Tensor rows = forward(g, std::span(&prefix, 1));
  const std::size_t v = vocab_size();
  std::vector<std::vector<double>> out(prefix.size());
  for (std::size_t i = 0; i < prefix.size(); ++i) {
    auto r = rows.values().subspan(i * v, v);
    out[i].assign(r.begin(), r.end());
  }
  return out;
}

std::vector<NamedTensor> LanguageModel::state() const {
  auto params = const_cast<LanguageModel*>(this)->parameters();
  for (auto& p : params) p.tensor = p.tensor.clone();
  return params;
}

// ---------------------------------------------------------------------------
// TabularLM

std::size_t TabularLM::context_count(std::size_t vocab, std::size_t order) {
  std::size_t count = 0;
  std::size_t power = 1;
  for (std::size_t k = 1; k <= order; ++k) {
    power *= vocab;
    count += power;
  }
  return count;
}

TabularLM::TabularLM(std::size_t vocab, std::size_t order, std::size_t max_len,
                     std::vector<std::vector<double>> rows)
    : vocab_(vocab), order_(order), max_len_(max_len) {
  if (vocab < 2 || order < 1 || max_len < 1) throw ParameterError("invalid TabularLM shape");
  if (rows.size() != context_count(vocab, order)) {
    throw DimensionError("TabularLM expects " + std::to_string(context_count(vocab, order)) +
                         " rows, got " + std::to_string(rows.size()));
  }
  rows_.reserve(rows.size());
  for (auto& r : rows) {
    if (r.size() != vocab) throw DimensionError("TabularLM row width differs from vocabulary");
    rows_.push_back(floor_and_normalize(std::move(r)));
  }
}

TabularLM TabularLM::uniform(std::size_t vocab, std::size_t order, std::size_t max_len) {
  return TabularLM(vocab, order, max_len,
                   std::vector<std::vector<double>>(context_count(vocab, order),
                                                    std::vector<double>(vocab, 1.0)));
}

TabularLM TabularLM::deterministic(std::size_t vocab, std::size_t order, std::size_t max_len,
                                   std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<double>> rows(context_count(vocab, order), std::vector<double>(vocab, 0.0));
  for (auto& r : rows) r[rng.index(vocab)] = 1.0;
  return TabularLM(vocab, order, max_len, std::move(rows));
}

TabularLM TabularLM::random(std::size_t vocab, std::size_t order, std::size_t max_len,
                            std::uint64_t seed, double spread) {
  Rng rng(seed);
  std::vector<std::vector<double>> rows(context_count(vocab, order), std::vector<double>(vocab));
  for (auto& r : rows) {
    for (auto& v : r) v = std::exp(spread * rng.normal());
  }
  return TabularLM(vocab, order, max_len, std::move(rows));
}

std::size_t TabularLM::context_index(std::span<const TokenId> prefix) const {
  if (prefix.empty()) throw ContractError("empty context");
  const std::size_t k = std::min(order_, prefix.size());
  std::size_t offset = 0;
  std::size_t power = 1;
  for (std::size_t j = 1; j < k; ++j) {
    power *= vocab_;
    offset += power;
  }
  std::size_t idx = 0;
  for (std::size_t i = prefix.size() - k; i < prefix.size(); ++i) {
    const auto t = prefix[i];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab_) {
      throw IndexError("token id " + std::to_string(t) + " outside vocabulary");
    }
    idx = idx * vocab_ + static_cast<std::size_t>(t);
  }
  return offset + idx;
}

std::span<const double> TabularLM::row(std::span<const TokenId> prefix) const {
  return rows_[context_index(prefix)];
}

Tensor TabularLM::forward(Graph& g, std::span<const TokenSeq> contexts) const {
  (void)g;
  std::size_t total = 0;
  for (const auto& c : contexts) {
    check_context(c);
    total += c.size();
  }
  std::vector<double> out;
  out.reserve(total * vocab_);
  for (const auto& c : contexts) {
    for (std::size_t i = 1; i <= c.size(); ++i) {
      for (double p : row(std::span(c).first(i))) out.push_back(std::log(p));
    }
  }
  return Tensor::from({total, vocab_}, std::move(out));
}

std::vector<double> TabularLM::next_logprobs(const TokenSeq& prefix) const {
  check_context(prefix);
  auto r = row(prefix);
  std::vector<double> out(r.size());
  std::transform(r.begin(), r.end(), out.begin(), [](double p) { return std::log(p); });
  return out;
}

std::unique_ptr<LanguageModel> TabularLM::clone() const {
  return std::make_unique<TabularLM>(*this);
}

// ---------------------------------------------------------------------------
// TinyTransformerLM

TinyTransformerLM::TinyTransformerLM(const TransformerConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  if (cfg.vocab < 2 || cfg.d_model == 0 || cfg.heads == 0 || cfg.layers == 0 || cfg.max_len == 0 ||
      cfg.d_ff == 0) {
    throw ParameterError("invalid transformer configuration");
  }
  if (cfg.d_model % cfg.heads != 0) throw ParameterError("d_model must be divisible by heads");
  Rng rng(seed);
  const std::size_t d = cfg.d_model;
  const std::size_t dh = d / cfg.heads;

  auto normal = [&](const std::string& name, Shape shape, double stddev) {
    std::vector<double> v(shape_size(shape));
    for (auto& x : v) x = stddev * rng.normal();
    params_.push_back({name, Tensor::from(std::move(shape), std::move(v), true)});
  };
  auto constant = [&](const std::string& name, Shape shape, double value) {
    params_.push_back(
        {name, Tensor::from(shape, std::vector<double>(shape_size(shape), value), true)});
  };

  const double wstd = 1.0 / std::sqrt(static_cast<double>(d));
  normal("tok_emb", {cfg.vocab, d}, 0.5);
  normal("pos_emb", {cfg.max_len, d}, 0.1);
  for (std::size_t l = 0; l < cfg.layers; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    constant(p + "ln1.g", {d}, 1.0);
    constant(p + "ln1.b", {d}, 0.0);
    for (std::size_t h = 0; h < cfg.heads; ++h) {
      const std::string ph = p + "h" + std::to_string(h) + ".";
      normal(ph + "wq", {d, dh}, wstd);
      normal(ph + "wk", {d, dh}, wstd);
      normal(ph + "wv", {d, dh}, wstd);
      normal(ph + "wo", {dh, d}, 1.0 / std::sqrt(static_cast<double>(d)));
    }
    constant(p + "ln2.g", {d}, 1.0);
    constant(p + "ln2.b", {d}, 0.0);
    normal(p + "ff.w1", {d, cfg.d_ff}, wstd);
    constant(p + "ff.b1", {cfg.d_ff}, 0.0);
    normal(p + "ff.w2", {cfg.d_ff, d}, 1.0 / std::sqrt(static_cast<double>(cfg.d_ff)));
    constant(p + "ff.b2", {d}, 0.0);
  }
  constant("lnf.g", {d}, 1.0);
  constant("lnf.b", {d}, 0.0);
  normal("out.w", {d, cfg.vocab}, wstd);
  constant("out.b", {cfg.vocab}, 0.0);
  bind();
}

void TinyTransformerLM::bind() {
  std::map<std::string, Tensor> by_name;
  for (const auto& p : params_) by_name[p.name] = p.tensor;
  auto get = [&](const std::string& name) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError("missing transformer parameter " + name);
    return it->second;
  };
  tok_emb_ = get("tok_emb");
  pos_emb_ = get("pos_emb");
  lnf_g_ = get("lnf.g");
  lnf_b_ = get("lnf.b");
  out_w_ = get("out.w");
  out_b_ = get("out.b");
  layers_.clear();
  for (std::size_t l = 0; l < cfg_.layers; ++l) {
    const std::string p = "l" + std::to_string(l) + ".";
    Layer layer;
    layer.ln1_g = get(p + "ln1.g");
    layer.ln1_b = get(p + "ln1.b");
    for (std::size_t h = 0; h < cfg_.heads; ++h) {
      const std::string ph = p + "h" + std::to_string(h) + ".";
      layer.heads.push_back({get(ph + "wq"), get(ph + "wk"), get(ph + "wv"), get(ph + "wo")});
    }
    layer.ln2_g = get(p + "ln2.g");
    layer.ln2_b = get(p + "ln2.b");
    layer.w1 = get(p + "ff.w1");
    layer.b1 = get(p + "ff.b1");
    layer.w2 = get(p + "ff.w2");
    layer.b2 = get(p + "ff.b2");
    layers_.push_back(std::move(layer));
  }
}

TinyTransformerLM TinyTransformerLM::from_tensors(std::vector<NamedTensor> tensors) {
  TinyTransformerLM m;
  auto find = [&](const std::string& name) -> const Tensor* {
    for (const auto& t : tensors)
      if (t.name == name) return &t.tensor;
    return nullptr;
  };
  const Tensor* tok = find("tok_emb");
  const Tensor* pos = find("pos_emb");
  const Tensor* w1 = find("l0.ff.w1");
  if (!tok || !pos || !w1 || tok->rank() != 2 || pos->rank() != 2 || w1->rank() != 2) {
    throw FormatError("checkpoint is not a transformer");
  }
  m.cfg_.vocab = tok->rows();
  m.cfg_.d_model = tok->cols();
  m.cfg_.max_len = pos->rows();
  m.cfg_.d_ff = w1->cols();
  m.cfg_.layers = 0;
  while (find("l" + std::to_string(m.cfg_.layers) + ".ln1.g")) ++m.cfg_.layers;
  m.cfg_.heads = 0;
  while (find("l0.h" + std::to_string(m.cfg_.heads) + ".wq")) ++m.cfg_.heads;
  if (m.cfg_.heads == 0) throw FormatError("checkpoint has no attention heads");
  for (auto& t : tensors) {
    t.tensor.set_requires_grad(true);
    m.params_.push_back(std::move(t));
  }
  m.bind();
  return m;
}

std::unique_ptr<LanguageModel> TinyTransformerLM::clone() const {
  auto copy = std::unique_ptr<TinyTransformerLM>(new TinyTransformerLM());
  copy->cfg_ = cfg_;
  for (const auto& p : params_) copy->params_.push_back({p.name, p.tensor.clone(true)});
  copy->bind();
  return copy;
}

Tensor TinyTransformerLM::forward(Graph& g, std::span<const TokenSeq> contexts) const {
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> positions;
  std::vector<std::size_t> segments;
  for (const auto& c : contexts) {
    check_context(c);
    segments.push_back(c.size());
    for (std::size_t i = 0; i < c.size(); ++i) {
      tokens.push_back(static_cast<std::size_t>(c[i]));
      positions.push_back(i);
    }
  }
  const std::size_t n = tokens.size();
  if (n == 0) throw ContractError("forward on an empty batch");
  const double score_scale = 1.0 / std::sqrt(static_cast<double>(cfg_.d_model / cfg_.heads));

  auto affine = [&](const Tensor& x, const Tensor& gain, const Tensor& bias) {
    return g.add(g.mul(x, g.repeat_rows(gain, n)), g.repeat_rows(bias, n));
  };

  Tensor x = g.add(g.select_rows(tok_emb_, tokens), g.select_rows(pos_emb_, positions));
  for (const auto& layer : layers_) {
    Tensor h = affine(g.layer_norm(x), layer.ln1_g, layer.ln1_b);
    Tensor attn;
    for (const auto& head : layer.heads) {
      Tensor q = g.matmul(h, head.wq);
      Tensor k = g.matmul(h, head.wk);
      Tensor v = g.matmul(h, head.wv);
      Tensor a = g.causal_softmax(g.scale(g.matmul_nt(q, k), score_scale), segments);
      Tensor o = g.matmul(g.matmul(a, v), head.wo);
      attn = attn.defined() ? g.add(attn, o) : o;
    }
    x = g.add(x, attn);
    Tensor h2 = affine(g.layer_norm(x), layer.ln2_g, layer.ln2_b);
    Tensor f = g.gelu(g.add(g.matmul(h2, layer.w1), g.repeat_rows(layer.b1, n)));
    x = g.add(x, g.add(g.matmul(f, layer.w2), g.repeat_rows(layer.b2, n)));
  }
  Tensor hf = affine(g.layer_norm(x), lnf_g_, lnf_b_);
  Tensor logits = g.add(g.matmul(hf, out_w_), g.repeat_rows(out_b_, n));
  return g.log_softmax(logits);
}

// ---------------------------------------------------------------------------
// Teacher forcing and sampling

void TeacherForcedBatch::add(const TokenSeq& prompt, const TokenSeq& response) {
  if (prompt.empty()) throw ContractError("empty prompt");
  if (response.empty()) throw ContractError("empty response");
  TokenSeq context = prompt;
  context.insert(context.end(), response.begin(), response.end() - 1);
  const std::size_t first = offset_ + prompt.size() - 1;
  for (std::size_t t = 0; t < response.size(); ++t) {
    rows_.push_back(first + t);
    if (response[t] < 0) throw IndexError("negative token id");
    targets_.push_back(static_cast<std::size_t>(response[t]));
  }
  lengths_.push_back(response.size());
  offset_ += context.size();
  contexts_.push_back(std::move(context));
}

Tensor response_rows(Graph& g, const LanguageModel& model, const TeacherForcedBatch& batch) {
  for (std::size_t i = 0; i < batch.size(); ++i) {
    // The full sequence (context plus final response token) must fit.
    if (batch.contexts()[i].size() + 1 > model.max_length()) {
      throw LengthError("prompt + response exceeds model length " +
                        std::to_string(model.max_length()));
    }
  }
  Tensor all = model.forward(g, batch.contexts());
  return g.select_rows(all, batch.row_indices());
}

double sequence_logprob(const LanguageModel& model, const TokenSeq& prompt,
                        const TokenSeq& response) {
  TeacherForcedBatch batch;
  batch.add(prompt, response);
  Graph g(false);
  Tensor rows = response_rows(g, model, batch);
  Tensor picked = g.gather(rows, batch.targets());
  double total = 0.0;
  for (double v : picked.values()) total += v;
  return total;
}

TokenId sample_token(std::span<const double> logprobs, double temperature, Rng& rng) {
  if (!(temperature > 0.0)) throw ParameterError("temperature must be positive");
  const double hi = *std::max_element(logprobs.begin(), logprobs.end());
  std::vector<double> w(logprobs.size());
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = std::exp((logprobs[i] - hi) / temperature);
  return static_cast<TokenId>(rng.categorical(w));
}

TokenSeq sample(const LanguageModel& model, const TokenSeq& prompt, const DecodeConfig& cfg) {
  Rng rng(cfg.seed);
  return sample(model, prompt, cfg, rng);
}

TokenSeq sample(const LanguageModel& model, const TokenSeq& prompt, const DecodeConfig& cfg,
                Rng& rng) {
  if (prompt.empty()) throw ContractError("empty prompt");
  if (!(cfg.temperature > 0.0)) throw ParameterError("temperature must be positive");
  TokenSeq seq = prompt;
  TokenSeq response;
  while (response.size() < cfg.max_length && seq.size() < model.max_length()) {
    const TokenId t = sample_token(model.next_logprobs(seq), cfg.temperature, rng);
    response.push_back(t);
    seq.push_back(t);
    if (t == kEos) break;
  }
  return response;
}

TokenSeq greedy(const LanguageModel& model, const TokenSeq& prompt, std::size_t max_length) {
  if (prompt.empty()) throw ContractError("empty prompt");
  TokenSeq seq = prompt;
  TokenSeq response;
  while (response.size() < max_length && seq.size() < model.max_length()) {
    const auto row = model.next_logprobs(seq);
    const auto t = static_cast<TokenId>(std::max_element(row.begin(), row.end()) - row.begin());
    response.push_back(t);
    seq.push_back(t);
    if (t == kEos) break;
  }
  return response;
}

// ---------------------------------------------------------------------------
// SFT

double corpus_nll(const LanguageModel& model, std::span<const CorpusRecord> corpus) {
  if (corpus.empty()) throw DataError("empty corpus");
  double total = 0.0;
  std::size_t tokens = 0;
  constexpr std::size_t kChunk = 32;
  for (std::size_t start = 0; start < corpus.size(); start += kChunk) {
    TeacherForcedBatch batch;
    for (std::size_t i = start; i < std::min(corpus.size(), start + kChunk); ++i) {
      batch.add(corpus[i].prompt, corpus[i].response);
    }
    Graph g(false);
    Tensor picked = g.gather(response_rows(g, model, batch), batch.targets());
    for (double v : picked.values()) total -= v;
    tokens += batch.total_tokens();
  }
  return total / static_cast<double>(tokens);
}

void sgd_step(std::span<NamedTensor> params, double learning_rate) {
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    auto values = p.tensor.mutable_values();
    auto grad = p.tensor.grad();
    for (std::size_t i = 0; i < values.size(); ++i) values[i] -= learning_rate * grad[i];
    p.tensor.zero_grad();
  }
}

std::vector<double> train_sft(LanguageModel& model, std::span<const CorpusRecord> corpus,
                              const SftConfig& cfg) {
  if (corpus.empty()) throw DataError("empty corpus");
  auto params = model.parameters();
  Rng rng(cfg.seed);
  std::vector<double> log{corpus_nll(model, corpus)};
  const std::size_t bs = std::max<std::size_t>(1, std::min(cfg.batch_size, corpus.size()));
  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    TeacherForcedBatch batch;
    for (std::size_t i = 0; i < bs; ++i) {
      const auto& rec = corpus[rng.index(corpus.size())];
      batch.add(rec.prompt, rec.response);
    }
    Graph g;
    Tensor picked = g.gather(response_rows(g, model, batch), batch.targets());
    Tensor loss = g.neg(g.mean(picked));
    g.backward(loss);
    sgd_step(params, cfg.learning_rate);
    if (cfg.eval_every > 0 && step % cfg.eval_every == 0 && step != cfg.steps) {
      log.push_back(corpus_nll(model, corpus));
    }
  }
  if (cfg.steps > 0) log.push_back(corpus_nll(model, corpus));
  return log;
}

}  // namespace dlm2
