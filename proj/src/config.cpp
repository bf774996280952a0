#include "dlm2/config.hpp"

#include <charconv>
#include <cstdio>
#include <sstream>

#include "dlm2/error.hpp"
#include "dlm2/io.hpp"

namespace dlm2 {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
void parse_number(const std::string& s, T& out) {
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("expected a number, got '" + s + "'");
}

template <typename T>
  requires(std::is_arithmetic_v<T> && !std::is_same_v<T, bool>)
void parse_value(const std::string& s, T& v) {
  parse_number(s, v);
}
void parse_value(const std::string& s, bool& v) {
  if (s == "true" || s == "1") {
    v = true;
  } else if (s == "false" || s == "0") {
    v = false;
  } else {
    throw ConfigError("expected true or false, got '" + s + "'");
  }
}
void parse_value(const std::string& s, LossKind& v) { v = parse_loss_kind(s); }
void parse_value(const std::string& s, TokenMode& v) { v = parse_token_mode(s); }
void parse_value(const std::string& s, Reduction& v) { v = parse_reduction(s); }
void parse_value(const std::string& s, ResponseKind& v) { v = parse_response_kind(s); }
void parse_value(const std::string& s, BetaMode& v) { v = parse_beta_mode(s); }
void parse_value(const std::string& s, std::filesystem::path& v) { v = s; }
void parse_value(const std::string& s, std::vector<std::uint64_t>& v) {
  v.clear();
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::uint64_t x = 0;
    parse_number(trim(item), x);
    v.push_back(x);
  }
  if (v.empty()) throw ConfigError("expected a comma-separated list");
}

std::string show(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
std::string show(bool v) { return v ? "true" : "false"; }
template <typename T>
  requires std::is_integral_v<T>
std::string show(T v) {
  return std::to_string(v);
}

}  // namespace

Config Config::parse(const std::string& text) {
  Config cfg;
  std::stringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string body = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key = value", line);
    const std::string key = trim(body.substr(0, eq));
    const std::string value = trim(body.substr(eq + 1));
    if (key.empty()) throw ConfigError("missing key", line);
    if (value.empty()) throw ConfigError("missing value for '" + key + "'", line);
    if (cfg.entries_.count(key)) throw ConfigError("duplicate key '" + key + "'", line);
    cfg.entries_[key] = Entry{value, line, false};
  }
  return cfg;
}

Config Config::load(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) {
    throw ConfigError("cannot read config file " + path.string());
  }
  return parse(read_text(path));
}

void Config::set(const std::string& key, const std::string& value) {
  entries_[key] = Entry{value, 0, false};
}

template <typename T>
void Config::field(const std::string& key, T& target) {
  auto it = entries_.find(key);
  if (it == entries_.end()) return;
  try {
    parse_value(it->second.value, target);
  } catch (const Error& e) {
    throw ConfigError(key + ": " + e.what(), it->second.line);
  }
  it->second.used = true;
}

void Config::bind(TrainConfig& c) {
  field("epochs", c.epochs);
  field("iterations", c.iterations);
  field("batch_size", c.batch_size);
  field("learning_rate", c.learning_rate);
  field("alpha0", c.alpha0);
  field("beta0", c.beta0);
  field("kind", c.kind);
  field("token_mode", c.token_mode);
  field("reduction", c.reduction);
  field("response", c.response);
  field("gamma", c.gamma);
  field("lambda", c.lambda);
  field("replay_ratio", c.replay_ratio);
  field("seed", c.seed);
  field("temperature", c.temperature);
  field("max_response", c.max_response);
  field("log_every", c.log_every);
  field("probe_size", c.probe_size);
  field("rouge_samples", c.rouge_samples);
  field("wall_clock", c.wall_clock);
  field("threads", c.threads);
  field("clip_lo", c.clip_lo);
  field("clip_hi", c.clip_hi);
  field("beta_mode", c.beta_mode);
  field("straight_pairing", c.straight_pairing);
  field("curriculum", c.curriculum);
  try {
    c.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
}

void Config::bind(ToyTaskConfig& c) {
  field("vocab", c.vocab);
  field("max_len", c.max_len);
  field("rule_seed", c.rule_seed);
  field("corpus_size", c.corpus_size);
  field("teacher_d_model", c.teacher_d_model);
  field("teacher_layers", c.teacher_layers);
  field("teacher_sft_steps", c.teacher_sft_steps);
  field("student_d_model", c.student_d_model);
  field("student_layers", c.student_layers);
  field("student_sft_steps", c.student_sft_steps);
  field("student_subset", c.student_subset);
  field("sft_learning_rate", c.sft_learning_rate);
  field("sft_batch_size", c.sft_batch_size);
  field("train_prompts", c.train_prompts);
  field("eval_prompts", c.eval_prompts);
}

void Config::bind(SpecConfig& c) {
  field("K", c.K);
  field("epsilon", c.epsilon);
}

void Config::bind(CategoricalFitConfig& c) {
  field("vocab", c.vocab);
  field("head_mass", c.head_mass);
  field("decay", c.decay);
  field("steps", c.steps);
  field("learning_rate", c.learning_rate);
  field("log_every", c.log_every);
}

void Config::bind(Fig2cConfig& c) {
  bind(c.task);
  bind(c.train);
  field("seeds", c.seeds);
  field("gamma", c.gamma);
}

void Config::bind_path(const std::string& key, std::filesystem::path& p) { field(key, p); }
void Config::bind_size(const std::string& key, std::size_t& v) { field(key, v); }

void Config::check_all_used() const {
  const Entry* first = nullptr;
  std::string name;
  for (const auto& [key, e] : entries_) {
    if (!e.used && (first == nullptr || e.line < first->line)) {
      first = &e;
      name = key;
    }
  }
  if (first != nullptr) throw ConfigError("unknown key '" + name + "'", first->line);
}

std::vector<std::pair<std::string, std::string>> describe(const TrainConfig& c) {
  return {{"epochs", show(c.epochs)},
          {"iterations", show(c.iterations)},
          {"batch_size", show(c.batch_size)},
          {"learning_rate", show(c.learning_rate)},
          {"alpha0", show(c.alpha0)},
          {"beta0", show(c.beta0)},
          {"kind", to_string(c.kind)},
          {"token_mode", to_string(c.token_mode)},
          {"reduction", to_string(c.reduction)},
          {"response", to_string(c.response)},
          {"gamma", show(c.gamma)},
          {"lambda", show(c.lambda)},
          {"replay_ratio", show(c.replay_ratio)},
          {"seed", show(c.seed)},
          {"temperature", show(c.temperature)},
          {"max_response", show(c.max_response)},
          {"log_every", show(c.log_every)},
          {"probe_size", show(c.probe_size)},
          {"rouge_samples", show(c.rouge_samples)},
          {"wall_clock", show(c.wall_clock)},
          {"threads", show(c.threads)},
          {"clip_lo", show(c.clip_lo)},
          {"clip_hi", show(c.clip_hi)},
          {"beta_mode", to_string(c.beta_mode)},
          {"straight_pairing", show(c.straight_pairing)},
          {"curriculum", show(c.curriculum)}};
}

std::vector<std::pair<std::string, std::string>> describe(const ToyTaskConfig& c) {
  return {{"vocab", show(c.vocab)},
          {"max_len", show(c.max_len)},
          {"rule_seed", show(c.rule_seed)},
          {"corpus_size", show(c.corpus_size)},
          {"teacher_d_model", show(c.teacher_d_model)},
          {"teacher_layers", show(c.teacher_layers)},
          {"teacher_sft_steps", show(c.teacher_sft_steps)},
          {"student_d_model", show(c.student_d_model)},
          {"student_layers", show(c.student_layers)},
          {"student_sft_steps", show(c.student_sft_steps)},
          {"student_subset", show(c.student_subset)},
          {"sft_learning_rate", show(c.sft_learning_rate)},
          {"sft_batch_size", show(c.sft_batch_size)},
          {"train_prompts", show(c.train_prompts)},
          {"eval_prompts", show(c.eval_prompts)}};
}

std::vector<std::pair<std::string, std::string>> describe(const SpecConfig& c) {
  return {{"K", show(c.K)}, {"epsilon", show(c.epsilon)}};
}

std::vector<std::pair<std::string, std::string>> describe(const CategoricalFitConfig& c) {
  return {{"vocab", show(c.vocab)},
          {"head_mass", show(c.head_mass)},
          {"decay", show(c.decay)},
          {"steps", show(c.steps)},
          {"learning_rate", show(c.learning_rate)},
          {"log_every", show(c.log_every)}};
}

}  // namespace dlm2
