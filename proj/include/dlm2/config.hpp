#pragma once

// Flat key=value run configuration. Blank lines and text after '#' are
// ignored; keys are the field names of the structs a command binds.
//
//   kind = DISTILLM2
//   epochs = 3        # per-run override of the default

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "dlm2/datagen.hpp"
#include "dlm2/experiments.hpp"
#include "dlm2/trainer.hpp"

namespace dlm2 {

class Config {
 public:
  // Malformed lines and duplicate keys raise ConfigError with the line.
  static Config parse(const std::string& text);
  static Config load(const std::filesystem::path& path);

  bool has(const std::string& key) const { return entries_.count(key) > 0; }
  // Programmatic override (command-line flags); line 0 in messages.
  void set(const std::string& key, const std::string& value);

  // Each bind assigns the present keys to the struct's fields, converting
  // types; a bad value raises ConfigError with its line. Several structs
  // may share a key name (for example seed).
  void bind(TrainConfig& c);
  void bind(ToyTaskConfig& c);
  void bind(SpecConfig& c);
  void bind(CategoricalFitConfig& c);
  void bind(Fig2cConfig& c);
  void bind_path(const std::string& key, std::filesystem::path& p);
  void bind_size(const std::string& key, std::size_t& v);

  // ConfigError naming the first key no bind consumed.
  void check_all_used() const;

 private:
  struct Entry {
    std::string value;
    int line = 0;
    bool used = false;
  };
  std::map<std::string, Entry> entries_;

  template <typename T>
  void field(const std::string& key, T& target);
};

// key=value lines for every field of the given structs, in a stable order.
std::vector<std::pair<std::string, std::string>> describe(const TrainConfig& c);
std::vector<std::pair<std::string, std::string>> describe(const ToyTaskConfig& c);
std::vector<std::pair<std::string, std::string>> describe(const SpecConfig& c);
std::vector<std::pair<std::string, std::string>> describe(const CategoricalFitConfig& c);

}  // namespace dlm2
