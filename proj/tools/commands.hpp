#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>

namespace dlm2::cli {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kNumeric = 3 };

struct GlobalOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;  // overrides the config
  bool quiet = false;
};

// Each command reports errors on stderr and returns an exit code.
int cmd_distill(const GlobalOptions& g);
int cmd_oracles(const GlobalOptions& g, bool inject_fault = false);
int cmd_fig2(const GlobalOptions& g, char variant);
// epsilon switches to speculative student responses.
int cmd_gen_data(const GlobalOptions& g, std::optional<double> epsilon = std::nullopt);
int cmd_eval(const GlobalOptions& g);

int run_cli(int argc, const char* const* argv);

}  // namespace dlm2::cli
