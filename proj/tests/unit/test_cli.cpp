#include <doctest.h>

#include <json.hpp>

#include <filesystem>
#include <fstream>

#include "commands.hpp"
#include "dlm2/io.hpp"

using namespace dlm2;
namespace fs = std::filesystem;

namespace {

struct Sandbox {
  fs::path root;
  explicit Sandbox(const std::string& tag) {
    root = fs::temp_directory_path() / ("dlm2_cli_" + tag);
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Sandbox() { fs::remove_all(root); }

  fs::path config(const std::string& text) const {
    write_text(root / "run.cfg", text);
    return root / "run.cfg";
  }
};

int run(std::vector<std::string> args) {
  args.insert(args.begin(), "dlm2");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli::run_cli(static_cast<int>(argv.size()), argv.data());
}

const char* kSmall =
    "epochs = 2\niterations = 4\nlog_every = 2\ntrain_prompts = 16\neval_prompts = 8\n"
    "teacher_sft_steps = 40\nstudent_sft_steps = 20\ncorpus_size = 400\nprobe_size = 8\nthreads = 1\n";

std::size_t line_count(const fs::path& p) {
  std::ifstream in(p);
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) n += line.empty() ? 0 : 1;
  return n;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage and configuration errors exit with 2") {
    Sandbox s("usage");
    CHECK(run({"distill", "--config", (s.root / "missing.cfg").string(), "--out", (s.root / "o").string()}) == 2);
    CHECK(run({"distill", "--config", s.config("epochs = 2\nbogus = 3\n").string(), "--out", (s.root / "o").string()}) ==
          2);
    CHECK(run({"frobnicate"}) == 2);
    CHECK(run({"fig2", "d"}) == 2);
    CHECK(run({"distill", "--config", s.config(kSmall).string()}) == 2);
  }

  TEST_CASE("distill writes manifest, metrics and one checkpoint per epoch, reproducibly") {
    Sandbox s("distill");
    const auto cfg = s.config(kSmall).string();
    const auto a = s.root / "a", b = s.root / "b";
    REQUIRE(run({"distill", "--config", cfg, "--out", a.string(), "--seed", "5", "--quiet"}) == 0);
    REQUIRE(run({"distill", "--config", cfg, "--out", b.string(), "--seed", "5", "--quiet"}) == 0);
    for (const char* f : {"manifest.json", "metrics.csv", "ckpt_epoch1.bin", "ckpt_epoch2.bin"}) {
      CHECK(fs::exists(a / f));
    }
    CHECK(!fs::exists(a / "ckpt_epoch3.bin"));
    CHECK(file_digest(a / "metrics.csv") == file_digest(b / "metrics.csv"));
    CHECK(file_digest(a / "ckpt_epoch2.bin") == file_digest(b / "ckpt_epoch2.bin"));
    const auto m = nlohmann::json::parse(read_text(a / "manifest.json"));
    CHECK(m["command"] == "distill");
    CHECK(m["seed"] == 5);
    CHECK(m["config"]["iterations"] == "4");
    CHECK(m["inputs"]["config"]["digest"] == file_digest(cfg));
    // Nothing outside the output directories.
    std::size_t entries = 0;
    for ([[maybe_unused]] const auto& e : fs::directory_iterator(s.root)) ++entries;
    CHECK(entries == 3);
  }

  TEST_CASE("a diverging run exits with 3") {
    Sandbox s("numeric");
    const auto cfg = s.config(std::string(kSmall) + "kind = KL\nlearning_rate = 1e200\n");
    CHECK(run({"distill", "--config", cfg.string(), "--out", (s.root / "o").string(), "--quiet"}) == 3);
    CHECK(fs::exists(s.root / "o" / "failure.txt"));
  }

  TEST_CASE("gen-data writes one line per prompt and dispatches on epsilon") {
    Sandbox s("gen");
    const auto cfg = s.config(kSmall).string();
    REQUIRE(run({"gen-data", "--config", cfg, "--out", (s.root / "plain").string(), "--quiet"}) == 0);
    REQUIRE(run({"gen-data", "--config", cfg, "--out", (s.root / "spec").string(), "--epsilon", "0.5", "--quiet"}) == 0);
    CHECK(line_count(s.root / "plain" / "data.jsonl") == 16);
    const auto triples = read_triples(s.root / "spec" / "data.jsonl");
    CHECK(triples.size() == 16);
    write_triples(s.root / "copy.jsonl", triples);
    CHECK(read_text(s.root / "copy.jsonl") == read_text(s.root / "spec" / "data.jsonl"));
    const auto plain = nlohmann::json::parse(read_text(s.root / "plain" / "manifest.json"));
    const auto spec = nlohmann::json::parse(read_text(s.root / "spec" / "manifest.json"));
    CHECK(plain["config"]["pipeline"] == "batched");
    CHECK(spec["config"]["pipeline"] == "speculative");
  }

  TEST_CASE("fig2 a emits categorical rows") {
    Sandbox s("fig2a");
    const auto cfg = s.config("steps = 200\nlog_every = 50\n").string();
    REQUIRE(run({"fig2", "a", "--config", cfg, "--out", (s.root / "o").string(), "--quiet"}) == 0);
    const auto csv = read_text(s.root / "o" / "fig2a_rows.csv");
    CHECK(csv.rfind("loss,step,q0,", 0) == 0);
    CHECK(line_count(s.root / "o" / "fig2a_rows.csv") == 1 + 1 + 2 * 5);
  }

  TEST_CASE("oracles pass and the injected fault fails") {
    CHECK(run({"oracles", "--quiet"}) == 0);
    CHECK(run({"oracles", "--quiet", "--inject-fault"}) == 1);
  }

  TEST_CASE("eval reports metrics for a saved student") {
    Sandbox s("eval");
    const auto cfg = s.config(kSmall).string();
    REQUIRE(run({"distill", "--config", cfg, "--out", (s.root / "d").string(), "--quiet"}) == 0);
    const auto ev = s.config(std::string(kSmall) + "student_checkpoint = " + (s.root / "d" / "ckpt_epoch2.bin").string() +
                             "\n");
    REQUIRE(run({"eval", "--config", ev.string(), "--out", (s.root / "e").string()}) == 0);
    const auto j = nlohmann::json::parse(read_text(s.root / "e" / "eval.json"));
    CHECK(j["rouge_l"].get<double>() >= 0.0);
    CHECK(j["rouge_l"].get<double>() <= 1.0);
    CHECK(j["nll_references"].get<double>() > 0.0);
  }
}
