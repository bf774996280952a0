#include <doctest.h>

#include <filesystem>

#include "dlm2/checkpoint.hpp"
#include "dlm2/error.hpp"
#include "dlm2/io.hpp"
#include "dlm2/trainer.hpp"

using namespace dlm2;
namespace fs = std::filesystem;

namespace {

struct Setup {
  TabularLM teacher = TabularLM::random(6, 2, 16, 3, 2.0);
  TinyTransformerLM student{{6, 8, 1, 2, 16, 16}, 4};
  std::vector<TokenSeq> prompts;
  EvalSet eval;

  Setup() {
    for (int i = 0; i < 12; ++i) prompts.push_back({0, static_cast<TokenId>(2 + i % 4)});
    eval.sample_seed = 99;
    for (std::size_t i = 0; i < 6; ++i) {
      eval.prompts.push_back({0, static_cast<TokenId>(2 + i % 4), 3});
      eval.references.push_back(sample(teacher, eval.prompts.back(), {1.0, 8, derive_seed(99, i, 0)}));
    }
  }
};

TrainConfig small() {
  TrainConfig c;
  c.epochs = 2;
  c.iterations = 6;
  c.batch_size = 4;
  c.learning_rate = 0.05;
  c.log_every = 2;
  c.max_response = 8;
  c.probe_size = 6;
  c.threads = 1;
  return c;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("dlm2_trainer_" + tag);
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("zero iterations leave the student alone and log nothing") {
    Setup s;
    auto cfg = small();
    cfg.iterations = 0;
    const auto before = state_digest(s.student.state());
    const auto r = run_distillation(cfg, s.teacher, s.student, s.prompts, s.eval);
    CHECK(r.records.empty());
    CHECK(state_digest(s.student.state()) == before);
    CHECK(metrics_csv(r.records) == std::string(kMetricsHeader) + "\n");
  }

  TEST_CASE("zero learning rate keeps the NLLs at their initial values") {
    Setup s;
    auto cfg = small();
    cfg.learning_rate = 0.0;
    const auto r = run_distillation(cfg, s.teacher, s.student, s.prompts, s.eval);
    REQUIRE_FALSE(r.records.empty());
    CHECK(r.records.back().nll_tgo == r.initial.nll_tgo);
    CHECK(r.records.back().nll_sgo == r.initial.nll_sgo);
  }

  TEST_CASE("runs are reproducible and write per-epoch artifacts") {
    TempDir a("a"), b("b");
    std::string csv[2];
    int k = 0;
    for (const auto* dir : {&a, &b}) {
      Setup s;
      DistillOptions opts;
      opts.out_dir = dir->path;
      run_distillation(small(), s.teacher, s.student, s.prompts, s.eval, opts);
      csv[k++] = read_text(dir->path / "metrics.csv");
    }
    CHECK(csv[0] == csv[1]);
    for (const char* f : {"metrics.csv", "data_epoch1.jsonl", "data_epoch2.jsonl", "ckpt_epoch1.bin", "ckpt_epoch2.bin"}) {
      CHECK(fs::exists(a.path / f));
      CHECK(file_digest(a.path / f) == file_digest(b.path / f));
    }
    // Epoch 2 was sampled from the snapshot saved after epoch 1.
    std::string digest;
    const auto data = read_triples(a.path / "data_epoch2.jsonl", &digest);
    CHECK(digest == file_digest(a.path / "ckpt_epoch1.bin"));
    CHECK(data.size() == 12);
  }

  TEST_CASE("beta never decreases and alpha stays in band") {
    Setup s;
    auto cfg = small();
    cfg.epochs = 3;
    cfg.log_every = 1;
    const auto r = run_distillation(cfg, s.teacher, s.student, s.prompts, s.eval);
    for (std::size_t i = 1; i < r.records.size(); ++i) CHECK(r.records[i].beta >= r.records[i - 1].beta);
    for (const auto& m : r.records) {
      CHECK(m.alpha_t >= 0.01);
      CHECK(m.alpha_t <= 0.1);
      CHECK(m.alpha_s >= 0.01);
      CHECK(m.alpha_s <= 0.1);
      CHECK((m.epoch < 2 || m.m > 0.0));
    }
  }

  TEST_CASE("a diverging run records the failure") {
    TempDir d("fail");
    Setup s;
    auto cfg = small();
    cfg.kind = LossKind::KL;
    cfg.learning_rate = 1e200;
    DistillOptions opts;
    opts.out_dir = d.path;
    CHECK_THROWS_AS(run_distillation(cfg, s.teacher, s.student, s.prompts, s.eval, opts), NumericError);
    CHECK(fs::exists(d.path / "failure.txt"));
    CHECK(fs::exists(d.path / "metrics.csv"));
  }

  TEST_CASE("invalid configurations") {
    Setup s;
    auto cfg = small();
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ParameterError);
    cfg = small();
    cfg.clip_lo = 0.2;
    CHECK_THROWS_AS(cfg.validate(), ParameterError);
    CHECK_THROWS_AS(run_distillation(small(), s.teacher, s.student, {}, s.eval), DataError);
  }

  TEST_CASE("metrics rows use a fixed column order") {
    MetricsRecord r;
    r.epoch = 2;
    r.iter = 5;
    r.loss = 0.25;
    CHECK(metrics_csv_row(r).rfind("2,5,0.25,", 0) == 0);
  }
}
