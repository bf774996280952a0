#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "dlm2/checkpoint.hpp"
#include "dlm2/error.hpp"
#include "dlm2/io.hpp"
#include "dlm2/lm.hpp"

using namespace dlm2;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("dlm2_io_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_SUITE("io") {
  TEST_CASE("FNV-1a reference values") {
    CHECK(fnv1a64(std::string()) == 0xcbf29ce484222325ULL);
    CHECK(fnv1a64(std::string("a")) == 0xaf63dc4c8601ec8cULL);
    CHECK(hex64(0xabcULL) == "0000000000000abc");
  }

  TEST_CASE("triples round-trip with and without a digest header") {
    TempDir d;
    const std::vector<SampleTriple> t{{{0, 4}, {2, 3, 1}, {5, 1}, 2}, {{0}, {1}, {9, 9, 9}, 2}};
    write_triples(d.path / "a.jsonl", t);
    CHECK(read_triples(d.path / "a.jsonl") == t);
    write_triples(d.path / "b.jsonl", t, std::string("00ff"));
    std::string digest;
    CHECK(read_triples(d.path / "b.jsonl", &digest) == t);
    CHECK(digest == "00ff");
    CHECK(triple_from_jsonl(triple_to_jsonl(t[0])) == t[0]);
  }

  TEST_CASE("malformed records name the line") {
    TempDir d;
    write_text(d.path / "bad.jsonl", triple_to_jsonl({{0}, {1}, {1}, 1}) + "\n{\"prompt\": [0]}\n");
    try {
      read_triples(d.path / "bad.jsonl");
      FAIL("expected a DataError");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find(":2:") != std::string::npos);
    }
    CHECK_THROWS_AS(triple_from_jsonl("{\"prompt\": [0.5], \"teacher_response\": [], \"student_response\": [], "
                                      "\"epoch\": 1}"),
                    DataError);
    CHECK_THROWS_AS(triple_from_jsonl("not json"), DataError);
  }

  TEST_CASE("corpus round-trip") {
    TempDir d;
    const std::vector<CorpusRecord> c{{{0, 3}, {4, 1}}, {{0, 2, 2}, {1}}};
    write_corpus(d.path / "c.jsonl", c);
    CHECK(read_corpus(d.path / "c.jsonl") == c);
  }

  TEST_CASE("checkpoint round-trip is exact after the first narrowing") {
    TempDir d;
    TinyTransformerLM m({6, 8, 1, 2, 16, 10}, 3);
    save_checkpoint(d.path / "a.bin", m.state());
    const auto once = load_checkpoint(d.path / "a.bin");
    save_checkpoint(d.path / "b.bin", once);
    CHECK(file_digest(d.path / "a.bin") == file_digest(d.path / "b.bin"));
    const auto state = m.state();
    REQUIRE(once.size() == state.size());
    for (std::size_t i = 0; i < once.size(); ++i) {
      CHECK(once[i].name == state[i].name);
      CHECK(once[i].tensor.shape() == state[i].tensor.shape());
      for (std::size_t k = 0; k < once[i].tensor.size(); ++k) {
        CHECK(once[i].tensor.at(k) == static_cast<double>(static_cast<float>(state[i].tensor.at(k))));
      }
    }
  }

  TEST_CASE("corrupt checkpoints are rejected") {
    TinyTransformerLM m({6, 8, 1, 2, 16, 10}, 3);
    auto bytes = encode_checkpoint(m.state());
    auto truncated = bytes;
    truncated.resize(bytes.size() - 3);
    CHECK_THROWS_AS(decode_checkpoint(truncated), FormatError);
    auto magic = bytes;
    magic[0] = 'X';
    CHECK_THROWS_AS(decode_checkpoint(magic), FormatError);
    auto extra = bytes;
    extra.push_back(0);
    CHECK_THROWS_AS(decode_checkpoint(extra), FormatError);
    CHECK_THROWS_AS(load_checkpoint("/nonexistent/ckpt.bin"), Error);
  }

  TEST_CASE("state digest tracks parameter values") {
    TinyTransformerLM m({6, 8, 1, 2, 16, 10}, 3);
    const auto before = state_digest(m.state());
    CHECK(before == state_digest(m.state()));
    m.parameters()[0].tensor.mutable_values()[0] += 0.5;
    CHECK(before != state_digest(m.state()));
  }
}
