#include "dlm2/io.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "dlm2/checkpoint.hpp"
#include "dlm2/error.hpp"

namespace dlm2 {

using nlohmann::json;

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (auto b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t fnv1a64(const std::string& text) {
  return fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

std::string hex64(std::uint64_t value) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << value;
  return os.str();
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

std::string file_digest(const std::filesystem::path& path) { return hex64(fnv1a64(read_text(path))); }

std::string state_digest(std::span<const NamedTensor> state) {
  return hex64(fnv1a64(encode_checkpoint(state)));
}

namespace {

TokenSeq ids(const json& j, const char* field) {
  if (!j.contains(field) || !j[field].is_array()) {
    throw DataError(std::string("record lacks array field '") + field + "'");
  }
  TokenSeq out;
  for (const auto& v : j[field]) {
    if (!v.is_number_integer()) throw DataError(std::string("non-integer id in '") + field + "'");
    out.push_back(v.get<TokenId>());
  }
  return out;
}

json parse_line(const std::string& line) {
  try {
    return json::parse(line);
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed JSON line: ") + e.what());
  }
}

template <typename F>
void for_each_line(const std::filesystem::path& path, F&& fn) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      fn(line);
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

}  // namespace

std::string triple_to_jsonl(const SampleTriple& t) {
  json j;
  j["prompt"] = t.prompt;
  j["teacher_response"] = t.teacher_response;
  j["student_response"] = t.student_response;
  j["epoch"] = t.epoch;
  return j.dump();
}

SampleTriple triple_from_jsonl(const std::string& line) {
  const json j = parse_line(line);
  SampleTriple t;
  t.prompt = ids(j, "prompt");
  t.teacher_response = ids(j, "teacher_response");
  t.student_response = ids(j, "student_response");
  if (!j.contains("epoch") || !j["epoch"].is_number_integer()) throw DataError("record lacks epoch");
  t.epoch = j["epoch"].get<int>();
  return t;
}

void write_triples(const std::filesystem::path& path, std::span<const SampleTriple> triples,
                   const std::optional<std::string>& snapshot_digest) {
  std::ostringstream os;
  if (snapshot_digest) os << json{{"snapshot_digest", *snapshot_digest}}.dump() << '\n';
  for (const auto& t : triples) os << triple_to_jsonl(t) << '\n';
  write_text(path, os.str());
}

std::vector<SampleTriple> read_triples(const std::filesystem::path& path, std::string* snapshot_digest) {
  std::vector<SampleTriple> out;
  bool first = true;
  for_each_line(path, [&](const std::string& line) {
    if (first) {
      first = false;
      const json j = parse_line(line);
      if (j.contains("snapshot_digest")) {
        if (snapshot_digest) *snapshot_digest = j["snapshot_digest"].get<std::string>();
        return;
      }
    }
    out.push_back(triple_from_jsonl(line));
  });
  return out;
}

void write_corpus(const std::filesystem::path& path, std::span<const CorpusRecord> corpus) {
  std::ostringstream os;
  for (const auto& r : corpus) os << json{{"prompt", r.prompt}, {"response", r.response}}.dump() << '\n';
  write_text(path, os.str());
}

std::vector<CorpusRecord> read_corpus(const std::filesystem::path& path) {
  std::vector<CorpusRecord> out;
  for_each_line(path, [&](const std::string& line) {
    const json j = parse_line(line);
    out.push_back({ids(j, "prompt"), ids(j, "response")});
  });
  return out;
}

}  // namespace dlm2
