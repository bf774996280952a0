#pragma once

// JSON-lines persistence for corpora and triple datasets, plus FNV-1a
// digests used in manifests and dataset headers.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dlm2/divergence.hpp"
#include "dlm2/lm.hpp"
#include "dlm2/tensor.hpp"

namespace dlm2 {

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);
std::uint64_t fnv1a64(const std::string& text);
std::string hex64(std::uint64_t value);
// Hex digest of a file's bytes.
std::string file_digest(const std::filesystem::path& path);
// Digest of the checkpoint encoding of a model state.
std::string state_digest(std::span<const NamedTensor> state);

std::string triple_to_jsonl(const SampleTriple& t);
SampleTriple triple_from_jsonl(const std::string& line);

// Triples file; an optional first line {"snapshot_digest": "..."} records
// which student snapshot produced the data.
void write_triples(const std::filesystem::path& path, std::span<const SampleTriple> triples,
                   const std::optional<std::string>& snapshot_digest = std::nullopt);
std::vector<SampleTriple> read_triples(const std::filesystem::path& path,
                                       std::string* snapshot_digest = nullptr);

void write_corpus(const std::filesystem::path& path, std::span<const CorpusRecord> corpus);
std::vector<CorpusRecord> read_corpus(const std::filesystem::path& path);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace dlm2
