#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "t2s/model.hpp"
#include "t2s/training.hpp"

namespace t2s {

// Which trainer a run drives.
enum class RunMode {
  kMultitask,         // prompted model over every task
  kSingleTaskPrompt,  // prompted model restricted to one task
  kSingleTaskHead,    // encoder + linear head for one task
  kMmoe,              // expert mixture with per-task heads
};

// lower_snake wire name, e.g. "single_task_head".
std::string run_mode_name(RunMode mode);
std::optional<RunMode> parse_run_mode(const std::string& name);

// Full declarative description of one training run. The config file mirrors
// this struct section by section.
struct RunConfig {
  RunMode mode = RunMode::kMultitask;
  TaskKind task = TaskKind::ParagraphClassification;  // single-task modes only
  std::string corpus_path;                            // unified corpus JSONL
  std::string split_path;  // optional; empty trains on the whole corpus
  ModelConfig model;
  TrainConfig train;
  MmoeConfig mmoe;

  bool operator==(const RunConfig&) const = default;
};

// Flat dotted-key view of config text, e.g. "train.learning_rate" -> "0.01".
// Values keep their literal spelling; typed conversion happens when a
// RunConfig is built.
using ConfigEntries = std::map<std::string, std::string>;

// Parses the TOML-style subset the config files use: "[section]" headers,
// "key = value" lines, "#" comments, values either double-quoted strings
// (with \" and \\ escapes) or bare tokens. Nested tables and arrays are out
// of contract. Throws std::invalid_argument with "line N: " context.
ConfigEntries parse_config_text(const std::string& text);

// Builds a config from entries; fields absent from the map keep their
// defaults. Throws std::invalid_argument for an unknown key or a value that
// does not parse as the field's type.
RunConfig config_from_entries(const ConfigEntries& entries);

// Canonical full listing of every section and key. Reparsing the text
// yields a value-equal config.
std::string serialize_run_config(const RunConfig& config);

// Extracts overrides from environment variables: T2S_<SECTION>_<KEY> maps
// to "section.key" (single-level sections, so T2S_TRAIN_LEARNING_RATE is
// train.learning_rate). Unknown names are ignored here and rejected later
// by config_from_entries.
ConfigEntries entries_from_environment(const std::map<std::string, std::string>& env);

// Applies the documented precedence: flags beat environment beats file.
ConfigEntries merge_entries(const ConfigEntries& file, const ConfigEntries& env,
                            const ConfigEntries& flags);

// --- run manifests ------------------------------------------------------

// 16-hex-digit FNV-1a content id of a byte string.
std::string hash_bytes(const std::string& bytes);
// Same id over a file's bytes. Throws std::runtime_error when unreadable.
std::string hash_file(const std::string& path);

// One produced file: its path relative to the manifest's directory and the
// content id of its bytes.
struct ArtifactRecord {
  std::string path;
  std::string hash;

  bool operator==(const ArtifactRecord&) const = default;
};

// Written by every CLI command next to its outputs; every produced file is
// reachable through `artifacts`.
struct RunManifest {
  std::string command;
  std::string config_hash = "none";
  std::string corpus_hash = "none";
  std::string template_version = "none";
  std::vector<uint64_t> seeds;
  std::map<std::string, ArtifactRecord> artifacts;  // keyed by relative path

  bool operator==(const RunManifest&) const = default;
};

void write_manifest_json(const RunManifest& manifest, const std::string& path);
RunManifest read_manifest_json(const std::string& path);

// Exclusive advisory lock over an output directory, held for the lifetime
// of the object. Creates the directory if needed. A second lock on the same
// directory throws std::runtime_error while the first is alive; a crash
// leaves the lock file behind, and the error says which file to remove.
class DirectoryLock {
 public:
  explicit DirectoryLock(const std::string& directory);
  ~DirectoryLock();
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;
  DirectoryLock(DirectoryLock&& other) noexcept;
  DirectoryLock& operator=(DirectoryLock&& other) noexcept;

  const std::string& path() const { return path_; }

 private:
  void release();

  std::string path_;
  int fd_ = -1;
};

}  // namespace t2s
