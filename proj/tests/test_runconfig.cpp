#include "t2s/runconfig.hpp"

#include <cctype>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "doctest.h"
#include "t2s/metrics.hpp"
#include "t2s/rng.hpp"

using namespace t2s;

namespace {

// Scratch directory torn down per test; holds config, manifest, and lock
// files under construction.
struct ScratchDir {
  std::filesystem::path path;

  ScratchDir() {
    path = std::filesystem::temp_directory_path() / "t2s_runconfig_test";
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~ScratchDir() { std::filesystem::remove_all(path); }

  std::string write(const std::string& name, const std::string& content) const {
    const auto file = path / name;
    std::ofstream out(file, std::ios::binary);
    out << content;
    return file.string();
  }
};

// Published FNV-1a 64-bit fold, written out plainly as the oracle for the
// content ids.
std::string reference_content_id(const std::string& bytes) {
  uint64_t hash = 14695981039346656037ull;
  for (const char c : bytes) {
    hash ^= static_cast<unsigned char>(c);
    hash *= 1099511628211ull;
  }
  char buffer[17];
  std::snprintf(buffer, sizeof buffer, "%016llx", static_cast<unsigned long long>(hash));
  return std::string(buffer);
}

std::string message_of(const std::function<void()>& action) {
  try {
    action();
  } catch (const std::exception& error) {
    return error.what();
  }
  return "";
}

// A config with every field moved off its default, so an ignored key shows
// up as a mismatch.
RunConfig offset_config() {
  RunConfig config;
  config.mode = RunMode::kMmoe;
  config.task = TaskKind::Ner;
  config.corpus_path = "data/corpus.jsonl";
  config.split_path = "data/split.json";
  config.model.encoder.checkpoint = "big-reference";
  config.model.encoder.hidden_size = 48;
  config.model.encoder.layers = 3;
  config.model.encoder.heads = 4;
  config.model.encoder.max_sequence = 96;
  config.model.decoder.layers = 1;
  config.model.decoder.heads = 2;
  config.model.decoder.max_generate = 12;
  config.train.learning_rate = 0.1;
  config.train.max_epochs = 7;
  config.train.patience = 5;
  config.train.seed = 12345678901234ull;
  config.train.batch_size = 4;
  config.train.loss = LossKind::kFocal;
  config.train.focal_gamma = 1.5;
  config.train.sampler = SamplerKind::kClassBalanced;
  config.train.variant = SchemaVariant::Examples;
  config.train.repeats = 2;
  config.train.validation_fraction = 0.25;
  config.train.stop_on_loss = true;
  config.train.mixing_temperature = 2.0;
  config.mmoe.experts = 5;
  config.mmoe.shared_layers = 2;
  return config;
}

}  // namespace

TEST_CASE("run mode names round-trip and reject unknown strings") {
  const std::vector<RunMode> modes = {RunMode::kMultitask, RunMode::kSingleTaskPrompt,
                                      RunMode::kSingleTaskHead, RunMode::kMmoe};
  for (const RunMode mode : modes) {
    const auto parsed = parse_run_mode(run_mode_name(mode));
    REQUIRE(parsed.has_value());
    CHECK(*parsed == mode);
  }
  CHECK(run_mode_name(RunMode::kSingleTaskHead) == "single_task_head");
  CHECK_FALSE(parse_run_mode("Multitask").has_value());
  CHECK_FALSE(parse_run_mode("").has_value());
  CHECK_FALSE(parse_run_mode("moe").has_value());
}

TEST_CASE("config text parses sections, comments, and quoted values") {
  const std::string text =
      "# leading comment\n"
      "[run]\n"
      "mode = \"mmoe\"  # trailing comment\n"
      "corpus = \"with \\\"quotes\\\" and \\\\ and # inside\"\n"
      "\n"
      "[train]\n"
      "learning_rate = 0.25\n"
      "stop_on_loss = true\n";
  const ConfigEntries entries = parse_config_text(text);
  REQUIRE(entries.size() == 4);
  CHECK(entries.at("run.mode") == "mmoe");
  CHECK(entries.at("run.corpus") == "with \"quotes\" and \\ and # inside");
  CHECK(entries.at("train.learning_rate") == "0.25");
  CHECK(entries.at("train.stop_on_loss") == "true");
  CHECK(parse_config_text("").empty());
  CHECK(parse_config_text("# only a comment\n\n").empty());
}

TEST_CASE("config parse errors carry line numbers") {
  const std::vector<std::pair<std::string, std::string>> cases = {
      {"key = 1\n", "line 1"},
      {"[run]\nmode\n", "line 2"},
      {"[run]\nmode = \"a\"\nmode = \"b\"\n", "duplicate key 'run.mode'"},
      {"[run\n", "unterminated section header"},
      {"[run]\nMode = \"a\"\n", "invalid key name"},
      {"[run]\nmode = \"open\n", "unterminated string"},
      {"[run]\nmode = \"bad\\q\"\n", "unsupported escape"},
      {"[run]\nmode =\n", "empty value"},
      {"[Run]\n", "invalid section name"},
  };
  for (const auto& [text, needle] : cases) {
    const std::string message = message_of([&] { parse_config_text(text); });
    CHECK_MESSAGE(message.find(needle) != std::string::npos,
                  "text ", text, " produced: ", message);
  }
  CHECK_THROWS_AS(parse_config_text("oops\n"), std::invalid_argument);
}

TEST_CASE("default config serializes and reparses value-equal") {
  const RunConfig config;
  const std::string text = serialize_run_config(config);
  const RunConfig reparsed = config_from_entries(parse_config_text(text));
  CHECK(reparsed == config);
  CHECK(config_from_entries({}) == config);
}

TEST_CASE("offset config survives the text round trip") {
  const RunConfig config = offset_config();
  const RunConfig reparsed = config_from_entries(parse_config_text(serialize_run_config(config)));
  CHECK(reparsed == config);
  CHECK(reparsed.train.seed == 12345678901234ull);
  CHECK(reparsed.model.encoder.checkpoint == "big-reference");
}

TEST_CASE("doubles survive the text round trip bit for bit") {
  Rng rng(20240817);
  std::vector<double> values = {0.1, 1.0 / 3.0, 2e-5, 1e-300, 0.30000000000000004, 12345.6789};
  for (int i = 0; i < 100; ++i) {
    values.push_back(rng.uniform() * std::pow(10.0, rng.below(21) * 1.0 - 10.0));
  }
  for (const double value : values) {
    RunConfig config;
    config.train.learning_rate = value;
    config.train.focal_gamma = value;
    const RunConfig reparsed =
        config_from_entries(parse_config_text(serialize_run_config(config)));
    CHECK(reparsed.train.learning_rate == value);
    CHECK(reparsed.train.focal_gamma == value);
  }
}

TEST_CASE("unknown keys and badly typed values are rejected") {
  CHECK_THROWS_AS(config_from_entries({{"train.unknown", "1"}}), std::invalid_argument);
  CHECK_THROWS_AS(config_from_entries({{"boost.layers", "1"}}), std::invalid_argument);
  const std::vector<std::pair<std::string, std::string>> bad = {
      {"run.mode", "turbo"},
      {"run.task", "linking"},
      {"encoder.hidden_size", "-8"},
      {"encoder.layers", "2.5"},
      {"decoder.heads", "two"},
      {"train.learning_rate", "fast"},
      {"train.max_epochs", "3x"},
      {"train.seed", ""},
      {"train.loss", "hinge"},
      {"train.sampler", "stratified"},
      {"train.variant", "NoExplanations"},
      {"train.stop_on_loss", "1"},
      {"mmoe.experts", "4.0"},
  };
  for (const auto& [key, value] : bad) {
    CHECK_THROWS_AS(config_from_entries({{key, value}}), std::invalid_argument);
    const std::string message = message_of([&] { config_from_entries({{key, value}}); });
    CHECK_MESSAGE(message.find(key) != std::string::npos, "message for ", key, ": ", message);
  }
}

TEST_CASE("environment overrides map the documented prefix") {
  const std::map<std::string, std::string> env = {
      {"T2S_TRAIN_LEARNING_RATE", "0.5"},
      {"T2S_RUN_MODE", "single_task_head"},
      {"T2S_ENCODER_HIDDEN_SIZE", "32"},
      {"T2S_MMOE_EXPERTS", "3"},
      {"PATH", "/usr/bin"},
      {"T2S", "ignored"},
      {"T2S_", "ignored"},
      {"T2S_TRAIN", "ignored"},
      {"T2S_TRAIN_", "ignored"},
  };
  const ConfigEntries entries = entries_from_environment(env);
  REQUIRE(entries.size() == 4);
  CHECK(entries.at("train.learning_rate") == "0.5");
  CHECK(entries.at("run.mode") == "single_task_head");
  CHECK(entries.at("encoder.hidden_size") == "32");
  CHECK(entries.at("mmoe.experts") == "3");
  const RunConfig config = config_from_entries(entries);
  CHECK(config.mode == RunMode::kSingleTaskHead);
  CHECK(config.train.learning_rate == 0.5);
  CHECK(config.model.encoder.hidden_size == 32);
  CHECK(config.mmoe.experts == 3);
}

TEST_CASE("merge precedence is flags over environment over file") {
  const ConfigEntries file = {{"train.seed", "1"}, {"train.patience", "7"}, {"run.mode", "mmoe"}};
  const ConfigEntries env = {{"train.seed", "2"}, {"train.batch_size", "9"}};
  const ConfigEntries flags = {{"train.seed", "3"}};
  const ConfigEntries merged = merge_entries(file, env, flags);
  CHECK(merged.at("train.seed") == "3");
  CHECK(merged.at("train.batch_size") == "9");
  CHECK(merged.at("train.patience") == "7");
  CHECK(merged.at("run.mode") == "mmoe");
  CHECK(merged.size() == 4);
  CHECK(merge_entries({}, {}, {}).empty());
}

TEST_CASE("content ids match the reference fold") {
  const std::vector<std::string> inputs = {"", "a", "abc", "corpus bytes\nwith lines\n",
                                           std::string(1, '\0') + "binary"};
  for (const std::string& input : inputs) {
    const std::string id = hash_bytes(input);
    CHECK(id == reference_content_id(input));
    CHECK(id.size() == 16);
    for (const char c : id) CHECK(std::isxdigit(static_cast<unsigned char>(c)));
  }
  CHECK(hash_bytes("a") != hash_bytes("b"));

  const ScratchDir scratch;
  const std::string path = scratch.write("blob.bin", "corpus bytes\nwith lines\n");
  CHECK(hash_file(path) == hash_bytes("corpus bytes\nwith lines\n"));
  CHECK_THROWS_AS(hash_file((scratch.path / "absent.bin").string()), std::runtime_error);
}

TEST_CASE("manifests round-trip and reject foreign files") {
  const ScratchDir scratch;
  RunManifest manifest;
  manifest.command = "train";
  manifest.config_hash = hash_bytes("config");
  manifest.corpus_hash = hash_bytes("corpus");
  manifest.template_version = "qa4-v1";
  manifest.seeds = {3, 4, 5};
  manifest.artifacts["config.toml"] = {"config.toml", hash_bytes("config")};
  manifest.artifacts["seed_3/training_log.jsonl"] = {"seed_3/training_log.jsonl",
                                                     hash_bytes("log")};
  const std::string path = (scratch.path / "manifest.json").string();
  write_manifest_json(manifest, path);
  CHECK(read_manifest_json(path) == manifest);

  const std::string defaults_path =
      scratch.write("defaults.json",
                    "{\"format\": \"t2s-manifest-v1\", \"command\": \"split\","
                    " \"config_hash\": \"none\", \"corpus_hash\": \"none\","
                    " \"template_version\": \"none\", \"seeds\": [], \"artifacts\": {}}\n");
  const RunManifest defaults = read_manifest_json(defaults_path);
  CHECK(defaults.command == "split");
  CHECK(defaults.artifacts.empty());

  CHECK_THROWS_AS(read_manifest_json((scratch.path / "absent.json").string()),
                  std::runtime_error);
  CHECK_THROWS_AS(read_manifest_json(scratch.write("bad.json", "not json")),
                  std::runtime_error);
  CHECK_THROWS_AS(read_manifest_json(scratch.write("other.json", "{\"format\": \"zzz\"}")),
                  std::runtime_error);
  CHECK_THROWS_AS(read_manifest_json(scratch.write(
                      "partial.json", "{\"format\": \"t2s-manifest-v1\", \"command\": \"x\"}")),
                  std::runtime_error);
}

TEST_CASE("directory locks are exclusive while held") {
  const ScratchDir scratch;
  const std::string directory = (scratch.path / "out").string();
  {
    const DirectoryLock lock(directory);
    CHECK(std::filesystem::exists(lock.path()));
    const std::string message = message_of([&] { DirectoryLock again(directory); });
    CHECK_MESSAGE(message.find(".lock") != std::string::npos, message);
    CHECK_MESSAGE(message.find("remove") != std::string::npos, message);
    CHECK_THROWS_AS(DirectoryLock{directory}, std::runtime_error);
  }
  CHECK_FALSE(std::filesystem::exists(std::filesystem::path(directory) / ".lock"));
  const DirectoryLock reacquired(directory);
  CHECK(std::filesystem::exists(reacquired.path()));
}

TEST_CASE("a leftover lock file blocks until removed") {
  const ScratchDir scratch;
  const std::string directory = (scratch.path / "stale").string();
  std::filesystem::create_directories(directory);
  std::ofstream((std::filesystem::path(directory) / ".lock")) << "999999\n";
  const std::string message = message_of([&] { DirectoryLock lock(directory); });
  CHECK_MESSAGE(message.find(directory) != std::string::npos, message);
  std::filesystem::remove(std::filesystem::path(directory) / ".lock");
  const DirectoryLock lock(directory);
  CHECK(std::filesystem::exists(lock.path()));
}

TEST_CASE("directory locks transfer on move") {
  const ScratchDir scratch;
  const std::string first = (scratch.path / "first").string();
  const std::string second = (scratch.path / "second").string();
  DirectoryLock moved_from(first);
  DirectoryLock holder(std::move(moved_from));
  CHECK_THROWS_AS(DirectoryLock{first}, std::runtime_error);

  DirectoryLock target(second);
  target = std::move(holder);
  // Assignment released the lock previously held on `second`.
  CHECK_FALSE(std::filesystem::exists(std::filesystem::path(second) / ".lock"));
  CHECK_THROWS_AS(DirectoryLock{first}, std::runtime_error);
  const DirectoryLock relock(second);
  CHECK(std::filesystem::exists(relock.path()));
}

TEST_CASE("run tables round-trip as versioned json") {
  const ScratchDir scratch;
  RunTables tables;
  tables[TaskKind::Ner].add("material", "material");
  tables[TaskKind::Ner].add("material", "property");
  tables[TaskKind::Ner].add("null", "null");
  tables[TaskKind::SentenceClassification].add("relevant", "irrelevant");
  const std::string path = (scratch.path / "tables.json").string();
  write_run_tables_json(tables, path);
  const RunTables loaded = read_run_tables_json(path);
  CHECK(loaded == tables);
  CHECK(loaded.at(TaskKind::Ner).true_positives.at("material") == 1);
  CHECK(loaded.at(TaskKind::Ner).false_positives.at("property") == 1);
  CHECK(loaded.at(TaskKind::Ner).false_negatives.at("material") == 1);

  CHECK_THROWS_AS(read_run_tables_json((scratch.path / "absent.json").string()),
                  std::runtime_error);
  CHECK_THROWS_AS(read_run_tables_json(scratch.write("junk.json", "[]")), std::runtime_error);
  CHECK_THROWS_AS(read_run_tables_json(scratch.write("foreign.json", "{\"format\": \"x\"}")),
                  std::runtime_error);
}
