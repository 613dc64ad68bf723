#include "t2s/runconfig.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cctype>
#include <cerrno>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "t2s/rng.hpp"
#include "t2s/schema.hpp"

namespace t2s {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

constexpr const char* kManifestFormat = "t2s-manifest-v1";

std::string trim(const std::string& text) {
  size_t begin = 0;
  size_t end = text.size();
  while (begin < end && std::isspace(static_cast<unsigned char>(text[begin]))) begin += 1;
  while (end > begin && std::isspace(static_cast<unsigned char>(text[end - 1]))) end -= 1;
  return text.substr(begin, end - begin);
}

[[noreturn]] void line_error(size_t line, const std::string& message) {
  throw std::invalid_argument("line " + std::to_string(line) + ": " + message);
}

// Strips an unquoted "#" comment; quotes are honored so values may contain
// the character.
std::string strip_comment(const std::string& line) {
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (c == '"' && (i == 0 || line[i - 1] != '\\')) quoted = !quoted;
    if (c == '#' && !quoted) return line.substr(0, i);
  }
  return line;
}

std::string unquote(const std::string& token, size_t line) {
  if (token.size() < 2 || token.back() != '"') line_error(line, "unterminated string value");
  std::string out;
  for (size_t i = 1; i + 1 < token.size(); ++i) {
    const char c = token[i];
    if (c == '\\') {
      i += 1;
      if (i + 1 >= token.size() || (token[i] != '"' && token[i] != '\\')) {
        line_error(line, "unsupported escape in string value");
      }
      out.push_back(token[i]);
    } else if (c == '"') {
      line_error(line, "stray quote inside string value");
    } else {
      out.push_back(c);
    }
  }
  return out;
}

std::string quote(const std::string& value) {
  std::string out = "\"";
  for (const char c : value) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

bool valid_name(const std::string& name) {
  if (name.empty()) return false;
  for (const char c : name) {
    if (!std::islower(static_cast<unsigned char>(c)) &&
        !std::isdigit(static_cast<unsigned char>(c)) && c != '_') {
      return false;
    }
  }
  return true;
}

// Shortest digit string that reparses to exactly the same double.
std::string format_double(double value) {
  char buffer[64];
  const auto result = std::to_chars(buffer, buffer + sizeof buffer, value);
  return std::string(buffer, result.ptr);
}

[[noreturn]] void value_error(const std::string& key, const std::string& expected,
                              const std::string& value) {
  throw std::invalid_argument("config value for " + key + " must be " + expected + ", got '" +
                              value + "'");
}

size_t to_count(const std::string& key, const std::string& value) {
  size_t out = 0;
  const auto result = std::from_chars(value.data(), value.data() + value.size(), out);
  if (result.ec != std::errc{} || result.ptr != value.data() + value.size()) {
    value_error(key, "a non-negative integer", value);
  }
  return out;
}

uint64_t to_u64(const std::string& key, const std::string& value) {
  uint64_t out = 0;
  const auto result = std::from_chars(value.data(), value.data() + value.size(), out);
  if (result.ec != std::errc{} || result.ptr != value.data() + value.size()) {
    value_error(key, "a non-negative integer", value);
  }
  return out;
}

double to_double(const std::string& key, const std::string& value) {
  double out = 0.0;
  const auto result = std::from_chars(value.data(), value.data() + value.size(), out);
  if (result.ec != std::errc{} || result.ptr != value.data() + value.size()) {
    value_error(key, "a number", value);
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true") return true;
  if (value == "false") return false;
  value_error(key, "true or false", value);
}

}  // namespace

std::string run_mode_name(RunMode mode) {
  switch (mode) {
    case RunMode::kMultitask:
      return "multitask";
    case RunMode::kSingleTaskPrompt:
      return "single_task_prompt";
    case RunMode::kSingleTaskHead:
      return "single_task_head";
    case RunMode::kMmoe:
      return "mmoe";
  }
  throw std::logic_error("unhandled run mode");
}

std::optional<RunMode> parse_run_mode(const std::string& name) {
  if (name == "multitask") return RunMode::kMultitask;
  if (name == "single_task_prompt") return RunMode::kSingleTaskPrompt;
  if (name == "single_task_head") return RunMode::kSingleTaskHead;
  if (name == "mmoe") return RunMode::kMmoe;
  return std::nullopt;
}

ConfigEntries parse_config_text(const std::string& text) {
  ConfigEntries entries;
  std::string section;
  std::istringstream stream(text);
  std::string raw;
  size_t number = 0;
  while (std::getline(stream, raw)) {
    number += 1;
    const std::string line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') line_error(number, "unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (!valid_name(section)) line_error(number, "invalid section name '" + section + "'");
      continue;
    }
    const size_t equals = line.find('=');
    if (equals == std::string::npos) line_error(number, "expected 'key = value'");
    const std::string key = trim(line.substr(0, equals));
    std::string value = trim(line.substr(equals + 1));
    if (!valid_name(key)) line_error(number, "invalid key name '" + key + "'");
    if (section.empty()) line_error(number, "key '" + key + "' outside any section");
    if (value.empty()) line_error(number, "empty value for key '" + key + "'");
    if (value.front() == '"') value = unquote(value, number);
    const std::string dotted = section + "." + key;
    if (!entries.emplace(dotted, value).second) {
      line_error(number, "duplicate key '" + dotted + "'");
    }
  }
  return entries;
}

RunConfig config_from_entries(const ConfigEntries& entries) {
  RunConfig config;
  for (const auto& [key, value] : entries) {
    if (key == "run.mode") {
      const auto mode = parse_run_mode(value);
      if (!mode) value_error(key, "a run mode name", value);
      config.mode = *mode;
    } else if (key == "run.task") {
      const auto task = parse_task_kind(value);
      if (!task) value_error(key, "a task kind name", value);
      config.task = *task;
    } else if (key == "run.corpus") {
      config.corpus_path = value;
    } else if (key == "run.split") {
      config.split_path = value;
    } else if (key == "encoder.checkpoint") {
      config.model.encoder.checkpoint = value;
    } else if (key == "encoder.hidden_size") {
      config.model.encoder.hidden_size = to_count(key, value);
    } else if (key == "encoder.layers") {
      config.model.encoder.layers = to_count(key, value);
    } else if (key == "encoder.heads") {
      config.model.encoder.heads = to_count(key, value);
    } else if (key == "encoder.max_sequence") {
      config.model.encoder.max_sequence = to_count(key, value);
    } else if (key == "decoder.layers") {
      config.model.decoder.layers = to_count(key, value);
    } else if (key == "decoder.heads") {
      config.model.decoder.heads = to_count(key, value);
    } else if (key == "decoder.max_generate") {
      config.model.decoder.max_generate = to_count(key, value);
    } else if (key == "train.learning_rate") {
      config.train.learning_rate = to_double(key, value);
    } else if (key == "train.max_epochs") {
      config.train.max_epochs = to_count(key, value);
    } else if (key == "train.patience") {
      config.train.patience = to_count(key, value);
    } else if (key == "train.seed") {
      config.train.seed = to_u64(key, value);
    } else if (key == "train.batch_size") {
      config.train.batch_size = to_count(key, value);
    } else if (key == "train.loss") {
      const auto loss = parse_loss_kind(value);
      if (!loss) value_error(key, "a loss name", value);
      config.train.loss = *loss;
    } else if (key == "train.focal_gamma") {
      config.train.focal_gamma = to_double(key, value);
    } else if (key == "train.sampler") {
      const auto sampler = parse_sampler_kind(value);
      if (!sampler) value_error(key, "a sampler name", value);
      config.train.sampler = *sampler;
    } else if (key == "train.variant") {
      const auto variant = parse_schema_variant(value);
      if (!variant) value_error(key, "a schema variant name", value);
      config.train.variant = *variant;
    } else if (key == "train.repeats") {
      config.train.repeats = to_count(key, value);
    } else if (key == "train.validation_fraction") {
      config.train.validation_fraction = to_double(key, value);
    } else if (key == "train.stop_on_loss") {
      config.train.stop_on_loss = to_bool(key, value);
    } else if (key == "train.mixing_temperature") {
      config.train.mixing_temperature = to_double(key, value);
    } else if (key == "mmoe.experts") {
      config.mmoe.experts = to_count(key, value);
    } else if (key == "mmoe.shared_layers") {
      config.mmoe.shared_layers = to_count(key, value);
    } else {
      throw std::invalid_argument("unknown config key: " + key);
    }
  }
  return config;
}

std::string serialize_run_config(const RunConfig& config) {
  std::ostringstream out;
  out << "[run]\n";
  out << "mode = " << quote(run_mode_name(config.mode)) << "\n";
  out << "task = " << quote(task_kind_name(config.task)) << "\n";
  out << "corpus = " << quote(config.corpus_path) << "\n";
  out << "split = " << quote(config.split_path) << "\n";
  out << "\n[encoder]\n";
  out << "checkpoint = " << quote(config.model.encoder.checkpoint) << "\n";
  out << "hidden_size = " << config.model.encoder.hidden_size << "\n";
  out << "layers = " << config.model.encoder.layers << "\n";
  out << "heads = " << config.model.encoder.heads << "\n";
  out << "max_sequence = " << config.model.encoder.max_sequence << "\n";
  out << "\n[decoder]\n";
  out << "layers = " << config.model.decoder.layers << "\n";
  out << "heads = " << config.model.decoder.heads << "\n";
  out << "max_generate = " << config.model.decoder.max_generate << "\n";
  out << "\n[train]\n";
  out << "learning_rate = " << format_double(config.train.learning_rate) << "\n";
  out << "max_epochs = " << config.train.max_epochs << "\n";
  out << "patience = " << config.train.patience << "\n";
  out << "seed = " << config.train.seed << "\n";
  out << "batch_size = " << config.train.batch_size << "\n";
  out << "loss = " << quote(loss_kind_name(config.train.loss)) << "\n";
  out << "focal_gamma = " << format_double(config.train.focal_gamma) << "\n";
  out << "sampler = " << quote(sampler_kind_name(config.train.sampler)) << "\n";
  out << "variant = " << quote(schema_variant_name(config.train.variant)) << "\n";
  out << "repeats = " << config.train.repeats << "\n";
  out << "validation_fraction = " << format_double(config.train.validation_fraction) << "\n";
  out << "stop_on_loss = " << (config.train.stop_on_loss ? "true" : "false") << "\n";
  out << "mixing_temperature = " << format_double(config.train.mixing_temperature) << "\n";
  out << "\n[mmoe]\n";
  out << "experts = " << config.mmoe.experts << "\n";
  out << "shared_layers = " << config.mmoe.shared_layers << "\n";
  return out.str();
}

ConfigEntries entries_from_environment(const std::map<std::string, std::string>& env) {
  ConfigEntries entries;
  const std::string prefix = "T2S_";
  for (const auto& [name, value] : env) {
    if (name.rfind(prefix, 0) != 0) continue;
    std::string rest = name.substr(prefix.size());
    for (char& c : rest) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    const size_t underscore = rest.find('_');
    if (underscore == std::string::npos || underscore == 0 || underscore + 1 >= rest.size()) {
      continue;
    }
    entries[rest.substr(0, underscore) + "." + rest.substr(underscore + 1)] = value;
  }
  return entries;
}

ConfigEntries merge_entries(const ConfigEntries& file, const ConfigEntries& env,
                            const ConfigEntries& flags) {
  ConfigEntries merged = file;
  for (const auto& [key, value] : env) merged[key] = value;
  for (const auto& [key, value] : flags) merged[key] = value;
  return merged;
}

std::string hash_bytes(const std::string& bytes) {
  const uint64_t hash = fnv1a(bytes);
  char buffer[17];
  std::snprintf(buffer, sizeof buffer, "%016llx", static_cast<unsigned long long>(hash));
  return std::string(buffer);
}

std::string hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream bytes;
  bytes << in.rdbuf();
  return hash_bytes(bytes.str());
}

void write_manifest_json(const RunManifest& manifest, const std::string& path) {
  json artifacts = json::object();
  for (const auto& [name, record] : manifest.artifacts) {
    artifacts[name] = {{"path", record.path}, {"hash", record.hash}};
  }
  const json body = {
      {"format", kManifestFormat},
      {"command", manifest.command},
      {"config_hash", manifest.config_hash},
      {"corpus_hash", manifest.corpus_hash},
      {"template_version", manifest.template_version},
      {"seeds", manifest.seeds},
      {"artifacts", artifacts},
  };
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << body.dump(2) << "\n";
}

RunManifest read_manifest_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  json body;
  try {
    in >> body;
  } catch (const json::exception& error) {
    throw std::runtime_error(path + ": " + error.what());
  }
  if (!body.is_object() || body.value("format", "") != kManifestFormat) {
    throw std::runtime_error(path + ": not a run manifest");
  }
  RunManifest manifest;
  try {
    manifest.command = body.at("command").get<std::string>();
    manifest.config_hash = body.at("config_hash").get<std::string>();
    manifest.corpus_hash = body.at("corpus_hash").get<std::string>();
    manifest.template_version = body.at("template_version").get<std::string>();
    manifest.seeds = body.at("seeds").get<std::vector<uint64_t>>();
    for (const auto& [name, record] : body.at("artifacts").items()) {
      manifest.artifacts[name] = {record.at("path").get<std::string>(),
                                  record.at("hash").get<std::string>()};
    }
  } catch (const json::exception& error) {
    throw std::runtime_error(path + ": " + error.what());
  }
  return manifest;
}

DirectoryLock::DirectoryLock(const std::string& directory) {
  fs::create_directories(directory);
  path_ = (fs::path(directory) / ".lock").string();
  fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
  if (fd_ < 0) {
    if (errno == EEXIST) {
      throw std::runtime_error("output directory " + directory +
                               " is locked by another invocation; remove " + path_ +
                               " if its holder crashed");
    }
    throw std::runtime_error("cannot create lock file " + path_ + ": " + std::strerror(errno));
  }
  const std::string pid = std::to_string(::getpid()) + "\n";
  if (::write(fd_, pid.data(), pid.size()) < 0) {
    // The lock works regardless; the pid is a courtesy for whoever finds a
    // stale file.
  }
}

DirectoryLock::~DirectoryLock() { release(); }

DirectoryLock::DirectoryLock(DirectoryLock&& other) noexcept
    : path_(std::move(other.path_)), fd_(other.fd_) {
  other.fd_ = -1;
}

DirectoryLock& DirectoryLock::operator=(DirectoryLock&& other) noexcept {
  if (this != &other) {
    release();
    path_ = std::move(other.path_);
    fd_ = other.fd_;
    other.fd_ = -1;
  }
  return *this;
}

void DirectoryLock::release() {
  if (fd_ >= 0) {
    ::close(fd_);
    ::unlink(path_.c_str());
    fd_ = -1;
  }
}

}  // namespace t2s
