#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "t2s/corpus.hpp"
#include "t2s/decoding.hpp"
#include "t2s/ingest.hpp"
#include "t2s/metrics.hpp"
#include "t2s/model.hpp"
#include "t2s/runconfig.hpp"
#include "t2s/schema.hpp"
#include "t2s/training.hpp"

extern char** environ;

namespace {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace t2s;

// Every failure leaves through one single-line stderr message, so embedded
// newlines are folded away.
std::string single_line(const std::string& message) {
  std::string out;
  for (const char c : message) {
    if (c == '\r') continue;
    if (c == '\n') {
      if (!out.empty() && out.back() != ' ') out += "; ";
      continue;
    }
    out.push_back(c);
  }
  return out;
}

void require_file(const std::string& path) {
  if (!fs::is_regular_file(path)) throw std::runtime_error("missing file: " + path);
}

void require_directory(const std::string& path) {
  if (!fs::is_directory(path)) throw std::runtime_error("missing directory: " + path);
}

// Regular files under root, sorted by path for stable manifests and digests.
std::vector<fs::path> files_under(const fs::path& root) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(),
            [](const fs::path& a, const fs::path& b) { return a.generic_string() < b.generic_string(); });
  return files;
}

// Content id of a whole directory tree: relative paths plus per-file ids.
std::string hash_tree(const fs::path& root) {
  std::string digest;
  for (const fs::path& file : files_under(root)) {
    digest += fs::relative(file, root).generic_string() + "=" + hash_file(file.string()) + "\n";
  }
  return hash_bytes(digest);
}

// An output directory belongs to exactly one run identity. A rerun with the
// same identity may overwrite its own artifacts; anything else must go to a
// fresh directory. Corpus ids recorded only after producing output ("none"
// at check time) are not compared.
void check_rerun(const fs::path& out_dir, const RunManifest& next) {
  const fs::path existing = out_dir / "manifest.json";
  if (!fs::exists(existing)) return;
  const RunManifest previous = read_manifest_json(existing.string());
  if (previous.seeds != next.seeds) {
    throw std::runtime_error("seed collision in output directory " + out_dir.string() +
                             ": it already holds a run with different seeds; use a fresh directory");
  }
  const bool corpus_known = previous.corpus_hash != "none" && next.corpus_hash != "none";
  if (previous.command != next.command || previous.config_hash != next.config_hash ||
      (corpus_known && previous.corpus_hash != next.corpus_hash)) {
    throw std::runtime_error("output directory " + out_dir.string() +
                             " already holds a different run; use a fresh directory");
  }
}

// Records every file under the output directory except the manifest itself
// and the lock, then writes the manifest.
void finalize_manifest(RunManifest manifest, const fs::path& out_dir) {
  for (const fs::path& file : files_under(out_dir)) {
    const std::string rel = fs::relative(file, out_dir).generic_string();
    if (rel == "manifest.json" || rel == ".lock") continue;
    manifest.artifacts[rel] = {rel, hash_file(file.string())};
  }
  write_manifest_json(manifest, (out_dir / "manifest.json").string());
}

std::map<std::string, std::string> environment_map() {
  std::map<std::string, std::string> env;
  for (char** cursor = environ; cursor != nullptr && *cursor != nullptr; ++cursor) {
    const std::string pair = *cursor;
    const size_t equals = pair.find('=');
    if (equals == std::string::npos) continue;
    env[pair.substr(0, equals)] = pair.substr(equals + 1);
  }
  return env;
}

Corpus load_corpus(const std::string& path) {
  require_file(path);
  return read_corpus_jsonl(path);
}

CorpusSplit load_split(const std::string& path) {
  require_file(path);
  return read_split_json(path);
}

std::map<std::string, const UnifiedSample*> index_by_id(const Corpus& corpus) {
  std::map<std::string, const UnifiedSample*> index;
  for (const UnifiedSample& sample : corpus) index[sample.sample_id] = &sample;
  return index;
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  std::ostringstream bytes;
  bytes << in.rdbuf();
  return bytes.str();
}

void write_bytes(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
}

// --- ingest -------------------------------------------------------------

struct IngestArgs {
  std::string input;
  std::vector<std::string> sources;
  std::string out;
};

void run_ingest(const IngestArgs& args) {
  require_directory(args.input);
  const AdapterRegistry registry = AdapterRegistry::with_builtin_sources();
  std::set<std::string> sources(args.sources.begin(), args.sources.end());
  if (sources.empty()) {
    const auto ids = registry.ids();
    sources.insert(ids.begin(), ids.end());
  }

  const fs::path out_dir(args.out);
  const DirectoryLock lock(args.out);

  std::string identity;
  Corpus corpus;
  IngestReport combined;
  for (const std::string& id : sources) {
    const auto adapter = registry.find(id);
    if (!adapter) throw std::runtime_error("unknown source: " + id);
    const fs::path source_dir = fs::path(args.input) / id;
    if (!fs::is_directory(source_dir)) {
      throw std::runtime_error("missing directory: " + source_dir.string());
    }
    identity += id + "=" + hash_tree(source_dir) + "\n";
    const IngestReport report = ingest(*adapter, source_dir.string(), corpus);
    for (const auto& [kind, count] : report.samples_per_task) {
      combined.samples_per_task[kind] += count;
    }
    combined.skipped += report.skipped;
    combined.violations.insert(combined.violations.end(), report.violations.begin(),
                               report.violations.end());
  }

  RunManifest manifest;
  manifest.command = "ingest";
  manifest.config_hash = hash_bytes(identity);
  check_rerun(out_dir, manifest);

  const std::string corpus_path = (out_dir / "corpus.jsonl").string();
  write_corpus_jsonl(corpus, corpus_path);
  manifest.corpus_hash = hash_file(corpus_path);

  json per_task = json::object();
  for (const auto& [kind, count] : combined.samples_per_task) {
    per_task[task_kind_name(kind)] = count;
  }
  const json report_body = {{"format", "t2s-ingest-v1"},
                            {"samples_per_task", per_task},
                            {"skipped", combined.skipped},
                            {"violations", combined.violations},
                            {"total", combined.total()}};
  write_bytes((out_dir / "ingest_report.json").string(), report_body.dump(2) + "\n");

  finalize_manifest(manifest, out_dir);
  std::cout << "ingested " << combined.total() << " samples from " << sources.size()
            << " sources (" << combined.skipped << " skipped) into " << corpus_path << "\n";
}

// --- split --------------------------------------------------------------

struct SplitArgs {
  std::string corpus;
  uint64_t seed = 0;
  double fraction = 0.0;
  std::string out;
};

void run_split(const SplitArgs& args) {
  const Corpus corpus = load_corpus(args.corpus);
  const fs::path out_dir(args.out);
  const DirectoryLock lock(args.out);

  char fraction_text[64];
  std::snprintf(fraction_text, sizeof fraction_text, "%.17g", args.fraction);
  RunManifest manifest;
  manifest.command = "split";
  manifest.config_hash = hash_bytes(std::string("fraction=") + fraction_text + "\n");
  manifest.corpus_hash = hash_file(args.corpus);
  manifest.seeds = {args.seed};
  check_rerun(out_dir, manifest);

  const CorpusSplit split = make_split(corpus, args.seed, args.fraction);
  const std::string split_path = (out_dir / "split.json").string();
  write_split_json(split, split_path);

  finalize_manifest(manifest, out_dir);
  std::cout << "split " << corpus.size() << " samples into " << split.train_ids.size()
            << " train / " << split.test_ids.size() << " test (" << split_path << ")\n";
}

// --- train --------------------------------------------------------------

struct TrainArgs {
  std::string config_path;
  std::vector<std::string> sets;
  std::string seed;
  std::string variant;
  std::string mode;
  std::string task;
  std::string corpus;
  std::string split;
  std::string out;
};

ConfigEntries flag_entries(const TrainArgs& args) {
  ConfigEntries flags;
  for (const std::string& assignment : args.sets) {
    const size_t equals = assignment.find('=');
    if (equals == std::string::npos || equals == 0) {
      throw std::invalid_argument("--set expects section.key=value, got '" + assignment + "'");
    }
    flags[assignment.substr(0, equals)] = assignment.substr(equals + 1);
  }
  if (!args.seed.empty()) flags["train.seed"] = args.seed;
  if (!args.variant.empty()) flags["train.variant"] = args.variant;
  if (!args.mode.empty()) flags["run.mode"] = args.mode;
  if (!args.task.empty()) flags["run.task"] = args.task;
  if (!args.corpus.empty()) flags["run.corpus"] = args.corpus;
  if (!args.split.empty()) flags["run.split"] = args.split;
  return flags;
}

void run_train(const TrainArgs& args) {
  ConfigEntries file_entries;
  if (!args.config_path.empty()) {
    require_file(args.config_path);
    file_entries = parse_config_text(read_bytes(args.config_path));
  }
  const RunConfig config = config_from_entries(
      merge_entries(file_entries, entries_from_environment(environment_map()), flag_entries(args)));
  validate_config(config.train);
  if (config.corpus_path.empty()) throw std::runtime_error("run.corpus is required");

  const Corpus corpus = load_corpus(config.corpus_path);
  std::vector<std::string> train_ids;
  std::string split_digest = "none";
  if (!config.split_path.empty()) {
    train_ids = load_split(config.split_path).train_ids;
    split_digest = hash_file(config.split_path);
  } else {
    for (const UnifiedSample& sample : corpus) train_ids.push_back(sample.sample_id);
    std::sort(train_ids.begin(), train_ids.end());
  }

  const bool prompted =
      config.mode == RunMode::kMultitask || config.mode == RunMode::kSingleTaskPrompt;
  const std::string config_text = serialize_run_config(config);
  const fs::path out_dir(args.out);
  const DirectoryLock lock(args.out);

  RunManifest manifest;
  manifest.command = "train";
  manifest.config_hash = hash_bytes(config_text + "split=" + split_digest + "\n");
  manifest.corpus_hash = hash_file(config.corpus_path);
  manifest.template_version = prompted ? TemplateSet::builtin().version() : "none";
  for (size_t repeat = 0; repeat < config.train.repeats; ++repeat) {
    manifest.seeds.push_back(config.train.seed + repeat);
  }
  check_rerun(out_dir, manifest);

  write_bytes((out_dir / "config.toml").string(), config_text);
  for (const uint64_t seed : manifest.seeds) {
    TrainConfig train_config = config.train;
    train_config.seed = seed;
    const fs::path seed_dir = out_dir / ("seed_" + std::to_string(seed));
    fs::create_directories(seed_dir);
    const std::string checkpoint_dir = (seed_dir / "checkpoint").string();
    const std::string log_path = (seed_dir / "training_log.jsonl").string();

    std::vector<EpochLog> log;
    size_t best_epoch = 0;
    switch (config.mode) {
      case RunMode::kMultitask: {
        const TrainResult result = train_multitask(corpus, train_ids, config.model, train_config);
        save_checkpoint(result.model, checkpoint_dir, TemplateSet::builtin().version());
        log = result.log;
        best_epoch = result.best_epoch;
        break;
      }
      case RunMode::kSingleTaskPrompt: {
        const TrainResult result = train_single_task_prompt(corpus, train_ids, config.task,
                                                            config.model, train_config);
        save_checkpoint(result.model, checkpoint_dir, TemplateSet::builtin().version());
        log = result.log;
        best_epoch = result.best_epoch;
        break;
      }
      case RunMode::kSingleTaskHead: {
        const HeadTrainResult result =
            train_single_task_head(corpus, train_ids, config.task, config.model, train_config);
        save_head_checkpoint(result.model, checkpoint_dir);
        log = result.log;
        best_epoch = result.best_epoch;
        break;
      }
      case RunMode::kMmoe: {
        const MmoeTrainResult result =
            train_mmoe(corpus, train_ids, config.model, config.mmoe, train_config);
        save_mmoe_checkpoint(result.model, checkpoint_dir);
        log = result.log;
        best_epoch = result.best_epoch;
        break;
      }
    }
    write_training_log(log, log_path);
    std::cout << "seed " << seed << ": " << log.size() << " epochs, best epoch " << best_epoch
              << "\n";
  }

  finalize_manifest(manifest, out_dir);
  std::cout << "trained " << run_mode_name(config.mode) << " over " << manifest.seeds.size()
            << " seeds into " << args.out << "\n";
}

// --- predict ------------------------------------------------------------

struct PredictArgs {
  std::string checkpoint;
  std::string corpus;
  std::string split;
  std::string subset = "test";
  std::string variant = "task_schema";
  std::string policy = "edit_distance";
  bool lenient = false;
  uint64_t seed = 0;
  std::string out;
};

// Shared shape of the encoder-head baselines' outputs: the query unit's own
// identification fields pass through and the class slot takes the predicted
// label, so downstream scoring sees the same record shape as decoded text.
template <typename Classify>
std::vector<MatchedPrediction> baseline_predictions(const Corpus& corpus,
                                                    const std::vector<std::string>& ids,
                                                    const LabelSpaceSet& spaces,
                                                    const Classify& classify) {
  const auto index = index_by_id(corpus);
  std::vector<std::string> ordered = ids;
  std::sort(ordered.begin(), ordered.end());
  std::vector<MatchedPrediction> predictions;
  for (const std::string& id : ordered) {
    const auto it = index.find(id);
    if (it == index.end()) throw std::runtime_error("unknown sample id in split: " + id);
    const UnifiedSample& sample = *it->second;
    if (spaces.count(sample.task_kind) == 0) continue;
    const AnswerSchema schema = answer_schema_for(sample.task_kind, spaces);
    const size_t class_index = class_field_index(schema);
    for (const QueryUnit& unit : query_units(sample)) {
      AnswerUnit answer = unit.answer;
      answer.values.at(class_index) = classify(sample, unit, schema);
      MatchedPrediction prediction;
      prediction.raw_text = serialize_answer(answer, schema);
      prediction.structurally_valid = true;
      for (size_t i = 0; i < schema.fields.size(); ++i) {
        prediction.fields.push_back(
            {schema.fields[i].name, answer.values[i], answer.values[i], 1.0});
      }
      prediction.sample_id = sample.sample_id;
      prediction.query_unit_id = unit.unit_id;
      prediction.task_kind = sample.task_kind;
      predictions.push_back(std::move(prediction));
    }
  }
  return predictions;
}

void run_predict(const PredictArgs& args) {
  require_directory(args.checkpoint);
  const Corpus corpus = load_corpus(args.corpus);
  const CorpusSplit split = load_split(args.split);
  if (args.subset != "train" && args.subset != "test") {
    throw std::runtime_error("unknown subset: " + args.subset + " (use train or test)");
  }
  const std::vector<std::string>& ids =
      args.subset == "train" ? split.train_ids : split.test_ids;
  const auto variant = parse_schema_variant(args.variant);
  if (!variant) throw std::runtime_error("unknown schema variant: " + args.variant);
  MatchPolicy policy = MatchPolicy::kEditDistance;
  if (args.policy == "substring_first") {
    policy = MatchPolicy::kSubstringFirst;
  } else if (args.policy != "edit_distance") {
    throw std::runtime_error("unknown match policy: " + args.policy);
  }
  const ParseMode mode = args.lenient ? ParseMode::kLenient : ParseMode::kStrict;

  const bool head_checkpoint = fs::exists(fs::path(args.checkpoint) / "head.json");
  const bool mmoe_checkpoint = fs::exists(fs::path(args.checkpoint) / "mmoe.json");

  const fs::path out_dir(args.out);
  const DirectoryLock lock(args.out);

  RunManifest manifest;
  manifest.command = "predict";
  manifest.corpus_hash = hash_file(args.corpus);
  manifest.config_hash =
      hash_bytes("checkpoint=" + hash_tree(args.checkpoint) + "\nsplit=" + hash_file(args.split) +
                 "\nsubset=" + args.subset + "\nvariant=" + args.variant +
                 "\npolicy=" + args.policy + "\nmode=" + (args.lenient ? "lenient" : "strict") +
                 "\n");
  manifest.seeds = {args.seed};
  check_rerun(out_dir, manifest);

  std::vector<MatchedPrediction> predictions;
  if (head_checkpoint) {
    const HeadClassifier model = load_head_checkpoint(args.checkpoint);
    const LabelSpaceSet spaces = {{model.space().task_kind, model.space()}};
    predictions = baseline_predictions(
        corpus, ids, spaces,
        [&](const UnifiedSample& sample, const QueryUnit& unit, const AnswerSchema& schema) {
          return model.predict_label(head_input_text(sample, unit, schema));
        });
  } else if (mmoe_checkpoint) {
    const MmoeModel model = load_mmoe_checkpoint(args.checkpoint);
    predictions = baseline_predictions(
        corpus, ids, model.spaces(),
        [&](const UnifiedSample& sample, const QueryUnit& unit, const AnswerSchema& schema) {
          return model.predict_label(sample.task_kind, head_input_text(sample, unit, schema));
        });
  } else {
    std::string stored_version;
    const Seq2SchemaModel model = load_checkpoint(args.checkpoint, &stored_version);
    if (stored_version != TemplateSet::builtin().version()) {
      throw std::runtime_error("checkpoint template version " + stored_version +
                               " does not match this binary's " + TemplateSet::builtin().version());
    }
    manifest.template_version = stored_version;
    const LabelSpaceSet spaces = label_spaces_of(corpus);
    Corpus exemplar_pool;
    PromptContext context;
    context.spaces = &spaces;
    context.seed = args.seed;
    if (*variant == SchemaVariant::Examples) {
      const auto index = index_by_id(corpus);
      for (const std::string& id : split.train_ids) {
        const auto it = index.find(id);
        if (it == index.end()) throw std::runtime_error("unknown sample id in split: " + id);
        exemplar_pool.push_back(*it->second);
      }
      context.exemplar_pool = &exemplar_pool;
    }
    const std::vector<PromptInstance> prompts = build_prompt_set(corpus, ids, *variant, context);
    const ModelAnswerGenerator generator(model);
    predictions = constrained_predict_batch(prompts, generator, mode, policy);
  }

  const std::string predictions_path = (out_dir / "predictions.jsonl").string();
  write_predictions_jsonl(predictions, predictions_path);
  finalize_manifest(manifest, out_dir);
  std::cout << "wrote " << predictions.size() << " predictions to " << predictions_path << "\n";
}

// --- evaluate -----------------------------------------------------------

struct EvaluateArgs {
  std::string predictions;
  std::string corpus;
  std::string out;
};

void run_evaluate(const EvaluateArgs& args) {
  require_file(args.predictions);
  const std::vector<MatchedPrediction> predictions = read_predictions_jsonl(args.predictions);
  const Corpus corpus = load_corpus(args.corpus);

  std::set<std::string> id_set;
  for (const MatchedPrediction& prediction : predictions) id_set.insert(prediction.sample_id);
  const std::vector<std::string> ids(id_set.begin(), id_set.end());

  const fs::path out_dir(args.out);
  const DirectoryLock lock(args.out);

  RunManifest manifest;
  manifest.command = "evaluate";
  manifest.config_hash = hash_bytes("predictions=" + hash_file(args.predictions) + "\n");
  manifest.corpus_hash = hash_file(args.corpus);
  check_rerun(out_dir, manifest);

  // Gold answers do not depend on the prompt variant, so the plain variant
  // reconstructs them for any predictions file.
  const LabelSpaceSet spaces = label_spaces_of(corpus);
  PromptContext context;
  context.spaces = &spaces;
  const std::vector<PromptInstance> gold =
      build_prompt_set(corpus, ids, SchemaVariant::NoExplanations, context);

  std::map<TaskKind, std::vector<MatchedPrediction>> predictions_by_task;
  for (const MatchedPrediction& prediction : predictions) {
    predictions_by_task[prediction.task_kind].push_back(prediction);
  }
  std::map<TaskKind, std::vector<PromptInstance>> gold_by_task;
  for (const PromptInstance& prompt : gold) gold_by_task[prompt.task_kind].push_back(prompt);

  RunTables tables;
  for (const auto& [kind, gold_prompts] : gold_by_task) {
    tables[kind] = score_predictions(predictions_by_task[kind], gold_prompts);
  }

  const std::string metrics_path = (out_dir / "metrics.json").string();
  write_run_tables_json(tables, metrics_path);
  finalize_manifest(manifest, out_dir);

  ConfusionTable pooled;
  for (const auto& [kind, table] : tables) {
    std::cout << task_kind_name(kind) << ": micro_f1 " << micro_f1(table) << ", macro_f1 "
              << macro_f1(table, table.false_negatives.count(kNullLabel) ? std::set<std::string>{kNullLabel}
                                                                          : std::set<std::string>{})
              << "\n";
    pooled.merge(table);
  }
  std::cout << "overall micro_f1 " << micro_f1(pooled) << " over " << predictions.size()
            << " predictions (" << metrics_path << ")\n";
}

// --- report -------------------------------------------------------------

struct ReportArgs {
  std::vector<std::string> metrics;
  std::string tag = "model";
  std::vector<std::string> rows;
  std::string format = "markdown";
  bool include_null = false;
  std::string notes;
  std::string out;
};

void run_report(const ReportArgs& args) {
  struct RowSpec {
    std::string tag;
    std::vector<std::string> files;
  };
  std::vector<RowSpec> specs;
  if (!args.metrics.empty()) specs.push_back({args.tag, args.metrics});
  for (const std::string& row : args.rows) {
    const size_t equals = row.find('=');
    if (equals == std::string::npos || equals == 0 || equals + 1 >= row.size()) {
      throw std::invalid_argument("--row expects tag=file[,file...], got '" + row + "'");
    }
    RowSpec spec;
    spec.tag = row.substr(0, equals);
    std::string files = row.substr(equals + 1);
    size_t start = 0;
    while (start <= files.size()) {
      const size_t comma = files.find(',', start);
      const std::string file = files.substr(start, comma - start);
      if (!file.empty()) spec.files.push_back(file);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    specs.push_back(std::move(spec));
  }
  if (specs.empty()) throw std::runtime_error("no metrics given; use --metrics or --row");
  if (args.format != "markdown" && args.format != "json") {
    throw std::runtime_error("unknown report format: " + args.format + " (use markdown or json)");
  }

  const fs::path out_dir(args.out);
  const DirectoryLock lock(args.out);

  std::string identity = "format=" + args.format + "\nnotes=" + args.notes +
                         "\ninclude_null=" + (args.include_null ? "true" : "false") + "\n";
  MetricsReport report;
  report.notes = args.notes;
  for (const RowSpec& spec : specs) {
    identity += spec.tag + ":";
    std::vector<RunTables> runs;
    for (const std::string& file : spec.files) {
      require_file(file);
      runs.push_back(read_run_tables_json(file));
      identity += hash_file(file) + ",";
    }
    identity += "\n";
    add_report_row(report, spec.tag, runs, args.include_null);
  }

  RunManifest manifest;
  manifest.command = "report";
  manifest.config_hash = hash_bytes(identity);
  check_rerun(out_dir, manifest);

  const bool markdown = args.format == "markdown";
  const std::string report_path = (out_dir / (markdown ? "report.md" : "report.json")).string();
  write_bytes(report_path,
              render_report(report, markdown ? ReportFormat::kMarkdown : ReportFormat::kJson));
  finalize_manifest(manifest, out_dir);
  std::cout << "wrote " << specs.size() << " report rows to " << report_path << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"text-to-schema training and evaluation pipeline"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "t2s 0.1.0");

  IngestArgs ingest_args;
  auto* ingest_cmd = app.add_subcommand("ingest", "parse source datasets into a unified corpus");
  ingest_cmd->add_option("--input", ingest_args.input, "directory with one subdirectory per source")
      ->required();
  ingest_cmd->add_option("--source", ingest_args.sources, "source ids to ingest (default: all)");
  ingest_cmd->add_option("--out", ingest_args.out, "output directory")->required();
  ingest_cmd->callback([&] { run_ingest(ingest_args); });

  SplitArgs split_args;
  auto* split_cmd = app.add_subcommand("split", "draw a stratified train/test split");
  split_cmd->add_option("--corpus", split_args.corpus, "corpus JSONL file")->required();
  split_cmd->add_option("--seed", split_args.seed, "split seed")->required();
  split_cmd->add_option("--fraction", split_args.fraction, "train fraction in (0,1)")->required();
  split_cmd->add_option("--out", split_args.out, "output directory")->required();
  split_cmd->callback([&] { run_split(split_args); });

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "fine-tune a model over one or more seeds");
  train_cmd->add_option("--config", train_args.config_path, "config file");
  train_cmd->add_option("--set", train_args.sets, "override, e.g. train.learning_rate=0.01");
  train_cmd->add_option("--seed", train_args.seed, "shorthand for --set train.seed=N");
  train_cmd->add_option("--variant", train_args.variant, "shorthand for --set train.variant=V");
  train_cmd->add_option("--mode", train_args.mode, "shorthand for --set run.mode=M");
  train_cmd->add_option("--task", train_args.task, "shorthand for --set run.task=T");
  train_cmd->add_option("--corpus", train_args.corpus, "shorthand for --set run.corpus=F");
  train_cmd->add_option("--split", train_args.split, "shorthand for --set run.split=F");
  train_cmd->add_option("--out", train_args.out, "output directory")->required();
  train_cmd->callback([&] { run_train(train_args); });

  PredictArgs predict_args;
  auto* predict_cmd = app.add_subcommand("predict", "decode predictions for a split subset");
  predict_cmd->add_option("--checkpoint", predict_args.checkpoint, "checkpoint directory")
      ->required();
  predict_cmd->add_option("--corpus", predict_args.corpus, "corpus JSONL file")->required();
  predict_cmd->add_option("--split", predict_args.split, "split JSON file")->required();
  predict_cmd->add_option("--subset", predict_args.subset, "train or test (default test)");
  predict_cmd->add_option("--variant", predict_args.variant,
                          "prompt variant (default task_schema)");
  predict_cmd->add_option("--policy", predict_args.policy,
                          "label match policy: edit_distance or substring_first");
  predict_cmd->add_flag("--lenient", predict_args.lenient, "recover fields from malformed answers");
  predict_cmd->add_option("--seed", predict_args.seed, "exemplar selection seed");
  predict_cmd->add_option("--out", predict_args.out, "output directory")->required();
  predict_cmd->callback([&] { run_predict(predict_args); });

  EvaluateArgs evaluate_args;
  auto* evaluate_cmd = app.add_subcommand("evaluate", "score predictions against gold answers");
  evaluate_cmd->add_option("--predictions", evaluate_args.predictions, "predictions JSONL file")
      ->required();
  evaluate_cmd->add_option("--corpus", evaluate_args.corpus, "corpus JSONL file")->required();
  evaluate_cmd->add_option("--out", evaluate_args.out, "output directory")->required();
  evaluate_cmd->callback([&] { run_evaluate(evaluate_args); });

  ReportArgs report_args;
  auto* report_cmd = app.add_subcommand("report", "aggregate per-seed metrics into a table");
  report_cmd->add_option("--metrics", report_args.metrics, "per-seed metrics files for one row");
  report_cmd->add_option("--tag", report_args.tag, "row name for --metrics (default model)");
  report_cmd->add_option("--row", report_args.rows, "extra row as tag=file[,file...]");
  report_cmd->add_option("--format", report_args.format, "markdown or json (default markdown)");
  report_cmd->add_flag("--include-null", report_args.include_null,
                       "keep the null class in macro averages");
  report_cmd->add_option("--notes", report_args.notes, "free-text note under the table");
  report_cmd->add_option("--out", report_args.out, "output directory")->required();
  report_cmd->callback([&] { run_report(report_args); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& error) {
    if (error.get_exit_code() == 0) return app.exit(error);
    std::cerr << "error: " << single_line(error.what()) << std::endl;
    return 1;
  } catch (const std::exception& error) {
    std::cerr << "error: " << single_line(error.what()) << std::endl;
    return 1;
  }
  return 0;
}
