#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "t2s/corpus.hpp"
#include "t2s/decoding.hpp"
#include "t2s/schema.hpp"

namespace t2s {

// Per-class true-positive, false-positive, and false-negative counts for
// single-label classification.
struct ConfusionTable {
  std::map<std::string, size_t> true_positives;
  std::map<std::string, size_t> false_positives;
  std::map<std::string, size_t> false_negatives;

  // One scored unit: agreement books a true positive for the class, a miss
  // books a false negative for gold and a false positive for the prediction.
  void add(const std::string& gold, const std::string& predicted);
  void merge(const ConfusionTable& other);
  // Every class seen as gold or prediction.
  std::set<std::string> classes() const;
  bool empty() const { return classes().empty(); }
  size_t total() const;

  bool operator==(const ConfusionTable&) const = default;
};

// F1 over globally pooled counts. Equals accuracy on single-label streams.
// Throws std::invalid_argument for an empty table.
double micro_f1(const ConfusionTable& table);

// Unweighted mean of per-class F1 over the table's classes minus `excluded`;
// zero-support classes contribute 0. Throws std::invalid_argument when no
// class remains.
double macro_f1(const ConfusionTable& table, const std::set<std::string>& excluded = {});

// Gold class-field value of a prompt, parsed from its gold answer text.
// Throws std::runtime_error when the gold answer does not parse.
std::string gold_class_label(const PromptInstance& prompt);

// Scores each prediction against the gold prompt with the same
// (sample_id, query_unit_id): the class field's matched label against the
// gold class label. Requires a one-to-one correspondence and throws
// std::runtime_error for a missing or duplicate id.
ConfusionTable score_predictions(const std::vector<MatchedPrediction>& predictions,
                                 const std::vector<PromptInstance>& gold_prompts);

// Most frequent label, ties toward the lexicographically smallest. Throws
// std::invalid_argument on empty input.
std::string majority_label(const std::vector<std::string>& gold);

// Confusion counts of the constant predictor that always answers
// majority_label(gold).
ConfusionTable majority_baseline(const std::vector<std::string>& gold);

// Per-task confusion tables of one evaluation run.
using RunTables = std::map<TaskKind, ConfusionTable>;

// One report cell: mean and two population standard deviations over runs.
struct MetricCell {
  double micro_mean = 0.0;
  double micro_interval = 0.0;
  double macro_mean = 0.0;
  double macro_interval = 0.0;
  size_t runs = 0;

  bool operator==(const MetricCell&) const = default;
};

inline constexpr const char* kOverallColumn = "overall";
inline constexpr const char* kNullLabel = "null";

// Rows keyed by a model/method tag, columns by task name plus "overall".
// The overall column pools every task's counts per run before computing F1.
struct MetricsReport {
  std::map<std::string, std::map<std::string, MetricCell>> rows;
  std::string notes;

  bool operator==(const MetricsReport&) const = default;
};

// Aggregates repeated runs into one report row. The "null" class stays in
// micro pooling but is left out of macro averaging unless
// include_null_in_macro is set. Throws std::invalid_argument on no runs.
void add_report_row(MetricsReport& report, const std::string& tag,
                    const std::vector<RunTables>& runs, bool include_null_in_macro = false);

// Renders the report as versioned JSON or as a markdown table with task
// columns plus Overall and a micro/macro pair per cell.
enum class ReportFormat { kJson, kMarkdown };
std::string render_report(const MetricsReport& report, ReportFormat format);

// Inverse of the JSON rendering.
MetricsReport parse_report_json(const std::string& text);

// Versioned JSON file of one run's per-task confusion tables, the unit the
// report command aggregates across seeds. Reading validates the format tag
// and throws std::runtime_error on mismatch or malformed content.
void write_run_tables_json(const RunTables& tables, const std::string& path);
RunTables read_run_tables_json(const std::string& path);

}  // namespace t2s
