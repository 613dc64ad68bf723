#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

namespace t2s {

enum class TaskKind {
  Ner,
  RelationClassification,
  EventArgumentExtraction,
  ParagraphClassification,
  SynthesisActionRetrieval,
  SentenceClassification,
  SlotFilling,
};

inline constexpr TaskKind kAllTaskKinds[] = {
    TaskKind::Ner,
    TaskKind::RelationClassification,
    TaskKind::EventArgumentExtraction,
    TaskKind::ParagraphClassification,
    TaskKind::SynthesisActionRetrieval,
    TaskKind::SentenceClassification,
    TaskKind::SlotFilling,
};

// lower_snake wire name, e.g. "relation_classification".
std::string task_kind_name(TaskKind kind);
std::optional<TaskKind> parse_task_kind(const std::string& name);

// Character-offset span, half-open [start, end). surface must equal the
// text slice it indexes; label meaning depends on the task (entity type,
// argument role, action, slot type).
struct SpanAnnotation {
  size_t start = 0;
  size_t end = 0;
  std::string surface;
  std::string label;

  bool operator==(const SpanAnnotation&) const = default;
};

struct NerPayload {
  std::vector<SpanAnnotation> entities;
  bool operator==(const NerPayload&) const = default;
};

struct RelationPayload {
  SpanAnnotation head;
  SpanAnnotation tail;
  std::string relation;
  bool operator==(const RelationPayload&) const = default;
};

// arguments carry their role in SpanAnnotation::label; the trigger's label
// is free text and not checked against the task label space.
struct EventPayload {
  SpanAnnotation trigger;
  std::vector<SpanAnnotation> arguments;
  bool operator==(const EventPayload&) const = default;
};

// Paragraph and sentence classification: one class label per text.
struct TextLabelPayload {
  std::string label;
  bool operator==(const TextLabelPayload&) const = default;
};

struct SarPayload {
  std::vector<SpanAnnotation> actions;
  bool operator==(const SarPayload&) const = default;
};

struct SlotPayload {
  std::string frame_id;
  std::vector<SpanAnnotation> slots;
  bool operator==(const SlotPayload&) const = default;
};

using SamplePayload = std::variant<NerPayload, RelationPayload, EventPayload,
                                   TextLabelPayload, SarPayload, SlotPayload>;

struct UnifiedSample {
  std::string sample_id;
  std::string source_id;
  TaskKind task_kind = TaskKind::Ner;
  std::string text;
  SamplePayload payload;

  bool operator==(const UnifiedSample&) const = default;
};

// Ordered set of normalized class labels for one task.
struct LabelSpace {
  TaskKind task_kind = TaskKind::Ner;
  std::vector<std::string> labels;  // unique, lowercase-normalized, sorted
  bool includes_null = false;

  bool contains(const std::string& normalized) const;
  bool operator==(const LabelSpace&) const = default;
};

// Builds a LabelSpace from already-normalized or raw labels; sorts, dedupes,
// sets includes_null, and (for NER) injects the "null" non-entity label.
LabelSpace make_label_space(TaskKind kind, std::vector<std::string> labels);

using LabelSpaceSet = std::map<TaskKind, LabelSpace>;

struct ValidationResult {
  std::vector<std::string> violations;
  bool ok() const { return violations.empty(); }
};

// Checks every type invariant: payload variant vs. task kind, span bounds,
// surface/text agreement, label membership. Never throws; all violations are
// collected. Label checks are skipped for tasks absent from `spaces`.
ValidationResult validate_sample(const UnifiedSample& sample, const LabelSpaceSet& spaces);

using Corpus = std::vector<UnifiedSample>;

struct CorpusSplit {
  uint64_t seed = 0;
  double train_fraction = 0.01;
  std::vector<std::string> train_ids;  // sorted
  std::vector<std::string> test_ids;   // sorted

  bool operator==(const CorpusSplit&) const = default;
};

// Deterministic per-task stratified split. Train size per task is
// round(fraction * task_size), at least 1. Throws std::invalid_argument for
// fraction outside (0,1) and std::runtime_error for an empty corpus.
CorpusSplit make_split(const Corpus& corpus, uint64_t seed, double fraction);

// Sorted distinct labels observed for the task (plus "null" for NER).
// Throws std::runtime_error if the corpus has no sample of that kind.
LabelSpace label_space_of(TaskKind kind, const Corpus& corpus);

// All label spaces observable in a corpus, keyed by task kind.
LabelSpaceSet label_spaces_of(const Corpus& corpus);

// The class labels a sample contributes (the classification targets only:
// entity types, relation, roles, class label, actions, slot types).
std::vector<std::string> sample_class_labels(const UnifiedSample& sample);

// --- serialization ------------------------------------------------------

std::string sample_to_json_line(const UnifiedSample& sample);
UnifiedSample sample_from_json_line(const std::string& line);  // throws on malformed

// Newline-delimited JSON, one sample per line, sorted by sample_id on write.
void write_corpus_jsonl(const Corpus& corpus, const std::string& path);
Corpus read_corpus_jsonl(const std::string& path);

void write_split_json(const CorpusSplit& split, const std::string& path);
CorpusSplit read_split_json(const std::string& path);

}  // namespace t2s
