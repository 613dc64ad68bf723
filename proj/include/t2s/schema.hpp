#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "t2s/corpus.hpp"

namespace t2s {

// The four instruction-option variants a prompt can carry.
enum class SchemaVariant {
  NoExplanations,
  PotentialChoices,
  Examples,
  TaskSchema,
};

inline constexpr SchemaVariant kAllSchemaVariants[] = {
    SchemaVariant::NoExplanations,
    SchemaVariant::PotentialChoices,
    SchemaVariant::Examples,
    SchemaVariant::TaskSchema,
};

// lower_snake wire name, e.g. "potential_choices".
std::string schema_variant_name(SchemaVariant variant);
std::optional<SchemaVariant> parse_schema_variant(const std::string& name);

// One answer field: either a free text span or a single class drawn from a
// label space.
struct SchemaField {
  std::string name;
  bool is_class = false;
  LabelSpace domain;  // populated for class fields only

  bool operator==(const SchemaField&) const = default;
};

// Answer grammar: "name: value" pairs joined by " | ", with "\" and "|"
// backslash-escaped inside values.
inline constexpr const char* kAnswerGrammarId = "kv_pipe_v1";

// Machine-checkable shape of one answer. Field names are unique and exactly
// one field per schema is a class field.
struct AnswerSchema {
  TaskKind task_kind = TaskKind::Ner;
  std::vector<SchemaField> fields;
  std::string grammar_id = kAnswerGrammarId;

  bool operator==(const AnswerSchema&) const = default;
};

// Total over the 7 task kinds with stable field ordering. A task kind absent
// from `spaces` yields an empty class domain.
AnswerSchema answer_schema_for(TaskKind kind, const LabelSpaceSet& spaces);

// Index of the schema's single class field.
size_t class_field_index(const AnswerSchema& schema);

// Field values aligned with AnswerSchema::fields.
struct AnswerUnit {
  std::vector<std::string> values;

  bool operator==(const AnswerUnit&) const = default;
};

// Renders the unit under the answer grammar. Throws std::invalid_argument
// when the unit arity differs from the schema or a class value is outside
// its domain; the literal sentinel "none" is always admitted so the
// empty-fields form stays serializable.
std::string serialize_answer(const AnswerUnit& unit, const AnswerSchema& schema);

// Strict inverse of serialize_answer: field names must appear in schema
// order. Returns nullopt on any structural mismatch; never throws.
std::optional<AnswerUnit> parse_answer(const std::string& text, const AnswerSchema& schema);

// Lenient grammar scan for model output recovery: splits on unescaped "|",
// then each segment at its first ":". Segments without a colon yield an
// empty name. Total over arbitrary text.
std::vector<std::pair<std::string, std::string>> scan_answer_pairs(const std::string& text);

// The canonical all-"none" unit, used to render answers for empty frames.
AnswerUnit empty_unit(const AnswerSchema& schema);

// One classification query extracted from a sample: the gold answer values
// plus the placeholder strings its prompt description needs.
struct QueryUnit {
  size_t unit_id = 0;
  AnswerUnit answer;
  std::map<std::string, std::string> placeholders;

  bool operator==(const QueryUnit&) const = default;
};

// Query units in payload order: one per entity span (NER), action span
// (synthesis actions), slot span, event argument, and exactly one for
// relation and text classification samples. An empty span payload yields an
// empty list.
std::vector<QueryUnit> query_units(const UnifiedSample& sample);

// Versioned plain-text prompt templates: "[block]" headers followed by block
// content, "{name}" placeholders substituted at render time.
class TemplateSet {
 public:
  // The compiled-in copy of templates/prompts_v1.txt.
  static TemplateSet builtin();
  // Source text of the builtin set; the shipped template file matches it
  // byte for byte.
  static const std::string& builtin_text();
  // Throws std::runtime_error for an unreadable file or missing block.
  static TemplateSet load(const std::string& path);

  const std::string& version() const { return version_; }
  bool has(const std::string& block) const { return blocks_.count(block) > 0; }
  // Throws std::runtime_error for an unknown block or unresolved placeholder.
  std::string render(const std::string& block,
                     const std::map<std::string, std::string>& values) const;

 private:
  explicit TemplateSet(std::map<std::string, std::string> blocks);

  std::map<std::string, std::string> blocks_;
  std::string version_;
};

// A rendered prompt with its gold answer and the schema the answer obeys.
struct PromptInstance {
  std::string prompt_text;
  std::string gold_answer_text;
  AnswerSchema answer_schema;
  std::string sample_id;
  size_t query_unit_id = 0;
  TaskKind task_kind = TaskKind::Ner;
  SchemaVariant variant = SchemaVariant::TaskSchema;
};

// Optional prompt length cap. When max_tokens is nonzero, words are dropped
// from the tail of the Text section (never from the instruction sections)
// until count_tokens(prompt) fits or one word remains.
struct PromptBudget {
  size_t max_tokens = 0;
  std::function<size_t(const std::string&)> count_tokens;
};

struct PromptContext {
  const LabelSpaceSet* spaces = nullptr;   // required
  const TemplateSet* templates = nullptr;  // null selects the builtin set
  const Corpus* exemplar_pool = nullptr;   // Examples variant only
  uint64_t seed = 0;                       // drives exemplar choice
  PromptBudget budget;
};

struct PromptBuildReport {
  size_t prompts = 0;
  std::vector<std::string> zero_unit_samples;
};

// One PromptInstance per query unit, deterministic given (sample, variant,
// context seed). A sample with zero query units yields an empty list and is
// flagged in the report. Throws std::invalid_argument when context.spaces is
// null or the Examples variant lacks a usable exemplar pool.
std::vector<PromptInstance> build_prompts(const UnifiedSample& sample, SchemaVariant variant,
                                          const PromptContext& context,
                                          PromptBuildReport* report = nullptr);

// build_prompts over the listed sample ids, in sorted id order. Unknown ids
// throw std::runtime_error.
std::vector<PromptInstance> build_prompt_set(const Corpus& corpus,
                                             const std::vector<std::string>& ids,
                                             SchemaVariant variant, const PromptContext& context,
                                             PromptBuildReport* report = nullptr);

// --- serialization ------------------------------------------------------

// Record shape of the prompts artifact; one JSON object per line with
// exactly these keys.
struct PromptRecord {
  std::string sample_id;
  size_t query_unit_id = 0;
  std::string variant;
  std::string prompt_text;
  std::string gold_answer_text;

  bool operator==(const PromptRecord&) const = default;
};

void write_prompts_jsonl(const std::vector<PromptInstance>& prompts, const std::string& path);
std::vector<PromptRecord> read_prompts_jsonl(const std::string& path);

}  // namespace t2s
