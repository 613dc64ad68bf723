#include "t2s/schema.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "t2s/rng.hpp"
#include "t2s/text.hpp"

namespace t2s {
namespace {

using nlohmann::json;

constexpr const char* kNoneSentinel = "none";

std::string join(const std::vector<std::string>& parts, const std::string& sep) {
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i > 0) out += sep;
    out += parts[i];
  }
  return out;
}

std::string escape_value(const std::string& value) {
  std::string out;
  for (const char c : value) {
    if (c == '\\' || c == '|') out += '\\';
    out += c;
  }
  return out;
}

std::string unescape_value(const std::string& value) {
  std::string out;
  for (size_t i = 0; i < value.size(); ++i) {
    if (value[i] == '\\' && i + 1 < value.size()) i += 1;
    out += value[i];
  }
  return out;
}

// Splits on unescaped "|" while keeping escape sequences intact for a later
// unescape_value pass.
std::vector<std::string> split_unescaped_pipes(const std::string& text) {
  std::vector<std::string> segments(1);
  for (size_t i = 0; i < text.size(); ++i) {
    if (text[i] == '\\' && i + 1 < text.size()) {
      segments.back() += text[i];
      segments.back() += text[i + 1];
      i += 1;
    } else if (text[i] == '|') {
      segments.emplace_back();
    } else {
      segments.back() += text[i];
    }
  }
  return segments;
}

}  // namespace

std::string schema_variant_name(SchemaVariant variant) {
  switch (variant) {
    case SchemaVariant::NoExplanations: return "no_explanations";
    case SchemaVariant::PotentialChoices: return "potential_choices";
    case SchemaVariant::Examples: return "examples";
    case SchemaVariant::TaskSchema: return "task_schema";
  }
  throw std::logic_error("unreachable schema variant");
}

std::optional<SchemaVariant> parse_schema_variant(const std::string& name) {
  for (const SchemaVariant variant : kAllSchemaVariants) {
    if (schema_variant_name(variant) == name) return variant;
  }
  return std::nullopt;
}

AnswerSchema answer_schema_for(TaskKind kind, const LabelSpaceSet& spaces) {
  const auto it = spaces.find(kind);
  LabelSpace domain = it != spaces.end() ? it->second : LabelSpace{kind, {}, false};

  AnswerSchema schema;
  schema.task_kind = kind;
  const auto free_field = [](const std::string& name) { return SchemaField{name, false, {}}; };
  const auto class_field = [&domain](const std::string& name) {
    return SchemaField{name, true, domain};
  };
  switch (kind) {
    case TaskKind::Ner:
      schema.fields = {free_field("entity"), class_field("type")};
      break;
    case TaskKind::RelationClassification:
      schema.fields = {free_field("head"), free_field("tail"), class_field("relation")};
      break;
    case TaskKind::EventArgumentExtraction:
      schema.fields = {free_field("trigger"), free_field("argument"), class_field("role")};
      break;
    case TaskKind::ParagraphClassification:
    case TaskKind::SentenceClassification:
      schema.fields = {class_field("label")};
      break;
    case TaskKind::SynthesisActionRetrieval:
      schema.fields = {free_field("token"), class_field("action")};
      break;
    case TaskKind::SlotFilling:
      schema.fields = {free_field("slot"), class_field("type")};
      break;
  }
  return schema;
}

size_t class_field_index(const AnswerSchema& schema) {
  for (size_t i = 0; i < schema.fields.size(); ++i) {
    if (schema.fields[i].is_class) return i;
  }
  throw std::logic_error("answer schema without a class field");
}

std::string serialize_answer(const AnswerUnit& unit, const AnswerSchema& schema) {
  if (unit.values.size() != schema.fields.size()) {
    throw std::invalid_argument("answer has " + std::to_string(unit.values.size()) +
                                " values for a " + std::to_string(schema.fields.size()) +
                                "-field schema");
  }
  std::vector<std::string> parts;
  for (size_t i = 0; i < schema.fields.size(); ++i) {
    const SchemaField& field = schema.fields[i];
    const std::string& value = unit.values[i];
    if (field.is_class && value != kNoneSentinel && !field.domain.contains(value)) {
      throw std::invalid_argument("label outside domain for field " + field.name + ": \"" + value +
                                  "\"");
    }
    parts.push_back(field.name + ": " + escape_value(value));
  }
  return join(parts, " | ");
}

std::optional<AnswerUnit> parse_answer(const std::string& text, const AnswerSchema& schema) {
  std::vector<std::string> segments = split_unescaped_pipes(text);
  if (segments.size() != schema.fields.size()) return std::nullopt;

  AnswerUnit unit;
  for (size_t i = 0; i < segments.size(); ++i) {
    std::string segment = segments[i];
    // The separator is exactly " | ": one space each side belongs to it.
    if (i > 0) {
      if (segment.empty() || segment.front() != ' ') return std::nullopt;
      segment.erase(segment.begin());
    }
    if (i + 1 < segments.size()) {
      if (segment.empty() || segment.back() != ' ') return std::nullopt;
      segment.pop_back();
    }
    const std::string prefix = schema.fields[i].name + ": ";
    if (!starts_with(segment, prefix)) return std::nullopt;
    unit.values.push_back(unescape_value(segment.substr(prefix.size())));
  }
  return unit;
}

std::vector<std::pair<std::string, std::string>> scan_answer_pairs(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> pairs;
  for (const std::string& segment : split_unescaped_pipes(text)) {
    const auto colon = segment.find(':');
    if (colon == std::string::npos) {
      pairs.emplace_back("", trim(unescape_value(segment)));
    } else {
      pairs.emplace_back(trim(segment.substr(0, colon)),
                         trim(unescape_value(segment.substr(colon + 1))));
    }
  }
  return pairs;
}

AnswerUnit empty_unit(const AnswerSchema& schema) {
  AnswerUnit unit;
  unit.values.assign(schema.fields.size(), kNoneSentinel);
  return unit;
}

std::vector<QueryUnit> query_units(const UnifiedSample& sample) {
  std::vector<QueryUnit> units;
  const auto add = [&units](AnswerUnit answer, std::map<std::string, std::string> placeholders) {
    units.push_back(QueryUnit{units.size(), std::move(answer), std::move(placeholders)});
  };

  if (const auto* ner = std::get_if<NerPayload>(&sample.payload)) {
    for (const SpanAnnotation& span : ner->entities) {
      add(AnswerUnit{{span.surface, span.label}}, {{"entity", span.surface}});
    }
  } else if (const auto* relation = std::get_if<RelationPayload>(&sample.payload)) {
    add(AnswerUnit{{relation->head.surface, relation->tail.surface, relation->relation}},
        {{"head", relation->head.surface}, {"tail", relation->tail.surface}});
  } else if (const auto* event = std::get_if<EventPayload>(&sample.payload)) {
    for (const SpanAnnotation& argument : event->arguments) {
      add(AnswerUnit{{event->trigger.surface, argument.surface, argument.label}},
          {{"trigger", event->trigger.surface}, {"argument", argument.surface}});
    }
  } else if (const auto* text_label = std::get_if<TextLabelPayload>(&sample.payload)) {
    add(AnswerUnit{{text_label->label}}, {});
  } else if (const auto* sar = std::get_if<SarPayload>(&sample.payload)) {
    for (const SpanAnnotation& action : sar->actions) {
      add(AnswerUnit{{action.surface, action.label}}, {{"token", action.surface}});
    }
  } else if (const auto* slot = std::get_if<SlotPayload>(&sample.payload)) {
    for (const SpanAnnotation& filler : slot->slots) {
      add(AnswerUnit{{filler.surface, filler.label}},
          {{"frame", slot->frame_id}, {"slot", filler.surface}});
    }
  }
  return units;
}

// --- templates ----------------------------------------------------------

namespace {

// Byte-for-byte copy of templates/prompts_v1.txt; a test pins the two
// against each other.
constexpr const char kBuiltinTemplateText[] =
    R"TPL(# Prompt templates. "[name]" starts a block; the block runs until the next
# header, with trailing blank lines stripped. "{name}" placeholders are
# substituted at render time. The [frame] block fixes the four-part prompt
# structure; {instruction} is empty or one rendered instruction block plus
# its newline.

[version]
prompts_v1

[frame]
Text: {text}
Description: {description}
{instruction}Answer:

[options]
Options: {choices}

[example]
Example: text: {example_text} answer: {example_answer}

[schema]
Schema: {schema}

[description.ner]
Task named entity recognition. Decide the entity type of the span "{entity}".

[description.relation_classification]
Task relation classification. Decide the relation between "{head}" and "{tail}".

[description.event_argument_extraction]
Task event argument extraction. For the event triggered by "{trigger}", decide the role of the argument "{argument}".

[description.paragraph_classification]
Task paragraph classification. Decide whether the paragraph is about glass science.

[description.synthesis_action_retrieval]
Task synthesis action retrieval. Decide the synthesis action of the word "{token}".

[description.sentence_classification]
Task sentence classification. Decide whether the sentence describes an experiment.

[description.slot_filling]
Task slot filling. For experiment frame "{frame}", decide the slot type of the filler "{slot}".
)TPL";

std::map<std::string, std::string> parse_template_blocks(const std::string& text) {
  std::map<std::string, std::string> blocks;
  std::string name;
  std::vector<std::string> body;

  const auto flush = [&blocks, &name, &body]() {
    if (name.empty()) return;
    while (!body.empty() && body.back().empty()) body.pop_back();
    blocks[name] = join(body, "\n");
    body.clear();
  };

  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.size() >= 2 && line.front() == '[' && line.back() == ']') {
      flush();
      name = line.substr(1, line.size() - 2);
    } else if (!name.empty()) {
      body.push_back(line);
    }
    // Preamble lines before the first block header are comments.
  }
  flush();
  return blocks;
}

}  // namespace

TemplateSet::TemplateSet(std::map<std::string, std::string> blocks) : blocks_(std::move(blocks)) {
  std::vector<std::string> required = {"version", "frame", "options", "example", "schema"};
  for (const TaskKind kind : kAllTaskKinds) required.push_back("description." + task_kind_name(kind));
  for (const auto& block : required) {
    if (blocks_.count(block) == 0) {
      throw std::runtime_error("template set is missing block [" + block + "]");
    }
  }
  version_ = blocks_.at("version");
}

TemplateSet TemplateSet::builtin() { return TemplateSet(parse_template_blocks(builtin_text())); }

const std::string& TemplateSet::builtin_text() {
  static const std::string text = kBuiltinTemplateText;
  return text;
}

TemplateSet TemplateSet::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read template file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return TemplateSet(parse_template_blocks(buf.str()));
}

std::string TemplateSet::render(const std::string& block,
                                const std::map<std::string, std::string>& values) const {
  const auto it = blocks_.find(block);
  if (it == blocks_.end()) throw std::runtime_error("unknown template block [" + block + "]");

  const std::string& tpl = it->second;
  std::string out;
  for (size_t i = 0; i < tpl.size(); ++i) {
    if (tpl[i] != '{') {
      out += tpl[i];
      continue;
    }
    const auto close = tpl.find('}', i);
    if (close == std::string::npos) {
      throw std::runtime_error("unterminated placeholder in block [" + block + "]");
    }
    const std::string placeholder = tpl.substr(i + 1, close - i - 1);
    const auto value = values.find(placeholder);
    if (value == values.end()) {
      throw std::runtime_error("unresolved placeholder {" + placeholder + "} in block [" + block +
                               "]");
    }
    out += value->second;
    i = close;
  }
  return out;
}

// --- prompt building ----------------------------------------------------

namespace {

std::string render_schema_line(const AnswerSchema& schema) {
  std::vector<std::string> parts;
  for (const SchemaField& field : schema.fields) {
    if (field.is_class) {
      parts.push_back(field.name + ": one of {" + join(field.domain.labels, ", ") + "}");
    } else {
      parts.push_back(field.name + ": <span from the text>");
    }
  }
  return join(parts, " | ");
}

struct ExemplarCandidate {
  const UnifiedSample* sample = nullptr;
  std::vector<QueryUnit> units;
};

std::vector<ExemplarCandidate> exemplar_candidates(const UnifiedSample& sample,
                                                   const Corpus& pool) {
  std::vector<ExemplarCandidate> candidates;
  for (const UnifiedSample& other : pool) {
    if (other.task_kind != sample.task_kind || other.sample_id == sample.sample_id) continue;
    std::vector<QueryUnit> units = query_units(other);
    if (units.empty()) continue;
    candidates.push_back(ExemplarCandidate{&other, std::move(units)});
  }
  return candidates;
}

std::string assemble_prompt(const TemplateSet& templates, const std::string& text,
                            const std::string& description, const std::string& instruction) {
  return templates.render(
      "frame", {{"text", text}, {"description", description}, {"instruction", instruction}});
}

}  // namespace

std::vector<PromptInstance> build_prompts(const UnifiedSample& sample, SchemaVariant variant,
                                          const PromptContext& context,
                                          PromptBuildReport* report) {
  if (context.spaces == nullptr) {
    throw std::invalid_argument("prompt context requires a label space set");
  }
  static const TemplateSet fallback = TemplateSet::builtin();
  const TemplateSet& templates = context.templates != nullptr ? *context.templates : fallback;

  const AnswerSchema schema = answer_schema_for(sample.task_kind, *context.spaces);
  const std::vector<QueryUnit> units = query_units(sample);
  if (units.empty()) {
    if (report != nullptr) report->zero_unit_samples.push_back(sample.sample_id);
    return {};
  }

  std::vector<ExemplarCandidate> candidates;
  Rng exemplar_rng(derive_seed(context.seed, "exemplar:" + sample.sample_id));
  if (variant == SchemaVariant::Examples) {
    if (context.exemplar_pool == nullptr) {
      throw std::invalid_argument("Examples variant requires an exemplar pool");
    }
    candidates = exemplar_candidates(sample, *context.exemplar_pool);
    if (candidates.empty()) {
      throw std::invalid_argument("no exemplar available for task " +
                                  task_kind_name(sample.task_kind));
    }
  }

  std::vector<PromptInstance> prompts;
  for (const QueryUnit& unit : units) {
    const std::string description =
        templates.render("description." + task_kind_name(sample.task_kind), unit.placeholders);

    std::string instruction;
    switch (variant) {
      case SchemaVariant::NoExplanations:
        break;
      case SchemaVariant::PotentialChoices: {
        const LabelSpace& domain = schema.fields[class_field_index(schema)].domain;
        instruction = templates.render("options", {{"choices", join(domain.labels, ", ")}}) + "\n";
        break;
      }
      case SchemaVariant::Examples: {
        const ExemplarCandidate& pick = candidates[exemplar_rng.below(candidates.size())];
        const QueryUnit& exemplar_unit = pick.units[exemplar_rng.below(pick.units.size())];
        instruction =
            templates.render("example",
                             {{"example_text", pick.sample->text},
                              {"example_answer", serialize_answer(exemplar_unit.answer, schema)}}) +
            "\n";
        break;
      }
      case SchemaVariant::TaskSchema:
        instruction = templates.render("schema", {{"schema", render_schema_line(schema)}}) + "\n";
        break;
    }

    std::string prompt = assemble_prompt(templates, sample.text, description, instruction);
    if (context.budget.max_tokens > 0 && context.budget.count_tokens) {
      // Only the shared text shrinks; instruction sections are load-bearing.
      std::vector<std::string> words = split_whitespace(sample.text);
      while (context.budget.count_tokens(prompt) > context.budget.max_tokens && words.size() > 1) {
        words.pop_back();
        prompt = assemble_prompt(templates, join(words, " "), description, instruction);
      }
    }

    PromptInstance instance;
    instance.prompt_text = std::move(prompt);
    instance.gold_answer_text = serialize_answer(unit.answer, schema);
    instance.answer_schema = schema;
    instance.sample_id = sample.sample_id;
    instance.query_unit_id = unit.unit_id;
    instance.task_kind = sample.task_kind;
    instance.variant = variant;
    prompts.push_back(std::move(instance));
  }
  if (report != nullptr) report->prompts += prompts.size();
  return prompts;
}

std::vector<PromptInstance> build_prompt_set(const Corpus& corpus,
                                             const std::vector<std::string>& ids,
                                             SchemaVariant variant, const PromptContext& context,
                                             PromptBuildReport* report) {
  std::map<std::string, const UnifiedSample*> by_id;
  for (const UnifiedSample& sample : corpus) by_id[sample.sample_id] = &sample;

  std::vector<std::string> sorted_ids = ids;
  std::sort(sorted_ids.begin(), sorted_ids.end());

  std::vector<PromptInstance> prompts;
  for (const std::string& id : sorted_ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw std::runtime_error("unknown sample id: " + id);
    std::vector<PromptInstance> built = build_prompts(*it->second, variant, context, report);
    std::move(built.begin(), built.end(), std::back_inserter(prompts));
  }
  return prompts;
}

void write_prompts_jsonl(const std::vector<PromptInstance>& prompts, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write prompts file: " + path);
  for (const PromptInstance& prompt : prompts) {
    json record;
    record["sample_id"] = prompt.sample_id;
    record["query_unit_id"] = prompt.query_unit_id;
    record["variant"] = schema_variant_name(prompt.variant);
    record["prompt_text"] = prompt.prompt_text;
    record["gold_answer_text"] = prompt.gold_answer_text;
    out << record.dump() << "\n";
  }
}

std::vector<PromptRecord> read_prompts_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read prompts file: " + path);
  std::vector<PromptRecord> records;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    line_no += 1;
    if (trim(line).empty()) continue;
    const json record = json::parse(line, nullptr, false);
    if (!record.is_object() || record.size() != 5) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": malformed prompt record");
    }
    PromptRecord out;
    out.sample_id = record.at("sample_id").get<std::string>();
    out.query_unit_id = record.at("query_unit_id").get<size_t>();
    out.variant = record.at("variant").get<std::string>();
    out.prompt_text = record.at("prompt_text").get<std::string>();
    out.gold_answer_text = record.at("gold_answer_text").get<std::string>();
    records.push_back(std::move(out));
  }
  return records;
}

}  // namespace t2s
