#include "t2s/ingest.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "t2s/text.hpp"

namespace t2s {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read input file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Sorted relative traversal keeps sample order, and therefore assigned ids,
// independent of directory enumeration order.
std::vector<std::string> list_files(const std::string& dir, const std::string& extension) {
  if (!fs::exists(dir)) throw std::runtime_error("input directory does not exist: " + dir);
  std::vector<std::string> paths;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == extension) {
      paths.push_back(entry.path().string());
    }
  }
  std::sort(paths.begin(), paths.end());
  return paths;
}

void log_record(IngestReport& report, const std::string& file, size_t record,
                const std::string& message) {
  report.skipped += 1;
  report.violations.push_back(file + ":" + std::to_string(record) + ": " + message);
}

// Builds the span for [start, end) of text, with the surface taken from the
// text itself so slice agreement holds by construction. Returns false for
// out-of-range or empty spans; the caller skips the record.
bool slice_span(const std::string& text, size_t start, size_t end, const std::string& label,
                SpanAnnotation& out) {
  if (start >= end || end > text.size()) return false;
  out = SpanAnnotation{start, end, text.substr(start, end - start), normalize_label(label)};
  return true;
}

// Runs `body` per line of a .jsonl file; a line that fails to parse as a JSON
// object is skipped and logged, any other exception from `body` likewise.
template <typename Body>
void for_each_jsonl_record(const std::string& path, IngestReport& report, Body body) {
  std::istringstream lines(read_file(path));
  std::string line;
  size_t line_no = 0;
  while (std::getline(lines, line)) {
    line_no += 1;
    if (trim(line).empty()) continue;
    json record = json::parse(line, nullptr, false);
    if (!record.is_object()) {
      log_record(report, path, line_no, "not a JSON object");
      continue;
    }
    try {
      body(record);
    } catch (const std::exception& e) {
      log_record(report, path, line_no, e.what());
    }
  }
}

UnifiedSample make_sample(const std::string& source, TaskKind kind, std::string text,
                          SamplePayload payload) {
  UnifiedSample sample;
  sample.source_id = source;
  sample.task_kind = kind;
  sample.text = std::move(text);
  sample.payload = std::move(payload);
  return sample;
}

// --- matscholar: NER over abstracts -------------------------------------
//
// abstracts.jsonl, one object per line:
//   {"doc_id": ..., "text": ..., "entities": [{"start", "end", "label"}]}

class MatscholarAdapter : public SourceAdapter {
 public:
  std::string source_id() const override { return "matscholar"; }
  std::set<TaskKind> task_kinds() const override { return {TaskKind::Ner}; }
  std::string input_layout() const override {
    return "*.jsonl with {doc_id, text, entities:[{start, end, label}]} per line";
  }

 protected:
  void parse(const std::string& dir, Corpus& out, IngestReport& report) const override {
    for (const auto& path : list_files(dir, ".jsonl")) {
      for_each_jsonl_record(path, report, [&](const json& record) {
        const std::string text = record.at("text").get<std::string>();
        NerPayload payload;
        for (const auto& entity : record.at("entities")) {
          SpanAnnotation span;
          if (!slice_span(text, entity.at("start").get<size_t>(), entity.at("end").get<size_t>(),
                          entity.at("label").get<std::string>(), span)) {
            throw std::runtime_error("entity span out of range");
          }
          payload.entities.push_back(std::move(span));
        }
        out.push_back(make_sample(source_id(), TaskKind::Ner, text, std::move(payload)));
      });
    }
  }
};

// --- sofc: sentence classification, NER, and slot filling ---------------
//
// *.json with:
//   {"documents": [{"doc_id", "sentences": [{"text", "experiment_describing",
//     "entities": [...], "frame_id"?, "slots": [{"start", "end", "slot"}]}]}]}
//
// Every sentence yields a sentence-classification sample; sentences with
// entities also yield a NER sample, and sentences with a frame a slot sample
// (a frame with no filled slots is still a sample).

class SofcAdapter : public SourceAdapter {
 public:
  std::string source_id() const override { return "sofc"; }
  std::set<TaskKind> task_kinds() const override {
    return {TaskKind::Ner, TaskKind::SentenceClassification, TaskKind::SlotFilling};
  }
  std::string input_layout() const override {
    return "*.json with {documents:[{doc_id, sentences:[...]}]} (see adapter)";
  }
  LabelSpaceSet declared_spaces() const override {
    LabelSpaceSet spaces;
    spaces[TaskKind::SentenceClassification] =
        make_label_space(TaskKind::SentenceClassification, {"experiment", "non_experiment"});
    return spaces;
  }

 protected:
  void parse(const std::string& dir, Corpus& out, IngestReport& report) const override {
    for (const auto& path : list_files(dir, ".json")) {
      json root = json::parse(read_file(path), nullptr, false);
      if (!root.is_object() || !root.contains("documents")) {
        log_record(report, path, 0, "not a document collection");
        continue;
      }
      size_t record = 0;
      for (const auto& doc : root.at("documents")) {
        for (const auto& sentence : doc.at("sentences")) {
          record += 1;
          try {
            parse_sentence(sentence, out);
          } catch (const std::exception& e) {
            log_record(report, path, record, e.what());
          }
        }
      }
    }
  }

 private:
  void parse_sentence(const json& sentence, Corpus& out) const {
    const std::string text = sentence.at("text").get<std::string>();
    const bool experimental = sentence.at("experiment_describing").get<bool>();
    out.push_back(make_sample(source_id(), TaskKind::SentenceClassification, text,
                              TextLabelPayload{experimental ? "experiment" : "non_experiment"}));

    NerPayload entities;
    for (const auto& entity : sentence.at("entities")) {
      SpanAnnotation span;
      if (!slice_span(text, entity.at("start").get<size_t>(), entity.at("end").get<size_t>(),
                      entity.at("label").get<std::string>(), span)) {
        throw std::runtime_error("entity span out of range");
      }
      entities.entities.push_back(std::move(span));
    }
    if (!entities.entities.empty()) {
      out.push_back(make_sample(source_id(), TaskKind::Ner, text, std::move(entities)));
    }

    if (sentence.contains("frame_id")) {
      SlotPayload frame;
      frame.frame_id = sentence.at("frame_id").get<std::string>();
      for (const auto& slot : sentence.at("slots")) {
        SpanAnnotation span;
        if (!slice_span(text, slot.at("start").get<size_t>(), slot.at("end").get<size_t>(),
                        slot.at("slot").get<std::string>(), span)) {
          throw std::runtime_error("slot span out of range");
        }
        frame.slots.push_back(std::move(span));
      }
      out.push_back(make_sample(source_id(), TaskKind::SlotFilling, text, std::move(frame)));
    }
  }
};

// --- synthesis_procedures: brat standoff over procedure paragraphs ------
//
// Pairs of {stem}.txt (raw text) and {stem}.ann with tab-separated lines:
//   T{n}<TAB>{Type} {start} {end}<TAB>{surface}      entity span
//   R{n}<TAB>{Relation} Arg1:T{i} Arg2:T{j}          binary relation
//   E{n}<TAB>{Type}:T{t} {Role}:T{a} ...             event with arguments
//
// Each document yields one NER sample over its T spans, one relation sample
// per R line, and one event sample per E line. Spans keep the surface column
// from the file; a mismatch against the text is caught by validation.

class SynthesisProceduresAdapter : public SourceAdapter {
 public:
  std::string source_id() const override { return "synthesis_procedures"; }
  std::set<TaskKind> task_kinds() const override {
    return {TaskKind::Ner, TaskKind::RelationClassification, TaskKind::EventArgumentExtraction};
  }
  std::string input_layout() const override {
    return "paired *.txt and *.ann files in brat standoff format";
  }

 protected:
  void parse(const std::string& dir, Corpus& out, IngestReport& report) const override {
    for (const auto& ann_path : list_files(dir, ".ann")) {
      const std::string txt_path = fs::path(ann_path).replace_extension(".txt").string();
      const std::string text = read_file(txt_path);
      parse_document(ann_path, text, out, report);
    }
  }

 private:
  void parse_document(const std::string& ann_path, const std::string& text, Corpus& out,
                      IngestReport& report) const {
    std::map<std::string, SpanAnnotation> spans;
    NerPayload entities;
    // Relation and event lines are resolved after all T lines are read;
    // brat does not require definition-before-use ordering.
    std::vector<std::pair<size_t, std::string>> deferred;

    std::istringstream lines(read_file(ann_path));
    std::string line;
    size_t line_no = 0;
    while (std::getline(lines, line)) {
      line_no += 1;
      if (trim(line).empty()) continue;
      if (line[0] == 'T') {
        SpanAnnotation span;
        std::string id;
        if (!parse_entity_line(line, id, span) || span.end > text.size()) {
          log_record(report, ann_path, line_no, "malformed entity line");
          continue;
        }
        spans[id] = span;
        entities.entities.push_back(span);
      } else if (line[0] == 'R' || line[0] == 'E') {
        deferred.emplace_back(line_no, line);
      } else {
        log_record(report, ann_path, line_no, "unsupported annotation line");
      }
    }

    if (!entities.entities.empty()) {
      out.push_back(make_sample(source_id(), TaskKind::Ner, text, std::move(entities)));
    }
    for (const auto& [no, deferred_line] : deferred) {
      try {
        if (deferred_line[0] == 'R') {
          out.push_back(make_sample(source_id(), TaskKind::RelationClassification, text,
                                    parse_relation_line(deferred_line, spans)));
        } else {
          out.push_back(make_sample(source_id(), TaskKind::EventArgumentExtraction, text,
                                    parse_event_line(deferred_line, spans)));
        }
      } catch (const std::exception& e) {
        log_record(report, ann_path, no, e.what());
      }
    }
  }

  // "T1<TAB>Material 0 5<TAB>BaCl2"; discontinuous spans are unsupported.
  static bool parse_entity_line(const std::string& line, std::string& id, SpanAnnotation& span) {
    const auto tab1 = line.find('\t');
    const auto tab2 = line.find('\t', tab1 + 1);
    if (tab1 == std::string::npos || tab2 == std::string::npos) return false;
    id = line.substr(0, tab1);
    const auto fields = split_whitespace(line.substr(tab1 + 1, tab2 - tab1 - 1));
    if (fields.size() != 3 || fields[1].find(';') != std::string::npos) return false;
    try {
      span.start = std::stoul(fields[1]);
      span.end = std::stoul(fields[2]);
    } catch (const std::exception&) {
      return false;
    }
    if (span.start >= span.end) return false;
    span.label = normalize_label(fields[0]);
    span.surface = line.substr(tab2 + 1);
    return true;
  }

  // "R1<TAB>Condition_of Arg1:T3 Arg2:T4"
  static RelationPayload parse_relation_line(const std::string& line,
                                             const std::map<std::string, SpanAnnotation>& spans) {
    const auto tab = line.find('\t');
    const auto fields = split_whitespace(tab == std::string::npos ? "" : line.substr(tab + 1));
    if (fields.size() != 3) throw std::runtime_error("malformed relation line");
    RelationPayload payload;
    payload.relation = normalize_label(fields[0]);
    payload.head = resolve(fields[1], "Arg1:", spans);
    payload.tail = resolve(fields[2], "Arg2:", spans);
    return payload;
  }

  // "E1<TAB>Operation:T3 Recipe_target:T1 Solvent_material:T2"
  static EventPayload parse_event_line(const std::string& line,
                                       const std::map<std::string, SpanAnnotation>& spans) {
    const auto tab = line.find('\t');
    const auto fields = split_whitespace(tab == std::string::npos ? "" : line.substr(tab + 1));
    if (fields.empty()) throw std::runtime_error("malformed event line");
    EventPayload payload;
    const auto [trigger_type, trigger_id] = split_role(fields[0]);
    payload.trigger = lookup(trigger_id, spans);
    payload.trigger.label = normalize_label(trigger_type);
    for (size_t i = 1; i < fields.size(); ++i) {
      const auto [role, span_id] = split_role(fields[i]);
      SpanAnnotation argument = lookup(span_id, spans);
      argument.label = normalize_label(role);
      payload.arguments.push_back(std::move(argument));
    }
    return payload;
  }

  static std::pair<std::string, std::string> split_role(const std::string& field) {
    const auto colon = field.find(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == field.size()) {
      throw std::runtime_error("malformed role reference: " + field);
    }
    return {field.substr(0, colon), field.substr(colon + 1)};
  }

  static SpanAnnotation resolve(const std::string& field, const std::string& prefix,
                                const std::map<std::string, SpanAnnotation>& spans) {
    if (!starts_with(field, prefix)) throw std::runtime_error("malformed argument: " + field);
    return lookup(field.substr(prefix.size()), spans);
  }

  static SpanAnnotation lookup(const std::string& id,
                               const std::map<std::string, SpanAnnotation>& spans) {
    const auto it = spans.find(id);
    if (it == spans.end()) throw std::runtime_error("undefined span reference: " + id);
    return it->second;
  }
};

// --- supercon: NER, relations, and events over abstracts ----------------
//
// docs.jsonl, one object per line:
//   {"doc_id", "text", "spans": [[start, end, label], ...],
//    "relations": [[head_index, tail_index, relation], ...],
//    "events": [{"trigger": index, "args": [[index, role], ...]}]}
// Relation and event members index into the spans array.

class SuperconAdapter : public SourceAdapter {
 public:
  std::string source_id() const override { return "supercon"; }
  std::set<TaskKind> task_kinds() const override {
    return {TaskKind::Ner, TaskKind::RelationClassification, TaskKind::EventArgumentExtraction};
  }
  std::string input_layout() const override {
    return "*.jsonl with {doc_id, text, spans, relations, events} per line";
  }

 protected:
  void parse(const std::string& dir, Corpus& out, IngestReport& report) const override {
    for (const auto& path : list_files(dir, ".jsonl")) {
      for_each_jsonl_record(path, report, [&](const json& record) {
        const std::string text = record.at("text").get<std::string>();
        std::vector<SpanAnnotation> spans;
        for (const auto& entry : record.at("spans")) {
          SpanAnnotation span;
          if (!slice_span(text, entry.at(0).get<size_t>(), entry.at(1).get<size_t>(),
                          entry.at(2).get<std::string>(), span)) {
            throw std::runtime_error("span out of range");
          }
          spans.push_back(std::move(span));
        }
        if (!spans.empty()) {
          out.push_back(make_sample(source_id(), TaskKind::Ner, text, NerPayload{spans}));
        }
        for (const auto& entry : record.at("relations")) {
          RelationPayload payload;
          payload.head = spans.at(entry.at(0).get<size_t>());
          payload.tail = spans.at(entry.at(1).get<size_t>());
          payload.relation = normalize_label(entry.at(2).get<std::string>());
          out.push_back(
              make_sample(source_id(), TaskKind::RelationClassification, text, std::move(payload)));
        }
        for (const auto& entry : record.at("events")) {
          EventPayload payload;
          payload.trigger = spans.at(entry.at("trigger").get<size_t>());
          for (const auto& argument : entry.at("args")) {
            SpanAnnotation span = spans.at(argument.at(0).get<size_t>());
            span.label = normalize_label(argument.at(1).get<std::string>());
            payload.arguments.push_back(std::move(span));
          }
          out.push_back(
              make_sample(source_id(), TaskKind::EventArgumentExtraction, text, std::move(payload)));
        }
      });
    }
  }
};

// --- glass_papers: paragraph classification -----------------------------
//
// *.csv with header "id,label,text"; the text field may be double-quoted
// with embedded commas and doubled quotes.

class GlassPapersAdapter : public SourceAdapter {
 public:
  std::string source_id() const override { return "glass_papers"; }
  std::set<TaskKind> task_kinds() const override { return {TaskKind::ParagraphClassification}; }
  std::string input_layout() const override { return "*.csv with header id,label,text"; }

 protected:
  void parse(const std::string& dir, Corpus& out, IngestReport& report) const override {
    for (const auto& path : list_files(dir, ".csv")) {
      std::istringstream lines(read_file(path));
      std::string line;
      size_t line_no = 0;
      while (std::getline(lines, line)) {
        line_no += 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line_no == 1 || trim(line).empty()) continue;
        const auto fields = parse_csv_row(line);
        if (fields.size() != 3 || fields[2].empty()) {
          log_record(report, path, line_no, "malformed row");
          continue;
        }
        out.push_back(make_sample(source_id(), TaskKind::ParagraphClassification, fields[2],
                                  TextLabelPayload{normalize_label(fields[1])}));
      }
    }
  }

 private:
  static std::vector<std::string> parse_csv_row(const std::string& line) {
    std::vector<std::string> fields(1);
    bool quoted = false;
    for (size_t i = 0; i < line.size(); ++i) {
      const char c = line[i];
      if (quoted) {
        if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
          fields.back() += '"';
          i += 1;
        } else if (c == '"') {
          quoted = false;
        } else {
          fields.back() += c;
        }
      } else if (c == '"') {
        quoted = true;
      } else if (c == ',') {
        fields.emplace_back();
      } else {
        fields.back() += c;
      }
    }
    return fields;
  }
};

// --- sar_corpus: synthesis action retrieval -----------------------------
//
// actions.jsonl, one object per line:
//   {"sentence_id", "text", "actions": [[start, end, action], ...]}
// The action inventory is fixed by the dataset definition.

class SarCorpusAdapter : public SourceAdapter {
 public:
  std::string source_id() const override { return "sar_corpus"; }
  std::set<TaskKind> task_kinds() const override { return {TaskKind::SynthesisActionRetrieval}; }
  std::string input_layout() const override {
    return "*.jsonl with {sentence_id, text, actions:[[start, end, action]]} per line";
  }
  LabelSpaceSet declared_spaces() const override {
    LabelSpaceSet spaces;
    spaces[TaskKind::SynthesisActionRetrieval] =
        make_label_space(TaskKind::SynthesisActionRetrieval,
                         {"add", "cool", "dry", "heat", "mix", "purify", "react", "shape"});
    return spaces;
  }

 protected:
  void parse(const std::string& dir, Corpus& out, IngestReport& report) const override {
    for (const auto& path : list_files(dir, ".jsonl")) {
      for_each_jsonl_record(path, report, [&](const json& record) {
        const std::string text = record.at("text").get<std::string>();
        SarPayload payload;
        for (const auto& entry : record.at("actions")) {
          SpanAnnotation span;
          if (!slice_span(text, entry.at(0).get<size_t>(), entry.at(1).get<size_t>(),
                          entry.at(2).get<std::string>(), span)) {
            throw std::runtime_error("action span out of range");
          }
          payload.actions.push_back(std::move(span));
        }
        out.push_back(
            make_sample(source_id(), TaskKind::SynthesisActionRetrieval, text, std::move(payload)));
      });
    }
  }
};

// --- matscire: relation classification over entity pairs ----------------
//
// *.jsonl with {"pair_id", "text", "head": [start, end], "tail": [start, end],
// "relation"} per line; one sample per record.

class MatscireAdapter : public SourceAdapter {
 public:
  std::string source_id() const override { return "matscire"; }
  std::set<TaskKind> task_kinds() const override { return {TaskKind::RelationClassification}; }
  std::string input_layout() const override {
    return "*.jsonl with {pair_id, text, head, tail, relation} per line";
  }

 protected:
  void parse(const std::string& dir, Corpus& out, IngestReport& report) const override {
    for (const auto& path : list_files(dir, ".jsonl")) {
      for_each_jsonl_record(path, report, [&](const json& record) {
        const std::string text = record.at("text").get<std::string>();
        RelationPayload payload;
        if (!slice_span(text, record.at("head").at(0).get<size_t>(),
                        record.at("head").at(1).get<size_t>(), "head", payload.head) ||
            !slice_span(text, record.at("tail").at(0).get<size_t>(),
                        record.at("tail").at(1).get<size_t>(), "tail", payload.tail)) {
          throw std::runtime_error("argument span out of range");
        }
        payload.relation = normalize_label(record.at("relation").get<std::string>());
        out.push_back(
            make_sample(source_id(), TaskKind::RelationClassification, text, std::move(payload)));
      });
    }
  }
};

}  // namespace

IngestReport ingest(const SourceAdapter& adapter, const std::string& input_dir, Corpus& out) {
  IngestReport report;
  Corpus parsed;
  adapter.parse(input_dir, parsed, report);

  const LabelSpaceSet declared = adapter.declared_spaces();
  size_t index = 0;
  for (auto& sample : parsed) {
    // Zero-padded running index keeps lexicographic id order equal to
    // emission order, which downstream sorting relies on. The index only
    // advances for valid samples, so ids stay dense after skips.
    char id[16];
    std::snprintf(id, sizeof(id), "%06zu", index);
    sample.sample_id = adapter.source_id() + ":" + id;
    const ValidationResult check = validate_sample(sample, declared);
    if (!check.ok()) {
      report.skipped += 1;
      for (const auto& violation : check.violations) {
        report.violations.push_back(sample.sample_id + ": " + violation);
      }
      continue;
    }
    index += 1;
    report.samples_per_task[sample.task_kind] += 1;
    out.push_back(std::move(sample));
  }
  return report;
}

void AdapterRegistry::register_adapter(std::shared_ptr<SourceAdapter> adapter) {
  const std::string id = adapter->source_id();
  if (!adapters_.emplace(id, std::move(adapter)).second) {
    throw std::runtime_error("duplicate source adapter id: " + id);
  }
}

std::shared_ptr<SourceAdapter> AdapterRegistry::find(const std::string& id) const {
  const auto it = adapters_.find(id);
  return it == adapters_.end() ? nullptr : it->second;
}

std::vector<std::string> AdapterRegistry::ids() const {
  std::vector<std::string> out;
  for (const auto& [id, adapter] : adapters_) out.push_back(id);
  return out;
}

AdapterRegistry AdapterRegistry::with_builtin_sources() {
  AdapterRegistry registry;
  registry.register_adapter(std::make_shared<MatscholarAdapter>());
  registry.register_adapter(std::make_shared<SofcAdapter>());
  registry.register_adapter(std::make_shared<SynthesisProceduresAdapter>());
  registry.register_adapter(std::make_shared<SuperconAdapter>());
  registry.register_adapter(std::make_shared<GlassPapersAdapter>());
  registry.register_adapter(std::make_shared<SarCorpusAdapter>());
  registry.register_adapter(std::make_shared<MatscireAdapter>());
  return registry;
}

}  // namespace t2s
