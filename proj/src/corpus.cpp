#include "t2s/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "t2s/rng.hpp"
#include "t2s/text.hpp"

namespace t2s {

using nlohmann::json;

std::string task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::Ner: return "ner";
    case TaskKind::RelationClassification: return "relation_classification";
    case TaskKind::EventArgumentExtraction: return "event_argument_extraction";
    case TaskKind::ParagraphClassification: return "paragraph_classification";
    case TaskKind::SynthesisActionRetrieval: return "synthesis_action_retrieval";
    case TaskKind::SentenceClassification: return "sentence_classification";
    case TaskKind::SlotFilling: return "slot_filling";
  }
  return "ner";
}

std::optional<TaskKind> parse_task_kind(const std::string& name) {
  for (TaskKind kind : kAllTaskKinds) {
    if (task_kind_name(kind) == name) return kind;
  }
  return std::nullopt;
}

bool LabelSpace::contains(const std::string& normalized) const {
  return std::binary_search(labels.begin(), labels.end(), normalized);
}

LabelSpace make_label_space(TaskKind kind, std::vector<std::string> labels) {
  LabelSpace space;
  space.task_kind = kind;
  for (auto& l : labels) l = normalize_label(l);
  if (kind == TaskKind::Ner) labels.push_back("null");
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  labels.erase(std::remove(labels.begin(), labels.end(), std::string()), labels.end());
  space.labels = std::move(labels);
  space.includes_null = space.contains("null");
  return space;
}

namespace {

bool payload_matches_kind(const SamplePayload& payload, TaskKind kind) {
  switch (kind) {
    case TaskKind::Ner: return std::holds_alternative<NerPayload>(payload);
    case TaskKind::RelationClassification: return std::holds_alternative<RelationPayload>(payload);
    case TaskKind::EventArgumentExtraction: return std::holds_alternative<EventPayload>(payload);
    case TaskKind::ParagraphClassification:
    case TaskKind::SentenceClassification: return std::holds_alternative<TextLabelPayload>(payload);
    case TaskKind::SynthesisActionRetrieval: return std::holds_alternative<SarPayload>(payload);
    case TaskKind::SlotFilling: return std::holds_alternative<SlotPayload>(payload);
  }
  return false;
}

std::string nearest_labels(const std::string& normalized, const LabelSpace& space) {
  std::vector<std::pair<size_t, std::string>> ranked;
  ranked.reserve(space.labels.size());
  for (const auto& l : space.labels) ranked.emplace_back(levenshtein(normalized, l), l);
  std::sort(ranked.begin(), ranked.end());
  std::string out;
  const size_t count = std::min<size_t>(3, ranked.size());
  for (size_t i = 0; i < count; ++i) {
    if (i) out += ", ";
    out += ranked[i].second;
  }
  return out;
}

struct SpanChecker {
  const UnifiedSample& sample;
  const LabelSpace* space;  // null: skip label checks
  std::vector<std::string>& violations;

  void check(const SpanAnnotation& span, const std::string& what, bool check_label) const {
    if (span.start == span.end) {
      violations.push_back(what + ": empty span [" + std::to_string(span.start) + "," +
                           std::to_string(span.end) + ")");
      return;
    }
    if (span.start > span.end) {
      violations.push_back(what + ": inverted span");
      return;
    }
    if (span.end > sample.text.size()) {
      violations.push_back(what + ": span past end of text (end " + std::to_string(span.end) +
                           " > length " + std::to_string(sample.text.size()) + ")");
      return;
    }
    const std::string slice = sample.text.substr(span.start, span.end - span.start);
    if (slice != span.surface) {
      violations.push_back(what + ": surface mismatch (\"" + span.surface + "\" vs text slice \"" +
                           slice + "\")");
    }
    if (check_label) check_class_label(span.label, what);
  }

  void check_class_label(const std::string& label, const std::string& what) const {
    if (space == nullptr) return;
    const std::string normalized = normalize_label(label);
    if (normalized.empty()) {
      violations.push_back(what + ": empty label");
    } else if (!space->contains(normalized)) {
      violations.push_back(what + ": unknown label \"" + label + "\" (nearest: " +
                           nearest_labels(normalized, *space) + ")");
    }
  }
};

}  // namespace

ValidationResult validate_sample(const UnifiedSample& sample, const LabelSpaceSet& spaces) {
  ValidationResult result;
  if (sample.sample_id.empty()) result.violations.push_back("sample_id: empty");
  if (!payload_matches_kind(sample.payload, sample.task_kind)) {
    result.violations.push_back("payload: variant does not match task kind " +
                                task_kind_name(sample.task_kind));
    return result;
  }
  const auto space_it = spaces.find(sample.task_kind);
  const LabelSpace* space = space_it == spaces.end() ? nullptr : &space_it->second;
  SpanChecker checker{sample, space, result.violations};

  if (const auto* ner = std::get_if<NerPayload>(&sample.payload)) {
    for (size_t i = 0; i < ner->entities.size(); ++i)
      checker.check(ner->entities[i], "entity " + std::to_string(i), true);
  } else if (const auto* rel = std::get_if<RelationPayload>(&sample.payload)) {
    checker.check(rel->head, "head", false);
    checker.check(rel->tail, "tail", false);
    checker.check_class_label(rel->relation, "relation");
  } else if (const auto* event = std::get_if<EventPayload>(&sample.payload)) {
    checker.check(event->trigger, "trigger", false);
    for (size_t i = 0; i < event->arguments.size(); ++i)
      checker.check(event->arguments[i], "argument " + std::to_string(i), true);
  } else if (const auto* cls = std::get_if<TextLabelPayload>(&sample.payload)) {
    checker.check_class_label(cls->label, "label");
  } else if (const auto* sar = std::get_if<SarPayload>(&sample.payload)) {
    for (size_t i = 0; i < sar->actions.size(); ++i)
      checker.check(sar->actions[i], "action " + std::to_string(i), true);
  } else if (const auto* slot = std::get_if<SlotPayload>(&sample.payload)) {
    for (size_t i = 0; i < slot->slots.size(); ++i)
      checker.check(slot->slots[i], "slot " + std::to_string(i), true);
  }
  return result;
}

CorpusSplit make_split(const Corpus& corpus, uint64_t seed, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw std::invalid_argument("train fraction must be in (0,1), got " + std::to_string(fraction));
  }
  if (corpus.empty()) throw std::runtime_error("cannot split an empty corpus");

  std::map<TaskKind, std::vector<std::string>> by_kind;
  for (const auto& sample : corpus) by_kind[sample.task_kind].push_back(sample.sample_id);

  CorpusSplit split;
  split.seed = seed;
  split.train_fraction = fraction;
  for (auto& [kind, ids] : by_kind) {
    std::sort(ids.begin(), ids.end());
    Rng rng(derive_seed(seed, "split:" + task_kind_name(kind)));
    rng.shuffle(ids);
    const auto n = ids.size();
    size_t n_train = static_cast<size_t>(std::llround(fraction * static_cast<double>(n)));
    n_train = std::clamp<size_t>(n_train, 1, n);
    split.train_ids.insert(split.train_ids.end(), ids.begin(), ids.begin() + n_train);
    split.test_ids.insert(split.test_ids.end(), ids.begin() + n_train, ids.end());
  }
  std::sort(split.train_ids.begin(), split.train_ids.end());
  std::sort(split.test_ids.begin(), split.test_ids.end());
  return split;
}

std::vector<std::string> sample_class_labels(const UnifiedSample& sample) {
  std::vector<std::string> labels;
  if (const auto* ner = std::get_if<NerPayload>(&sample.payload)) {
    for (const auto& e : ner->entities) labels.push_back(e.label);
  } else if (const auto* rel = std::get_if<RelationPayload>(&sample.payload)) {
    labels.push_back(rel->relation);
  } else if (const auto* event = std::get_if<EventPayload>(&sample.payload)) {
    for (const auto& a : event->arguments) labels.push_back(a.label);
  } else if (const auto* cls = std::get_if<TextLabelPayload>(&sample.payload)) {
    labels.push_back(cls->label);
  } else if (const auto* sar = std::get_if<SarPayload>(&sample.payload)) {
    for (const auto& a : sar->actions) labels.push_back(a.label);
  } else if (const auto* slot = std::get_if<SlotPayload>(&sample.payload)) {
    for (const auto& s : slot->slots) labels.push_back(s.label);
  }
  return labels;
}

LabelSpace label_space_of(TaskKind kind, const Corpus& corpus) {
  std::vector<std::string> labels;
  bool seen = false;
  for (const auto& sample : corpus) {
    if (sample.task_kind != kind) continue;
    seen = true;
    auto more = sample_class_labels(sample);
    labels.insert(labels.end(), more.begin(), more.end());
  }
  if (!seen) throw std::runtime_error("no samples of task kind " + task_kind_name(kind));
  return make_label_space(kind, std::move(labels));
}

LabelSpaceSet label_spaces_of(const Corpus& corpus) {
  std::set<TaskKind> kinds;
  for (const auto& sample : corpus) kinds.insert(sample.task_kind);
  LabelSpaceSet spaces;
  for (TaskKind kind : kinds) spaces.emplace(kind, label_space_of(kind, corpus));
  return spaces;
}

namespace {

json span_to_json(const SpanAnnotation& span) {
  return json{{"start", span.start}, {"end", span.end}, {"surface", span.surface}, {"label", span.label}};
}

SpanAnnotation span_from_json(const json& j) {
  SpanAnnotation span;
  span.start = j.at("start").get<size_t>();
  span.end = j.at("end").get<size_t>();
  span.surface = j.at("surface").get<std::string>();
  span.label = j.value("label", std::string());
  return span;
}

json spans_to_json(const std::vector<SpanAnnotation>& spans) {
  json arr = json::array();
  for (const auto& s : spans) arr.push_back(span_to_json(s));
  return arr;
}

std::vector<SpanAnnotation> spans_from_json(const json& arr) {
  std::vector<SpanAnnotation> spans;
  for (const auto& j : arr) spans.push_back(span_from_json(j));
  return spans;
}

}  // namespace

std::string sample_to_json_line(const UnifiedSample& sample) {
  json payload;
  if (const auto* ner = std::get_if<NerPayload>(&sample.payload)) {
    payload = json{{"entities", spans_to_json(ner->entities)}};
  } else if (const auto* rel = std::get_if<RelationPayload>(&sample.payload)) {
    payload = json{{"head", span_to_json(rel->head)},
                   {"tail", span_to_json(rel->tail)},
                   {"relation", rel->relation}};
  } else if (const auto* event = std::get_if<EventPayload>(&sample.payload)) {
    payload = json{{"trigger", span_to_json(event->trigger)},
                   {"arguments", spans_to_json(event->arguments)}};
  } else if (const auto* cls = std::get_if<TextLabelPayload>(&sample.payload)) {
    payload = json{{"label", cls->label}};
  } else if (const auto* sar = std::get_if<SarPayload>(&sample.payload)) {
    payload = json{{"actions", spans_to_json(sar->actions)}};
  } else if (const auto* slot = std::get_if<SlotPayload>(&sample.payload)) {
    payload = json{{"frame_id", slot->frame_id}, {"slots", spans_to_json(slot->slots)}};
  }
  json j{{"sample_id", sample.sample_id},
         {"source_id", sample.source_id},
         {"task_kind", task_kind_name(sample.task_kind)},
         {"text", sample.text},
         {"payload", payload}};
  return j.dump();
}

UnifiedSample sample_from_json_line(const std::string& line) {
  const json j = json::parse(line);
  UnifiedSample sample;
  sample.sample_id = j.at("sample_id").get<std::string>();
  sample.source_id = j.at("source_id").get<std::string>();
  const auto kind = parse_task_kind(j.at("task_kind").get<std::string>());
  if (!kind) throw std::runtime_error("unknown task_kind: " + j.at("task_kind").dump());
  sample.task_kind = *kind;
  sample.text = j.at("text").get<std::string>();
  const json& payload = j.at("payload");
  switch (sample.task_kind) {
    case TaskKind::Ner:
      sample.payload = NerPayload{spans_from_json(payload.at("entities"))};
      break;
    case TaskKind::RelationClassification:
      sample.payload = RelationPayload{span_from_json(payload.at("head")),
                                       span_from_json(payload.at("tail")),
                                       payload.at("relation").get<std::string>()};
      break;
    case TaskKind::EventArgumentExtraction:
      sample.payload = EventPayload{span_from_json(payload.at("trigger")),
                                    spans_from_json(payload.at("arguments"))};
      break;
    case TaskKind::ParagraphClassification:
    case TaskKind::SentenceClassification:
      sample.payload = TextLabelPayload{payload.at("label").get<std::string>()};
      break;
    case TaskKind::SynthesisActionRetrieval:
      sample.payload = SarPayload{spans_from_json(payload.at("actions"))};
      break;
    case TaskKind::SlotFilling:
      sample.payload = SlotPayload{payload.at("frame_id").get<std::string>(),
                                   spans_from_json(payload.at("slots"))};
      break;
  }
  return sample;
}

void write_corpus_jsonl(const Corpus& corpus, const std::string& path) {
  Corpus sorted = corpus;
  std::sort(sorted.begin(), sorted.end(),
            [](const UnifiedSample& a, const UnifiedSample& b) { return a.sample_id < b.sample_id; });
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus file: " + path);
  for (const auto& sample : sorted) out << sample_to_json_line(sample) << '\n';
}

Corpus read_corpus_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read corpus file: " + path);
  Corpus corpus;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      corpus.push_back(sample_from_json_line(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return corpus;
}

void write_split_json(const CorpusSplit& split, const std::string& path) {
  json j{{"seed", split.seed},
         {"train_fraction", split.train_fraction},
         {"train_ids", split.train_ids},
         {"test_ids", split.test_ids}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write split file: " + path);
  out << j.dump(2) << '\n';
}

CorpusSplit read_split_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read split file: " + path);
  json j;
  in >> j;
  CorpusSplit split;
  split.seed = j.at("seed").get<uint64_t>();
  split.train_fraction = j.at("train_fraction").get<double>();
  split.train_ids = j.at("train_ids").get<std::vector<std::string>>();
  split.test_ids = j.at("test_ids").get<std::vector<std::string>>();
  return split;
}

}  // namespace t2s
