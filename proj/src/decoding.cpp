#include "t2s/decoding.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "t2s/text.hpp"

namespace t2s {
namespace {

using nlohmann::json;

}  // namespace

std::pair<std::string, double> match_label(const std::string& predicted_text,
                                           const LabelSpace& space, MatchPolicy policy) {
  if (space.labels.empty()) {
    throw std::invalid_argument("cannot match against an empty label space");
  }
  const std::string normalized = normalize_label(predicted_text);

  if (policy == MatchPolicy::kSubstringFirst) {
    const std::string* contained = nullptr;
    size_t count = 0;
    for (const std::string& label : space.labels) {
      if (!label.empty() && normalized.find(label) != std::string::npos) {
        contained = &label;
        count += 1;
      }
    }
    if (count == 1) {
      return {*contained, 1.0 - normalized_edit_distance(normalized, *contained)};
    }
  }

  // Labels are sorted, so keeping the first strict improvement breaks ties
  // toward the lexicographically smallest label.
  const std::string* best = nullptr;
  double best_distance = 0.0;
  for (const std::string& label : space.labels) {
    const double distance = normalized_edit_distance(normalized, label);
    if (best == nullptr || distance < best_distance) {
      best = &label;
      best_distance = distance;
    }
  }
  return {*best, 1.0 - best_distance};
}

std::string ModelAnswerGenerator::generate_answer(const std::string& prompt_text) const {
  std::vector<int> ids = model_->vocabulary().encode(prompt_text);
  if (ids.empty()) ids.push_back(Vocabulary::kUnk);
  const size_t budget = model_->config().encoder.max_sequence;
  if (ids.size() > budget) ids.resize(budget);
  return model_->vocabulary().decode(model_->generate(ids));
}

MatchedPrediction constrained_predict(const PromptInstance& prompt,
                                      const AnswerGenerator& generator, ParseMode mode,
                                      MatchPolicy policy) {
  const AnswerSchema& schema = prompt.answer_schema;
  MatchedPrediction prediction;
  prediction.raw_text = generator.generate_answer(prompt.prompt_text);
  prediction.sample_id = prompt.sample_id;
  prediction.query_unit_id = prompt.query_unit_id;
  prediction.task_kind = prompt.task_kind;

  std::vector<std::string> values(schema.fields.size());
  std::vector<bool> found(schema.fields.size(), false);

  const auto scan_into = [&]() {
    const auto pairs = scan_answer_pairs(prediction.raw_text);
    for (size_t i = 0; i < schema.fields.size(); ++i) {
      for (const auto& [name, value] : pairs) {
        if (trim(name) == schema.fields[i].name) {
          values[i] = value;
          found[i] = true;
          break;
        }
      }
    }
  };

  if (mode == ParseMode::kStrict) {
    const std::optional<AnswerUnit> unit = parse_answer(prediction.raw_text, schema);
    if (unit.has_value()) {
      values = unit->values;
      std::fill(found.begin(), found.end(), true);
      prediction.structurally_valid =
          std::none_of(values.begin(), values.end(), [](const std::string& v) { return v.empty(); });
    } else {
      scan_into();
    }
  } else {
    scan_into();
    prediction.structurally_valid =
        std::all_of(found.begin(), found.end(), [](bool f) { return f; }) &&
        std::none_of(values.begin(), values.end(), [](const std::string& v) { return v.empty(); });
  }

  for (size_t i = 0; i < schema.fields.size(); ++i) {
    const SchemaField& field = schema.fields[i];
    FieldMatch match;
    match.field_name = field.name;
    match.predicted_text = found[i] ? values[i] : prediction.raw_text;
    if (field.is_class) {
      const auto [label, score] = match_label(match.predicted_text, field.domain, policy);
      match.matched_label = label;
      match.score = score;
    } else {
      match.matched_label = match.predicted_text;
      match.score = 1.0;
    }
    prediction.fields.push_back(std::move(match));
  }
  return prediction;
}

std::vector<MatchedPrediction> constrained_predict_batch(
    const std::vector<PromptInstance>& prompts, const AnswerGenerator& generator, ParseMode mode,
    MatchPolicy policy) {
  std::vector<MatchedPrediction> predictions;
  predictions.reserve(prompts.size());
  for (const PromptInstance& prompt : prompts) {
    predictions.push_back(constrained_predict(prompt, generator, mode, policy));
  }
  return predictions;
}

MatchedLoss matched_cross_entropy(const Matrix& probs, const std::vector<int>& gold_tokens,
                                  const std::vector<bool>& match_correct) {
  if (probs.rows != gold_tokens.size()) {
    throw std::invalid_argument("distribution count " + std::to_string(probs.rows) +
                                " does not match gold token count " +
                                std::to_string(gold_tokens.size()));
  }

  MatchedLoss loss;
  for (size_t i = 0; i < gold_tokens.size(); ++i) {
    if (gold_tokens[i] < 0 || static_cast<size_t>(gold_tokens[i]) >= probs.cols) {
      throw std::invalid_argument("gold token id " + std::to_string(gold_tokens[i]) +
                                  " outside the distribution width");
    }
    const double p = std::max(probs(i, static_cast<size_t>(gold_tokens[i])), 1e-300);
    loss.token_term -= std::log(p);
  }
  if (!gold_tokens.empty()) loss.token_term /= static_cast<double>(gold_tokens.size());

  size_t missed = 0;
  for (const bool correct : match_correct) missed += correct ? 0 : 1;
  if (!match_correct.empty()) {
    loss.match_term = static_cast<double>(missed) / static_cast<double>(match_correct.size());
  }
  return loss;
}

void write_predictions_jsonl(const std::vector<MatchedPrediction>& predictions,
                             const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write predictions file: " + path);
  for (const MatchedPrediction& prediction : predictions) {
    json fields = json::array();
    for (const FieldMatch& field : prediction.fields) {
      fields.push_back({{"field", field.field_name},
                        {"predicted", field.predicted_text},
                        {"label", field.matched_label},
                        {"score", field.score}});
    }
    const json record = {{"sample_id", prediction.sample_id},
                         {"query_unit_id", prediction.query_unit_id},
                         {"task", task_kind_name(prediction.task_kind)},
                         {"raw_text", prediction.raw_text},
                         {"structurally_valid", prediction.structurally_valid},
                         {"fields", fields}};
    out << record.dump() << "\n";
  }
}

std::vector<MatchedPrediction> read_predictions_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read predictions file: " + path);

  std::vector<MatchedPrediction> predictions;
  std::string line;
  size_t line_number = 0;
  while (std::getline(in, line)) {
    line_number += 1;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_number);
    json record;
    try {
      record = json::parse(line);
    } catch (const json::exception& error) {
      throw std::runtime_error(where + ": " + error.what());
    }
    if (!record.is_object() || record.size() != 6) {
      throw std::runtime_error(where + ": prediction record must have exactly 6 keys");
    }

    MatchedPrediction prediction;
    prediction.sample_id = record.at("sample_id").get<std::string>();
    prediction.query_unit_id = record.at("query_unit_id").get<size_t>();
    const std::string task = record.at("task").get<std::string>();
    const std::optional<TaskKind> kind = parse_task_kind(task);
    if (!kind.has_value()) throw std::runtime_error(where + ": unknown task: " + task);
    prediction.task_kind = *kind;
    prediction.raw_text = record.at("raw_text").get<std::string>();
    prediction.structurally_valid = record.at("structurally_valid").get<bool>();
    for (const json& entry : record.at("fields")) {
      FieldMatch field;
      field.field_name = entry.at("field").get<std::string>();
      field.predicted_text = entry.at("predicted").get<std::string>();
      field.matched_label = entry.at("label").get<std::string>();
      field.score = entry.at("score").get<double>();
      prediction.fields.push_back(std::move(field));
    }
    predictions.push_back(std::move(prediction));
  }
  return predictions;
}

}  // namespace t2s
