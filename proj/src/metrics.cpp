#include "t2s/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace t2s {
namespace {

using nlohmann::json;

constexpr const char* kReportSchema = "t2s-report-v1";
constexpr const char* kRunTablesFormat = "t2s-runtables-v1";

size_t lookup(const std::map<std::string, size_t>& counts, const std::string& key) {
  const auto it = counts.find(key);
  return it == counts.end() ? 0 : it->second;
}

double f1_from_counts(size_t tp, size_t fp, size_t fn) {
  const double precision_denom = static_cast<double>(tp + fp);
  const double recall_denom = static_cast<double>(tp + fn);
  if (precision_denom == 0.0 || recall_denom == 0.0) return 0.0;
  const double precision = static_cast<double>(tp) / precision_denom;
  const double recall = static_cast<double>(tp) / recall_denom;
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

struct MeanInterval {
  double mean = 0.0;
  double interval = 0.0;
};

// Mean with a two-population-standard-deviation interval.
MeanInterval summarize(const std::vector<double>& values) {
  MeanInterval out;
  for (const double v : values) out.mean += v;
  out.mean /= static_cast<double>(values.size());
  double variance = 0.0;
  for (const double v : values) variance += (v - out.mean) * (v - out.mean);
  variance /= static_cast<double>(values.size());
  out.interval = 2.0 * std::sqrt(variance);
  return out;
}

std::string format_cell_line(double mean, double interval, size_t runs) {
  char buf[64];
  if (runs >= 2) {
    std::snprintf(buf, sizeof(buf), "%.3f ± %.3f", mean, interval);
  } else {
    std::snprintf(buf, sizeof(buf), "%.3f", mean);
  }
  return buf;
}

}  // namespace

void ConfusionTable::add(const std::string& gold, const std::string& predicted) {
  if (gold == predicted) {
    true_positives[gold] += 1;
  } else {
    false_negatives[gold] += 1;
    false_positives[predicted] += 1;
  }
}

void ConfusionTable::merge(const ConfusionTable& other) {
  for (const auto& [label, count] : other.true_positives) true_positives[label] += count;
  for (const auto& [label, count] : other.false_positives) false_positives[label] += count;
  for (const auto& [label, count] : other.false_negatives) false_negatives[label] += count;
}

std::set<std::string> ConfusionTable::classes() const {
  std::set<std::string> all;
  for (const auto& [label, count] : true_positives) all.insert(label);
  for (const auto& [label, count] : false_positives) all.insert(label);
  for (const auto& [label, count] : false_negatives) all.insert(label);
  return all;
}

size_t ConfusionTable::total() const {
  size_t sum = 0;
  for (const auto& [label, count] : true_positives) sum += count;
  for (const auto& [label, count] : false_negatives) sum += count;
  return sum;
}

double micro_f1(const ConfusionTable& table) {
  if (table.empty()) throw std::invalid_argument("micro-F1 of an empty confusion table");
  size_t tp = 0, fp = 0, fn = 0;
  for (const auto& [label, count] : table.true_positives) tp += count;
  for (const auto& [label, count] : table.false_positives) fp += count;
  for (const auto& [label, count] : table.false_negatives) fn += count;
  return f1_from_counts(tp, fp, fn);
}

double macro_f1(const ConfusionTable& table, const std::set<std::string>& excluded) {
  std::vector<std::string> kept;
  for (const std::string& label : table.classes()) {
    if (excluded.count(label) == 0) kept.push_back(label);
  }
  if (kept.empty()) throw std::invalid_argument("macro-F1 over no classes");

  double sum = 0.0;
  for (const std::string& label : kept) {
    sum += f1_from_counts(lookup(table.true_positives, label),
                          lookup(table.false_positives, label),
                          lookup(table.false_negatives, label));
  }
  return sum / static_cast<double>(kept.size());
}

std::string gold_class_label(const PromptInstance& prompt) {
  const std::optional<AnswerUnit> unit =
      parse_answer(prompt.gold_answer_text, prompt.answer_schema);
  if (!unit.has_value()) {
    throw std::runtime_error("gold answer does not parse for " + prompt.sample_id + "#" +
                             std::to_string(prompt.query_unit_id));
  }
  return unit->values.at(class_field_index(prompt.answer_schema));
}

ConfusionTable score_predictions(const std::vector<MatchedPrediction>& predictions,
                                 const std::vector<PromptInstance>& gold_prompts) {
  std::map<std::pair<std::string, size_t>, const PromptInstance*> open;
  for (const PromptInstance& prompt : gold_prompts) {
    const auto key = std::make_pair(prompt.sample_id, prompt.query_unit_id);
    if (!open.emplace(key, &prompt).second) {
      throw std::runtime_error("duplicate gold unit " + prompt.sample_id + "#" +
                               std::to_string(prompt.query_unit_id));
    }
  }

  ConfusionTable table;
  for (const MatchedPrediction& prediction : predictions) {
    const auto key = std::make_pair(prediction.sample_id, prediction.query_unit_id);
    const auto it = open.find(key);
    if (it == open.end()) {
      throw std::runtime_error("prediction without a gold unit: " + prediction.sample_id + "#" +
                               std::to_string(prediction.query_unit_id));
    }
    const PromptInstance& gold = *it->second;
    open.erase(it);

    const size_t class_at = class_field_index(gold.answer_schema);
    if (class_at >= prediction.fields.size()) {
      throw std::runtime_error("prediction fields misaligned for " + prediction.sample_id);
    }
    table.add(gold_class_label(gold), prediction.fields[class_at].matched_label);
  }
  if (!open.empty()) {
    const auto& key = open.begin()->first;
    throw std::runtime_error("missing prediction for " + key.first + "#" +
                             std::to_string(key.second));
  }
  return table;
}

std::string majority_label(const std::vector<std::string>& gold) {
  if (gold.empty()) throw std::invalid_argument("majority label of an empty stream");
  std::map<std::string, size_t> counts;
  for (const std::string& label : gold) counts[label] += 1;
  const std::string* best = nullptr;
  size_t best_count = 0;
  for (const auto& [label, count] : counts) {
    if (best == nullptr || count > best_count) {
      best = &label;
      best_count = count;
    }
  }
  return *best;
}

ConfusionTable majority_baseline(const std::vector<std::string>& gold) {
  const std::string label = majority_label(gold);
  ConfusionTable table;
  for (const std::string& g : gold) table.add(g, label);
  return table;
}

void add_report_row(MetricsReport& report, const std::string& tag,
                    const std::vector<RunTables>& runs, bool include_null_in_macro) {
  if (runs.empty()) throw std::invalid_argument("report row needs at least one run");
  for (const RunTables& run : runs) {
    if (run.size() != runs.front().size()) {
      throw std::invalid_argument("runs disagree on the evaluated task set");
    }
    for (const auto& [kind, table] : runs.front()) {
      if (run.count(kind) == 0) {
        throw std::invalid_argument("runs disagree on the evaluated task set");
      }
    }
  }

  const auto macro_exclusion = [&](const ConfusionTable& table) {
    std::set<std::string> excluded;
    if (!include_null_in_macro && table.classes().count(kNullLabel) > 0 &&
        table.classes().size() > 1) {
      excluded.insert(kNullLabel);
    }
    return excluded;
  };

  std::map<std::string, MetricCell>& row = report.rows[tag];
  for (const auto& [kind, ignored] : runs.front()) {
    std::vector<double> micro_values, macro_values;
    for (const RunTables& run : runs) {
      const ConfusionTable& table = run.at(kind);
      micro_values.push_back(micro_f1(table));
      macro_values.push_back(macro_f1(table, macro_exclusion(table)));
    }
    MetricCell cell;
    const MeanInterval micro = summarize(micro_values);
    const MeanInterval macro = summarize(macro_values);
    cell.micro_mean = micro.mean;
    cell.micro_interval = micro.interval;
    cell.macro_mean = macro.mean;
    cell.macro_interval = macro.interval;
    cell.runs = runs.size();
    row[task_kind_name(kind)] = cell;
  }

  std::vector<double> micro_values, macro_values;
  for (const RunTables& run : runs) {
    ConfusionTable pooled;
    for (const auto& [kind, table] : run) pooled.merge(table);
    micro_values.push_back(micro_f1(pooled));
    macro_values.push_back(macro_f1(pooled, macro_exclusion(pooled)));
  }
  MetricCell overall;
  const MeanInterval micro = summarize(micro_values);
  const MeanInterval macro = summarize(macro_values);
  overall.micro_mean = micro.mean;
  overall.micro_interval = micro.interval;
  overall.macro_mean = macro.mean;
  overall.macro_interval = macro.interval;
  overall.runs = runs.size();
  row[kOverallColumn] = overall;
}

std::string render_report(const MetricsReport& report, ReportFormat format) {
  if (format == ReportFormat::kJson) {
    json rows = json::object();
    for (const auto& [tag, columns] : report.rows) {
      json row = json::object();
      for (const auto& [column, cell] : columns) {
        row[column] = {{"micro_mean", cell.micro_mean},
                       {"micro_interval", cell.micro_interval},
                       {"macro_mean", cell.macro_mean},
                       {"macro_interval", cell.macro_interval},
                       {"runs", cell.runs}};
      }
      rows[tag] = std::move(row);
    }
    const json document = {
        {"schema", kReportSchema}, {"notes", report.notes}, {"rows", rows}};
    return document.dump(2) + "\n";
  }

  // Column order: tasks as declared, then the overall pool.
  std::vector<std::string> columns;
  for (const TaskKind kind : kAllTaskKinds) {
    const std::string name = task_kind_name(kind);
    for (const auto& [tag, row] : report.rows) {
      if (row.count(name) > 0) {
        columns.push_back(name);
        break;
      }
    }
  }
  for (const auto& [tag, row] : report.rows) {
    if (row.count(kOverallColumn) > 0) {
      columns.push_back(kOverallColumn);
      break;
    }
  }

  std::string out = "| Model |";
  for (const std::string& column : columns) out += " " + column + " |";
  out += "\n| --- |";
  for (size_t i = 0; i < columns.size(); ++i) out += " --- |";
  out += "\n";
  for (const auto& [tag, row] : report.rows) {
    out += "| " + tag + " |";
    for (const std::string& column : columns) {
      const auto it = row.find(column);
      if (it == row.end()) {
        out += " n/a |";
        continue;
      }
      const MetricCell& cell = it->second;
      out += " " + format_cell_line(cell.micro_mean, cell.micro_interval, cell.runs) + "<br>" +
             format_cell_line(cell.macro_mean, cell.macro_interval, cell.runs) + " |";
    }
    out += "\n";
  }
  if (!report.notes.empty()) out += "\n_" + report.notes + "_\n";
  return out;
}

MetricsReport parse_report_json(const std::string& text) {
  json document;
  try {
    document = json::parse(text);
  } catch (const json::exception& error) {
    throw std::runtime_error(std::string("report is not valid JSON: ") + error.what());
  }
  if (document.at("schema").get<std::string>() != kReportSchema) {
    throw std::runtime_error("unsupported report schema");
  }

  MetricsReport report;
  report.notes = document.at("notes").get<std::string>();
  for (const auto& [tag, row] : document.at("rows").items()) {
    for (const auto& [column, cell] : row.items()) {
      MetricCell parsed;
      parsed.micro_mean = cell.at("micro_mean").get<double>();
      parsed.micro_interval = cell.at("micro_interval").get<double>();
      parsed.macro_mean = cell.at("macro_mean").get<double>();
      parsed.macro_interval = cell.at("macro_interval").get<double>();
      parsed.runs = cell.at("runs").get<size_t>();
      report.rows[tag][column] = parsed;
    }
  }
  return report;
}

namespace {

json counts_to_json(const std::map<std::string, size_t>& counts) {
  json out = json::object();
  for (const auto& [label, count] : counts) out[label] = count;
  return out;
}

std::map<std::string, size_t> counts_from_json(const json& body) {
  std::map<std::string, size_t> counts;
  for (const auto& [label, count] : body.items()) counts[label] = count.get<size_t>();
  return counts;
}

}  // namespace

void write_run_tables_json(const RunTables& tables, const std::string& path) {
  json tasks = json::object();
  for (const auto& [kind, table] : tables) {
    tasks[task_kind_name(kind)] = {{"true_positives", counts_to_json(table.true_positives)},
                                   {"false_positives", counts_to_json(table.false_positives)},
                                   {"false_negatives", counts_to_json(table.false_negatives)}};
  }
  const json body = {{"format", kRunTablesFormat}, {"tasks", tasks}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << body.dump(2) << "\n";
}

RunTables read_run_tables_json(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  json body;
  try {
    in >> body;
  } catch (const json::exception& error) {
    throw std::runtime_error(path + ": " + error.what());
  }
  if (!body.is_object() || body.value("format", "") != kRunTablesFormat) {
    throw std::runtime_error(path + ": not a run tables file");
  }
  RunTables tables;
  try {
    for (const auto& [name, entry] : body.at("tasks").items()) {
      const auto kind = parse_task_kind(name);
      if (!kind) throw std::runtime_error(path + ": unknown task '" + name + "'");
      ConfusionTable table;
      table.true_positives = counts_from_json(entry.at("true_positives"));
      table.false_positives = counts_from_json(entry.at("false_positives"));
      table.false_negatives = counts_from_json(entry.at("false_negatives"));
      tables[*kind] = std::move(table);
    }
  } catch (const json::exception& error) {
    throw std::runtime_error(path + ": " + error.what());
  }
  return tables;
}

}  // namespace t2s
