#pragma once

#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "t2s/corpus.hpp"

namespace t2s {

struct IngestReport {
  std::map<TaskKind, size_t> samples_per_task;
  size_t skipped = 0;
  std::vector<std::string> violations;  // "file:record: message"

  size_t total() const {
    size_t n = 0;
    for (const auto& [kind, count] : samples_per_task) n += count;
    return n;
  }
};

// One registered source dataset. Adapters parse the source's native files and
// emit samples; ids, validation, and reporting are handled by ingest().
class SourceAdapter {
 public:
  virtual ~SourceAdapter() = default;
  virtual std::string source_id() const = 0;
  virtual std::set<TaskKind> task_kinds() const = 0;
  virtual std::string input_layout() const = 0;
  // Label inventory fixed by the dataset definition (e.g. the eight synthesis
  // actions); empty when the inventory is observational.
  virtual LabelSpaceSet declared_spaces() const { return {}; }

 protected:
  friend IngestReport ingest(const SourceAdapter&, const std::string&, Corpus&);
  // Appends parsed samples (sample_id left empty) in deterministic order.
  // Malformed records are skipped and logged into the report; an unreadable
  // file throws with its path.
  virtual void parse(const std::string& input_dir, Corpus& out, IngestReport& report) const = 0;
};

// Runs one adapter over a directory of its native files. Every emitted sample
// is validated (invalid ones are skipped and logged), ids are assigned as
// "{source_id}:{running index}", and per-task counts are reported.
IngestReport ingest(const SourceAdapter& adapter, const std::string& input_dir, Corpus& out);

class AdapterRegistry {
 public:
  void register_adapter(std::shared_ptr<SourceAdapter> adapter);  // throws on duplicate id
  std::shared_ptr<SourceAdapter> find(const std::string& id) const;
  std::vector<std::string> ids() const;  // sorted
  size_t size() const { return adapters_.size(); }

  // All seven sources of the unified corpus.
  static AdapterRegistry with_builtin_sources();

 private:
  std::map<std::string, std::shared_ptr<SourceAdapter>> adapters_;
};

}  // namespace t2s
