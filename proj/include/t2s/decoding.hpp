#pragma once

#include <string>
#include <utility>
#include <vector>

#include "t2s/corpus.hpp"
#include "t2s/model.hpp"
#include "t2s/schema.hpp"
#include "t2s/tensor.hpp"

namespace t2s {

// How raw generations are checked against the answer schema.
enum class ParseMode {
  kStrict,   // field names in schema order with exact separators
  kLenient,  // fields recovered by the grammar scan in any order
};

// How a predicted value is matched to a class label.
enum class MatchPolicy {
  kEditDistance,    // argmin normalized edit distance, lexicographic ties
  kSubstringFirst,  // a uniquely contained label short-circuits the argmin
};

// Most similar label under the policy with its similarity 1 − distance,
// computed over normalized strings; ties pick the lexicographically
// smallest label. Total and deterministic. Throws std::invalid_argument
// for an empty label space.
std::pair<std::string, double> match_label(const std::string& predicted_text,
                                           const LabelSpace& space,
                                           MatchPolicy policy = MatchPolicy::kEditDistance);

// One answer field after matching. Class fields carry a domain label and
// the similarity that chose it; free-text fields carry the predicted text
// itself with score 1.
struct FieldMatch {
  std::string field_name;
  std::string predicted_text;
  std::string matched_label;
  double score = 0.0;

  bool operator==(const FieldMatch&) const = default;
};

// Outcome of decoding one prompt: the raw generation, whether it satisfied
// the answer schema, and one match per schema field regardless.
struct MatchedPrediction {
  std::string raw_text;
  bool structurally_valid = false;
  std::vector<FieldMatch> fields;  // aligned with the answer schema
  std::string sample_id;
  size_t query_unit_id = 0;
  TaskKind task_kind = TaskKind::Ner;

  bool operator==(const MatchedPrediction&) const = default;
};

// Source of raw answer text for a rendered prompt. The model wrapper below
// is the production implementation; tests substitute canned or random ones.
class AnswerGenerator {
 public:
  virtual ~AnswerGenerator() = default;
  virtual std::string generate_answer(const std::string& prompt_text) const = 0;
};

// Greedy model generation: encode the prompt, clamp to the encoder budget
// (keeping the head), generate, decode.
class ModelAnswerGenerator final : public AnswerGenerator {
 public:
  explicit ModelAnswerGenerator(const Seq2SchemaModel& model) : model_(&model) {}
  std::string generate_answer(const std::string& prompt_text) const override;

 private:
  const Seq2SchemaModel* model_;
};

// Generation, validity filtering, and per-field matching for one prompt.
// Structurally invalid output is still matched field by field from a
// lenient scan of the raw text, with the whole raw text standing in for
// fields the scan cannot find, so every classification field always
// receives a valid-domain label.
MatchedPrediction constrained_predict(const PromptInstance& prompt,
                                      const AnswerGenerator& generator,
                                      ParseMode mode = ParseMode::kStrict,
                                      MatchPolicy policy = MatchPolicy::kEditDistance);

// constrained_predict over every prompt, in input order.
std::vector<MatchedPrediction> constrained_predict_batch(
    const std::vector<PromptInstance>& prompts, const AnswerGenerator& generator,
    ParseMode mode = ParseMode::kStrict, MatchPolicy policy = MatchPolicy::kEditDistance);

// Loss of one teacher-forced answer. token_term is the mean −log P(gold
// token) and is the term training optimizes; match_term is the fraction of
// classification fields whose matched label missed gold, logged alongside.
struct MatchedLoss {
  double token_term = 0.0;
  double match_term = 0.0;

  double combined(double match_weight = 0.0) const {
    return token_term + match_weight * match_term;
  }
};

// probs rows must equal the gold token count (throws std::invalid_argument
// otherwise, also for an out-of-range gold id). match_correct holds one
// flag per matched classification field; empty means no match term.
MatchedLoss matched_cross_entropy(const Matrix& probs, const std::vector<int>& gold_tokens,
                                  const std::vector<bool>& match_correct);

// Newline-delimited JSON with one MatchedPrediction per line.
void write_predictions_jsonl(const std::vector<MatchedPrediction>& predictions,
                             const std::string& path);
std::vector<MatchedPrediction> read_predictions_jsonl(const std::string& path);

}  // namespace t2s
