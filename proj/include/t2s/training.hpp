#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "t2s/corpus.hpp"
#include "t2s/model.hpp"
#include "t2s/schema.hpp"
#include "t2s/tensor.hpp"

namespace t2s {

enum class LossKind {
  kCrossEntropy,
  kFocal,
};

enum class SamplerKind {
  kUniform,
  kClassBalanced,
};

// lower_snake wire names, e.g. "cross_entropy", "class_balanced".
std::string loss_kind_name(LossKind kind);
std::optional<LossKind> parse_loss_kind(const std::string& name);
std::string sampler_kind_name(SamplerKind kind);
std::optional<SamplerKind> parse_sampler_kind(const std::string& name);

struct TrainConfig {
  double learning_rate = 2e-5;
  size_t max_epochs = 20;
  // Consecutive non-improving validations tolerated before stopping.
  size_t patience = 3;
  uint64_t seed = 0;
  size_t batch_size = 16;
  LossKind loss = LossKind::kCrossEntropy;
  double focal_gamma = 2.0;
  SamplerKind sampler = SamplerKind::kUniform;
  SchemaVariant variant = SchemaVariant::TaskSchema;
  // Independent seeded repetitions an experiment aggregates over.
  size_t repeats = 5;
  // Fraction of the training subset held out for early stopping.
  double validation_fraction = 0.1;
  // Early stopping watches validation micro-F1 unless told to watch the
  // validation loss instead.
  bool stop_on_loss = false;
  // Task-mix temperature: sampling weight is task_size^(1/temperature).
  double mixing_temperature = 1.0;

  bool operator==(const TrainConfig&) const = default;
};

// Throws std::invalid_argument for out-of-range fields. A zero learning
// rate is allowed so frozen no-op runs stay expressible.
void validate_config(const TrainConfig& config);

// One line of the training log artifact. Serialized keys: epoch,
// train_loss, val_micro_f1, lr, seed.
struct EpochLog {
  size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_micro_f1 = 0.0;
  double learning_rate = 0.0;
  uint64_t seed = 0;

  bool operator==(const EpochLog&) const = default;
};

void write_training_log(const std::vector<EpochLog>& log, const std::string& path);
std::vector<EpochLog> read_training_log(const std::string& path);

// Mean over rows of -(1 - p_gold)^gamma * log(p_gold); gamma 0 is exactly
// cross-entropy. Rows must be probability rows and gold column indices in
// range; p_gold is floored by a tiny epsilon before the log.
double focal_loss(const Matrix& probabilities, const std::vector<int>& gold, double gamma);

// d(focal_loss)/d(logits) for probabilities = softmax(logits), same row
// convention; includes the 1/rows averaging factor.
Matrix focal_loss_dlogits(const Matrix& probabilities, const std::vector<int>& gold, double gamma);

// Batches whose expected per-class frequency is uniform: classes take turns
// in a fixed round-robin while each class cycles its own shuffled queue.
// Every index appears at least once per epoch; minority classes repeat.
// Throws std::invalid_argument for empty input or zero batch size.
std::vector<std::vector<size_t>> class_balanced_batches(const std::vector<std::string>& labels,
                                                        size_t batch_size, uint64_t seed);

// Epoch stream mixing groups proportionally to size^(1/temperature), each
// group drawn round-robin from its own shuffled cyclic queue, the combined
// stream reshuffled and chunked. Temperature 1 with a single pass quota
// reproduces a plain shuffled epoch. Throws std::invalid_argument for empty
// input, zero batch size, or non-positive temperature.
std::vector<std::vector<size_t>> proportional_batches(const std::vector<std::string>& groups,
                                                      size_t batch_size, double temperature,
                                                      uint64_t seed);

struct TrainResult {
  Seq2SchemaModel model;  // carries the best-validation weights
  std::vector<EpochLog> log;
  size_t best_epoch = 0;  // 1-based; 0 when no epoch ran
  SchemaVariant variant = SchemaVariant::TaskSchema;
  std::vector<std::string> validation_ids;  // sorted held-out sample ids
};

// Joint fine-tuning over the task-mixed prompt stream built from the listed
// train ids. Teacher forcing against gold answers, Adam updates per batch,
// early stopping on the held-out validation slice, best weights restored.
// Deterministic given (corpus, ids, configs). Throws std::runtime_error
// naming the batch and epoch when the loss turns non-finite.
TrainResult train_multitask(const Corpus& corpus, const std::vector<std::string>& train_ids,
                            const ModelConfig& model_config, const TrainConfig& config);

// The single-task prompting baseline: the same pipeline restricted to one
// task's samples, always under the plain no-explanations templates.
TrainResult train_single_task_prompt(const Corpus& corpus,
                                     const std::vector<std::string>& train_ids, TaskKind task,
                                     const ModelConfig& model_config, const TrainConfig& config);

// Classification input for the encoder-head baselines: the sample text
// joined with the query unit's free-field values so span-level queries stay
// distinguishable after pooling.
std::string head_input_text(const UnifiedSample& sample, const QueryUnit& unit,
                            const AnswerSchema& schema);

// Encoder with a linear head over mean-pooled final states; the per-task
// classification baseline that skips the decoder entirely. The wrapped
// Seq2SchemaModel supplies the encoder; its decoder parameters exist but
// receive no gradient and never move.
class HeadClassifier {
 public:
  HeadClassifier(const ModelConfig& config, Vocabulary vocabulary, LabelSpace space,
                 uint64_t seed);

  const ModelConfig& config() const { return encoder_.config(); }
  const Vocabulary& vocabulary() const { return encoder_.vocabulary(); }
  const LabelSpace& space() const { return space_; }
  uint64_t seed() const { return encoder_.seed(); }
  Seq2SchemaModel& encoder() { return encoder_; }
  const Seq2SchemaModel& encoder() const { return encoder_; }
  Parameter& head_weight() { return head_weight_; }
  const Parameter& head_weight() const { return head_weight_; }
  Parameter& head_bias() { return head_bias_; }
  const Parameter& head_bias() const { return head_bias_; }

  struct Trace {
    EncoderTrace encoder;
    std::vector<int> mask;
    Matrix pooled;  // 1 x hidden, mean over unmasked positions
    Matrix logits;  // 1 x |space|
    Matrix probs;   // 1 x |space|
  };

  // Mean-pools final encoder states over unmasked positions, then applies
  // the head. Requires at least one unmasked position.
  Trace forward(const std::vector<int>& ids, const std::vector<int>& mask) const;

  // Class probabilities for raw text (encoded, clamped to the encoder
  // budget, all positions unmasked); 1 x |space|.
  Matrix predict_text(const std::string& text) const;
  // Label of the highest-probability class; ties take the first label.
  std::string predict_label(const std::string& text) const;

  void backward(const Trace& trace, const Matrix& dlogits);
  void zero_gradients();
  void adam_step(double learning_rate);

 private:
  Seq2SchemaModel encoder_;
  LabelSpace space_;
  Parameter head_weight_;  // hidden x |space|
  Parameter head_bias_;    // 1 x |space|
  size_t adam_steps_ = 0;
};

// Head checkpoints reuse the model checkpoint layout plus a head sidecar
// (head.json + head.bin). Loading verifies shapes and the label space.
void save_head_checkpoint(const HeadClassifier& model, const std::string& directory);
HeadClassifier load_head_checkpoint(const std::string& directory);

struct HeadTrainResult {
  HeadClassifier model;
  std::vector<EpochLog> log;
  size_t best_epoch = 0;
  std::vector<std::string> validation_ids;
};

// The classic single-task baseline: per-task head on encoder output,
// trained on one query unit per step. Same split, logging, early-stopping,
// and determinism contract as train_multitask.
HeadTrainResult train_single_task_head(const Corpus& corpus,
                                       const std::vector<std::string>& train_ids, TaskKind task,
                                       const ModelConfig& model_config, const TrainConfig& config);

struct MmoeConfig {
  size_t experts = 3;
  // Lower encoder layers (embeddings included) tied across experts; tied
  // parameters start identical and receive the summed gradient, so their
  // Adam trajectories stay in lockstep.
  size_t shared_layers = 0;

  bool operator==(const MmoeConfig&) const = default;
};

// Multi-gate mixture of experts: K independently parameterized encoders,
// one softmax gate and one linear head per task. The task hidden embedding
// is the gate-weighted sum of the experts' mean-pooled states.
class MmoeModel {
 public:
  MmoeModel(const ModelConfig& config, Vocabulary vocabulary, LabelSpaceSet spaces,
            const MmoeConfig& mmoe, uint64_t seed);

  const ModelConfig& config() const { return experts_.front().config(); }
  const Vocabulary& vocabulary() const { return experts_.front().vocabulary(); }
  const MmoeConfig& mmoe_config() const { return mmoe_; }
  const LabelSpaceSet& spaces() const { return spaces_; }
  size_t experts() const { return experts_.size(); }
  Seq2SchemaModel& expert(size_t k) { return experts_.at(k); }
  const Seq2SchemaModel& expert(size_t k) const { return experts_.at(k); }
  Parameter& gate(TaskKind task) { return gates_.at(task); }
  const Parameter& gate(TaskKind task) const { return gates_.at(task); }
  Parameter& head_weight(TaskKind task) { return head_weights_.at(task); }
  const Parameter& head_weight(TaskKind task) const { return head_weights_.at(task); }
  Parameter& head_bias(TaskKind task) { return head_biases_.at(task); }
  const Parameter& head_bias(TaskKind task) const { return head_biases_.at(task); }

  // Softmax of the task's gate logits; a simplex over the experts.
  std::vector<double> gate_weights(TaskKind task) const;

  // Mean-pooled final states of one expert, 1 x hidden.
  Matrix expert_pooled(size_t k, const std::vector<int>& ids, const std::vector<int>& mask) const;

  struct Trace {
    TaskKind task = TaskKind::Ner;
    std::vector<int> mask;
    std::vector<EncoderTrace> expert_traces;
    std::vector<Matrix> pooled;  // per expert, 1 x hidden
    std::vector<double> gates;
    Matrix hidden;  // 1 x hidden, gate-weighted sum
    Matrix logits;  // 1 x |space of task|
    Matrix probs;
  };

  Trace forward(TaskKind task, const std::vector<int>& ids, const std::vector<int>& mask) const;
  Matrix predict_text(TaskKind task, const std::string& text) const;
  std::string predict_label(TaskKind task, const std::string& text) const;

  void backward(const Trace& trace, const Matrix& dlogits);
  void zero_gradients();
  // Sums tied-layer gradients across experts before stepping so shared
  // parameters keep identical values.
  void adam_step(double learning_rate);

 private:
  std::vector<std::string> tied_parameter_names() const;

  std::vector<Seq2SchemaModel> experts_;
  LabelSpaceSet spaces_;
  MmoeConfig mmoe_;
  std::map<TaskKind, Parameter> gates_;         // 1 x K logits, zero-initialized
  std::map<TaskKind, Parameter> head_weights_;  // hidden x |space|
  std::map<TaskKind, Parameter> head_biases_;   // 1 x |space|
  size_t adam_steps_ = 0;
};

void save_mmoe_checkpoint(const MmoeModel& model, const std::string& directory);
MmoeModel load_mmoe_checkpoint(const std::string& directory);

struct MmoeTrainResult {
  MmoeModel model;
  std::vector<EpochLog> log;
  size_t best_epoch = 0;
  std::vector<std::string> validation_ids;
};

// Multitask mixture-of-experts baseline over all tasks' query units. Same
// split, logging, early-stopping, and determinism contract as
// train_multitask.
MmoeTrainResult train_mmoe(const Corpus& corpus, const std::vector<std::string>& train_ids,
                           const ModelConfig& model_config, const MmoeConfig& mmoe,
                           const TrainConfig& config);

}  // namespace t2s
