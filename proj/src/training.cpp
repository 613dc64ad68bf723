#include "t2s/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "t2s/decoding.hpp"
#include "t2s/metrics.hpp"
#include "t2s/rng.hpp"
#include "t2s/text.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace t2s {

namespace {

constexpr double kProbFloor = 1e-12;
constexpr const char* kHeadFormat = "t2s-head-v1";
constexpr const char* kMmoeFormat = "t2s-mmoe-v1";
// Sidecar slot for the model checkpoint's template field; baseline heads
// render no prompts.
constexpr const char* kNoTemplates = "none";

void adam_update(Parameter& param, size_t step, double learning_rate) {
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEpsilon = 1e-8;

  const double correction1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
  const double correction2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
  for (size_t i = 0; i < param.value.data.size(); ++i) {
    const double g = param.grad.data[i];
    param.adam_m.data[i] = kBeta1 * param.adam_m.data[i] + (1.0 - kBeta1) * g;
    param.adam_v.data[i] = kBeta2 * param.adam_v.data[i] + (1.0 - kBeta2) * g * g;
    const double m_hat = param.adam_m.data[i] / correction1;
    const double v_hat = param.adam_v.data[i] / correction2;
    param.value.data[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + kEpsilon);
  }
}

Parameter make_parameter(size_t rows, size_t cols) {
  Parameter param;
  param.value = Matrix(rows, cols);
  param.grad = Matrix(rows, cols);
  param.adam_m = Matrix(rows, cols);
  param.adam_v = Matrix(rows, cols);
  return param;
}

void fill_normal(Matrix& m, uint64_t seed) {
  Rng rng(seed);
  for (double& x : m.data) x = rng.normal(0.0, 0.02);
}

void zero_matrix(Matrix& m) { std::fill(m.data.begin(), m.data.end(), 0.0); }

size_t real_positions(const std::vector<int>& mask) {
  size_t real = 0;
  for (int m : mask) real += (m != 0) ? 1 : 0;
  return real;
}

// Mean of the unmasked state rows, 1 x hidden.
Matrix mean_pool(const Matrix& states, const std::vector<int>& mask) {
  if (mask.size() != states.rows) {
    throw std::invalid_argument("mask length does not match state rows");
  }
  const size_t real = real_positions(mask);
  if (real == 0) throw std::invalid_argument("pooling needs at least one unmasked position");
  Matrix pooled(1, states.cols);
  for (size_t i = 0; i < states.rows; ++i) {
    if (mask[i] == 0) continue;
    for (size_t j = 0; j < states.cols; ++j) {
      pooled(0, j) += states(i, j) / static_cast<double>(real);
    }
  }
  return pooled;
}

// Spreads d(pooled) back over the unmasked rows.
Matrix unpool(const Matrix& dpooled, const std::vector<int>& mask, double weight) {
  const size_t real = real_positions(mask);
  Matrix dstates(mask.size(), dpooled.cols);
  for (size_t i = 0; i < mask.size(); ++i) {
    if (mask[i] == 0) continue;
    for (size_t j = 0; j < dpooled.cols; ++j) {
      dstates(i, j) = weight * dpooled(0, j) / static_cast<double>(real);
    }
  }
  return dstates;
}

// Token ids for classifier input: encoded, never empty, clamped to the
// encoder budget keeping the head.
std::vector<int> clamp_ids(const Vocabulary& vocabulary, const std::string& text,
                           size_t max_sequence) {
  std::vector<int> ids = vocabulary.encode(text);
  if (ids.empty()) ids.push_back(Vocabulary::kUnk);
  if (ids.size() > max_sequence) ids.resize(max_sequence);
  return ids;
}

size_t argmax_row(const Matrix& row) {
  size_t best = 0;
  for (size_t j = 1; j < row.cols; ++j) {
    if (row(0, j) > row(0, best)) best = j;
  }
  return best;
}

std::vector<std::vector<size_t>> chunk_stream(const std::vector<size_t>& stream,
                                              size_t batch_size) {
  std::vector<std::vector<size_t>> batches;
  for (size_t start = 0; start < stream.size(); start += batch_size) {
    const size_t end = std::min(start + batch_size, stream.size());
    batches.emplace_back(stream.begin() + start, stream.begin() + end);
  }
  return batches;
}

// Sorted (fit, validation) id split; the validation slice is a seeded
// shuffle prefix of floor(fraction * n) ids, at least one when the fraction
// is positive and two ids exist, and never the whole set.
struct IdSplit {
  std::vector<std::string> fit;
  std::vector<std::string> val;
};

IdSplit split_validation(std::vector<std::string> ids, double fraction, uint64_t seed) {
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  if (ids.empty()) throw std::invalid_argument("no training sample ids");

  Rng rng(derive_seed(seed, "validation"));
  rng.shuffle(ids);
  size_t val_count = static_cast<size_t>(fraction * static_cast<double>(ids.size()));
  if (fraction > 0.0 && val_count == 0 && ids.size() >= 2) val_count = 1;
  if (val_count >= ids.size()) val_count = ids.size() - 1;

  IdSplit split;
  split.val.assign(ids.begin(), ids.begin() + static_cast<ptrdiff_t>(val_count));
  split.fit.assign(ids.begin() + static_cast<ptrdiff_t>(val_count), ids.end());
  std::sort(split.fit.begin(), split.fit.end());
  std::sort(split.val.begin(), split.val.end());
  return split;
}

// Tracks the best validation value under an improvement direction and the
// consecutive non-improving count early stopping acts on.
struct StopMonitor {
  bool maximize = true;
  size_t patience = 3;
  double best = 0.0;
  size_t best_epoch = 0;
  size_t stale = 0;
  bool any = false;

  bool observe(size_t epoch, double value) {
    const bool improved = !any || (maximize ? value > best : value < best);
    any = true;
    if (improved) {
      best = value;
      best_epoch = epoch;
      stale = 0;
    } else {
      stale += 1;
    }
    return improved;
  }

  bool should_stop() const { return any && stale >= patience; }
};

std::map<std::string, Matrix> snapshot_values(const Seq2SchemaModel& model) {
  std::map<std::string, Matrix> snapshot;
  for (const std::string& name : model.parameter_names()) {
    snapshot.emplace(name, model.parameter(name).value);
  }
  return snapshot;
}

void restore_values(Seq2SchemaModel& model, const std::map<std::string, Matrix>& snapshot) {
  for (const auto& [name, value] : snapshot) model.parameter(name).value = value;
}

std::map<std::string, const UnifiedSample*> index_corpus(const Corpus& corpus) {
  std::map<std::string, const UnifiedSample*> index;
  for (const UnifiedSample& sample : corpus) index.emplace(sample.sample_id, &sample);
  return index;
}

[[noreturn]] void throw_diverged(const std::string& reason, size_t batch, size_t epoch) {
  throw std::runtime_error("training diverged: " + reason + " at batch " +
                           std::to_string(batch) + " of epoch " + std::to_string(epoch));
}

void require_finite_batch(double batch_loss, size_t batch, size_t epoch) {
  if (std::isfinite(batch_loss)) return;
  throw_diverged("non-finite loss", batch, epoch);
}

// --- prompted training (multitask and single-task prompt modes) ---------

struct EncodedExample {
  std::vector<int> enc_ids;
  std::vector<int> enc_mask;
  std::vector<int> dec_input;
  std::vector<int> targets;
};

EncodedExample encode_example(const PromptInstance& prompt, const Vocabulary& vocabulary,
                              const ModelConfig& model_config) {
  EncodedExample example;
  example.enc_ids =
      clamp_ids(vocabulary, prompt.prompt_text, model_config.encoder.max_sequence);
  example.enc_mask.assign(example.enc_ids.size(), 1);

  // The end token must survive truncation, so the answer itself gets one
  // slot less than the generation budget.
  std::vector<int> answer = vocabulary.encode(prompt.gold_answer_text);
  if (answer.size() > model_config.decoder.max_generate - 1) {
    answer.resize(model_config.decoder.max_generate - 1);
  }
  example.targets = answer;
  example.targets.push_back(Vocabulary::kEos);
  example.dec_input.push_back(Vocabulary::kBos);
  example.dec_input.insert(example.dec_input.end(), answer.begin(), answer.end());
  return example;
}

struct PromptedData {
  std::vector<PromptInstance> fit;
  std::vector<PromptInstance> val;
  Vocabulary vocabulary;
  std::vector<std::string> val_ids;
};

PromptedData build_prompted_data(const Corpus& corpus, const std::vector<std::string>& ids,
                                 SchemaVariant variant, const TrainConfig& config) {
  const IdSplit split = split_validation(ids, config.validation_fraction, config.seed);
  const LabelSpaceSet spaces = label_spaces_of(corpus);

  // The exemplar pool is restricted to fit samples so validation prompts
  // never leak their own answers into training-time examples.
  Corpus fit_pool;
  for (const UnifiedSample& sample : corpus) {
    if (std::binary_search(split.fit.begin(), split.fit.end(), sample.sample_id)) {
      fit_pool.push_back(sample);
    }
  }

  PromptContext context;
  context.spaces = &spaces;
  context.exemplar_pool = &fit_pool;
  context.seed = config.seed;

  PromptedData data;
  data.fit = build_prompt_set(corpus, split.fit, variant, context);
  data.val = build_prompt_set(corpus, split.val, variant, context);
  data.val_ids = split.val;

  std::vector<std::string> texts;
  texts.reserve(2 * data.fit.size());
  for (const PromptInstance& prompt : data.fit) {
    texts.push_back(prompt.prompt_text);
    texts.push_back(prompt.gold_answer_text);
  }
  data.vocabulary = Vocabulary::build(texts);
  return data;
}

double validation_micro_f1(const Seq2SchemaModel& model,
                           const std::vector<PromptInstance>& val) {
  const ModelAnswerGenerator generator(model);
  const std::vector<MatchedPrediction> predictions = constrained_predict_batch(val, generator);
  return micro_f1(score_predictions(predictions, val));
}

double validation_token_loss(const Seq2SchemaModel& model,
                             const std::vector<EncodedExample>& examples, double gamma) {
  double total = 0.0;
  for (const EncodedExample& example : examples) {
    const EncoderTrace encoder = model.encoder_forward(example.enc_ids, example.enc_mask);
    const DecoderTrace decoder =
        model.decoder_forward(example.dec_input, encoder.states(), example.enc_mask);
    total += focal_loss(decoder.probs, example.targets, gamma);
  }
  return total / static_cast<double>(examples.size());
}

TrainResult train_prompted(const Corpus& corpus, const std::vector<std::string>& train_ids,
                           SchemaVariant variant, const ModelConfig& model_config,
                           const TrainConfig& config) {
  validate_config(config);
  PromptedData data = build_prompted_data(corpus, train_ids, variant, config);
  if (data.fit.empty()) {
    throw std::runtime_error("the training subset yields no prompts");
  }
  const double gamma = config.loss == LossKind::kFocal ? config.focal_gamma : 0.0;

  std::vector<EncodedExample> fit_examples;
  fit_examples.reserve(data.fit.size());
  for (const PromptInstance& prompt : data.fit) {
    fit_examples.push_back(encode_example(prompt, data.vocabulary, model_config));
  }
  std::vector<EncodedExample> val_examples;
  if (config.stop_on_loss) {
    for (const PromptInstance& prompt : data.val) {
      val_examples.push_back(encode_example(prompt, data.vocabulary, model_config));
    }
  }

  std::vector<std::string> groups;
  std::vector<std::string> class_keys;
  for (const PromptInstance& prompt : data.fit) {
    groups.push_back(task_kind_name(prompt.task_kind));
    if (config.sampler == SamplerKind::kClassBalanced) {
      class_keys.push_back(task_kind_name(prompt.task_kind) + "/" + gold_class_label(prompt));
    }
  }

  Seq2SchemaModel model(model_config, data.vocabulary, derive_seed(config.seed, "model"));

  StopMonitor monitor{!config.stop_on_loss, config.patience};
  std::map<std::string, Matrix> best;
  size_t best_epoch = 0;
  std::vector<EpochLog> log;

  for (size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const uint64_t epoch_seed = derive_seed(config.seed, "epoch:" + std::to_string(epoch));
    const std::vector<std::vector<size_t>> batches =
        config.sampler == SamplerKind::kClassBalanced
            ? class_balanced_batches(class_keys, config.batch_size, epoch_seed)
            : proportional_batches(groups, config.batch_size, config.mixing_temperature,
                                   epoch_seed);

    double loss_sum = 0.0;
    for (size_t b = 0; b < batches.size(); ++b) {
      model.zero_gradients();
      double batch_loss = 0.0;
      const double batch_scale = 1.0 / static_cast<double>(batches[b].size());
      // An overflowed forward pass throws from deep inside the model; the
      // abort must still name the offending batch.
      try {
        for (const size_t index : batches[b]) {
          const EncodedExample& example = fit_examples[index];
          const EncoderTrace encoder =
              model.encoder_forward(example.enc_ids, example.enc_mask);
          const DecoderTrace decoder =
              model.decoder_forward(example.dec_input, encoder.states(), example.enc_mask);
          batch_loss += focal_loss(decoder.probs, example.targets, gamma) * batch_scale;
          Matrix dlogits = focal_loss_dlogits(decoder.probs, example.targets, gamma);
          scale_in_place(dlogits, batch_scale);
          model.backward(encoder, decoder, dlogits);
        }
      } catch (const std::runtime_error& error) {
        throw_diverged(error.what(), b + 1, epoch);
      }
      require_finite_batch(batch_loss, b + 1, epoch);
      model.adam_step(config.learning_rate);
      loss_sum += batch_loss;
    }
    const double train_loss = loss_sum / static_cast<double>(batches.size());

    double val_f1 = 0.0;
    if (!data.val.empty()) val_f1 = validation_micro_f1(model, data.val);
    log.push_back({epoch, train_loss, val_f1, config.learning_rate, config.seed});

    if (!data.val.empty()) {
      const double monitored =
          config.stop_on_loss ? validation_token_loss(model, val_examples, gamma) : val_f1;
      if (monitor.observe(epoch, monitored)) {
        best = snapshot_values(model);
        best_epoch = epoch;
      }
      if (monitor.should_stop()) break;
    } else {
      best_epoch = epoch;
    }
  }
  if (!best.empty()) restore_values(model, best);

  return TrainResult{std::move(model), std::move(log), best_epoch, variant,
                     std::move(data.val_ids)};
}

}  // namespace

std::string loss_kind_name(LossKind kind) {
  switch (kind) {
    case LossKind::kCrossEntropy:
      return "cross_entropy";
    case LossKind::kFocal:
      return "focal";
  }
  throw std::logic_error("unhandled loss kind");
}

std::optional<LossKind> parse_loss_kind(const std::string& name) {
  if (name == "cross_entropy") return LossKind::kCrossEntropy;
  if (name == "focal") return LossKind::kFocal;
  return std::nullopt;
}

std::string sampler_kind_name(SamplerKind kind) {
  switch (kind) {
    case SamplerKind::kUniform:
      return "uniform";
    case SamplerKind::kClassBalanced:
      return "class_balanced";
  }
  throw std::logic_error("unhandled sampler kind");
}

std::optional<SamplerKind> parse_sampler_kind(const std::string& name) {
  if (name == "uniform") return SamplerKind::kUniform;
  if (name == "class_balanced") return SamplerKind::kClassBalanced;
  return std::nullopt;
}

void validate_config(const TrainConfig& config) {
  if (!std::isfinite(config.learning_rate) || config.learning_rate < 0.0) {
    throw std::invalid_argument("learning rate must be finite and non-negative");
  }
  if (config.max_epochs < 1) throw std::invalid_argument("max epochs must be at least 1");
  if (config.batch_size < 1) throw std::invalid_argument("batch size must be at least 1");
  if (!std::isfinite(config.focal_gamma) || config.focal_gamma < 0.0) {
    throw std::invalid_argument("focal gamma must be finite and non-negative");
  }
  if (!std::isfinite(config.validation_fraction) || config.validation_fraction < 0.0 ||
      config.validation_fraction >= 1.0) {
    throw std::invalid_argument("validation fraction must lie in [0, 1)");
  }
  if (!std::isfinite(config.mixing_temperature) || config.mixing_temperature <= 0.0) {
    throw std::invalid_argument("mixing temperature must be positive");
  }
  if (config.repeats < 1) throw std::invalid_argument("repeats must be at least 1");
}

void write_training_log(const std::vector<EpochLog>& log, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const EpochLog& row : log) {
    const json record = {{"epoch", row.epoch},
                         {"train_loss", row.train_loss},
                         {"val_micro_f1", row.val_micro_f1},
                         {"lr", row.learning_rate},
                         {"seed", row.seed}};
    out << record.dump() << "\n";
  }
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<EpochLog> read_training_log(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open: " + path);
  std::vector<EpochLog> log;
  std::string line;
  size_t line_number = 0;
  while (std::getline(in, line)) {
    line_number += 1;
    if (line.empty()) continue;
    const std::string where = path + ":" + std::to_string(line_number) + ": ";
    json record;
    try {
      record = json::parse(line);
    } catch (const json::exception& error) {
      throw std::runtime_error(where + error.what());
    }
    if (!record.is_object() || record.size() != 5 || !record.contains("epoch") ||
        !record.contains("train_loss") || !record.contains("val_micro_f1") ||
        !record.contains("lr") || !record.contains("seed")) {
      throw std::runtime_error(where + "training log records need exactly the keys "
                                       "epoch, train_loss, val_micro_f1, lr, seed");
    }
    try {
      EpochLog row;
      row.epoch = record.at("epoch").get<size_t>();
      row.train_loss = record.at("train_loss").get<double>();
      row.val_micro_f1 = record.at("val_micro_f1").get<double>();
      row.learning_rate = record.at("lr").get<double>();
      row.seed = record.at("seed").get<uint64_t>();
      log.push_back(row);
    } catch (const json::exception& error) {
      throw std::runtime_error(where + error.what());
    }
  }
  return log;
}

double focal_loss(const Matrix& probabilities, const std::vector<int>& gold, double gamma) {
  if (!std::isfinite(gamma) || gamma < 0.0) {
    throw std::invalid_argument("focal gamma must be finite and non-negative");
  }
  if (gold.size() != probabilities.rows) {
    throw std::invalid_argument("gold index count does not match probability rows");
  }
  if (probabilities.rows == 0) throw std::invalid_argument("focal loss needs at least one row");

  double total = 0.0;
  for (size_t i = 0; i < probabilities.rows; ++i) {
    if (gold[i] < 0 || static_cast<size_t>(gold[i]) >= probabilities.cols) {
      throw std::invalid_argument("gold index out of range");
    }
    const double p = std::max(probabilities(i, static_cast<size_t>(gold[i])), kProbFloor);
    const double modulation = gamma == 0.0 ? 1.0 : std::pow(1.0 - p, gamma);
    total += -modulation * std::log(p);
  }
  return total / static_cast<double>(probabilities.rows);
}

Matrix focal_loss_dlogits(const Matrix& probabilities, const std::vector<int>& gold,
                          double gamma) {
  if (!std::isfinite(gamma) || gamma < 0.0) {
    throw std::invalid_argument("focal gamma must be finite and non-negative");
  }
  if (gold.size() != probabilities.rows) {
    throw std::invalid_argument("gold index count does not match probability rows");
  }
  if (probabilities.rows == 0) throw std::invalid_argument("focal loss needs at least one row");

  Matrix dlogits(probabilities.rows, probabilities.cols);
  const double inv_rows = 1.0 / static_cast<double>(probabilities.rows);
  for (size_t i = 0; i < probabilities.rows; ++i) {
    if (gold[i] < 0 || static_cast<size_t>(gold[i]) >= probabilities.cols) {
      throw std::invalid_argument("gold index out of range");
    }
    const size_t g = static_cast<size_t>(gold[i]);
    const double p = std::max(probabilities(i, g), kProbFloor);
    const double q = 1.0 - p;
    // dL/dp of -(1-p)^gamma log p; the q <= 0 guard kills the 0^negative
    // power whose log factor is already zero.
    const double term1 =
        (gamma == 0.0 || q <= 0.0) ? 0.0 : gamma * std::pow(q, gamma - 1.0) * std::log(p);
    const double term2 = -(gamma == 0.0 ? 1.0 : std::pow(q, gamma)) / p;
    const double dldp = term1 + term2;
    for (size_t j = 0; j < probabilities.cols; ++j) {
      const double indicator = j == g ? 1.0 : 0.0;
      dlogits(i, j) =
          dldp * probabilities(i, g) * (indicator - probabilities(i, j)) * inv_rows;
    }
  }
  return dlogits;
}

std::vector<std::vector<size_t>> class_balanced_batches(const std::vector<std::string>& labels,
                                                        size_t batch_size, uint64_t seed) {
  if (labels.empty()) {
    throw std::invalid_argument("class-balanced batching needs at least one sample");
  }
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");

  std::map<std::string, std::vector<size_t>> queues;
  for (size_t i = 0; i < labels.size(); ++i) queues[labels[i]].push_back(i);

  std::vector<const std::vector<size_t>*> order;
  size_t max_size = 0;
  for (auto& [label, queue] : queues) {
    Rng rng(derive_seed(seed, "class:" + label));
    rng.shuffle(queue);
    order.push_back(&queue);
    max_size = std::max(max_size, queue.size());
  }

  // Round-robin over classes; each class cycles its shuffled queue, so the
  // largest class gets exactly one full pass and the rest oversample.
  const size_t classes = order.size();
  std::vector<size_t> stream;
  stream.reserve(classes * max_size);
  for (size_t slot = 0; slot < classes * max_size; ++slot) {
    const std::vector<size_t>& queue = *order[slot % classes];
    stream.push_back(queue[(slot / classes) % queue.size()]);
  }
  return chunk_stream(stream, batch_size);
}

std::vector<std::vector<size_t>> proportional_batches(const std::vector<std::string>& groups,
                                                      size_t batch_size, double temperature,
                                                      uint64_t seed) {
  if (groups.empty()) {
    throw std::invalid_argument("proportional batching needs at least one sample");
  }
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (!std::isfinite(temperature) || temperature <= 0.0) {
    throw std::invalid_argument("mixing temperature must be positive");
  }

  std::map<std::string, std::vector<size_t>> queues;
  for (size_t i = 0; i < groups.size(); ++i) queues[groups[i]].push_back(i);

  double weight_sum = 0.0;
  std::map<std::string, double> weights;
  for (const auto& [name, queue] : queues) {
    const double w = std::pow(static_cast<double>(queue.size()), 1.0 / temperature);
    weights[name] = w;
    weight_sum += w;
  }

  const double total = static_cast<double>(groups.size());
  std::vector<size_t> stream;
  for (auto& [name, queue] : queues) {
    Rng rng(derive_seed(seed, "group:" + name));
    rng.shuffle(queue);
    const auto quota = static_cast<size_t>(
        std::max<long long>(1, std::llround(total * weights[name] / weight_sum)));
    for (size_t t = 0; t < quota; ++t) stream.push_back(queue[t % queue.size()]);
  }

  Rng rng(derive_seed(seed, "stream"));
  rng.shuffle(stream);
  return chunk_stream(stream, batch_size);
}

TrainResult train_multitask(const Corpus& corpus, const std::vector<std::string>& train_ids,
                            const ModelConfig& model_config, const TrainConfig& config) {
  return train_prompted(corpus, train_ids, config.variant, model_config, config);
}

TrainResult train_single_task_prompt(const Corpus& corpus,
                                     const std::vector<std::string>& train_ids, TaskKind task,
                                     const ModelConfig& model_config, const TrainConfig& config) {
  const std::map<std::string, const UnifiedSample*> index = index_corpus(corpus);
  std::vector<std::string> task_ids;
  for (const std::string& id : train_ids) {
    const auto it = index.find(id);
    if (it == index.end()) throw std::runtime_error("unknown sample id: " + id);
    if (it->second->task_kind == task) task_ids.push_back(id);
  }
  if (task_ids.empty()) {
    throw std::runtime_error("no training samples for task " + task_kind_name(task));
  }
  // The single-task prompting baseline always trains on the plain
  // no-explanations templates, whatever the config asks for elsewhere.
  return train_prompted(corpus, task_ids, SchemaVariant::NoExplanations, model_config, config);
}

std::string head_input_text(const UnifiedSample& sample, const QueryUnit& unit,
                            const AnswerSchema& schema) {
  if (unit.answer.values.size() != schema.fields.size()) {
    throw std::invalid_argument("query unit arity does not match the answer schema");
  }
  std::string text = sample.text;
  for (size_t i = 0; i < schema.fields.size(); ++i) {
    if (schema.fields[i].is_class) continue;
    const std::string& value = unit.answer.values[i];
    if (value.empty() || value == "none") continue;
    text += " | " + value;
  }
  return text;
}

// --- head classifier -----------------------------------------------------

HeadClassifier::HeadClassifier(const ModelConfig& config, Vocabulary vocabulary,
                               LabelSpace space, uint64_t seed)
    : encoder_(config, std::move(vocabulary), seed), space_(std::move(space)) {
  if (space_.labels.empty()) {
    throw std::invalid_argument("head classifier needs a non-empty label space");
  }
  const size_t hidden = config.encoder.hidden_size;
  const size_t classes = space_.labels.size();
  head_weight_ = make_parameter(hidden, classes);
  head_bias_ = make_parameter(1, classes);
  fill_normal(head_weight_.value, derive_seed(seed, "init:head.weight"));
  fill_normal(head_bias_.value, derive_seed(seed, "init:head.bias"));
}

HeadClassifier::Trace HeadClassifier::forward(const std::vector<int>& ids,
                                              const std::vector<int>& mask) const {
  Trace trace;
  trace.encoder = encoder_.encoder_forward(ids, mask);
  trace.mask = mask;
  trace.pooled = mean_pool(trace.encoder.states(), mask);
  trace.logits = matmul(trace.pooled, head_weight_.value);
  add_row_in_place(trace.logits, head_bias_.value);
  trace.probs = softmax_rows(trace.logits);
  return trace;
}

Matrix HeadClassifier::predict_text(const std::string& text) const {
  const std::vector<int> ids =
      clamp_ids(vocabulary(), text, config().encoder.max_sequence);
  const std::vector<int> mask(ids.size(), 1);
  return forward(ids, mask).probs;
}

std::string HeadClassifier::predict_label(const std::string& text) const {
  const Matrix probs = predict_text(text);
  return space_.labels[argmax_row(probs)];
}

void HeadClassifier::backward(const Trace& trace, const Matrix& dlogits) {
  if (!dlogits.same_shape(trace.logits)) {
    throw std::invalid_argument("dlogits shape does not match the traced logits");
  }
  add_in_place(head_weight_.grad, matmul_tn(trace.pooled, dlogits));
  add_in_place(head_bias_.grad, column_sums(dlogits));
  const Matrix dpooled = matmul_nt(dlogits, head_weight_.value);
  encoder_.encoder_backward(trace.encoder, unpool(dpooled, trace.mask, 1.0));
}

void HeadClassifier::zero_gradients() {
  encoder_.zero_gradients();
  zero_matrix(head_weight_.grad);
  zero_matrix(head_bias_.grad);
}

void HeadClassifier::adam_step(double learning_rate) {
  encoder_.adam_step(learning_rate);
  adam_steps_ += 1;
  adam_update(head_weight_, adam_steps_, learning_rate);
  adam_update(head_bias_, adam_steps_, learning_rate);
}

void save_head_checkpoint(const HeadClassifier& model, const std::string& directory) {
  save_checkpoint(model.encoder(), directory, kNoTemplates);

  json sidecar;
  sidecar["format"] = kHeadFormat;
  sidecar["task"] = task_kind_name(model.space().task_kind);
  sidecar["labels"] = model.space().labels;
  sidecar["includes_null"] = model.space().includes_null;
  sidecar["hidden"] = model.head_weight().value.rows;
  sidecar["classes"] = model.head_weight().value.cols;

  const std::string json_path = (fs::path(directory) / "head.json").string();
  std::ofstream json_out(json_path, std::ios::binary);
  if (!json_out) throw std::runtime_error("cannot open for writing: " + json_path);
  json_out << sidecar.dump(2) << "\n";
  if (!json_out) throw std::runtime_error("write failed: " + json_path);

  const std::string bin_path = (fs::path(directory) / "head.bin").string();
  std::ofstream bin_out(bin_path, std::ios::binary);
  if (!bin_out) throw std::runtime_error("cannot open for writing: " + bin_path);
  const auto dump_matrix = [&bin_out](const Matrix& m) {
    bin_out.write(reinterpret_cast<const char*>(m.data.data()),
                  static_cast<std::streamsize>(m.data.size() * sizeof(double)));
  };
  dump_matrix(model.head_weight().value);
  dump_matrix(model.head_bias().value);
  if (!bin_out) throw std::runtime_error("write failed: " + bin_path);
}

HeadClassifier load_head_checkpoint(const std::string& directory) {
  Seq2SchemaModel encoder = load_checkpoint(directory);

  const std::string json_path = (fs::path(directory) / "head.json").string();
  std::ifstream json_in(json_path, std::ios::binary);
  if (!json_in) throw std::runtime_error("cannot open: " + json_path);
  json sidecar;
  try {
    sidecar = json::parse(json_in);
  } catch (const json::exception& error) {
    throw std::runtime_error(json_path + ": " + error.what());
  }
  if (sidecar.value("format", "") != kHeadFormat) {
    throw std::runtime_error(json_path + ": not a head checkpoint");
  }
  const auto task = parse_task_kind(sidecar.at("task").get<std::string>());
  if (!task.has_value()) throw std::runtime_error(json_path + ": unknown task kind");
  LabelSpace space;
  space.task_kind = *task;
  space.labels = sidecar.at("labels").get<std::vector<std::string>>();
  space.includes_null = sidecar.at("includes_null").get<bool>();

  HeadClassifier model(encoder.config(), encoder.vocabulary(), space, encoder.seed());
  for (const std::string& name : encoder.parameter_names()) {
    model.encoder().parameter(name).value = encoder.parameter(name).value;
  }

  const size_t hidden = model.head_weight().value.rows;
  const size_t classes = model.head_weight().value.cols;
  if (sidecar.at("hidden").get<size_t>() != hidden ||
      sidecar.at("classes").get<size_t>() != classes) {
    throw std::runtime_error(json_path + ": head shape does not match the encoder config");
  }

  const std::string bin_path = (fs::path(directory) / "head.bin").string();
  std::ifstream bin_in(bin_path, std::ios::binary);
  if (!bin_in) throw std::runtime_error("cannot open: " + bin_path);
  const auto read_matrix = [&bin_in, &bin_path](Matrix& m) {
    bin_in.read(reinterpret_cast<char*>(m.data.data()),
                static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    if (static_cast<size_t>(bin_in.gcount()) != m.data.size() * sizeof(double)) {
      throw std::runtime_error(bin_path + ": truncated head weights");
    }
  };
  read_matrix(model.head_weight().value);
  read_matrix(model.head_bias().value);
  bin_in.peek();
  if (!bin_in.eof()) throw std::runtime_error(bin_path + ": trailing bytes");
  return model;
}

// --- unit collection shared by the head and mixture baselines ------------

namespace {

struct ClassifierUnit {
  std::string sample_id;
  TaskKind task = TaskKind::Ner;
  std::string input;
  std::string label;  // normalized class label
  size_t label_index = 0;
};

std::vector<ClassifierUnit> collect_units(const std::map<std::string, const UnifiedSample*>& index,
                                          const std::vector<std::string>& ids,
                                          const LabelSpaceSet& spaces,
                                          const std::set<TaskKind>& tasks) {
  std::map<TaskKind, AnswerSchema> schemas;
  std::map<TaskKind, size_t> class_indexes;
  for (const TaskKind task : tasks) {
    schemas[task] = answer_schema_for(task, spaces);
    class_indexes[task] = class_field_index(schemas[task]);
  }

  std::vector<ClassifierUnit> units;
  for (const std::string& id : ids) {
    const auto it = index.find(id);
    if (it == index.end()) throw std::runtime_error("unknown sample id: " + id);
    const UnifiedSample& sample = *it->second;
    if (tasks.find(sample.task_kind) == tasks.end()) continue;
    const AnswerSchema& schema = schemas.at(sample.task_kind);
    const LabelSpace& space = spaces.at(sample.task_kind);
    for (const QueryUnit& unit : query_units(sample)) {
      ClassifierUnit out;
      out.sample_id = sample.sample_id;
      out.task = sample.task_kind;
      out.input = head_input_text(sample, unit, schema);
      out.label = normalize_label(unit.answer.values[class_indexes.at(sample.task_kind)]);
      const auto pos = std::lower_bound(space.labels.begin(), space.labels.end(), out.label);
      if (pos == space.labels.end() || *pos != out.label) {
        throw std::runtime_error("sample " + sample.sample_id + " uses the label '" +
                                 out.label + "' missing from its task label space");
      }
      out.label_index = static_cast<size_t>(pos - space.labels.begin());
      units.push_back(std::move(out));
    }
  }
  return units;
}

std::vector<std::string> unit_inputs(const std::vector<ClassifierUnit>& units) {
  std::vector<std::string> texts;
  texts.reserve(units.size());
  for (const ClassifierUnit& unit : units) texts.push_back(unit.input);
  return texts;
}

}  // namespace

HeadTrainResult train_single_task_head(const Corpus& corpus,
                                       const std::vector<std::string>& train_ids, TaskKind task,
                                       const ModelConfig& model_config,
                                       const TrainConfig& config) {
  validate_config(config);
  const std::map<std::string, const UnifiedSample*> index = index_corpus(corpus);
  std::vector<std::string> task_ids;
  for (const std::string& id : train_ids) {
    const auto it = index.find(id);
    if (it == index.end()) throw std::runtime_error("unknown sample id: " + id);
    if (it->second->task_kind == task) task_ids.push_back(id);
  }
  if (task_ids.empty()) {
    throw std::runtime_error("no training samples for task " + task_kind_name(task));
  }

  const IdSplit split = split_validation(task_ids, config.validation_fraction, config.seed);
  const LabelSpaceSet spaces = label_spaces_of(corpus);
  const std::set<TaskKind> tasks{task};
  const std::vector<ClassifierUnit> fit = collect_units(index, split.fit, spaces, tasks);
  const std::vector<ClassifierUnit> val = collect_units(index, split.val, spaces, tasks);
  if (fit.empty()) {
    throw std::runtime_error("the training subset yields no classification units");
  }
  const double gamma = config.loss == LossKind::kFocal ? config.focal_gamma : 0.0;

  const Vocabulary vocabulary = Vocabulary::build(unit_inputs(fit));
  HeadClassifier model(model_config, vocabulary, spaces.at(task),
                       derive_seed(config.seed, "model"));

  const auto encode_units = [&](const std::vector<ClassifierUnit>& source) {
    std::vector<std::vector<int>> encoded;
    encoded.reserve(source.size());
    for (const ClassifierUnit& unit : source) {
      encoded.push_back(clamp_ids(vocabulary, unit.input, model_config.encoder.max_sequence));
    }
    return encoded;
  };
  const std::vector<std::vector<int>> fit_ids = encode_units(fit);
  const std::vector<std::vector<int>> val_ids = encode_units(val);

  std::vector<std::string> groups(fit.size(), task_kind_name(task));
  std::vector<std::string> class_keys;
  if (config.sampler == SamplerKind::kClassBalanced) {
    for (const ClassifierUnit& unit : fit) class_keys.push_back(unit.label);
  }

  const auto unit_loss_probs = [&](size_t index_in_val) {
    const std::vector<int> mask(val_ids[index_in_val].size(), 1);
    return model.forward(val_ids[index_in_val], mask).probs;
  };

  StopMonitor monitor{!config.stop_on_loss, config.patience};
  std::map<std::string, Matrix> best_encoder;
  Matrix best_weight;
  Matrix best_bias;
  size_t best_epoch = 0;
  std::vector<EpochLog> log;

  for (size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const uint64_t epoch_seed = derive_seed(config.seed, "epoch:" + std::to_string(epoch));
    const std::vector<std::vector<size_t>> batches =
        config.sampler == SamplerKind::kClassBalanced
            ? class_balanced_batches(class_keys, config.batch_size, epoch_seed)
            : proportional_batches(groups, config.batch_size, config.mixing_temperature,
                                   epoch_seed);

    double loss_sum = 0.0;
    for (size_t b = 0; b < batches.size(); ++b) {
      model.zero_gradients();
      double batch_loss = 0.0;
      const double batch_scale = 1.0 / static_cast<double>(batches[b].size());
      try {
        for (const size_t i : batches[b]) {
          const std::vector<int> mask(fit_ids[i].size(), 1);
          const HeadClassifier::Trace trace = model.forward(fit_ids[i], mask);
          const std::vector<int> gold{static_cast<int>(fit[i].label_index)};
          batch_loss += focal_loss(trace.probs, gold, gamma) * batch_scale;
          Matrix dlogits = focal_loss_dlogits(trace.probs, gold, gamma);
          scale_in_place(dlogits, batch_scale);
          model.backward(trace, dlogits);
        }
      } catch (const std::runtime_error& error) {
        throw_diverged(error.what(), b + 1, epoch);
      }
      require_finite_batch(batch_loss, b + 1, epoch);
      model.adam_step(config.learning_rate);
      loss_sum += batch_loss;
    }
    const double train_loss = loss_sum / static_cast<double>(batches.size());

    double val_f1 = 0.0;
    double val_loss = 0.0;
    if (!val.empty()) {
      ConfusionTable table;
      for (size_t i = 0; i < val.size(); ++i) {
        const Matrix probs = unit_loss_probs(i);
        table.add(val[i].label, model.space().labels[argmax_row(probs)]);
        const std::vector<int> gold{static_cast<int>(val[i].label_index)};
        val_loss += focal_loss(probs, gold, gamma) / static_cast<double>(val.size());
      }
      val_f1 = micro_f1(table);
    }
    log.push_back({epoch, train_loss, val_f1, config.learning_rate, config.seed});

    if (!val.empty()) {
      if (monitor.observe(epoch, config.stop_on_loss ? val_loss : val_f1)) {
        best_encoder = snapshot_values(model.encoder());
        best_weight = model.head_weight().value;
        best_bias = model.head_bias().value;
        best_epoch = epoch;
      }
      if (monitor.should_stop()) break;
    } else {
      best_epoch = epoch;
    }
  }
  if (!best_encoder.empty()) {
    restore_values(model.encoder(), best_encoder);
    model.head_weight().value = best_weight;
    model.head_bias().value = best_bias;
  }

  return HeadTrainResult{std::move(model), std::move(log), best_epoch, split.val};
}

// --- mixture of experts ---------------------------------------------------

MmoeModel::MmoeModel(const ModelConfig& config, Vocabulary vocabulary, LabelSpaceSet spaces,
                     const MmoeConfig& mmoe, uint64_t seed)
    : spaces_(std::move(spaces)), mmoe_(mmoe) {
  if (mmoe_.experts < 1) throw std::invalid_argument("expert count must be at least 1");
  if (mmoe_.shared_layers > config.encoder.layers) {
    throw std::invalid_argument("shared layers exceed the encoder depth");
  }
  if (spaces_.empty()) {
    throw std::invalid_argument("mixture model needs at least one task label space");
  }

  experts_.reserve(mmoe_.experts);
  for (size_t k = 0; k < mmoe_.experts; ++k) {
    experts_.emplace_back(config, vocabulary,
                          derive_seed(seed, "expert:" + std::to_string(k)));
  }
  // Tied parameters start from expert 0's draw; adam_step keeps them equal
  // by feeding every copy the summed gradient.
  for (const std::string& name : tied_parameter_names()) {
    for (size_t k = 1; k < experts_.size(); ++k) {
      experts_[k].parameter(name).value = experts_[0].parameter(name).value;
    }
  }

  const size_t hidden = config.encoder.hidden_size;
  for (const auto& [task, space] : spaces_) {
    if (space.labels.empty()) {
      throw std::invalid_argument("empty label space for task " + task_kind_name(task));
    }
    const size_t classes = space.labels.size();
    gates_[task] = make_parameter(1, mmoe_.experts);
    head_weights_[task] = make_parameter(hidden, classes);
    head_biases_[task] = make_parameter(1, classes);
    const std::string tag = task_kind_name(task);
    fill_normal(head_weights_[task].value, derive_seed(seed, "init:head.weight:" + tag));
    fill_normal(head_biases_[task].value, derive_seed(seed, "init:head.bias:" + tag));
    // Gate logits stay zero so every task starts from the uniform mixture.
  }
}

std::vector<std::string> MmoeModel::tied_parameter_names() const {
  std::vector<std::string> names;
  if (mmoe_.shared_layers == 0) return names;
  names.push_back("enc.tok_embed");
  names.push_back("enc.pos_embed");
  for (size_t l = 0; l < mmoe_.shared_layers; ++l) {
    const std::string prefix = "enc." + std::to_string(l) + ".";
    for (const char* leaf : {"wq", "wk", "wv", "wo", "bo"}) {
      names.push_back(prefix + leaf);
    }
  }
  return names;
}

std::vector<double> MmoeModel::gate_weights(TaskKind task) const {
  const Matrix probs = softmax_rows(gates_.at(task).value);
  std::vector<double> weights(probs.cols);
  for (size_t k = 0; k < probs.cols; ++k) weights[k] = probs(0, k);
  return weights;
}

Matrix MmoeModel::expert_pooled(size_t k, const std::vector<int>& ids,
                                const std::vector<int>& mask) const {
  const EncoderTrace trace = experts_.at(k).encoder_forward(ids, mask);
  return mean_pool(trace.states(), mask);
}

MmoeModel::Trace MmoeModel::forward(TaskKind task, const std::vector<int>& ids,
                                    const std::vector<int>& mask) const {
  if (spaces_.find(task) == spaces_.end()) {
    throw std::invalid_argument("no label space for task " + task_kind_name(task));
  }
  Trace trace;
  trace.task = task;
  trace.mask = mask;
  for (const Seq2SchemaModel& expert : experts_) {
    trace.expert_traces.push_back(expert.encoder_forward(ids, mask));
    trace.pooled.push_back(mean_pool(trace.expert_traces.back().states(), mask));
  }
  trace.gates = gate_weights(task);

  const size_t hidden = trace.pooled.front().cols;
  trace.hidden = Matrix(1, hidden);
  for (size_t k = 0; k < experts_.size(); ++k) {
    for (size_t j = 0; j < hidden; ++j) {
      trace.hidden(0, j) += trace.gates[k] * trace.pooled[k](0, j);
    }
  }
  trace.logits = matmul(trace.hidden, head_weights_.at(task).value);
  add_row_in_place(trace.logits, head_biases_.at(task).value);
  trace.probs = softmax_rows(trace.logits);
  return trace;
}

Matrix MmoeModel::predict_text(TaskKind task, const std::string& text) const {
  const std::vector<int> ids =
      clamp_ids(vocabulary(), text, config().encoder.max_sequence);
  const std::vector<int> mask(ids.size(), 1);
  return forward(task, ids, mask).probs;
}

std::string MmoeModel::predict_label(TaskKind task, const std::string& text) const {
  const Matrix probs = predict_text(task, text);
  return spaces_.at(task).labels[argmax_row(probs)];
}

void MmoeModel::backward(const Trace& trace, const Matrix& dlogits) {
  if (!dlogits.same_shape(trace.logits)) {
    throw std::invalid_argument("dlogits shape does not match the traced logits");
  }
  const TaskKind task = trace.task;
  add_in_place(head_weights_.at(task).grad, matmul_tn(trace.hidden, dlogits));
  add_in_place(head_biases_.at(task).grad, column_sums(dlogits));
  const Matrix dhidden = matmul_nt(dlogits, head_weights_.at(task).value);

  Matrix gates_row(1, experts_.size());
  Matrix dgates(1, experts_.size());
  for (size_t k = 0; k < experts_.size(); ++k) {
    gates_row(0, k) = trace.gates[k];
    double dot = 0.0;
    for (size_t j = 0; j < dhidden.cols; ++j) dot += dhidden(0, j) * trace.pooled[k](0, j);
    dgates(0, k) = dot;
  }
  add_in_place(gates_.at(task).grad, softmax_backward(gates_row, dgates));

  for (size_t k = 0; k < experts_.size(); ++k) {
    experts_[k].encoder_backward(trace.expert_traces[k],
                                 unpool(dhidden, trace.mask, trace.gates[k]));
  }
}

void MmoeModel::zero_gradients() {
  for (Seq2SchemaModel& expert : experts_) expert.zero_gradients();
  for (auto& [task, param] : gates_) zero_matrix(param.grad);
  for (auto& [task, param] : head_weights_) zero_matrix(param.grad);
  for (auto& [task, param] : head_biases_) zero_matrix(param.grad);
}

void MmoeModel::adam_step(double learning_rate) {
  for (const std::string& name : tied_parameter_names()) {
    Matrix total = experts_[0].parameter(name).grad;
    for (size_t k = 1; k < experts_.size(); ++k) {
      add_in_place(total, experts_[k].parameter(name).grad);
    }
    for (Seq2SchemaModel& expert : experts_) expert.parameter(name).grad = total;
  }
  for (Seq2SchemaModel& expert : experts_) expert.adam_step(learning_rate);
  adam_steps_ += 1;
  for (auto& [task, param] : gates_) adam_update(param, adam_steps_, learning_rate);
  for (auto& [task, param] : head_weights_) adam_update(param, adam_steps_, learning_rate);
  for (auto& [task, param] : head_biases_) adam_update(param, adam_steps_, learning_rate);
}

void save_mmoe_checkpoint(const MmoeModel& model, const std::string& directory) {
  fs::create_directories(directory);
  for (size_t k = 0; k < model.experts(); ++k) {
    const std::string subdir =
        (fs::path(directory) / ("expert_" + std::to_string(k))).string();
    save_checkpoint(model.expert(k), subdir, kNoTemplates);
  }

  json sidecar;
  sidecar["format"] = kMmoeFormat;
  sidecar["experts"] = model.experts();
  sidecar["shared_layers"] = model.mmoe_config().shared_layers;
  json spaces = json::object();
  for (const auto& [task, space] : model.spaces()) {
    spaces[task_kind_name(task)] = {{"labels", space.labels},
                                    {"includes_null", space.includes_null}};
  }
  sidecar["spaces"] = spaces;

  const std::string json_path = (fs::path(directory) / "mmoe.json").string();
  std::ofstream json_out(json_path, std::ios::binary);
  if (!json_out) throw std::runtime_error("cannot open for writing: " + json_path);
  json_out << sidecar.dump(2) << "\n";
  if (!json_out) throw std::runtime_error("write failed: " + json_path);

  const std::string bin_path = (fs::path(directory) / "mmoe.bin").string();
  std::ofstream bin_out(bin_path, std::ios::binary);
  if (!bin_out) throw std::runtime_error("cannot open for writing: " + bin_path);
  const auto dump_matrix = [&bin_out](const Matrix& m) {
    bin_out.write(reinterpret_cast<const char*>(m.data.data()),
                  static_cast<std::streamsize>(m.data.size() * sizeof(double)));
  };
  for (const auto& [task, space] : model.spaces()) {
    dump_matrix(model.gate(task).value);
    dump_matrix(model.head_weight(task).value);
    dump_matrix(model.head_bias(task).value);
  }
  if (!bin_out) throw std::runtime_error("write failed: " + bin_path);
}

MmoeModel load_mmoe_checkpoint(const std::string& directory) {
  const std::string json_path = (fs::path(directory) / "mmoe.json").string();
  std::ifstream json_in(json_path, std::ios::binary);
  if (!json_in) throw std::runtime_error("cannot open: " + json_path);
  json sidecar;
  try {
    sidecar = json::parse(json_in);
  } catch (const json::exception& error) {
    throw std::runtime_error(json_path + ": " + error.what());
  }
  if (sidecar.value("format", "") != kMmoeFormat) {
    throw std::runtime_error(json_path + ": not a mixture checkpoint");
  }

  MmoeConfig mmoe;
  mmoe.experts = sidecar.at("experts").get<size_t>();
  mmoe.shared_layers = sidecar.at("shared_layers").get<size_t>();
  if (mmoe.experts < 1) throw std::runtime_error(json_path + ": no experts recorded");

  LabelSpaceSet spaces;
  for (const auto& [name, entry] : sidecar.at("spaces").items()) {
    const auto task = parse_task_kind(name);
    if (!task.has_value()) throw std::runtime_error(json_path + ": unknown task kind " + name);
    LabelSpace space;
    space.task_kind = *task;
    space.labels = entry.at("labels").get<std::vector<std::string>>();
    space.includes_null = entry.at("includes_null").get<bool>();
    spaces[*task] = std::move(space);
  }

  std::vector<Seq2SchemaModel> experts;
  for (size_t k = 0; k < mmoe.experts; ++k) {
    const std::string subdir =
        (fs::path(directory) / ("expert_" + std::to_string(k))).string();
    experts.push_back(load_checkpoint(subdir));
  }

  MmoeModel model(experts.front().config(), experts.front().vocabulary(), spaces, mmoe,
                  experts.front().seed());
  for (size_t k = 0; k < mmoe.experts; ++k) {
    for (const std::string& name : experts[k].parameter_names()) {
      model.expert(k).parameter(name).value = experts[k].parameter(name).value;
    }
  }

  const std::string bin_path = (fs::path(directory) / "mmoe.bin").string();
  std::ifstream bin_in(bin_path, std::ios::binary);
  if (!bin_in) throw std::runtime_error("cannot open: " + bin_path);
  const auto read_matrix = [&bin_in, &bin_path](Matrix& m) {
    bin_in.read(reinterpret_cast<char*>(m.data.data()),
                static_cast<std::streamsize>(m.data.size() * sizeof(double)));
    if (static_cast<size_t>(bin_in.gcount()) != m.data.size() * sizeof(double)) {
      throw std::runtime_error(bin_path + ": truncated mixture weights");
    }
  };
  for (const auto& [task, space] : model.spaces()) {
    read_matrix(model.gate(task).value);
    read_matrix(model.head_weight(task).value);
    read_matrix(model.head_bias(task).value);
  }
  bin_in.peek();
  if (!bin_in.eof()) throw std::runtime_error(bin_path + ": trailing bytes");
  return model;
}

MmoeTrainResult train_mmoe(const Corpus& corpus, const std::vector<std::string>& train_ids,
                           const ModelConfig& model_config, const MmoeConfig& mmoe,
                           const TrainConfig& config) {
  validate_config(config);
  const std::map<std::string, const UnifiedSample*> index = index_corpus(corpus);
  const IdSplit split = split_validation(train_ids, config.validation_fraction, config.seed);
  const LabelSpaceSet spaces = label_spaces_of(corpus);

  std::set<TaskKind> tasks;
  for (const auto& [task, space] : spaces) tasks.insert(task);
  const std::vector<ClassifierUnit> fit = collect_units(index, split.fit, spaces, tasks);
  const std::vector<ClassifierUnit> val = collect_units(index, split.val, spaces, tasks);
  if (fit.empty()) {
    throw std::runtime_error("the training subset yields no classification units");
  }
  const double gamma = config.loss == LossKind::kFocal ? config.focal_gamma : 0.0;

  const Vocabulary vocabulary = Vocabulary::build(unit_inputs(fit));
  MmoeModel model(model_config, vocabulary, spaces, mmoe, derive_seed(config.seed, "model"));

  const auto encode_units = [&](const std::vector<ClassifierUnit>& source) {
    std::vector<std::vector<int>> encoded;
    encoded.reserve(source.size());
    for (const ClassifierUnit& unit : source) {
      encoded.push_back(clamp_ids(vocabulary, unit.input, model_config.encoder.max_sequence));
    }
    return encoded;
  };
  const std::vector<std::vector<int>> fit_ids = encode_units(fit);
  const std::vector<std::vector<int>> val_ids = encode_units(val);

  std::vector<std::string> groups;
  std::vector<std::string> class_keys;
  for (const ClassifierUnit& unit : fit) {
    groups.push_back(task_kind_name(unit.task));
    if (config.sampler == SamplerKind::kClassBalanced) {
      class_keys.push_back(task_kind_name(unit.task) + "/" + unit.label);
    }
  }

  StopMonitor monitor{!config.stop_on_loss, config.patience};
  std::vector<std::map<std::string, Matrix>> best_experts;
  std::map<TaskKind, Matrix> best_gates;
  std::map<TaskKind, Matrix> best_head_weights;
  std::map<TaskKind, Matrix> best_head_biases;
  size_t best_epoch = 0;
  std::vector<EpochLog> log;

  const auto snapshot = [&]() {
    best_experts.clear();
    for (size_t k = 0; k < model.experts(); ++k) {
      best_experts.push_back(snapshot_values(model.expert(k)));
    }
    best_gates.clear();
    best_head_weights.clear();
    best_head_biases.clear();
    for (const auto& [task, space] : model.spaces()) {
      best_gates[task] = model.gate(task).value;
      best_head_weights[task] = model.head_weight(task).value;
      best_head_biases[task] = model.head_bias(task).value;
    }
  };
  const auto restore = [&]() {
    for (size_t k = 0; k < model.experts(); ++k) restore_values(model.expert(k), best_experts[k]);
    for (const auto& [task, value] : best_gates) model.gate(task).value = value;
    for (const auto& [task, value] : best_head_weights) model.head_weight(task).value = value;
    for (const auto& [task, value] : best_head_biases) model.head_bias(task).value = value;
  };

  for (size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const uint64_t epoch_seed = derive_seed(config.seed, "epoch:" + std::to_string(epoch));
    const std::vector<std::vector<size_t>> batches =
        config.sampler == SamplerKind::kClassBalanced
            ? class_balanced_batches(class_keys, config.batch_size, epoch_seed)
            : proportional_batches(groups, config.batch_size, config.mixing_temperature,
                                   epoch_seed);

    double loss_sum = 0.0;
    for (size_t b = 0; b < batches.size(); ++b) {
      model.zero_gradients();
      double batch_loss = 0.0;
      const double batch_scale = 1.0 / static_cast<double>(batches[b].size());
      try {
        for (const size_t i : batches[b]) {
          const std::vector<int> mask(fit_ids[i].size(), 1);
          const MmoeModel::Trace trace = model.forward(fit[i].task, fit_ids[i], mask);
          const std::vector<int> gold{static_cast<int>(fit[i].label_index)};
          batch_loss += focal_loss(trace.probs, gold, gamma) * batch_scale;
          Matrix dlogits = focal_loss_dlogits(trace.probs, gold, gamma);
          scale_in_place(dlogits, batch_scale);
          model.backward(trace, dlogits);
        }
      } catch (const std::runtime_error& error) {
        throw_diverged(error.what(), b + 1, epoch);
      }
      require_finite_batch(batch_loss, b + 1, epoch);
      model.adam_step(config.learning_rate);
      loss_sum += batch_loss;
    }
    const double train_loss = loss_sum / static_cast<double>(batches.size());

    double val_f1 = 0.0;
    double val_loss = 0.0;
    if (!val.empty()) {
      ConfusionTable table;
      for (size_t i = 0; i < val.size(); ++i) {
        const std::vector<int> mask(val_ids[i].size(), 1);
        const Matrix probs = model.forward(val[i].task, val_ids[i], mask).probs;
        const std::string prefix = task_kind_name(val[i].task) + "/";
        const LabelSpace& space = spaces.at(val[i].task);
        table.add(prefix + val[i].label, prefix + space.labels[argmax_row(probs)]);
        const std::vector<int> gold{static_cast<int>(val[i].label_index)};
        val_loss += focal_loss(probs, gold, gamma) / static_cast<double>(val.size());
      }
      val_f1 = micro_f1(table);
    }
    log.push_back({epoch, train_loss, val_f1, config.learning_rate, config.seed});

    if (!val.empty()) {
      if (monitor.observe(epoch, config.stop_on_loss ? val_loss : val_f1)) {
        snapshot();
        best_epoch = epoch;
      }
      if (monitor.should_stop()) break;
    } else {
      best_epoch = epoch;
    }
  }
  if (!best_experts.empty()) restore();

  return MmoeTrainResult{std::move(model), std::move(log), best_epoch, split.val};
}

}  // namespace t2s
