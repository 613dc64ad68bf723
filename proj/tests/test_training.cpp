#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "t2s/corpus.hpp"
#include "t2s/decoding.hpp"
#include "t2s/metrics.hpp"
#include "t2s/rng.hpp"
#include "t2s/schema.hpp"
#include "t2s/text.hpp"
#include "t2s/training.hpp"

using namespace t2s;

namespace {

struct ScratchDir {
  std::filesystem::path path;

  ScratchDir() {
    path = std::filesystem::temp_directory_path() / "t2s_training_test";
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~ScratchDir() { std::filesystem::remove_all(path); }

  std::string sub(const std::string& name) const { return (path / name).string(); }
};

double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), 1e-5});
}

// Paragraph-classification corpus whose class is a literal marker word in
// the text, so the mapping is fully separable.
Corpus synthetic_three_class(size_t count) {
  const std::vector<std::string> markers{"alpha", "beta", "gamma"};
  const std::vector<std::string> fillers{"furnace", "powder", "signal", "cycle", "probe",
                                         "ingot"};
  Corpus corpus;
  Rng rng(424242);
  for (size_t i = 0; i < count; ++i) {
    const std::string& marker = markers[i % markers.size()];
    char id[16];
    std::snprintf(id, sizeof id, "syn:%04zu", i);
    UnifiedSample sample;
    sample.sample_id = id;
    sample.source_id = "synthetic";
    sample.task_kind = TaskKind::ParagraphClassification;
    sample.text = "the " + fillers[rng.below(fillers.size())] + " run shows " + marker +
                  " phase near the " + fillers[rng.below(fillers.size())] + " stage";
    sample.payload = TextLabelPayload{marker};
    corpus.push_back(sample);
  }
  return corpus;
}

// Binary sentence-classification corpus keyed by a marker word.
Corpus synthetic_binary_sentences(size_t count) {
  Corpus corpus;
  Rng rng(777);
  const std::vector<std::string> fillers{"melt", "cool", "stir", "dry"};
  for (size_t i = 0; i < count; ++i) {
    const bool relevant = i % 2 == 0;
    char id[16];
    std::snprintf(id, sizeof id, "sen:%04zu", i);
    UnifiedSample sample;
    sample.sample_id = id;
    sample.source_id = "synthetic";
    sample.task_kind = TaskKind::SentenceClassification;
    sample.text = std::string("they ") + fillers[rng.below(fillers.size())] + " the " +
                  (relevant ? "good" : "bad") + " batch " +
                  fillers[rng.below(fillers.size())] + " wise";
    sample.payload = TextLabelPayload{relevant ? "relevant" : "irrelevant"};
    corpus.push_back(sample);
  }
  return corpus;
}

// One hand-built valid sample per task kind, offsets checked by
// validate_sample in the test that uses them.
UnifiedSample tiny_sample(TaskKind kind, size_t index) {
  UnifiedSample sample;
  sample.sample_id = task_kind_name(kind) + ":" + std::to_string(index);
  sample.source_id = "tiny";
  sample.task_kind = kind;
  switch (kind) {
    case TaskKind::Ner:
      sample.text = "iron oxide melts near quartz";
      sample.payload = NerPayload{{{0, 10, "iron oxide", "material"},
                                   {22, 28, "quartz", "material"}}};
      break;
    case TaskKind::RelationClassification:
      sample.text = "silica has band gap";
      sample.payload =
          RelationPayload{{0, 6, "silica", ""}, {11, 19, "band gap", ""}, "has_band_gap"};
      break;
    case TaskKind::EventArgumentExtraction:
      sample.text = "heated the mixture in air";
      sample.payload = EventPayload{{0, 6, "heated", "operation"},
                                    {{11, 18, "mixture", "target"}}};
      break;
    case TaskKind::ParagraphClassification:
      sample.text = "the melt formed a clear glass";
      sample.payload = TextLabelPayload{"glass"};
      break;
    case TaskKind::SynthesisActionRetrieval:
      sample.text = "heat the sample slowly";
      sample.payload = SarPayload{{{0, 4, "heat", "heating"}}};
      break;
    case TaskKind::SentenceClassification:
      sample.text = "the result was promising";
      sample.payload = TextLabelPayload{"relevant"};
      break;
    case TaskKind::SlotFilling:
      sample.text = "anneal at high temperature";
      sample.payload = SlotPayload{"frame_a", {{10, 26, "high temperature", "condition"}}};
      break;
  }
  return sample;
}

ModelConfig tiny_model_config() {
  ModelConfig config;
  config.encoder.checkpoint = "tiny-reference";
  config.encoder.hidden_size = 8;
  config.encoder.layers = 2;
  config.encoder.heads = 2;
  config.encoder.max_sequence = 24;
  config.decoder.layers = 1;
  config.decoder.heads = 2;
  config.decoder.max_generate = 6;
  return config;
}

std::vector<std::string> ids_of(const Corpus& corpus) {
  std::vector<std::string> ids;
  for (const UnifiedSample& sample : corpus) ids.push_back(sample.sample_id);
  return ids;
}

void check_param_fd(Parameter& param, const std::function<double()>& loss, Rng& rng) {
  const double step = 1e-5;
  const size_t samples = std::min<size_t>(5, param.value.data.size());
  for (size_t s = 0; s < samples; ++s) {
    const size_t index = param.value.data.size() <= samples
                             ? s
                             : static_cast<size_t>(rng.below(param.value.data.size()));
    const double saved = param.value.data[index];
    param.value.data[index] = saved + step;
    const double up = loss();
    param.value.data[index] = saved - step;
    const double down = loss();
    param.value.data[index] = saved;
    const double fd = (up - down) / (2.0 * step);
    CHECK_MESSAGE(rel_err(param.grad.data[index], fd) < 1e-4,
                  "analytic " << param.grad.data[index] << " vs fd " << fd);
  }
}

}  // namespace

TEST_CASE("loss and sampler wire names round-trip") {
  for (LossKind kind : {LossKind::kCrossEntropy, LossKind::kFocal}) {
    CHECK(parse_loss_kind(loss_kind_name(kind)) == kind);
  }
  for (SamplerKind kind : {SamplerKind::kUniform, SamplerKind::kClassBalanced}) {
    CHECK(parse_sampler_kind(sampler_kind_name(kind)) == kind);
  }
  CHECK(loss_kind_name(LossKind::kFocal) == "focal");
  CHECK(sampler_kind_name(SamplerKind::kClassBalanced) == "class_balanced");
  CHECK_FALSE(parse_loss_kind("hinge").has_value());
  CHECK_FALSE(parse_sampler_kind("poisson").has_value());
}

TEST_CASE("train config validation accepts defaults and a zero learning rate") {
  TrainConfig config;
  CHECK_NOTHROW(validate_config(config));
  config.learning_rate = 0.0;
  CHECK_NOTHROW(validate_config(config));

  const auto rejects = [](const std::function<void(TrainConfig&)>& mutate) {
    TrainConfig bad;
    mutate(bad);
    CHECK_THROWS_AS(validate_config(bad), std::invalid_argument);
  };
  rejects([](TrainConfig& c) { c.learning_rate = -1e-5; });
  rejects([](TrainConfig& c) { c.max_epochs = 0; });
  rejects([](TrainConfig& c) { c.batch_size = 0; });
  rejects([](TrainConfig& c) { c.focal_gamma = -0.5; });
  rejects([](TrainConfig& c) { c.validation_fraction = 1.0; });
  rejects([](TrainConfig& c) { c.validation_fraction = -0.1; });
  rejects([](TrainConfig& c) { c.mixing_temperature = 0.0; });
  rejects([](TrainConfig& c) { c.repeats = 0; });
}

TEST_CASE("focal loss at gamma zero equals cross-entropy on random simplices") {
  Rng rng(31);
  for (size_t trial = 0; trial < 1000; ++trial) {
    const size_t cols = 2 + rng.below(8);
    Matrix probs(1, cols);
    double total = 0.0;
    for (size_t j = 0; j < cols; ++j) {
      probs(0, j) = -std::log(std::max(rng.uniform(), 1e-12));
      total += probs(0, j);
    }
    for (size_t j = 0; j < cols; ++j) probs(0, j) /= total;
    const std::vector<int> gold{static_cast<int>(rng.below(cols))};

    const double focal = focal_loss(probs, gold, 0.0);
    const double cross_entropy = -std::log(probs(0, static_cast<size_t>(gold[0])));
    CHECK(std::fabs(focal - cross_entropy) <= 1e-9);
  }
}

TEST_CASE("focal loss matches hand values and guards its edges") {
  Matrix certain(1, 2);
  certain(0, 0) = 1.0;
  certain(0, 1) = 0.0;
  CHECK(focal_loss(certain, {0}, 2.0) == 0.0);
  CHECK(focal_loss(certain, {0}, 0.0) == 0.0);

  Matrix confident(1, 2);
  confident(0, 0) = 0.9;
  confident(0, 1) = 0.1;
  const double expected = -0.01 * std::log(0.9);
  CHECK(std::fabs(focal_loss(confident, {0}, 2.0) - expected) < 1e-15);
  CHECK(focal_loss(confident, {0}, 2.0) == doctest::Approx(1.0536e-3).epsilon(1e-3));

  Matrix two_rows(2, 2);
  two_rows(0, 0) = 0.9;
  two_rows(0, 1) = 0.1;
  two_rows(1, 0) = 0.2;
  two_rows(1, 1) = 0.8;
  const double mean = focal_loss(two_rows, {0, 1}, 2.0);
  const double by_hand =
      0.5 * (-0.01 * std::log(0.9) + -std::pow(0.2, 2.0) * std::log(0.8));
  CHECK(std::fabs(mean - by_hand) < 1e-15);

  CHECK_THROWS_AS(focal_loss(confident, {0, 1}, 2.0), std::invalid_argument);
  CHECK_THROWS_AS(focal_loss(confident, {2}, 2.0), std::invalid_argument);
  CHECK_THROWS_AS(focal_loss(confident, {-1}, 2.0), std::invalid_argument);
  CHECK_THROWS_AS(focal_loss(confident, {0}, -1.0), std::invalid_argument);
  CHECK_THROWS_AS(focal_loss(Matrix(0, 2), {}, 2.0), std::invalid_argument);
}

TEST_CASE("focal gradient matches finite differences over logits") {
  Rng rng(52);
  for (const double gamma : {0.0, 0.5, 1.0, 2.0, 3.7}) {
    const size_t rows = 2 + rng.below(3);
    const size_t cols = 3 + rng.below(4);
    Matrix logits(rows, cols);
    for (double& x : logits.data) x = rng.normal(0.0, 1.5);
    std::vector<int> gold;
    for (size_t i = 0; i < rows; ++i) gold.push_back(static_cast<int>(rng.below(cols)));

    const auto loss_of = [&](const Matrix& z) { return focal_loss(softmax_rows(z), gold, gamma); };
    const Matrix analytic = focal_loss_dlogits(softmax_rows(logits), gold, gamma);

    const double step = 1e-5;
    for (size_t index = 0; index < logits.data.size(); ++index) {
      Matrix perturbed = logits;
      perturbed.data[index] += step;
      const double up = loss_of(perturbed);
      perturbed.data[index] -= 2.0 * step;
      const double down = loss_of(perturbed);
      const double fd = (up - down) / (2.0 * step);
      CHECK_MESSAGE(rel_err(analytic.data[index], fd) < 1e-4,
                    "gamma " << gamma << ": analytic " << analytic.data[index] << " vs fd "
                             << fd);
    }
  }
}

TEST_CASE("focal gradient at gamma zero is the softmax cross-entropy gradient") {
  Rng rng(53);
  Matrix logits(3, 5);
  for (double& x : logits.data) x = rng.normal(0.0, 1.0);
  const Matrix probs = softmax_rows(logits);
  const std::vector<int> gold{4, 0, 2};

  const Matrix dlogits = focal_loss_dlogits(probs, gold, 0.0);
  for (size_t i = 0; i < probs.rows; ++i) {
    for (size_t j = 0; j < probs.cols; ++j) {
      const double expected =
          (probs(i, j) - (static_cast<int>(j) == gold[i] ? 1.0 : 0.0)) / 3.0;
      CHECK(std::fabs(dlogits(i, j) - expected) < 1e-12);
    }
  }
}

TEST_CASE("class-balanced batches hit uniform per-batch composition") {
  std::vector<std::string> labels;
  for (size_t i = 0; i < 90; ++i) labels.push_back("major");
  for (size_t i = 0; i < 10; ++i) labels.push_back("minor");

  const auto batches = class_balanced_batches(labels, 10, 9);
  CHECK(batches.size() == 18);
  std::set<size_t> seen;
  for (const auto& batch : batches) {
    REQUIRE(batch.size() == 10);
    size_t major = 0;
    size_t minor = 0;
    for (const size_t index : batch) {
      seen.insert(index);
      (labels[index] == "major" ? major : minor) += 1;
    }
    CHECK(major == 5);
    CHECK(minor == 5);
  }
  // Every sample appears at least once; the majority class exactly once.
  CHECK(seen.size() == labels.size());
  std::vector<size_t> counts(labels.size(), 0);
  for (const auto& batch : batches) {
    for (const size_t index : batch) counts[index] += 1;
  }
  for (size_t i = 0; i < 90; ++i) CHECK(counts[i] == 1);
  for (size_t i = 90; i < 100; ++i) CHECK(counts[i] == 9);

  CHECK(class_balanced_batches(labels, 10, 9) == batches);
  CHECK(class_balanced_batches(labels, 10, 10) != batches);
  CHECK_THROWS_AS(class_balanced_batches({}, 4, 1), std::invalid_argument);
  CHECK_THROWS_AS(class_balanced_batches(labels, 0, 1), std::invalid_argument);
}

TEST_CASE("class-balanced batching with one class is a shuffled pass") {
  const std::vector<std::string> labels(23, "only");
  const auto batches = class_balanced_batches(labels, 5, 4);
  std::vector<size_t> stream;
  for (const auto& batch : batches) stream.insert(stream.end(), batch.begin(), batch.end());
  CHECK(stream.size() == labels.size());
  std::vector<size_t> sorted = stream;
  std::sort(sorted.begin(), sorted.end());
  for (size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
  CHECK(stream != sorted);
}

TEST_CASE("class frequencies over many balanced batches stay uniform") {
  std::vector<std::string> labels;
  for (size_t i = 0; i < 300; ++i) labels.push_back("a");
  for (size_t i = 0; i < 30; ++i) labels.push_back("b");
  for (size_t i = 0; i < 3; ++i) labels.push_back("c");

  std::map<std::string, size_t> drawn;
  size_t total = 0;
  size_t batch_count = 0;
  for (uint64_t seed = 0; batch_count < 1000; ++seed) {
    for (const auto& batch : class_balanced_batches(labels, 9, seed)) {
      if (batch_count == 1000) break;
      batch_count += 1;
      for (const size_t index : batch) {
        drawn[labels[index]] += 1;
        total += 1;
      }
    }
  }
  for (const auto& [label, count] : drawn) {
    const double frequency = static_cast<double>(count) / static_cast<double>(total);
    CHECK_MESSAGE(std::fabs(frequency - 1.0 / 3.0) < 0.02, label << " at " << frequency);
  }
}

TEST_CASE("proportional batches at temperature one are one full pass") {
  std::vector<std::string> groups;
  for (size_t i = 0; i < 37; ++i) groups.push_back("ner");
  for (size_t i = 0; i < 11; ++i) groups.push_back("slot_filling");
  for (size_t i = 0; i < 2; ++i) groups.push_back("sar");

  const auto batches = proportional_batches(groups, 8, 1.0, 21);
  std::vector<size_t> stream;
  for (const auto& batch : batches) stream.insert(stream.end(), batch.begin(), batch.end());
  CHECK(stream.size() == groups.size());
  std::vector<size_t> sorted = stream;
  std::sort(sorted.begin(), sorted.end());
  for (size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);

  CHECK(proportional_batches(groups, 8, 1.0, 21) == batches);
  CHECK(proportional_batches(groups, 8, 1.0, 22) != batches);
}

TEST_CASE("a high mixing temperature flattens group quotas") {
  std::vector<std::string> groups;
  for (size_t i = 0; i < 90; ++i) groups.push_back("big");
  for (size_t i = 0; i < 10; ++i) groups.push_back("small");

  const auto batches = proportional_batches(groups, 10, 1e6, 3);
  std::map<std::string, size_t> counts;
  for (const auto& batch : batches) {
    for (const size_t index : batch) counts[groups[index]] += 1;
  }
  CHECK(counts["big"] == 50);
  CHECK(counts["small"] == 50);

  CHECK_THROWS_AS(proportional_batches({}, 4, 1.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(proportional_batches(groups, 0, 1.0, 1), std::invalid_argument);
  CHECK_THROWS_AS(proportional_batches(groups, 4, 0.0, 1), std::invalid_argument);
}

TEST_CASE("training log lines round-trip through disk") {
  const ScratchDir scratch;
  const std::vector<EpochLog> log{{1, 2.25, 0.0, 2e-5, 7},
                                  {2, 0.1 + 0.2, 0.625, 2e-5, 7},
                                  {3, 1e-17, 1.0, 0.0, 7}};
  const std::string path = scratch.sub("log.jsonl");
  write_training_log(log, path);
  CHECK(read_training_log(path) == log);

  const std::string bad = scratch.sub("bad.jsonl");
  {
    std::ofstream out(bad);
    out << R"({"epoch": 1, "train_loss": 0.5, "val_micro_f1": 0.5, "lr": 0.1})" << "\n";
  }
  CHECK_THROWS_AS(read_training_log(bad), std::runtime_error);
  {
    std::ofstream out(bad);
    out << R"({"epoch": 1, "train_loss": 0.5, "val_micro_f1": 0.5, "lr": 0.1, "seed": 1, )"
        << R"("extra": true})" << "\n";
  }
  CHECK_THROWS_AS(read_training_log(bad), std::runtime_error);
  {
    std::ofstream out(bad);
    out << "not json\n";
  }
  CHECK_THROWS_AS(read_training_log(bad), std::runtime_error);
  CHECK_THROWS_AS(read_training_log(scratch.sub("absent.jsonl")), std::runtime_error);
}

TEST_CASE("a zero learning rate leaves every parameter at its initialization") {
  const Corpus corpus = synthetic_three_class(12);
  TrainConfig config;
  config.learning_rate = 0.0;
  config.max_epochs = 1;
  config.batch_size = 4;
  config.validation_fraction = 0.0;
  config.seed = 5;

  const TrainResult result =
      train_multitask(corpus, ids_of(corpus), tiny_model_config(), config);

  const Seq2SchemaModel reference(tiny_model_config(), result.model.vocabulary(),
                                  derive_seed(config.seed, "model"));
  for (const std::string& name : reference.parameter_names()) {
    CHECK(result.model.parameter(name).value.data == reference.parameter(name).value.data);
  }
  CHECK(result.best_epoch == 1);
  CHECK(result.validation_ids.empty());
}

TEST_CASE("identical seeds give identical loss curves and different seeds diverge") {
  const Corpus corpus = synthetic_three_class(15);
  TrainConfig config;
  config.learning_rate = 1e-3;
  config.max_epochs = 2;
  config.batch_size = 4;
  config.validation_fraction = 0.2;
  config.seed = 9;

  const ModelConfig model_config = tiny_model_config();
  const TrainResult first = train_multitask(corpus, ids_of(corpus), model_config, config);
  const TrainResult second = train_multitask(corpus, ids_of(corpus), model_config, config);
  CHECK(first.log == second.log);
  CHECK(first.best_epoch == second.best_epoch);
  for (const std::string& name : first.model.parameter_names()) {
    CHECK(first.model.parameter(name).value.data == second.model.parameter(name).value.data);
  }

  config.seed = 10;
  const TrainResult other = train_multitask(corpus, ids_of(corpus), model_config, config);
  CHECK(other.log != first.log);
}

TEST_CASE("the validation holdout is a sorted slice of the training ids") {
  const Corpus corpus = synthetic_three_class(20);
  TrainConfig config;
  config.learning_rate = 0.0;
  config.max_epochs = 1;
  config.validation_fraction = 0.25;
  config.seed = 2;

  const TrainResult result =
      train_multitask(corpus, ids_of(corpus), tiny_model_config(), config);
  CHECK(result.validation_ids.size() == 5);
  CHECK(std::is_sorted(result.validation_ids.begin(), result.validation_ids.end()));
  const std::vector<std::string> all = ids_of(corpus);
  for (const std::string& id : result.validation_ids) {
    CHECK(std::find(all.begin(), all.end(), id) != all.end());
  }
  CHECK(result.log.front().val_micro_f1 >= 0.0);
}

TEST_CASE("early stopping halts after patience non-improving validations") {
  const Corpus corpus = synthetic_three_class(12);
  TrainConfig config;
  config.learning_rate = 0.0;  // frozen model keeps validation F1 flat
  config.max_epochs = 10;
  config.patience = 2;
  config.batch_size = 4;
  config.validation_fraction = 0.4;
  config.seed = 4;

  const TrainResult result =
      train_multitask(corpus, ids_of(corpus), tiny_model_config(), config);
  CHECK(result.log.size() == 3);
  CHECK(result.best_epoch == 1);
}

TEST_CASE("divergence aborts with the offending batch and epoch") {
  const Corpus corpus = synthetic_three_class(6);
  TrainConfig config;
  config.learning_rate = 1e150;
  config.max_epochs = 4;
  config.batch_size = 64;
  config.validation_fraction = 0.0;
  config.seed = 1;

  bool thrown = false;
  try {
    train_multitask(corpus, ids_of(corpus), tiny_model_config(), config);
  } catch (const std::runtime_error& error) {
    thrown = true;
    const std::string message = error.what();
    CHECK_MESSAGE(message.find("diverged") != std::string::npos, message);
    CHECK_MESSAGE(message.find("batch") != std::string::npos, message);
    CHECK_MESSAGE(message.find("epoch") != std::string::npos, message);
  }
  CHECK(thrown);
}

TEST_CASE("class-balanced training runs deterministically end to end") {
  Corpus corpus = synthetic_three_class(14);
  // Skew the classes so balancing has something to do.
  for (size_t i = 0; i < corpus.size(); ++i) {
    if (i % 3 != 0) {
      corpus[i].payload = TextLabelPayload{"alpha"};
      corpus[i].text = "the filler run shows alpha phase near the filler stage";
    }
  }
  TrainConfig config;
  config.learning_rate = 1e-3;
  config.max_epochs = 2;
  config.batch_size = 6;
  config.sampler = SamplerKind::kClassBalanced;
  config.loss = LossKind::kFocal;
  config.focal_gamma = 2.0;
  config.validation_fraction = 0.2;
  config.seed = 6;

  const TrainResult first = train_multitask(corpus, ids_of(corpus), tiny_model_config(), config);
  const TrainResult second =
      train_multitask(corpus, ids_of(corpus), tiny_model_config(), config);
  CHECK(first.log == second.log);
  CHECK(first.log.size() == 2);
  for (const EpochLog& row : first.log) CHECK(std::isfinite(row.train_loss));
}

TEST_CASE("multitask training solves a separable three-class task") {
  const Corpus corpus = synthetic_three_class(200);
  const CorpusSplit split = make_split(corpus, 3, 0.25);
  REQUIRE(split.train_ids.size() == 50);
  REQUIRE(split.test_ids.size() == 150);

  ModelConfig model_config;
  model_config.encoder.checkpoint = "tiny-reference";
  model_config.encoder.hidden_size = 32;
  model_config.encoder.layers = 2;
  model_config.encoder.heads = 4;
  model_config.encoder.max_sequence = 128;
  model_config.decoder.layers = 2;
  model_config.decoder.heads = 4;
  model_config.decoder.max_generate = 8;

  const LabelSpaceSet spaces = label_spaces_of(corpus);
  PromptContext context;
  context.spaces = &spaces;
  context.seed = 11;
  const std::vector<PromptInstance> test_prompts =
      build_prompt_set(corpus, split.test_ids, SchemaVariant::TaskSchema, context);

  TrainConfig config;
  config.learning_rate = 1e-2;
  config.max_epochs = 20;
  config.patience = 6;
  config.batch_size = 8;
  config.variant = SchemaVariant::TaskSchema;
  config.validation_fraction = 0.1;
  config.seed = 11;

  const TrainResult result = train_multitask(corpus, split.train_ids, model_config, config);
  CHECK(result.log.size() <= 20);
  CHECK(result.variant == SchemaVariant::TaskSchema);
  CHECK(result.best_epoch >= 1);

  const ModelAnswerGenerator generator(result.model);
  const std::vector<MatchedPrediction> predictions =
      constrained_predict_batch(test_prompts, generator);
  const double micro = micro_f1(score_predictions(predictions, test_prompts));
  CHECK_MESSAGE(micro >= 0.95, "test micro-F1 " << micro);
}

TEST_CASE("single-task prompting always uses the plain template variant") {
  Corpus corpus = synthetic_three_class(9);
  corpus.push_back(tiny_sample(TaskKind::Ner, 0));
  corpus.push_back(tiny_sample(TaskKind::Ner, 1));
  corpus.back().sample_id = "ner:1";

  TrainConfig config;
  config.learning_rate = 1e-3;
  config.max_epochs = 1;
  config.batch_size = 4;
  config.variant = SchemaVariant::TaskSchema;
  config.validation_fraction = 0.2;
  config.seed = 8;

  const TrainResult result = train_single_task_prompt(
      corpus, ids_of(corpus), TaskKind::ParagraphClassification, tiny_model_config(), config);
  CHECK(result.variant == SchemaVariant::NoExplanations);
  for (const std::string& id : result.validation_ids) {
    CHECK(id.rfind("syn:", 0) == 0);
  }

  CHECK_THROWS_AS(train_single_task_prompt(corpus, ids_of(corpus), TaskKind::SlotFilling,
                                           tiny_model_config(), config),
                  std::runtime_error);
  CHECK_THROWS_AS(train_single_task_prompt(corpus, {"missing:id"}, TaskKind::Ner,
                                           tiny_model_config(), config),
                  std::runtime_error);
}

TEST_CASE("head input text joins the sample text with free span values") {
  const LabelSpaceSet spaces = label_spaces_of({tiny_sample(TaskKind::Ner, 0)});
  const UnifiedSample sample = tiny_sample(TaskKind::Ner, 0);
  const AnswerSchema schema = answer_schema_for(TaskKind::Ner, spaces);
  const std::vector<QueryUnit> units = query_units(sample);
  REQUIRE(units.size() == 2);
  CHECK(head_input_text(sample, units[0], schema) ==
        "iron oxide melts near quartz | iron oxide");
  CHECK(head_input_text(sample, units[1], schema) == "iron oxide melts near quartz | quartz");

  const UnifiedSample paragraph = tiny_sample(TaskKind::ParagraphClassification, 0);
  const AnswerSchema paragraph_schema =
      answer_schema_for(TaskKind::ParagraphClassification, spaces);
  const std::vector<QueryUnit> paragraph_units = query_units(paragraph);
  REQUIRE(paragraph_units.size() == 1);
  CHECK(head_input_text(paragraph, paragraph_units[0], paragraph_schema) == paragraph.text);

  QueryUnit broken = units[0];
  broken.answer.values.pop_back();
  CHECK_THROWS_AS(head_input_text(sample, broken, schema), std::invalid_argument);
}

TEST_CASE("head classifier outputs per-class rows and clamps long inputs") {
  const Vocabulary vocabulary = Vocabulary::build({"alpha beta gamma delta"});
  const LabelSpace space =
      make_label_space(TaskKind::SentenceClassification, {"relevant", "irrelevant", "unclear"});
  const HeadClassifier model(tiny_model_config(), vocabulary, space, 42);

  CHECK(model.space().labels == std::vector<std::string>{"irrelevant", "relevant", "unclear"});
  const Matrix probs = model.predict_text("alpha beta");
  CHECK(probs.rows == 1);
  CHECK(probs.cols == 3);
  double sum = 0.0;
  for (size_t j = 0; j < probs.cols; ++j) sum += probs(0, j);
  CHECK(std::fabs(sum - 1.0) < 1e-12);

  std::string lengthy;
  for (size_t i = 0; i < 200; ++i) lengthy += "alpha ";
  CHECK_NOTHROW(model.predict_label(lengthy));
  CHECK_NOTHROW(model.predict_label(""));

  const HeadClassifier again(tiny_model_config(), vocabulary, space, 42);
  CHECK(again.head_weight().value.data == model.head_weight().value.data);
  CHECK_THROWS_AS(
      HeadClassifier(tiny_model_config(), vocabulary,
                     LabelSpace{TaskKind::SentenceClassification, {}, false}, 1),
      std::invalid_argument);
}

TEST_CASE("head classifier gradients match finite differences") {
  const Vocabulary vocabulary = Vocabulary::build({"a b c d e f g"});
  const LabelSpace space = make_label_space(TaskKind::SentenceClassification, {"x", "y", "z"});
  HeadClassifier model(tiny_model_config(), vocabulary, space, 99);

  Rng rng(5);
  std::vector<int> ids;
  for (size_t i = 0; i < 7; ++i) ids.push_back(static_cast<int>(rng.below(vocabulary.size())));
  std::vector<int> mask(ids.size(), 1);
  mask[3] = 0;
  Matrix weights(1, 3);
  for (double& x : weights.data) x = rng.normal(0.0, 1.0);

  const auto loss = [&]() {
    const HeadClassifier::Trace trace = model.forward(ids, mask);
    double total = 0.0;
    for (size_t j = 0; j < weights.cols; ++j) total += weights(0, j) * trace.logits(0, j);
    return total;
  };

  model.zero_gradients();
  const HeadClassifier::Trace trace = model.forward(ids, mask);
  model.backward(trace, weights);

  check_param_fd(model.head_weight(), loss, rng);
  check_param_fd(model.head_bias(), loss, rng);
  for (const std::string& name :
       {std::string("enc.0.wq"), std::string("enc.0.bo"), std::string("enc.1.wo"),
        std::string("enc.tok_embed"), std::string("enc.pos_embed")}) {
    check_param_fd(model.encoder().parameter(name), loss, rng);
  }
}

TEST_CASE("head training learns a separable sentence task") {
  const Corpus corpus = synthetic_binary_sentences(60);
  ModelConfig model_config;
  model_config.encoder.checkpoint = "tiny-reference";
  model_config.encoder.hidden_size = 16;
  model_config.encoder.layers = 1;
  model_config.encoder.heads = 2;
  model_config.encoder.max_sequence = 16;
  model_config.decoder.layers = 1;
  model_config.decoder.heads = 2;
  model_config.decoder.max_generate = 4;

  TrainConfig config;
  config.learning_rate = 1e-2;
  config.max_epochs = 12;
  config.patience = 12;
  config.batch_size = 8;
  config.validation_fraction = 0.2;
  config.seed = 13;

  const HeadTrainResult result = train_single_task_head(
      corpus, ids_of(corpus), TaskKind::SentenceClassification, model_config, config);

  size_t correct = 0;
  for (const UnifiedSample& sample : corpus) {
    const auto* payload = std::get_if<TextLabelPayload>(&sample.payload);
    REQUIRE(payload != nullptr);
    if (result.model.predict_label(sample.text) == normalize_label(payload->label)) {
      correct += 1;
    }
  }
  const double accuracy = static_cast<double>(correct) / static_cast<double>(corpus.size());
  CHECK_MESSAGE(accuracy >= 0.9, "head accuracy " << accuracy);
  CHECK_FALSE(result.log.empty());
  CHECK(result.best_epoch >= 1);
}

TEST_CASE("each task trains its own head checkpoint") {
  const ScratchDir scratch;
  Corpus corpus;
  for (const TaskKind kind : kAllTaskKinds) {
    corpus.push_back(tiny_sample(kind, 0));
  }
  const LabelSpaceSet spaces = label_spaces_of(corpus);
  for (const UnifiedSample& sample : corpus) {
    const ValidationResult check = validate_sample(sample, spaces);
    CHECK_MESSAGE(check.ok(), sample.sample_id);
  }

  ModelConfig model_config = tiny_model_config();
  TrainConfig config;
  config.learning_rate = 1e-3;
  config.max_epochs = 1;
  config.batch_size = 4;
  config.validation_fraction = 0.0;
  config.seed = 3;

  for (const TaskKind kind : kAllTaskKinds) {
    const HeadTrainResult result =
        train_single_task_head(corpus, ids_of(corpus), kind, model_config, config);
    const std::string directory = scratch.sub("head_" + task_kind_name(kind));
    save_head_checkpoint(result.model, directory);
    const HeadClassifier loaded = load_head_checkpoint(directory);
    CHECK(loaded.space() == result.model.space());
    CHECK(loaded.head_weight().value.data == result.model.head_weight().value.data);
    CHECK(loaded.head_bias().value.data == result.model.head_bias().value.data);
    for (const std::string& name : result.model.encoder().parameter_names()) {
      CHECK(loaded.encoder().parameter(name).value.data ==
            result.model.encoder().parameter(name).value.data);
    }
  }
  size_t checkpoint_count = 0;
  for (const auto& entry : std::filesystem::directory_iterator(scratch.path)) {
    if (entry.is_directory()) checkpoint_count += 1;
  }
  CHECK(checkpoint_count == 7);
}

TEST_CASE("tampered head checkpoints are rejected") {
  const ScratchDir scratch;
  const Vocabulary vocabulary = Vocabulary::build({"left right"});
  const LabelSpace space = make_label_space(TaskKind::SentenceClassification, {"l", "r"});
  const HeadClassifier model(tiny_model_config(), vocabulary, space, 12);

  const std::string directory = scratch.sub("head");
  save_head_checkpoint(model, directory);
  CHECK_NOTHROW(load_head_checkpoint(directory));

  {
    std::ofstream out(directory + "/head.bin", std::ios::binary | std::ios::app);
    out << 'x';
  }
  CHECK_THROWS_AS(load_head_checkpoint(directory), std::runtime_error);

  save_head_checkpoint(model, directory);
  {
    std::ofstream out(directory + "/head.json", std::ios::binary | std::ios::trunc);
    out << "{\"format\": \"other\"}\n";
  }
  CHECK_THROWS_AS(load_head_checkpoint(directory), std::runtime_error);
  CHECK_THROWS_AS(load_head_checkpoint(scratch.sub("absent")), std::runtime_error);
}

TEST_CASE("mixture gates start uniform and stay a simplex") {
  const Vocabulary vocabulary = Vocabulary::build({"one two three"});
  LabelSpaceSet spaces;
  spaces[TaskKind::SentenceClassification] =
      make_label_space(TaskKind::SentenceClassification, {"a", "b"});
  spaces[TaskKind::ParagraphClassification] =
      make_label_space(TaskKind::ParagraphClassification, {"x", "y", "z"});

  MmoeConfig mmoe;
  mmoe.experts = 3;
  const MmoeModel model(tiny_model_config(), vocabulary, spaces, mmoe, 17);
  CHECK(model.experts() == 3);
  for (const TaskKind task :
       {TaskKind::SentenceClassification, TaskKind::ParagraphClassification}) {
    const std::vector<double> gates = model.gate_weights(task);
    REQUIRE(gates.size() == 3);
    double sum = 0.0;
    for (const double g : gates) {
      CHECK(g == doctest::Approx(1.0 / 3.0));
      sum += g;
    }
    CHECK(std::fabs(sum - 1.0) < 1e-12);
  }

  CHECK_THROWS_AS(MmoeModel(tiny_model_config(), vocabulary, spaces, MmoeConfig{0, 0}, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(MmoeModel(tiny_model_config(), vocabulary, spaces, MmoeConfig{2, 9}, 1),
                  std::invalid_argument);
  CHECK_THROWS_AS(MmoeModel(tiny_model_config(), vocabulary, {}, MmoeConfig{2, 0}, 1),
                  std::invalid_argument);
}

TEST_CASE("the mixture hidden state is the gate-weighted expert sum") {
  const Vocabulary vocabulary = Vocabulary::build({"alpha beta gamma delta epsilon"});
  LabelSpaceSet spaces;
  spaces[TaskKind::SentenceClassification] =
      make_label_space(TaskKind::SentenceClassification, {"p", "q"});

  MmoeModel model(tiny_model_config(), vocabulary, spaces, MmoeConfig{3, 0}, 23);
  Rng rng(2);
  for (double& x : model.gate(TaskKind::SentenceClassification).value.data) {
    x = rng.normal(0.0, 1.0);
  }

  std::vector<int> ids;
  for (size_t i = 0; i < 6; ++i) ids.push_back(static_cast<int>(rng.below(vocabulary.size())));
  const std::vector<int> mask(ids.size(), 1);

  const MmoeModel::Trace trace = model.forward(TaskKind::SentenceClassification, ids, mask);
  const std::vector<double> gates = model.gate_weights(TaskKind::SentenceClassification);
  Matrix expected(1, trace.hidden.cols);
  for (size_t k = 0; k < model.experts(); ++k) {
    const Matrix pooled = model.expert_pooled(k, ids, mask);
    for (size_t j = 0; j < expected.cols; ++j) expected(0, j) += gates[k] * pooled(0, j);
  }
  for (size_t j = 0; j < expected.cols; ++j) {
    CHECK(std::fabs(trace.hidden(0, j) - expected(0, j)) < 1e-12);
  }
}

TEST_CASE("a one-expert mixture equals the single-encoder head on shared weights") {
  const Vocabulary vocabulary = Vocabulary::build({"alpha beta gamma delta"});
  const LabelSpace space =
      make_label_space(TaskKind::SentenceClassification, {"up", "down", "flat"});
  LabelSpaceSet spaces;
  spaces[TaskKind::SentenceClassification] = space;

  const HeadClassifier head(tiny_model_config(), vocabulary, space, 7);
  MmoeModel mixture(tiny_model_config(), vocabulary, spaces, MmoeConfig{1, 0}, 7);

  for (const std::string& name : head.encoder().parameter_names()) {
    mixture.expert(0).parameter(name).value = head.encoder().parameter(name).value;
  }
  mixture.head_weight(TaskKind::SentenceClassification).value = head.head_weight().value;
  mixture.head_bias(TaskKind::SentenceClassification).value = head.head_bias().value;

  CHECK(mixture.gate_weights(TaskKind::SentenceClassification) == std::vector<double>{1.0});
  for (const std::string text :
       {"alpha beta", "gamma", "delta delta alpha", "unseen words here", ""}) {
    const Matrix head_probs = head.predict_text(text);
    const Matrix mix_probs = mixture.predict_text(TaskKind::SentenceClassification, text);
    REQUIRE(head_probs.cols == mix_probs.cols);
    for (size_t j = 0; j < head_probs.cols; ++j) {
      CHECK(std::fabs(head_probs(0, j) - mix_probs(0, j)) < 1e-12);
    }
  }
}

TEST_CASE("a one-hot gate selects a single expert pipeline") {
  const Vocabulary vocabulary = Vocabulary::build({"w x y z"});
  LabelSpaceSet spaces;
  spaces[TaskKind::ParagraphClassification] =
      make_label_space(TaskKind::ParagraphClassification, {"left", "right"});

  MmoeModel model(tiny_model_config(), vocabulary, spaces, MmoeConfig{3, 0}, 31);
  Matrix& gate = model.gate(TaskKind::ParagraphClassification).value;
  gate(0, 0) = 0.0;
  gate(0, 1) = 60.0;
  gate(0, 2) = 0.0;

  Rng rng(3);
  std::vector<int> ids;
  for (size_t i = 0; i < 5; ++i) ids.push_back(static_cast<int>(rng.below(vocabulary.size())));
  const std::vector<int> mask(ids.size(), 1);

  const Matrix mixed =
      model.forward(TaskKind::ParagraphClassification, ids, mask).probs;
  Matrix solo = matmul(model.expert_pooled(1, ids, mask),
                       model.head_weight(TaskKind::ParagraphClassification).value);
  add_row_in_place(solo, model.head_bias(TaskKind::ParagraphClassification).value);
  solo = softmax_rows(solo);
  for (size_t j = 0; j < mixed.cols; ++j) {
    CHECK(std::fabs(mixed(0, j) - solo(0, j)) < 1e-9);
  }
}

TEST_CASE("mixture gradients match finite differences") {
  const Vocabulary vocabulary = Vocabulary::build({"a b c d e"});
  LabelSpaceSet spaces;
  spaces[TaskKind::SentenceClassification] =
      make_label_space(TaskKind::SentenceClassification, {"m", "n", "o"});

  MmoeModel model(tiny_model_config(), vocabulary, spaces, MmoeConfig{2, 0}, 41);
  Rng rng(8);
  for (double& x : model.gate(TaskKind::SentenceClassification).value.data) {
    x = rng.normal(0.0, 0.5);
  }

  std::vector<int> ids;
  for (size_t i = 0; i < 6; ++i) ids.push_back(static_cast<int>(rng.below(vocabulary.size())));
  const std::vector<int> mask(ids.size(), 1);
  Matrix weights(1, 3);
  for (double& x : weights.data) x = rng.normal(0.0, 1.0);

  const TaskKind task = TaskKind::SentenceClassification;
  const auto loss = [&]() {
    const MmoeModel::Trace trace = model.forward(task, ids, mask);
    double total = 0.0;
    for (size_t j = 0; j < weights.cols; ++j) total += weights(0, j) * trace.logits(0, j);
    return total;
  };

  model.zero_gradients();
  const MmoeModel::Trace trace = model.forward(task, ids, mask);
  model.backward(trace, weights);

  check_param_fd(model.gate(task), loss, rng);
  check_param_fd(model.head_weight(task), loss, rng);
  check_param_fd(model.head_bias(task), loss, rng);
  check_param_fd(model.expert(0).parameter("enc.0.wq"), loss, rng);
  check_param_fd(model.expert(0).parameter("enc.tok_embed"), loss, rng);
  check_param_fd(model.expert(1).parameter("enc.1.wo"), loss, rng);
  check_param_fd(model.expert(1).parameter("enc.pos_embed"), loss, rng);
}

TEST_CASE("tied lower layers stay identical across experts through updates") {
  const Vocabulary vocabulary = Vocabulary::build({"p q r s"});
  LabelSpaceSet spaces;
  spaces[TaskKind::SentenceClassification] =
      make_label_space(TaskKind::SentenceClassification, {"t", "u"});

  MmoeModel model(tiny_model_config(), vocabulary, spaces, MmoeConfig{2, 1}, 19);
  const std::vector<std::string> tied{"enc.tok_embed", "enc.pos_embed", "enc.0.wq",
                                      "enc.0.wk",      "enc.0.wv",      "enc.0.wo",
                                      "enc.0.bo"};
  for (const std::string& name : tied) {
    CHECK(model.expert(0).parameter(name).value.data ==
          model.expert(1).parameter(name).value.data);
  }
  CHECK(model.expert(0).parameter("enc.1.wq").value.data !=
        model.expert(1).parameter("enc.1.wq").value.data);

  Rng rng(6);
  for (size_t step = 0; step < 3; ++step) {
    std::vector<int> ids;
    for (size_t i = 0; i < 5; ++i) {
      ids.push_back(static_cast<int>(rng.below(vocabulary.size())));
    }
    const std::vector<int> mask(ids.size(), 1);
    model.zero_gradients();
    const MmoeModel::Trace trace =
        model.forward(TaskKind::SentenceClassification, ids, mask);
    Matrix dlogits(1, 2);
    for (double& x : dlogits.data) x = rng.normal(0.0, 1.0);
    model.backward(trace, dlogits);
    model.adam_step(1e-3);
  }

  for (const std::string& name : tied) {
    CHECK(model.expert(0).parameter(name).value.data ==
          model.expert(1).parameter(name).value.data);
  }
  CHECK(model.expert(0).parameter("enc.1.wq").value.data !=
        model.expert(1).parameter("enc.1.wq").value.data);
}

TEST_CASE("mixture checkpoints round-trip and reject tampering") {
  const ScratchDir scratch;
  const Vocabulary vocabulary = Vocabulary::build({"alpha beta gamma"});
  LabelSpaceSet spaces;
  spaces[TaskKind::SentenceClassification] =
      make_label_space(TaskKind::SentenceClassification, {"a", "b"});
  spaces[TaskKind::ParagraphClassification] =
      make_label_space(TaskKind::ParagraphClassification, {"x", "y", "z"});

  MmoeModel model(tiny_model_config(), vocabulary, spaces, MmoeConfig{2, 1}, 77);
  Rng rng(4);
  for (double& x : model.gate(TaskKind::SentenceClassification).value.data) {
    x = rng.normal(0.0, 1.0);
  }

  const std::string directory = scratch.sub("mmoe");
  save_mmoe_checkpoint(model, directory);
  const MmoeModel loaded = load_mmoe_checkpoint(directory);

  CHECK(loaded.experts() == 2);
  CHECK(loaded.mmoe_config() == model.mmoe_config());
  CHECK(loaded.spaces() == model.spaces());
  for (size_t k = 0; k < model.experts(); ++k) {
    for (const std::string& name : model.expert(k).parameter_names()) {
      CHECK(loaded.expert(k).parameter(name).value.data ==
            model.expert(k).parameter(name).value.data);
    }
  }
  for (const auto& entry : model.spaces()) {
    const TaskKind task = entry.first;
    CHECK(loaded.gate(task).value.data == model.gate(task).value.data);
    CHECK(loaded.head_weight(task).value.data == model.head_weight(task).value.data);
    CHECK(loaded.head_bias(task).value.data == model.head_bias(task).value.data);
  }
  const Matrix before = model.predict_text(TaskKind::ParagraphClassification, "alpha beta");
  const Matrix after = loaded.predict_text(TaskKind::ParagraphClassification, "alpha beta");
  CHECK(before.data == after.data);

  {
    std::ofstream out(directory + "/mmoe.bin", std::ios::binary | std::ios::app);
    out << 'x';
  }
  CHECK_THROWS_AS(load_mmoe_checkpoint(directory), std::runtime_error);
  CHECK_THROWS_AS(load_mmoe_checkpoint(scratch.sub("absent")), std::runtime_error);
}

TEST_CASE("mixture training runs deterministically and reduces its loss") {
  Corpus corpus = synthetic_three_class(36);
  const Corpus sentences = synthetic_binary_sentences(24);
  corpus.insert(corpus.end(), sentences.begin(), sentences.end());

  ModelConfig model_config;
  model_config.encoder.checkpoint = "tiny-reference";
  model_config.encoder.hidden_size = 16;
  model_config.encoder.layers = 1;
  model_config.encoder.heads = 2;
  model_config.encoder.max_sequence = 20;
  model_config.decoder.layers = 1;
  model_config.decoder.heads = 2;
  model_config.decoder.max_generate = 4;

  MmoeConfig mmoe;
  mmoe.experts = 2;

  TrainConfig config;
  config.learning_rate = 1e-2;
  config.max_epochs = 8;
  config.patience = 8;
  config.batch_size = 8;
  config.validation_fraction = 0.2;
  config.seed = 21;

  const MmoeTrainResult first =
      train_mmoe(corpus, ids_of(corpus), model_config, mmoe, config);
  const MmoeTrainResult second =
      train_mmoe(corpus, ids_of(corpus), model_config, mmoe, config);
  CHECK(first.log == second.log);
  REQUIRE(!first.log.empty());
  CHECK(first.log.back().train_loss < first.log.front().train_loss * 0.8);
  CHECK(std::is_sorted(first.validation_ids.begin(), first.validation_ids.end()));

  for (const TaskKind task :
       {TaskKind::ParagraphClassification, TaskKind::SentenceClassification}) {
    const std::vector<double> gates = first.model.gate_weights(task);
    double sum = 0.0;
    for (const double g : gates) {
      CHECK(g >= 0.0);
      sum += g;
    }
    CHECK(std::fabs(sum - 1.0) < 1e-9);
  }
}
