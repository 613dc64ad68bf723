#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "t2s/tensor.hpp"

namespace t2s {

// Whitespace tokenizer with greedy "##" subword fallback. The vocabulary is
// built from a text corpus: special tokens first, then the distinct words
// and the single-character pieces that guarantee every in-alphabet word
// tokenizes, all in lexicographic order.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;

  static Vocabulary build(const std::vector<std::string>& texts);

  size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(int id) const { return tokens_.at(id); }
  // -1 for unknown piece.
  int id_of(const std::string& token) const;

  // Token ids without specials; unknown characters map to kUnk.
  std::vector<int> encode(const std::string& text) const;
  // Inverse of encode up to whitespace normalization; skips pad/bos/eos.
  std::string decode(const std::vector<int>& ids) const;

  // FNV-1a over the token list; identifies the vocabulary in checkpoints.
  uint64_t hash() const;

  // Checkpoint restore path: token list must start with the specials.
  static Vocabulary from_tokens(std::vector<std::string> tokens);

  bool operator==(const Vocabulary&) const = default;

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

struct EncoderConfig {
  std::string checkpoint = "tiny-reference";
  size_t hidden_size = 768;   // d
  size_t layers = 2;
  size_t heads = 8;
  size_t max_sequence = 128;  // N

  bool operator==(const EncoderConfig&) const = default;
};

struct DecoderConfig {
  size_t layers = 2;
  size_t heads = 8;
  size_t max_generate = 32;  // answer token budget, begin token excluded

  bool operator==(const DecoderConfig&) const = default;
};

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;

  bool operator==(const ModelConfig&) const = default;
};

// Padded token id batch with its 0/1 attention mask.
struct SequenceBatch {
  std::vector<std::vector<int>> ids;   // batch × N
  std::vector<std::vector<int>> mask;  // 1 = real token

  size_t size() const { return ids.size(); }
};

// Pads every sequence to the longest one (at most max_sequence). Throws
// std::invalid_argument for an over-long sequence or out-of-range id.
SequenceBatch make_batch(const std::vector<std::vector<int>>& sequences, size_t max_sequence,
                         size_t vocabulary_size);

// --- forward traces -----------------------------------------------------
// Every forward pass records the intermediates its backward pass needs.

struct AttentionTrace {
  Matrix query_in;            // input on the query side
  Matrix key_in;              // input on the key/value side
  Matrix q, k, v;             // projections, heads concatenated
  std::vector<Matrix> heads;  // per-head attention A
  Matrix out;                 // concatenated head outputs
};

struct EncoderLayerTrace {
  AttentionTrace attention;
  Matrix hidden;  // tanh(O Wo + bo)
};

struct EncoderTrace {
  std::vector<int> ids;
  std::vector<int> mask;
  Matrix embedded;
  std::vector<EncoderLayerTrace> layers;
  const Matrix& states() const { return layers.back().hidden; }
};

struct DecoderLayerTrace {
  AttentionTrace self_attention;   // causal
  AttentionTrace cross_attention;  // queries from Y, keys from encoder states
  Matrix hidden;                   // tanh([O1;O2] Wo + bo)
};

struct DecoderTrace {
  std::vector<int> ids;  // teacher-forced input, begins with kBos
  std::vector<int> encoder_mask;
  Matrix embedded;
  std::vector<DecoderLayerTrace> layers;
  Matrix logits;  // len × vocabulary
  Matrix probs;   // softmax rows of logits
};

// One learnable tensor with its gradient and Adam accumulators.
struct Parameter {
  Matrix value;
  Matrix grad;
  Matrix adam_m;
  Matrix adam_v;
};

// Encoder-decoder model over the answer grammar vocabulary: a reference
// transformer encoder and a masked transformer decoder joined by
// encoder-decoder attention and hidden-state fusion.
//
// Per decoder layer: O1 = causal self-attention(Y), O2 = cross-attention(Y,
// encoder states), H = tanh(Wo [O1;O2] + bo). Output distribution:
// P = softmax(Wp H + bp). Attention everywhere: A = softmax(Q Kᵀ / √d_k),
// O = A V, multi-head by column split.
class Seq2SchemaModel {
 public:
  // Each tensor is seeded by (seed, its name), so initialization is
  // independent of parameter enumeration order. Scales preserve unit
  // activation variance through the residual-free stack: embeddings
  // N(0, 1/sqrt(2)), projections N(0, 1/sqrt(fan-in)), biases zero.
  Seq2SchemaModel(ModelConfig config, Vocabulary vocabulary, uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocabulary() const { return vocabulary_; }
  uint64_t seed() const { return seed_; }

  // Hidden states for one (ids, mask) row; pads participate as positions
  // but are masked out of every attention. Throws when ids exceed
  // max_sequence.
  EncoderTrace encoder_forward(const std::vector<int>& ids, const std::vector<int>& mask) const;
  // Batch convenience over encoder_forward.
  std::vector<Matrix> encode(const SequenceBatch& batch) const;

  // Teacher-forced distributions for every position of dec_input, which
  // must be non-empty and begin with kBos. Throws when dec_input exceeds
  // max_generate + 1 positions.
  DecoderTrace decoder_forward(const std::vector<int>& dec_input, const Matrix& encoder_states,
                               const std::vector<int>& encoder_mask) const;

  // Greedy argmax continuation of kBos until kEos or the generation budget;
  // returns answer ids without kBos/kEos.
  std::vector<int> generate(const std::vector<int>& prompt_ids) const;

  // Accumulates gradients for one traced example given dL/dlogits.
  void backward(const EncoderTrace& encoder_trace, const DecoderTrace& decoder_trace,
                const Matrix& dlogits);

  // Encoder-only gradient accumulation given dL/d(final hidden states);
  // serves heads attached directly to encoder output.
  void encoder_backward(const EncoderTrace& encoder_trace, const Matrix& dstates);

  void zero_gradients();
  // One Adam update over all parameters (β1 0.9, β2 0.999, ε 1e-8) using
  // the accumulated gradients.
  void adam_step(double learning_rate);

  // Sorted stable parameter names.
  std::vector<std::string> parameter_names() const;
  Parameter& parameter(const std::string& name);
  const Parameter& parameter(const std::string& name) const;

 private:
  Matrix embed(const std::vector<int>& ids, const std::string& token_param,
               const std::string& position_param) const;

  ModelConfig config_;
  Vocabulary vocabulary_;
  uint64_t seed_ = 0;
  size_t adam_steps_ = 0;
  std::map<std::string, Parameter> parameters_;
};

// --- checkpoints --------------------------------------------------------
// A checkpoint directory holds manifest.json (config, vocabulary with hash,
// template version, seed, parameter shapes) and weights.bin (parameters in
// sorted name order, little-endian float64). Writing is timestamp-free, so
// identical models produce identical bytes.

void save_checkpoint(const Seq2SchemaModel& model, const std::string& directory,
                     const std::string& template_version);
// Throws std::runtime_error on missing files, shape drift, or a vocabulary
// hash mismatch. template_version_out receives the stored template version
// when non-null.
Seq2SchemaModel load_checkpoint(const std::string& directory,
                                std::string* template_version_out = nullptr);

}  // namespace t2s
