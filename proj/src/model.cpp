#include "t2s/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "t2s/rng.hpp"
#include "t2s/text.hpp"

namespace t2s {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr const char* kSpecials[] = {"<pad>", "<bos>", "<eos>", "<unk>"};
constexpr const char* kCheckpointFormat = "t2s-checkpoint-v1";

}  // namespace

// --- vocabulary ---------------------------------------------------------

Vocabulary Vocabulary::build(const std::vector<std::string>& texts) {
  std::set<std::string> pieces;
  for (const std::string& text : texts) {
    for (const std::string& word : split_whitespace(text)) {
      pieces.insert(word);
      for (const char c : word) {
        // Single characters in both word-start and continuation form keep
        // segmentation total over the seen alphabet.
        pieces.insert(std::string(1, c));
        pieces.insert("##" + std::string(1, c));
      }
    }
  }

  std::vector<std::string> tokens(std::begin(kSpecials), std::end(kSpecials));
  for (const std::string& piece : pieces) tokens.push_back(piece);
  return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  Vocabulary vocab;
  if (tokens.size() < 4) throw std::runtime_error("vocabulary misses the special tokens");
  for (int i = 0; i < 4; ++i) {
    if (tokens[i] != kSpecials[i]) {
      throw std::runtime_error("vocabulary special token mismatch at id " + std::to_string(i));
    }
  }
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (!vocab.index_.emplace(tokens[i], static_cast<int>(i)).second) {
      throw std::runtime_error("duplicate vocabulary token: " + tokens[i]);
    }
  }
  vocab.tokens_ = std::move(tokens);
  return vocab;
}

int Vocabulary::id_of(const std::string& token) const {
  const auto it = index_.find(token);
  return it == index_.end() ? -1 : it->second;
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
  std::vector<int> out;
  for (const std::string& word : split_whitespace(text)) {
    const int whole = id_of(word);
    if (whole >= 0) {
      out.push_back(whole);
      continue;
    }
    // Greedy longest-match segmentation with "##" continuation pieces.
    size_t pos = 0;
    bool word_start = true;
    while (pos < word.size()) {
      int best_id = -1;
      size_t best_len = 0;
      for (size_t len = word.size() - pos; len >= 1; --len) {
        const std::string piece =
            word_start ? word.substr(pos, len) : "##" + word.substr(pos, len);
        const int id = id_of(piece);
        if (id >= 0) {
          best_id = id;
          best_len = len;
          break;
        }
      }
      if (best_id < 0) {
        out.push_back(kUnk);
        pos += 1;
      } else {
        out.push_back(best_id);
        pos += best_len;
      }
      word_start = false;
    }
  }
  return out;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const {
  std::string out;
  for (const int id : ids) {
    if (id == kPad || id == kBos || id == kEos) continue;
    const std::string& token = tokens_.at(id);
    if (starts_with(token, "##")) {
      out += token.substr(2);
    } else {
      if (!out.empty()) out += ' ';
      out += token;
    }
  }
  return out;
}

uint64_t Vocabulary::hash() const {
  uint64_t h = kFnvOffset;
  for (const std::string& token : tokens_) {
    h = fnv1a(token, h);
    h = fnv1a(std::string_view("\n"), h);
  }
  return h;
}

SequenceBatch make_batch(const std::vector<std::vector<int>>& sequences, size_t max_sequence,
                         size_t vocabulary_size) {
  size_t width = 0;
  for (const auto& sequence : sequences) {
    if (sequence.size() > max_sequence) {
      throw std::invalid_argument("sequence of length " + std::to_string(sequence.size()) +
                                  " exceeds the maximum of " + std::to_string(max_sequence));
    }
    width = std::max(width, sequence.size());
  }
  SequenceBatch batch;
  for (const auto& sequence : sequences) {
    for (const int id : sequence) {
      if (id < 0 || static_cast<size_t>(id) >= vocabulary_size) {
        throw std::invalid_argument("token id " + std::to_string(id) +
                                    " outside the vocabulary of size " +
                                    std::to_string(vocabulary_size));
      }
    }
    std::vector<int> ids = sequence;
    std::vector<int> mask(sequence.size(), 1);
    ids.resize(width, Vocabulary::kPad);
    mask.resize(width, 0);
    batch.ids.push_back(std::move(ids));
    batch.mask.push_back(std::move(mask));
  }
  return batch;
}

// --- attention ----------------------------------------------------------

namespace {

struct AttentionWeights {
  const Matrix* wq = nullptr;
  const Matrix* wk = nullptr;
  const Matrix* wv = nullptr;
};

// A = softmax(Q Kᵀ / √d_k) per head, O = A V, heads concatenated. key_mask
// (when given) removes keys at zero positions; causal removes keys after
// the query position.
AttentionTrace attention_forward(const Matrix& query_in, const Matrix& key_in,
                                 const AttentionWeights& weights, size_t heads,
                                 const std::vector<int>* key_mask, bool causal) {
  AttentionTrace trace;
  trace.query_in = query_in;
  trace.key_in = key_in;
  trace.q = matmul(query_in, *weights.wq);
  trace.k = matmul(key_in, *weights.wk);
  trace.v = matmul(key_in, *weights.wv);

  const size_t d = trace.q.cols;
  const size_t dk = d / heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  trace.out = Matrix(query_in.rows, d);
  for (size_t h = 0; h < heads; ++h) {
    const Matrix qh = slice_cols(trace.q, h * dk, (h + 1) * dk);
    const Matrix kh = slice_cols(trace.k, h * dk, (h + 1) * dk);
    const Matrix vh = slice_cols(trace.v, h * dk, (h + 1) * dk);

    Matrix scores = matmul_nt(qh, kh);
    scale_in_place(scores, inv_sqrt_dk);
    for (size_t i = 0; i < scores.rows; ++i) {
      for (size_t j = 0; j < scores.cols; ++j) {
        const bool masked =
            (key_mask != nullptr && (*key_mask)[j] == 0) || (causal && j > i);
        if (masked) scores(i, j) = kMaskValue;
      }
    }
    const Matrix a = softmax_rows(scores);
    add_cols_in_place(trace.out, matmul(a, vh), h * dk);
    trace.heads.push_back(a);
  }
  return trace;
}

struct AttentionGrads {
  Matrix dwq, dwk, dwv;
  Matrix dquery_in, dkey_in;
};

AttentionGrads attention_backward(const AttentionTrace& trace, const Matrix& dout,
                                  const AttentionWeights& weights, size_t heads) {
  const size_t d = trace.q.cols;
  const size_t dk = d / heads;
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

  Matrix dq(trace.q.rows, d);
  Matrix dkm(trace.k.rows, d);
  Matrix dvm(trace.v.rows, d);
  for (size_t h = 0; h < heads; ++h) {
    const Matrix qh = slice_cols(trace.q, h * dk, (h + 1) * dk);
    const Matrix kh = slice_cols(trace.k, h * dk, (h + 1) * dk);
    const Matrix vh = slice_cols(trace.v, h * dk, (h + 1) * dk);
    const Matrix douth = slice_cols(dout, h * dk, (h + 1) * dk);
    const Matrix& a = trace.heads[h];

    const Matrix da = matmul_nt(douth, vh);
    Matrix ds = softmax_backward(a, da);  // masked cells have a = 0, so ds = 0
    add_cols_in_place(dvm, matmul_tn(a, douth), h * dk);
    scale_in_place(ds, inv_sqrt_dk);
    add_cols_in_place(dq, matmul(ds, kh), h * dk);
    add_cols_in_place(dkm, matmul_tn(ds, qh), h * dk);
  }

  AttentionGrads grads;
  grads.dwq = matmul_tn(trace.query_in, dq);
  grads.dwk = matmul_tn(trace.key_in, dkm);
  grads.dwv = matmul_tn(trace.key_in, dvm);
  grads.dquery_in = matmul_nt(dq, *weights.wq);
  grads.dkey_in = matmul_nt(dkm, *weights.wk);
  add_in_place(grads.dkey_in, matmul_nt(dvm, *weights.wv));
  return grads;
}

}  // namespace

// --- model --------------------------------------------------------------

Seq2SchemaModel::Seq2SchemaModel(ModelConfig config, Vocabulary vocabulary, uint64_t seed)
    : config_(std::move(config)), vocabulary_(std::move(vocabulary)), seed_(seed) {
  const size_t d = config_.encoder.hidden_size;
  if (d == 0 || config_.encoder.max_sequence == 0) {
    throw std::invalid_argument("encoder hidden size and max sequence must be positive");
  }
  if (config_.encoder.layers == 0 || config_.decoder.layers == 0) {
    throw std::invalid_argument("encoder and decoder need at least one layer");
  }
  if (config_.decoder.max_generate == 0) {
    throw std::invalid_argument("generation budget must be positive");
  }
  if (config_.encoder.heads == 0 || d % config_.encoder.heads != 0 ||
      config_.decoder.heads == 0 || d % config_.decoder.heads != 0) {
    throw std::invalid_argument("head count must divide the hidden size");
  }

  const size_t vocab = vocabulary_.size();
  const auto add = [this](const std::string& name, size_t rows, size_t cols) {
    Parameter param;
    param.value = Matrix(rows, cols);
    param.grad = Matrix(rows, cols);
    param.adam_m = Matrix(rows, cols);
    param.adam_v = Matrix(rows, cols);
    parameters_.emplace(name, std::move(param));
  };

  add("enc.tok_embed", vocab, d);
  add("enc.pos_embed", config_.encoder.max_sequence, d);
  for (size_t l = 0; l < config_.encoder.layers; ++l) {
    const std::string p = "enc." + std::to_string(l) + ".";
    add(p + "wq", d, d);
    add(p + "wk", d, d);
    add(p + "wv", d, d);
    add(p + "wo", d, d);
    add(p + "bo", 1, d);
  }
  add("dec.tok_embed", vocab, d);
  add("dec.pos_embed", config_.decoder.max_generate + 1, d);
  for (size_t l = 0; l < config_.decoder.layers; ++l) {
    const std::string p = "dec." + std::to_string(l) + ".";
    add(p + "self.wq", d, d);
    add(p + "self.wk", d, d);
    add(p + "self.wv", d, d);
    add(p + "cross.wq", d, d);
    add(p + "cross.wk", d, d);
    add(p + "cross.wv", d, d);
    add(p + "wo", 2 * d, d);
    add(p + "bo", 1, d);
  }
  add("out.wp", d, vocab);
  add("out.bp", 1, vocab);

  // Without residual or normalization layers every projection rescales the
  // signal by sqrt(fan-in) * stddev, so initialization must preserve unit
  // activation variance or deep paths vanish before training can use them:
  // embeddings sum to unit variance, projections scale by 1/sqrt(fan-in),
  // and biases start at zero.
  for (auto& [name, param] : parameters_) {
    if (name.ends_with(".bo") || name.ends_with(".bp")) continue;
    Rng rng(derive_seed(seed_, "init:" + name));
    const bool embedding = name.ends_with("tok_embed") || name.ends_with("pos_embed");
    const double stddev =
        embedding ? 1.0 / std::sqrt(2.0) : 1.0 / std::sqrt(static_cast<double>(param.value.rows));
    for (double& value : param.value.data) value = rng.normal(0.0, stddev);
  }
}

Matrix Seq2SchemaModel::embed(const std::vector<int>& ids, const std::string& token_param,
                              const std::string& position_param) const {
  const Matrix& tok = parameter(token_param).value;
  const Matrix& pos = parameter(position_param).value;
  if (ids.size() > pos.rows) {
    throw std::invalid_argument("sequence of length " + std::to_string(ids.size()) +
                                " exceeds the position budget of " + std::to_string(pos.rows));
  }
  Matrix out(ids.size(), tok.cols);
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<size_t>(ids[i]) >= tok.rows) {
      throw std::invalid_argument("token id " + std::to_string(ids[i]) +
                                  " outside the vocabulary");
    }
    for (size_t j = 0; j < tok.cols; ++j) {
      out(i, j) = tok(static_cast<size_t>(ids[i]), j) + pos(i, j);
    }
  }
  return out;
}

EncoderTrace Seq2SchemaModel::encoder_forward(const std::vector<int>& ids,
                                              const std::vector<int>& mask) const {
  if (ids.size() != mask.size()) throw std::invalid_argument("ids and mask lengths differ");
  if (ids.empty()) throw std::invalid_argument("cannot encode an empty sequence");
  for (const int bit : mask) {
    if (bit != 0 && bit != 1) throw std::invalid_argument("attention mask must be 0/1");
  }

  EncoderTrace trace;
  trace.ids = ids;
  trace.mask = mask;
  trace.embedded = embed(ids, "enc.tok_embed", "enc.pos_embed");

  const Matrix* x = &trace.embedded;
  for (size_t l = 0; l < config_.encoder.layers; ++l) {
    const std::string p = "enc." + std::to_string(l) + ".";
    const AttentionWeights weights{&parameter(p + "wq").value, &parameter(p + "wk").value,
                                   &parameter(p + "wv").value};
    EncoderLayerTrace layer;
    layer.attention =
        attention_forward(*x, *x, weights, config_.encoder.heads, &trace.mask, false);
    Matrix z = matmul(layer.attention.out, parameter(p + "wo").value);
    add_row_in_place(z, parameter(p + "bo").value);
    layer.hidden = tanh_elementwise(z);
    trace.layers.push_back(std::move(layer));
    x = &trace.layers.back().hidden;
  }
  return trace;
}

std::vector<Matrix> Seq2SchemaModel::encode(const SequenceBatch& batch) const {
  std::vector<Matrix> states;
  for (size_t i = 0; i < batch.size(); ++i) {
    states.push_back(encoder_forward(batch.ids[i], batch.mask[i]).states());
  }
  return states;
}

DecoderTrace Seq2SchemaModel::decoder_forward(const std::vector<int>& dec_input,
                                              const Matrix& encoder_states,
                                              const std::vector<int>& encoder_mask) const {
  if (dec_input.empty()) throw std::invalid_argument("decoder needs at least the begin token");
  if (dec_input.front() != Vocabulary::kBos) {
    throw std::invalid_argument("decoder input must begin with the begin-of-answer token");
  }
  if (dec_input.size() > config_.decoder.max_generate + 1) {
    throw std::invalid_argument("generation length exceeded: " +
                                std::to_string(dec_input.size() - 1) + " tokens over a budget of " +
                                std::to_string(config_.decoder.max_generate));
  }
  if (encoder_states.rows != encoder_mask.size()) {
    throw std::invalid_argument("encoder states and mask lengths differ");
  }

  DecoderTrace trace;
  trace.ids = dec_input;
  trace.encoder_mask = encoder_mask;
  trace.embedded = embed(dec_input, "dec.tok_embed", "dec.pos_embed");

  const Matrix* y = &trace.embedded;
  for (size_t l = 0; l < config_.decoder.layers; ++l) {
    const std::string p = "dec." + std::to_string(l) + ".";
    const AttentionWeights self_weights{&parameter(p + "self.wq").value,
                                        &parameter(p + "self.wk").value,
                                        &parameter(p + "self.wv").value};
    const AttentionWeights cross_weights{&parameter(p + "cross.wq").value,
                                         &parameter(p + "cross.wk").value,
                                         &parameter(p + "cross.wv").value};
    DecoderLayerTrace layer;
    layer.self_attention =
        attention_forward(*y, *y, self_weights, config_.decoder.heads, nullptr, true);
    layer.cross_attention = attention_forward(*y, encoder_states, cross_weights,
                                              config_.decoder.heads, &trace.encoder_mask, false);
    Matrix z = matmul(concat_cols(layer.self_attention.out, layer.cross_attention.out),
                      parameter(p + "wo").value);
    add_row_in_place(z, parameter(p + "bo").value);
    layer.hidden = tanh_elementwise(z);
    trace.layers.push_back(std::move(layer));
    y = &trace.layers.back().hidden;
  }

  trace.logits = matmul(*y, parameter("out.wp").value);
  add_row_in_place(trace.logits, parameter("out.bp").value);
  trace.probs = softmax_rows(trace.logits);
  return trace;
}

std::vector<int> Seq2SchemaModel::generate(const std::vector<int>& prompt_ids) const {
  const std::vector<int> prompt_mask(prompt_ids.size(), 1);
  const EncoderTrace encoded = encoder_forward(prompt_ids, prompt_mask);

  std::vector<int> dec_input = {Vocabulary::kBos};
  std::vector<int> out;
  for (size_t step = 0; step < config_.decoder.max_generate; ++step) {
    const DecoderTrace trace = decoder_forward(dec_input, encoded.states(), prompt_mask);
    const size_t last = trace.probs.rows - 1;
    size_t best = 0;
    for (size_t j = 1; j < trace.probs.cols; ++j) {
      if (trace.probs(last, j) > trace.probs(last, best)) best = j;
    }
    const int token = static_cast<int>(best);
    if (token == Vocabulary::kEos) break;
    out.push_back(token);
    dec_input.push_back(token);
  }
  return out;
}

void Seq2SchemaModel::backward(const EncoderTrace& encoder_trace, const DecoderTrace& decoder_trace,
                               const Matrix& dlogits) {
  const size_t d = config_.encoder.hidden_size;
  const Matrix& h_final = decoder_trace.layers.back().hidden;
  if (!dlogits.same_shape(decoder_trace.logits)) {
    throw std::invalid_argument("dlogits shape does not match the traced logits");
  }

  add_in_place(parameter("out.wp").grad, matmul_tn(h_final, dlogits));
  add_in_place(parameter("out.bp").grad, column_sums(dlogits));
  Matrix dy = matmul_nt(dlogits, parameter("out.wp").value);

  Matrix denc_states(encoder_trace.states().rows, d);
  for (size_t l = config_.decoder.layers; l-- > 0;) {
    const std::string p = "dec." + std::to_string(l) + ".";
    const DecoderLayerTrace& layer = decoder_trace.layers[l];
    const AttentionWeights self_weights{&parameter(p + "self.wq").value,
                                        &parameter(p + "self.wk").value,
                                        &parameter(p + "self.wv").value};
    const AttentionWeights cross_weights{&parameter(p + "cross.wq").value,
                                         &parameter(p + "cross.wk").value,
                                         &parameter(p + "cross.wv").value};

    const Matrix dz = tanh_backward(layer.hidden, dy);
    const Matrix concat = concat_cols(layer.self_attention.out, layer.cross_attention.out);
    add_in_place(parameter(p + "wo").grad, matmul_tn(concat, dz));
    add_in_place(parameter(p + "bo").grad, column_sums(dz));
    const Matrix dconcat = matmul_nt(dz, parameter(p + "wo").value);

    const AttentionGrads self_grads = attention_backward(
        layer.self_attention, slice_cols(dconcat, 0, d), self_weights, config_.decoder.heads);
    const AttentionGrads cross_grads = attention_backward(
        layer.cross_attention, slice_cols(dconcat, d, 2 * d), cross_weights,
        config_.decoder.heads);

    add_in_place(parameter(p + "self.wq").grad, self_grads.dwq);
    add_in_place(parameter(p + "self.wk").grad, self_grads.dwk);
    add_in_place(parameter(p + "self.wv").grad, self_grads.dwv);
    add_in_place(parameter(p + "cross.wq").grad, cross_grads.dwq);
    add_in_place(parameter(p + "cross.wk").grad, cross_grads.dwk);
    add_in_place(parameter(p + "cross.wv").grad, cross_grads.dwv);

    dy = self_grads.dquery_in;
    add_in_place(dy, self_grads.dkey_in);  // self-attention shares its input
    add_in_place(dy, cross_grads.dquery_in);
    add_in_place(denc_states, cross_grads.dkey_in);
  }

  Matrix& dec_tok = parameter("dec.tok_embed").grad;
  Matrix& dec_pos = parameter("dec.pos_embed").grad;
  for (size_t i = 0; i < decoder_trace.ids.size(); ++i) {
    for (size_t j = 0; j < d; ++j) {
      dec_tok(static_cast<size_t>(decoder_trace.ids[i]), j) += dy(i, j);
      dec_pos(i, j) += dy(i, j);
    }
  }

  encoder_backward(encoder_trace, denc_states);
}

void Seq2SchemaModel::encoder_backward(const EncoderTrace& encoder_trace, const Matrix& dstates) {
  const size_t d = config_.encoder.hidden_size;
  if (!dstates.same_shape(encoder_trace.states())) {
    throw std::invalid_argument("dstates shape does not match the traced encoder states");
  }

  Matrix dx = dstates;
  for (size_t l = config_.encoder.layers; l-- > 0;) {
    const std::string p = "enc." + std::to_string(l) + ".";
    const EncoderLayerTrace& layer = encoder_trace.layers[l];
    const AttentionWeights weights{&parameter(p + "wq").value, &parameter(p + "wk").value,
                                   &parameter(p + "wv").value};

    const Matrix dz = tanh_backward(layer.hidden, dx);
    add_in_place(parameter(p + "wo").grad, matmul_tn(layer.attention.out, dz));
    add_in_place(parameter(p + "bo").grad, column_sums(dz));
    const Matrix dout = matmul_nt(dz, parameter(p + "wo").value);

    const AttentionGrads grads =
        attention_backward(layer.attention, dout, weights, config_.encoder.heads);
    add_in_place(parameter(p + "wq").grad, grads.dwq);
    add_in_place(parameter(p + "wk").grad, grads.dwk);
    add_in_place(parameter(p + "wv").grad, grads.dwv);
    dx = grads.dquery_in;
    add_in_place(dx, grads.dkey_in);
  }

  Matrix& enc_tok = parameter("enc.tok_embed").grad;
  Matrix& enc_pos = parameter("enc.pos_embed").grad;
  for (size_t i = 0; i < encoder_trace.ids.size(); ++i) {
    for (size_t j = 0; j < d; ++j) {
      enc_tok(static_cast<size_t>(encoder_trace.ids[i]), j) += dx(i, j);
      enc_pos(i, j) += dx(i, j);
    }
  }
}

void Seq2SchemaModel::zero_gradients() {
  for (auto& [name, param] : parameters_) {
    std::fill(param.grad.data.begin(), param.grad.data.end(), 0.0);
  }
}

void Seq2SchemaModel::adam_step(double learning_rate) {
  constexpr double kBeta1 = 0.9;
  constexpr double kBeta2 = 0.999;
  constexpr double kEpsilon = 1e-8;

  adam_steps_ += 1;
  const double correction1 = 1.0 - std::pow(kBeta1, static_cast<double>(adam_steps_));
  const double correction2 = 1.0 - std::pow(kBeta2, static_cast<double>(adam_steps_));
  for (auto& [name, param] : parameters_) {
    for (size_t i = 0; i < param.value.data.size(); ++i) {
      const double g = param.grad.data[i];
      param.adam_m.data[i] = kBeta1 * param.adam_m.data[i] + (1.0 - kBeta1) * g;
      param.adam_v.data[i] = kBeta2 * param.adam_v.data[i] + (1.0 - kBeta2) * g * g;
      const double m_hat = param.adam_m.data[i] / correction1;
      const double v_hat = param.adam_v.data[i] / correction2;
      param.value.data[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + kEpsilon);
    }
  }
}

std::vector<std::string> Seq2SchemaModel::parameter_names() const {
  std::vector<std::string> names;
  for (const auto& [name, param] : parameters_) names.push_back(name);
  return names;
}

Parameter& Seq2SchemaModel::parameter(const std::string& name) {
  const auto it = parameters_.find(name);
  if (it == parameters_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const Parameter& Seq2SchemaModel::parameter(const std::string& name) const {
  const auto it = parameters_.find(name);
  if (it == parameters_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

// --- checkpoints --------------------------------------------------------

namespace {

std::string hex64(uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

}  // namespace

void save_checkpoint(const Seq2SchemaModel& model, const std::string& directory,
                     const std::string& template_version) {
  fs::create_directories(directory);

  json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["seed"] = model.seed();
  manifest["template_version"] = template_version;
  manifest["config"] = {
      {"encoder",
       {{"checkpoint", model.config().encoder.checkpoint},
        {"hidden_size", model.config().encoder.hidden_size},
        {"layers", model.config().encoder.layers},
        {"heads", model.config().encoder.heads},
        {"max_sequence", model.config().encoder.max_sequence}}},
      {"decoder",
       {{"layers", model.config().decoder.layers},
        {"heads", model.config().decoder.heads},
        {"max_generate", model.config().decoder.max_generate}}},
  };
  manifest["vocabulary"] = {{"hash", hex64(model.vocabulary().hash())},
                            {"tokens", model.vocabulary().tokens()}};

  json shapes = json::array();
  for (const std::string& name : model.parameter_names()) {
    const Matrix& value = model.parameter(name).value;
    shapes.push_back({{"name", name}, {"rows", value.rows}, {"cols", value.cols}});
  }
  manifest["parameters"] = shapes;

  const std::string manifest_path = (fs::path(directory) / "manifest.json").string();
  std::ofstream manifest_out(manifest_path, std::ios::binary);
  if (!manifest_out) throw std::runtime_error("cannot write checkpoint manifest: " + manifest_path);
  manifest_out << manifest.dump(2) << "\n";

  const std::string weights_path = (fs::path(directory) / "weights.bin").string();
  std::ofstream weights(weights_path, std::ios::binary);
  if (!weights) throw std::runtime_error("cannot write checkpoint weights: " + weights_path);
  for (const std::string& name : model.parameter_names()) {
    const Matrix& value = model.parameter(name).value;
    weights.write(reinterpret_cast<const char*>(value.data.data()),
                  static_cast<std::streamsize>(value.data.size() * sizeof(double)));
  }
}

Seq2SchemaModel load_checkpoint(const std::string& directory, std::string* template_version_out) {
  const std::string manifest_path = (fs::path(directory) / "manifest.json").string();
  std::ifstream manifest_in(manifest_path, std::ios::binary);
  if (!manifest_in) throw std::runtime_error("cannot read checkpoint manifest: " + manifest_path);
  json manifest;
  manifest_in >> manifest;

  if (manifest.at("format").get<std::string>() != kCheckpointFormat) {
    throw std::runtime_error("unsupported checkpoint format in " + manifest_path);
  }

  ModelConfig config;
  const json& encoder = manifest.at("config").at("encoder");
  config.encoder.checkpoint = encoder.at("checkpoint").get<std::string>();
  config.encoder.hidden_size = encoder.at("hidden_size").get<size_t>();
  config.encoder.layers = encoder.at("layers").get<size_t>();
  config.encoder.heads = encoder.at("heads").get<size_t>();
  config.encoder.max_sequence = encoder.at("max_sequence").get<size_t>();
  const json& decoder = manifest.at("config").at("decoder");
  config.decoder.layers = decoder.at("layers").get<size_t>();
  config.decoder.heads = decoder.at("heads").get<size_t>();
  config.decoder.max_generate = decoder.at("max_generate").get<size_t>();

  Vocabulary vocabulary =
      Vocabulary::from_tokens(manifest.at("vocabulary").at("tokens").get<std::vector<std::string>>());
  if (hex64(vocabulary.hash()) != manifest.at("vocabulary").at("hash").get<std::string>()) {
    throw std::runtime_error("vocabulary hash mismatch in " + manifest_path);
  }

  Seq2SchemaModel model(config, std::move(vocabulary), manifest.at("seed").get<uint64_t>());
  if (template_version_out != nullptr) {
    *template_version_out = manifest.at("template_version").get<std::string>();
  }

  const std::string weights_path = (fs::path(directory) / "weights.bin").string();
  std::ifstream weights(weights_path, std::ios::binary);
  if (!weights) throw std::runtime_error("cannot read checkpoint weights: " + weights_path);

  std::vector<std::string> names = model.parameter_names();
  const json& shapes = manifest.at("parameters");
  if (shapes.size() != names.size()) {
    throw std::runtime_error("checkpoint parameter list does not match the model");
  }
  for (size_t i = 0; i < names.size(); ++i) {
    Matrix& value = model.parameter(names[i]).value;
    const json& shape = shapes.at(i);
    if (shape.at("name").get<std::string>() != names[i] ||
        shape.at("rows").get<size_t>() != value.rows ||
        shape.at("cols").get<size_t>() != value.cols) {
      throw std::runtime_error("checkpoint shape drift for parameter " + names[i]);
    }
    weights.read(reinterpret_cast<char*>(value.data.data()),
                 static_cast<std::streamsize>(value.data.size() * sizeof(double)));
    if (weights.gcount() != static_cast<std::streamsize>(value.data.size() * sizeof(double))) {
      throw std::runtime_error("checkpoint weights truncated at parameter " + names[i]);
    }
  }
  char probe = 0;
  if (weights.read(&probe, 1); weights.gcount() != 0) {
    throw std::runtime_error("checkpoint weights carry trailing bytes");
  }
  return model;
}

}  // namespace t2s
