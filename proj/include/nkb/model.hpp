// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0
//
// Bias-free pre-norm encoder-decoder Transformer with a tied embedding and
// an optional Neural Knowledge Bank: extra FFN key/value slots mounted on a
// single layer.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nkb/tensor.hpp"

namespace nkb {

enum class Stack { encoder, decoder };

std::string to_string(Stack s);
Stack stack_from_string(const std::string& s);

struct NkbSite {
  Stack stack = Stack::decoder;
  /// Layer index within the stack; -1 selects the last layer.
  int layer = -1;

  friend bool operator==(const NkbSite&, const NkbSite&) = default;
};

struct ModelConfig {
  std::size_t num_layers = 2;  // per stack
  std::size_t model_dim = 64;
  std::size_t num_heads = 4;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 32;
  Activation activation = Activation::relu;
  std::size_t nkb_dim = 0;  // 0 = unmounted
  NkbSite nkb_site;
  /// Layer norm on the decoder output before the tied projection.
  bool final_norm = true;

  std::size_t ffn_dim() const { return 4 * model_dim; }
  std::size_t head_dim() const { return model_dim / num_heads; }
  std::size_t resolved_nkb_layer() const;

  /// Throws ConfigError when an invariant is broken.
  void validate() const;

  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Per-head projections are column blocks of wq/wk/wv: head h owns
/// columns [h·d/n, (h+1)·d/n).
struct AttentionParams {
  Tensor wq, wk, wv;  // d × d
  Tensor wo;          // d × d

  Tensor head_query(std::size_t h, std::size_t heads) const;
};

/// Row i of w1 is key k_i, row i of w2 the paired value v_i.
struct FfnParams {
  Tensor w1;  // 4d × d
  Tensor w2;  // 4d × d
};

struct NeuralKnowledgeBank {
  Tensor w1;  // d′ × d keys
  Tensor w2;  // d′ × d values

  std::size_t slots() const { return w1.defined() ? w1.rows() : 0; }
};

struct NkbInit {
  double key_std = 0.02;
  double value_std = 0.0;
  std::uint64_t seed = 0;
};

struct EncoderLayer {
  Tensor ln_attn;
  AttentionParams attn;
  Tensor ln_ffn;
  FfnParams ffn;
};

struct DecoderLayer {
  Tensor ln_self;
  AttentionParams self_attn;
  Tensor ln_cross;
  AttentionParams cross_attn;
  Tensor ln_ffn;
  FfnParams ffn;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

class Seq2SeqModel {
 public:
  /// Random initialization, deterministic in `seed`. If cfg.nkb_dim > 0 the
  /// NKB is mounted with the default init (seed derived from `seed`).
  Seq2SeqModel(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }

  /// Stable-ordered parameter handles; they alias the model's storage.
  std::vector<NamedTensor> parameters() const;
  Tensor parameter(const std::string& name) const;
  std::size_t parameter_count() const;

  const Tensor& embedding() const { return embedding_; }
  const std::vector<EncoderLayer>& encoder_layers() const { return encoder_; }
  const std::vector<DecoderLayer>& decoder_layers() const { return decoder_; }
  const Tensor& encoder_norm() const { return enc_norm_; }
  const Tensor& decoder_norm() const { return dec_norm_; }

  bool has_nkb() const { return cfg_.nkb_dim > 0; }
  /// Throws ContractError when unmounted.
  const NeuralKnowledgeBank& nkb() const;
  NeuralKnowledgeBank& nkb();
  /// FFN parameters of the layer hosting the NKB site.
  const FfnParams& site_ffn() const;

  /// Allocates d′ new slots at `site`. Base parameters are untouched.
  /// Throws ContractError on a second mount.
  void mount_nkb(NkbSite site, std::size_t dim, const NkbInit& init = {});

  /// Deep copy; the clone shares no storage with this model.
  Seq2SeqModel clone() const;

  /// Replaces parameter values by name (shapes must match); used by
  /// checkpoint loading.
  void assign(const std::string& name, std::span<const double> values);

 private:
  Seq2SeqModel() = default;

  ModelConfig cfg_;
  Tensor embedding_;
  std::vector<EncoderLayer> encoder_;
  std::vector<DecoderLayer> decoder_;
  Tensor enc_norm_;
  Tensor dec_norm_;
  NeuralKnowledgeBank nkb_;
};

/// NKB readings for one stack, one row per position of that stack.
struct ForwardTrace {
  /// Post-activation slot weights w′ (the NKB slice of the intermediate
  /// hidden state).
  std::vector<std::vector<double>> nkb_weights;
  /// The normalized FFN input h at the same positions.
  std::vector<std::vector<double>> nkb_inputs;

  std::size_t positions() const { return nkb_weights.size(); }
};

// --- Sublayer forward paths ------------------------------------------------

/// Multi-head self-attention over one sequence X [len × d].
Tensor self_attention(const Tensor& x, const AttentionParams& p,
                      std::size_t heads, bool causal);

/// ActFunc(H W1ᵀ) W2 for H [len × d].
Tensor ffn_forward(const Tensor& h, const FfnParams& p, Activation act);

struct MemoryReadout {
  std::vector<double> output;
  /// Slot weights w_i = ActFunc(h · k_i), one per key.
  std::vector<double> weights;
};

/// Key-value memory reading of the FFN for a single hidden state: scores
/// against each key, activation, weighted sum of values, slot by slot.
MemoryReadout ffn_memory_forward(std::span<const double> h, const FfnParams& p,
                                 Activation act);

struct NkbReadout {
  std::vector<double> output;
  std::vector<double> base_weights;
  std::vector<double> nkb_weights;
};

/// FFN extended with the NKB slots, for a single hidden state.
NkbReadout nkb_forward(std::span<const double> h, const FfnParams& p,
                       const NeuralKnowledgeBank& nkb, Activation act);

// --- Whole-model forward ---------------------------------------------------

struct SeqPair {
  std::vector<int> src;
  /// Decoder input (starts with BOS).
  std::vector<int> tgt_in;
};

struct ForwardOptions {
  double dropout = 0.0;
  double nkb_dropout = 0.0;
  std::mt19937_64* rng = nullptr;  // required when any dropout > 0
  bool record_trace = true;
};

struct BatchForward {
  /// Packed logits: rows for every tgt_in position, example after example.
  Tensor logits;
  std::vector<std::size_t> row_offsets;
  std::vector<ForwardTrace> traces;
};

BatchForward forward_batch(const Seq2SeqModel& model,
                           std::span<const SeqPair> batch,
                           const ForwardOptions& opts = {});

struct Seq2SeqOutput {
  Tensor logits;  // (|prefix| + 1) × vocab
  ForwardTrace trace;
};

/// Teacher-forced logits for decoder input BOS + tgt_prefix.
Seq2SeqOutput forward_seq2seq(const Seq2SeqModel& model,
                              std::span<const int> src,
                              std::span<const int> tgt_prefix);

struct Decoded {
  /// Generated tokens, excluding the terminating EOS.
  std::vector<int> tokens;
  bool ended = false;
  /// Per generated position (EOS step included), read at the NKB site.
  ForwardTrace trace;
};

/// Argmax decoding; ties go to the lowest token id.
Decoded greedy_decode(const Seq2SeqModel& model, std::span<const int> src,
                      std::size_t max_len);

std::size_t argmax_lowest(std::span<const double> row);

/// Sinusoidal absolute position encodings [len × d].
Tensor positional_encoding(std::size_t len, std::size_t d);

}  // namespace nkb
