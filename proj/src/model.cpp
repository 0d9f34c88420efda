// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "nkb/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

#include "nkb/rng.hpp"
#include "nkb/tokens.hpp"

namespace nkb {

namespace {

constexpr double kEmbeddingStd = 0.05;

Tensor normal_matrix(std::size_t rows, std::size_t cols, double stddev,
                     std::mt19937_64& rng) {
  Tensor t(Shape{rows, cols}, true);
  if (stddev > 0.0) {
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.values()) v = dist(rng);
  }
  return t;
}

Tensor ones(std::size_t n) {
  Tensor t(Shape{n}, std::vector<double>(n, 1.0), true);
  return t;
}

AttentionParams init_attention(std::size_t d, std::size_t layers,
                               std::mt19937_64& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  const double so = s / std::sqrt(2.0 * static_cast<double>(layers));
  AttentionParams p;
  p.wq = normal_matrix(d, d, s, rng);
  p.wk = normal_matrix(d, d, s, rng);
  p.wv = normal_matrix(d, d, s, rng);
  p.wo = normal_matrix(d, d, so, rng);
  return p;
}

FfnParams init_ffn(std::size_t d, std::size_t layers, std::mt19937_64& rng) {
  FfnParams p;
  p.w1 = normal_matrix(4 * d, d, 1.0 / std::sqrt(static_cast<double>(d)), rng);
  p.w2 = normal_matrix(4 * d, d,
                       1.0 / std::sqrt(4.0 * static_cast<double>(d)) /
                           std::sqrt(2.0 * static_cast<double>(layers)),
                       rng);
  return p;
}

void push_attention(std::vector<NamedTensor>& out, const std::string& prefix,
                    const AttentionParams& p) {
  out.push_back({prefix + ".wq", p.wq});
  out.push_back({prefix + ".wk", p.wk});
  out.push_back({prefix + ".wv", p.wv});
  out.push_back({prefix + ".wo", p.wo});
}

AttentionParams clone_attention(const AttentionParams& p) {
  return {p.wq.clone(), p.wk.clone(), p.wv.clone(), p.wo.clone()};
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const long long x = std::stoll(v, &pos);
    if (pos != v.size() || x < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(x);
  } catch (const std::exception&) {
    throw ConfigError("model config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
}

}  // namespace

std::string to_string(Stack s) { return s == Stack::encoder ? "encoder" : "decoder"; }

Stack stack_from_string(const std::string& s) {
  if (s == "encoder") return Stack::encoder;
  if (s == "decoder") return Stack::decoder;
  throw ConfigError("unknown stack '" + s + "' (expected encoder|decoder)");
}

// ---------------------------------------------------------------------------
// ModelConfig

std::size_t ModelConfig::resolved_nkb_layer() const {
  if (nkb_site.layer < 0) return num_layers - 1;
  return static_cast<std::size_t>(nkb_site.layer);
}

void ModelConfig::validate() const {
  if (num_layers == 0) throw ConfigError("model: num_layers must be positive");
  if (model_dim == 0 || num_heads == 0 || model_dim % num_heads != 0) {
    throw ConfigError("model: num_heads (" + std::to_string(num_heads) +
                      ") must divide model_dim (" + std::to_string(model_dim) + ")");
  }
  if (vocab_size <= static_cast<std::size_t>(kNumSpecialTokens)) {
    throw ConfigError("model: vocab_size must exceed the special tokens");
  }
  if (max_seq_len == 0) throw ConfigError("model: max_seq_len must be positive");
  if (nkb_site.layer >= static_cast<int>(num_layers) || nkb_site.layer < -1) {
    throw ConfigError("model: nkb layer " + std::to_string(nkb_site.layer) +
                      " outside a stack of " + std::to_string(num_layers));
  }
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "num_layers=" << num_layers << '\n'
     << "model_dim=" << model_dim << '\n'
     << "num_heads=" << num_heads << '\n'
     << "ffn_dim=" << ffn_dim() << '\n'
     << "vocab_size=" << vocab_size << '\n'
     << "max_seq_len=" << max_seq_len << '\n'
     << "activation=" << to_string(activation) << '\n'
     << "nkb_dim=" << nkb_dim << '\n'
     << "nkb_stack=" << to_string(nkb_site.stack) << '\n'
     << "nkb_layer=" << nkb_site.layer << '\n'
     << "final_norm=" << (final_norm ? 1 : 0) << '\n';
  return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
  ModelConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::size_t ffn = 0;
  bool saw_ffn = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("model config: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    if (key == "num_layers") cfg.num_layers = parse_size(key, val);
    else if (key == "model_dim") cfg.model_dim = parse_size(key, val);
    else if (key == "num_heads") cfg.num_heads = parse_size(key, val);
    else if (key == "ffn_dim") { ffn = parse_size(key, val); saw_ffn = true; }
    else if (key == "vocab_size") cfg.vocab_size = parse_size(key, val);
    else if (key == "max_seq_len") cfg.max_seq_len = parse_size(key, val);
    else if (key == "activation") cfg.activation = activation_from_string(val);
    else if (key == "nkb_dim") cfg.nkb_dim = parse_size(key, val);
    else if (key == "nkb_stack") cfg.nkb_site.stack = stack_from_string(val);
    else if (key == "nkb_layer") cfg.nkb_site.layer = std::stoi(val);
    else if (key == "final_norm") cfg.final_norm = parse_size(key, val) != 0;
    else throw ConfigError("model config: unknown key '" + key + "'");
  }
  if (saw_ffn && ffn != cfg.ffn_dim()) {
    throw ConfigError("model config: ffn_dim must equal 4 * model_dim");
  }
  cfg.validate();
  return cfg;
}

Tensor AttentionParams::head_query(std::size_t h, std::size_t heads) const {
  const std::size_t d = wq.rows(), dh = d / heads;
  Tensor out(Shape{d, dh});
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < dh; ++c) out.at(r, c) = wq.at(r, h * dh + c);
  return out;
}

// ---------------------------------------------------------------------------
// Seq2SeqModel

Seq2SeqModel::Seq2SeqModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  const std::size_t d = cfg_.model_dim, layers = cfg_.num_layers;
  std::mt19937_64 rng(seed);
  embedding_ = normal_matrix(cfg_.vocab_size, d, kEmbeddingStd, rng);
  for (std::size_t i = 0; i < layers; ++i) {
    EncoderLayer l;
    l.ln_attn = ones(d);
    l.attn = init_attention(d, layers, rng);
    l.ln_ffn = ones(d);
    l.ffn = init_ffn(d, layers, rng);
    encoder_.push_back(std::move(l));
  }
  for (std::size_t i = 0; i < layers; ++i) {
    DecoderLayer l;
    l.ln_self = ones(d);
    l.self_attn = init_attention(d, layers, rng);
    l.ln_cross = ones(d);
    l.cross_attn = init_attention(d, layers, rng);
    l.ln_ffn = ones(d);
    l.ffn = init_ffn(d, layers, rng);
    decoder_.push_back(std::move(l));
  }
  enc_norm_ = ones(d);
  dec_norm_ = ones(d);
  if (cfg_.nkb_dim > 0) {
    const std::size_t dim = cfg_.nkb_dim;
    cfg_.nkb_dim = 0;
    mount_nkb(cfg.nkb_site, dim, NkbInit{0.02, 0.0, derive_seed(seed, "nkb")});
  }
}

std::vector<NamedTensor> Seq2SeqModel::parameters() const {
  std::vector<NamedTensor> out;
  out.push_back({"embedding", embedding_});
  for (std::size_t i = 0; i < encoder_.size(); ++i) {
    const std::string p = "encoder." + std::to_string(i);
    const auto& l = encoder_[i];
    out.push_back({p + ".ln_attn", l.ln_attn});
    push_attention(out, p + ".attn", l.attn);
    out.push_back({p + ".ln_ffn", l.ln_ffn});
    out.push_back({p + ".ffn.w1", l.ffn.w1});
    out.push_back({p + ".ffn.w2", l.ffn.w2});
  }
  out.push_back({"encoder.norm", enc_norm_});
  for (std::size_t i = 0; i < decoder_.size(); ++i) {
    const std::string p = "decoder." + std::to_string(i);
    const auto& l = decoder_[i];
    out.push_back({p + ".ln_self", l.ln_self});
    push_attention(out, p + ".self_attn", l.self_attn);
    out.push_back({p + ".ln_cross", l.ln_cross});
    push_attention(out, p + ".cross_attn", l.cross_attn);
    out.push_back({p + ".ln_ffn", l.ln_ffn});
    out.push_back({p + ".ffn.w1", l.ffn.w1});
    out.push_back({p + ".ffn.w2", l.ffn.w2});
  }
  out.push_back({"decoder.norm", dec_norm_});
  if (has_nkb()) {
    out.push_back({"nkb.w1", nkb_.w1});
    out.push_back({"nkb.w2", nkb_.w2});
  }
  return out;
}

Tensor Seq2SeqModel::parameter(const std::string& name) const {
  for (auto& p : parameters()) {
    if (p.name == name) return p.tensor;
  }
  throw ContractError("no parameter named '" + name + "'");
}

std::size_t Seq2SeqModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.size();
  return n;
}

const NeuralKnowledgeBank& Seq2SeqModel::nkb() const {
  if (!has_nkb()) throw ContractError("model has no mounted NKB");
  return nkb_;
}

NeuralKnowledgeBank& Seq2SeqModel::nkb() {
  if (!has_nkb()) throw ContractError("model has no mounted NKB");
  return nkb_;
}

const FfnParams& Seq2SeqModel::site_ffn() const {
  const std::size_t layer = cfg_.resolved_nkb_layer();
  return cfg_.nkb_site.stack == Stack::encoder ? encoder_[layer].ffn
                                               : decoder_[layer].ffn;
}

void Seq2SeqModel::mount_nkb(NkbSite site, std::size_t dim, const NkbInit& init) {
  if (has_nkb()) {
    throw ContractError("mount_nkb: an NKB is already mounted at " +
                        to_string(cfg_.nkb_site.stack) + " layer " +
                        std::to_string(cfg_.resolved_nkb_layer()));
  }
  if (dim == 0) throw ContractError("mount_nkb: NKB dimension must be positive");
  ModelConfig next = cfg_;
  next.nkb_site = site;
  next.validate();
  std::mt19937_64 rng(init.seed);
  nkb_.w1 = normal_matrix(dim, cfg_.model_dim, init.key_std, rng);
  nkb_.w2 = normal_matrix(dim, cfg_.model_dim, init.value_std, rng);
  cfg_ = next;
  cfg_.nkb_dim = dim;
}

Seq2SeqModel Seq2SeqModel::clone() const {
  Seq2SeqModel m;
  m.cfg_ = cfg_;
  m.embedding_ = embedding_.clone();
  for (const auto& l : encoder_) {
    m.encoder_.push_back({l.ln_attn.clone(), clone_attention(l.attn),
                          l.ln_ffn.clone(), {l.ffn.w1.clone(), l.ffn.w2.clone()}});
  }
  for (const auto& l : decoder_) {
    m.decoder_.push_back({l.ln_self.clone(), clone_attention(l.self_attn),
                          l.ln_cross.clone(), clone_attention(l.cross_attn),
                          l.ln_ffn.clone(), {l.ffn.w1.clone(), l.ffn.w2.clone()}});
  }
  m.enc_norm_ = enc_norm_.clone();
  m.dec_norm_ = dec_norm_.clone();
  if (has_nkb()) m.nkb_ = {nkb_.w1.clone(), nkb_.w2.clone()};
  return m;
}

void Seq2SeqModel::assign(const std::string& name, std::span<const double> values) {
  Tensor t = parameter(name);
  if (t.size() != values.size()) {
    throw ShapeError("assign '" + name + "': expected " + std::to_string(t.size()) +
                     " values, got " + std::to_string(values.size()));
  }
  std::copy(values.begin(), values.end(), t.values().begin());
}

// ---------------------------------------------------------------------------
// Sublayers

Tensor self_attention(const Tensor& x, const AttentionParams& p,
                      std::size_t heads, bool causal) {
  const AttentionSegment seg{0, x.rows(), 0, x.rows()};
  Tensor q = matmul(x, p.wq), k = matmul(x, p.wk), v = matmul(x, p.wv);
  return matmul(attention(q, k, v, std::span(&seg, 1), heads, causal), p.wo);
}

Tensor ffn_forward(const Tensor& h, const FfnParams& p, Activation act) {
  return matmul(act_func(matmul_transposed(h, p.w1), act), p.w2);
}

MemoryReadout ffn_memory_forward(std::span<const double> h, const FfnParams& p,
                                 Activation act) {
  const std::size_t d = p.w1.cols(), slots = p.w1.rows();
  if (h.size() != d) {
    throw ShapeError("ffn_memory_forward: hidden state of size " +
                     std::to_string(h.size()) + " for keys of width " + std::to_string(d));
  }
  MemoryReadout out{std::vector<double>(d, 0.0), std::vector<double>(slots, 0.0)};
  auto keys = p.w1.values();
  auto vals = p.w2.values();
  for (std::size_t i = 0; i < slots; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += h[j] * keys[i * d + j];
    const double w = activate(s, act);
    out.weights[i] = w;
    for (std::size_t j = 0; j < d; ++j) out.output[j] += w * vals[i * d + j];
  }
  return out;
}

NkbReadout nkb_forward(std::span<const double> h, const FfnParams& p,
                       const NeuralKnowledgeBank& nkb, Activation act) {
  if (nkb.slots() == 0) throw ContractError("nkb_forward: NKB not mounted");
  MemoryReadout base = ffn_memory_forward(h, p, act);
  MemoryReadout extra = ffn_memory_forward(h, FfnParams{nkb.w1, nkb.w2}, act);
  NkbReadout out{std::move(base.output), std::move(base.weights), std::move(extra.weights)};
  for (std::size_t j = 0; j < out.output.size(); ++j) out.output[j] += extra.output[j];
  return out;
}

Tensor positional_encoding(std::size_t len, std::size_t d) {
  Tensor pe(Shape{len, d});
  for (std::size_t pos = 0; pos < len; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pe.at(pos, i) = std::sin(static_cast<double>(pos) * freq);
      if (i + 1 < d) pe.at(pos, i + 1) = std::cos(static_cast<double>(pos) * freq);
    }
  }
  return pe;
}

// ---------------------------------------------------------------------------
// Whole model

namespace {

struct Packed {
  std::vector<int> ids;
  std::vector<std::size_t> offsets;  // size n+1
};

Packed pack(std::span<const SeqPair> batch, bool source, std::size_t max_len) {
  Packed p;
  p.offsets.push_back(0);
  for (const auto& ex : batch) {
    const auto& seq = source ? ex.src : ex.tgt_in;
    if (seq.empty()) throw ContractError("forward: empty sequence");
    if (seq.size() > max_len) {
      throw ContractError("forward: sequence of length " + std::to_string(seq.size()) +
                          " exceeds max_seq_len " + std::to_string(max_len));
    }
    p.ids.insert(p.ids.end(), seq.begin(), seq.end());
    p.offsets.push_back(p.ids.size());
  }
  return p;
}

Tensor embed(const Seq2SeqModel& m, const Packed& p) {
  const std::size_t d = m.config().model_dim;
  for (int id : p.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= m.config().vocab_size) {
      throw ContractError("forward: token id " + std::to_string(id) +
                          " outside vocabulary of " + std::to_string(m.config().vocab_size));
    }
  }
  Tensor x = scale(embedding(m.embedding(), p.ids), std::sqrt(static_cast<double>(d)));
  Tensor pos(Shape{p.ids.size(), d});
  std::size_t longest = 0;
  for (std::size_t i = 0; i + 1 < p.offsets.size(); ++i)
    longest = std::max(longest, p.offsets[i + 1] - p.offsets[i]);
  const Tensor table = positional_encoding(longest, d);
  for (std::size_t i = 0; i + 1 < p.offsets.size(); ++i) {
    for (std::size_t t = p.offsets[i]; t < p.offsets[i + 1]; ++t) {
      std::copy_n(table.values().data() + (t - p.offsets[i]) * d, d,
                  pos.values().data() + t * d);
    }
  }
  return add(x, pos);
}

std::vector<AttentionSegment> segments(const Packed& q, const Packed& k) {
  std::vector<AttentionSegment> segs;
  for (std::size_t i = 0; i + 1 < q.offsets.size(); ++i) {
    segs.push_back({q.offsets[i], q.offsets[i + 1] - q.offsets[i], k.offsets[i],
                    k.offsets[i + 1] - k.offsets[i]});
  }
  return segs;
}

Tensor attention_block(const Tensor& xq, const Tensor& xkv, const AttentionParams& p,
                       std::span<const AttentionSegment> segs, std::size_t heads,
                       bool causal) {
  Tensor q = matmul(xq, p.wq);
  Tensor k = matmul(xkv, p.wk);
  Tensor v = matmul(xkv, p.wv);
  return matmul(attention(q, k, v, segs, heads, causal), p.wo);
}

struct SiteCapture {
  const NeuralKnowledgeBank* nkb = nullptr;
  const Packed* layout = nullptr;
  std::vector<ForwardTrace>* traces = nullptr;
};

Tensor ffn_block(const Tensor& h, const FfnParams& p, Activation act,
                 const ForwardOptions& opts, const SiteCapture& site) {
  Tensor out = ffn_forward(h, p, act);
  if (opts.dropout > 0.0) out = dropout(out, opts.dropout, *opts.rng);
  if (site.nkb == nullptr) return out;
  Tensor w = act_func(matmul_transposed(h, site.nkb->w1), act);
  Tensor extra = matmul(w, site.nkb->w2);
  if (opts.nkb_dropout > 0.0) extra = dropout(extra, opts.nkb_dropout, *opts.rng);
  if (site.traces != nullptr) {
    const std::size_t slots = site.nkb->slots(), d = h.cols();
    auto wv = w.values();
    auto hv = h.values();
    const auto& off = site.layout->offsets;
    for (std::size_t i = 0; i + 1 < off.size(); ++i) {
      ForwardTrace& tr = (*site.traces)[i];
      for (std::size_t t = off[i]; t < off[i + 1]; ++t) {
        tr.nkb_weights.emplace_back(wv.begin() + t * slots, wv.begin() + (t + 1) * slots);
        tr.nkb_inputs.emplace_back(hv.begin() + t * d, hv.begin() + (t + 1) * d);
      }
    }
  }
  return add(out, extra);
}

Tensor maybe_dropout(const Tensor& x, const ForwardOptions& opts) {
  return opts.dropout > 0.0 ? dropout(x, opts.dropout, *opts.rng) : x;
}

}  // namespace

BatchForward forward_batch(const Seq2SeqModel& model, std::span<const SeqPair> batch,
                           const ForwardOptions& opts) {
  const ModelConfig& cfg = model.config();
  if ((opts.dropout > 0.0 || opts.nkb_dropout > 0.0) && opts.rng == nullptr) {
    throw ContractError("forward_batch: dropout requires an rng");
  }
  const Packed src = pack(batch, true, cfg.max_seq_len);
  const Packed tgt = pack(batch, false, cfg.max_seq_len);
  const auto self_src = segments(src, src);
  const auto self_tgt = segments(tgt, tgt);
  const auto cross = segments(tgt, src);
  const std::size_t heads = cfg.num_heads;
  const std::size_t site_layer = cfg.resolved_nkb_layer();

  BatchForward result;
  result.traces.resize(batch.size());
  auto capture_for = [&](Stack stack, std::size_t layer, const Packed& layout) {
    SiteCapture c;
    if (model.has_nkb() && cfg.nkb_site.stack == stack && layer == site_layer) {
      c.nkb = &model.nkb();
      c.layout = &layout;
      if (opts.record_trace) c.traces = &result.traces;
    }
    return c;
  };

  Tensor x = embed(model, src);
  for (std::size_t i = 0; i < model.encoder_layers().size(); ++i) {
    const auto& l = model.encoder_layers()[i];
    Tensor h = layer_norm(x, l.ln_attn);
    x = add(x, maybe_dropout(attention_block(h, h, l.attn, self_src, heads, false), opts));
    h = layer_norm(x, l.ln_ffn);
    x = add(x, ffn_block(h, l.ffn, cfg.activation, opts,
                         capture_for(Stack::encoder, i, src)));
  }
  const Tensor memory = layer_norm(x, model.encoder_norm());

  Tensor y = embed(model, tgt);
  for (std::size_t i = 0; i < model.decoder_layers().size(); ++i) {
    const auto& l = model.decoder_layers()[i];
    Tensor h = layer_norm(y, l.ln_self);
    y = add(y, maybe_dropout(attention_block(h, h, l.self_attn, self_tgt, heads, true), opts));
    h = layer_norm(y, l.ln_cross);
    y = add(y, maybe_dropout(attention_block(h, memory, l.cross_attn, cross, heads, false), opts));
    h = layer_norm(y, l.ln_ffn);
    y = add(y, ffn_block(h, l.ffn, cfg.activation, opts,
                         capture_for(Stack::decoder, i, tgt)));
  }
  if (cfg.final_norm) y = layer_norm(y, model.decoder_norm());
  result.logits = matmul_transposed(y, model.embedding());
  result.row_offsets = tgt.offsets;
  return result;
}

Seq2SeqOutput forward_seq2seq(const Seq2SeqModel& model, std::span<const int> src,
                              std::span<const int> tgt_prefix) {
  SeqPair ex;
  ex.src.assign(src.begin(), src.end());
  ex.tgt_in.push_back(kBosId);
  ex.tgt_in.insert(ex.tgt_in.end(), tgt_prefix.begin(), tgt_prefix.end());
  BatchForward f = forward_batch(model, std::span(&ex, 1));
  return {f.logits, std::move(f.traces[0])};
}

std::size_t argmax_lowest(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < row.size(); ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

Decoded greedy_decode(const Seq2SeqModel& model, std::span<const int> src,
                      std::size_t max_len) {
  NoGradGuard no_grad;
  Decoded out;
  const bool decoder_site =
      model.has_nkb() && model.config().nkb_site.stack == Stack::decoder;
  const std::size_t vocab = model.config().vocab_size;
  std::vector<int> prefix;
  for (std::size_t step = 0; step < max_len; ++step) {
    Seq2SeqOutput f = forward_seq2seq(model, src, prefix);
    const std::size_t last = f.logits.rows() - 1;
    const auto row = f.logits.values().subspan(last * vocab, vocab);
    const int next = static_cast<int>(argmax_lowest(row));
    if (decoder_site) {
      out.trace.nkb_weights.push_back(f.trace.nkb_weights[last]);
      out.trace.nkb_inputs.push_back(f.trace.nkb_inputs[last]);
    } else if (step == 0) {
      out.trace = std::move(f.trace);
    }
    if (next == kEosId) {
      out.ended = true;
      break;
    }
    out.tokens.push_back(next);
    prefix.push_back(next);
    if (prefix.size() + 1 > model.config().max_seq_len) break;
  }
  return out;
}

}  // namespace nkb
