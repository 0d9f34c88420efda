// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "nkb/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "nkb/rng.hpp"

namespace nkb {

namespace {

void write_doubles(std::ostream& os, const std::vector<double>& v) {
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(double)));
  } else {
    for (double x : v) {
      auto bits = std::bit_cast<std::uint64_t>(x);
      char bytes[8];
      for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
      os.write(bytes, 8);
    }
  }
}

std::vector<double> read_doubles(std::istream& is, std::size_t n, const std::string& name) {
  std::vector<double> v(n);
  if constexpr (std::endian::native == std::endian::little) {
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  } else {
    for (double& x : v) {
      unsigned char bytes[8];
      is.read(reinterpret_cast<char*>(bytes), 8);
      std::uint64_t bits = 0;
      for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
      x = std::bit_cast<double>(bits);
    }
  }
  if (!is) throw DataError("checkpoint: truncated block '" + name + "'");
  return v;
}

std::string expect_line(std::istream& is, const std::string& keyword) {
  std::string line;
  if (!std::getline(is, line)) throw DataError("checkpoint: missing '" + keyword + "' line");
  if (line.rfind(keyword + " ", 0) != 0 && line != keyword) {
    throw DataError("checkpoint: expected '" + keyword + "', found '" + line.substr(0, 40) + "'");
  }
  return line.size() > keyword.size() ? line.substr(keyword.size() + 1) : std::string();
}

std::size_t to_size(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    const unsigned long long v = std::stoull(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw DataError("checkpoint: bad " + what + " '" + s + "'");
  }
}

std::size_t product(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

}  // namespace

Checkpoint make_checkpoint(const Seq2SeqModel& model, const Optimizer* opt, std::size_t step,
                           const std::mt19937_64* rng) {
  Checkpoint c;
  c.config = model.config();
  for (const auto& p : model.parameters()) {
    c.params.push_back({p.name, p.tensor.shape(),
                        {p.tensor.values().begin(), p.tensor.values().end()}});
  }
  if (opt != nullptr) {
    c.optimizer = opt->kind();
    c.optimizer_steps = opt->steps();
    for (auto& b : opt->state_blocks()) {
      const std::size_t n = b.values.size();
      c.optimizer_state.push_back({std::move(b.name), {n}, std::move(b.values)});
    }
  }
  c.step = step;
  if (rng != nullptr) {
    std::ostringstream os;
    os << *rng;
    c.rng_state = os.str();
  }
  return c;
}

Seq2SeqModel restore_model(const Checkpoint& ckpt) {
  ckpt.config.validate();
  Seq2SeqModel model(ckpt.config, 0);
  const auto params = model.parameters();
  if (params.size() != ckpt.params.size()) {
    throw DataError("checkpoint: " + std::to_string(ckpt.params.size()) +
                    " parameter blocks, the configuration needs " +
                    std::to_string(params.size()));
  }
  for (const auto& b : ckpt.params) {
    Tensor t;
    try {
      t = model.parameter(b.name);
    } catch (const ContractError&) {
      throw DataError("checkpoint: unknown parameter block '" + b.name + "'");
    }
    if (t.shape() != b.shape) {
      throw DataError("checkpoint: block '" + b.name + "' has shape " + shape_str(b.shape) +
                      ", expected " + shape_str(t.shape()));
    }
    model.assign(b.name, b.values);
  }
  return model;
}

Optimizer restore_optimizer(const Checkpoint& ckpt) {
  Optimizer opt(ckpt.optimizer);
  std::vector<Optimizer::StateBlock> blocks;
  for (const auto& b : ckpt.optimizer_state) blocks.push_back({b.name, b.values});
  opt.load_state(ckpt.optimizer_steps, blocks);
  return opt;
}

void save_checkpoint(std::ostream& os, const Checkpoint& ckpt) {
  const std::string cfg = ckpt.config.to_text();
  std::size_t cfg_lines = 0;
  for (char c : cfg) cfg_lines += c == '\n';
  os << "NKBCKPT " << kCheckpointVersion << '\n'
     << "config " << cfg_lines << '\n'
     << cfg << "step " << ckpt.step << '\n'
     << "rng " << (ckpt.rng_state.empty() ? "-" : ckpt.rng_state) << '\n'
     << "optimizer " << to_string(ckpt.optimizer) << ' ' << ckpt.optimizer_steps << '\n'
     << "blocks " << ckpt.params.size() + ckpt.optimizer_state.size() << '\n';
  auto emit = [&os](const char* kind, const TensorBlock& b) {
    os << kind << ' ' << b.name << ' ' << b.shape.size();
    for (auto d : b.shape) os << ' ' << d;
    os << '\n';
    write_doubles(os, b.values);
  };
  for (const auto& b : ckpt.params) emit("param", b);
  for (const auto& b : ckpt.optimizer_state) emit("optim", b);
  if (!os) throw DataError("checkpoint: write failed");
}

Checkpoint load_checkpoint(std::istream& is) {
  Checkpoint c;
  std::string header;
  if (!std::getline(is, header) || header.rfind("NKBCKPT ", 0) != 0) {
    throw DataError("checkpoint: not a checkpoint file (bad magic)");
  }
  const std::string version = header.substr(8);
  if (version != std::to_string(kCheckpointVersion)) {
    throw DataError("checkpoint: format version " + version + " is not supported (expected " +
                    std::to_string(kCheckpointVersion) + ")");
  }
  const std::size_t cfg_lines = to_size(expect_line(is, "config"), "config line count");
  std::string cfg_text, line;
  for (std::size_t i = 0; i < cfg_lines; ++i) {
    if (!std::getline(is, line)) throw DataError("checkpoint: truncated config");
    cfg_text += line + '\n';
  }
  try {
    c.config = ModelConfig::from_text(cfg_text);
  } catch (const ConfigError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }
  c.step = to_size(expect_line(is, "step"), "step");
  const std::string rng = expect_line(is, "rng");
  if (rng != "-") c.rng_state = rng;
  {
    std::istringstream os(expect_line(is, "optimizer"));
    std::string kind, t;
    os >> kind >> t;
    try {
      c.optimizer = optimizer_from_string(kind);
    } catch (const ConfigError& e) {
      throw DataError(std::string("checkpoint: ") + e.what());
    }
    c.optimizer_steps = to_size(t, "optimizer step count");
  }
  const std::size_t blocks = to_size(expect_line(is, "blocks"), "block count");
  for (std::size_t i = 0; i < blocks; ++i) {
    if (!std::getline(is, line)) throw DataError("checkpoint: truncated block list");
    std::istringstream hs(line);
    std::string kind, name;
    std::size_t rank = 0;
    if (!(hs >> kind >> name >> rank) || (kind != "param" && kind != "optim")) {
      throw DataError("checkpoint: malformed block header '" + line.substr(0, 60) + "'");
    }
    TensorBlock b{name, Shape(rank), {}};
    for (auto& d : b.shape) {
      if (!(hs >> d)) throw DataError("checkpoint: malformed shape for '" + name + "'");
    }
    b.values = read_doubles(is, product(b.shape), name);
    (kind == "param" ? c.params : c.optimizer_state).push_back(std::move(b));
  }
  if (is.peek() != std::char_traits<char>::eof()) {
    throw DataError("checkpoint: trailing bytes after the last block");
  }
  return c;
}

void save_checkpoint_file(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw DataError("cannot open '" + path + "' for writing");
  save_checkpoint(os, ckpt);
}

Checkpoint load_checkpoint_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint '" + path + "'");
  return load_checkpoint(is);
}

std::map<std::string, std::uint64_t> parameter_digests(const Seq2SeqModel& model) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& p : model.parameters()) out[p.name] = fnv1a64(p.tensor.values());
  return out;
}

std::vector<std::string> changed_parameters(const Seq2SeqModel& a, const Seq2SeqModel& b) {
  if (!(a.config() == b.config())) {
    throw ContractError("changed_parameters: models have different configurations");
  }
  std::vector<std::string> out;
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto va = pa[i].tensor.values(), vb = pb[i].tensor.values();
    if (std::memcmp(va.data(), vb.data(), va.size() * sizeof(double)) != 0) {
      out.push_back(pa[i].name);
    }
  }
  return out;
}

}  // namespace nkb
