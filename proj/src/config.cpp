// Copyright 2026 The nkb-lab Authors
// SPDX-License-Identifier: Apache-2.0

#include "nkb/config.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "nkb/errors.hpp"
#include "nkb/rng.hpp"

namespace nkb {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::size_t parse_count(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': expected an unsigned integer, got '" + v + "'");
  }
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  double out = 0;
  auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
    throw ConfigError("config key '" + key + "': expected a number, got '" + v + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError("config key '" + key + "': expected true|false, got '" + v + "'");
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename Member>
Field count_field(std::string key, Member member) {
  return {key,
          [member](RunConfig& c, const std::string& k, const std::string& v) {
            std::invoke(member, c) = parse_count(k, v);
          },
          [member](const RunConfig& c) {
            return std::to_string(std::invoke(member, const_cast<RunConfig&>(c)));
          }};
}

void add_train_fields(std::vector<Field>& out, const std::string& prefix,
                      TrainConfig RunConfig::*phase) {
  auto f = [&](const std::string& name, auto set, auto get) {
    out.push_back({prefix + "." + name,
                   [phase, set](RunConfig& c, const std::string& k, const std::string& v) {
                     set(c.*phase, k, v);
                   },
                   [phase, get](const RunConfig& c) { return get(c.*phase); }});
  };
  f("batch_size",
    [](TrainConfig& t, const std::string& k, const std::string& v) { t.batch_size = parse_count(k, v); },
    [](const TrainConfig& t) { return std::to_string(t.batch_size); });
  f("max_steps",
    [](TrainConfig& t, const std::string& k, const std::string& v) { t.max_steps = parse_count(k, v); },
    [](const TrainConfig& t) { return std::to_string(t.max_steps); });
  f("warmup_steps",
    [](TrainConfig& t, const std::string& k, const std::string& v) { t.warmup_steps = parse_count(k, v); },
    [](const TrainConfig& t) { return std::to_string(t.warmup_steps); });
  f("peak_lr",
    [](TrainConfig& t, const std::string& k, const std::string& v) { t.peak_lr = parse_real(k, v); },
    [](const TrainConfig& t) { return fmt_double(t.peak_lr); });
  f("schedule",
    [](TrainConfig& t, const std::string&, const std::string& v) { t.schedule = schedule_from_string(v); },
    [](const TrainConfig& t) { return to_string(t.schedule); });
  f("optimizer",
    [](TrainConfig& t, const std::string&, const std::string& v) { t.optimizer = optimizer_from_string(v); },
    [](const TrainConfig& t) { return to_string(t.optimizer); });
  f("clip_norm",
    [](TrainConfig& t, const std::string& k, const std::string& v) { t.clip_norm = parse_real(k, v); },
    [](const TrainConfig& t) { return fmt_double(t.clip_norm); });
  f("dropout",
    [](TrainConfig& t, const std::string& k, const std::string& v) { t.dropout = parse_real(k, v); },
    [](const TrainConfig& t) { return fmt_double(t.dropout); });
  f("nkb_dropout",
    [](TrainConfig& t, const std::string& k, const std::string& v) { t.nkb_dropout = parse_real(k, v); },
    [](const TrainConfig& t) { return fmt_double(t.nkb_dropout); });
  f("seed",
    [](TrainConfig& t, const std::string& k, const std::string& v) { t.seed = parse_u64(k, v); },
    [](const TrainConfig& t) { return std::to_string(t.seed); });
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back({"seed",
                 [](RunConfig& c, const std::string& k, const std::string& v) { c.seed = parse_u64(k, v); },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    f.push_back(count_field("world.entities_per_category",
                            [](RunConfig& c) -> std::size_t& { return c.world.entities_per_category; }));
    f.push_back(count_field("world.relations",
                            [](RunConfig& c) -> std::size_t& { return c.world.relations; }));
    f.push_back(count_field("world.base_facts",
                            [](RunConfig& c) -> std::size_t& { return c.world.base_facts; }));
    f.push_back(count_field("world.new_facts",
                            [](RunConfig& c) -> std::size_t& { return c.world.new_facts; }));
    f.push_back(count_field("world.withheld_facts",
                            [](RunConfig& c) -> std::size_t& { return c.world.withheld_facts; }));
    f.push_back(count_field("ssm.draws", [](RunConfig& c) -> std::size_t& { return c.ssm_draws; }));
    f.push_back(count_field("ssm.new_draws",
                            [](RunConfig& c) -> std::size_t& { return c.ssm_new_draws; }));
    f.push_back(count_field("model.num_layers",
                            [](RunConfig& c) -> std::size_t& { return c.model.num_layers; }));
    f.push_back(count_field("model.model_dim",
                            [](RunConfig& c) -> std::size_t& { return c.model.model_dim; }));
    f.push_back(count_field("model.num_heads",
                            [](RunConfig& c) -> std::size_t& { return c.model.num_heads; }));
    f.push_back(count_field("model.max_seq_len",
                            [](RunConfig& c) -> std::size_t& { return c.model.max_seq_len; }));
    f.push_back(count_field("model.nkb_dim",
                            [](RunConfig& c) -> std::size_t& { return c.model.nkb_dim; }));
    f.push_back({"model.activation",
                 [](RunConfig& c, const std::string&, const std::string& v) {
                   c.model.activation = activation_from_string(v);
                 },
                 [](const RunConfig& c) { return to_string(c.model.activation); }});
    f.push_back({"model.nkb_stack",
                 [](RunConfig& c, const std::string&, const std::string& v) {
                   c.model.nkb_site.stack = stack_from_string(v);
                 },
                 [](const RunConfig& c) { return to_string(c.model.nkb_site.stack); }});
    f.push_back({"model.nkb_layer",
                 [](RunConfig& c, const std::string& k, const std::string& v) {
                   int out = 0;
                   auto res = std::from_chars(v.data(), v.data() + v.size(), out);
                   if (res.ec != std::errc() || res.ptr != v.data() + v.size()) {
                     throw ConfigError("config key '" + k + "': expected an integer, got '" + v + "'");
                   }
                   c.model.nkb_site.layer = out;
                 },
                 [](const RunConfig& c) { return std::to_string(c.model.nkb_site.layer); }});
    f.push_back({"model.final_norm",
                 [](RunConfig& c, const std::string& k, const std::string& v) {
                   c.model.final_norm = parse_bool(k, v);
                 },
                 [](const RunConfig& c) { return std::string(c.model.final_norm ? "true" : "false"); }});
    f.push_back({"model.nkb_key_std",
                 [](RunConfig& c, const std::string& k, const std::string& v) {
                   c.nkb_key_std = parse_real(k, v);
                 },
                 [](const RunConfig& c) { return fmt_double(c.nkb_key_std); }});
    add_train_fields(f, "pretrain", &RunConfig::pretrain);
    f.push_back(count_field("pretrain.qa_repeats",
                            [](RunConfig& c) -> std::size_t& { return c.pretrain_qa_repeats; }));
    f.push_back(count_field("inject.replay_draws",
                            [](RunConfig& c) -> std::size_t& { return c.inject_replay_draws; }));
    f.push_back(count_field("finetune.new_qa",
                            [](RunConfig& c) -> std::size_t& { return c.finetune_new_qa; }));
    add_train_fields(f, "inject", &RunConfig::inject);
    add_train_fields(f, "finetune", &RunConfig::finetune);
    add_train_fields(f, "proxy", &RunConfig::proxy);
    f.push_back({"proxy.task",
                 [](RunConfig& c, const std::string&, const std::string& v) {
                   c.proxy_task = proxy_task_from_string(v);
                 },
                 [](const RunConfig& c) { return to_string(c.proxy_task); }});
    f.push_back(count_field("proxy.train_size",
                            [](RunConfig& c) -> std::size_t& { return c.proxy_train_size; }));
    f.push_back(count_field("proxy.eval_size",
                            [](RunConfig& c) -> std::size_t& { return c.proxy_eval_size; }));
    f.push_back(count_field("proxy.max_len",
                            [](RunConfig& c) -> std::size_t& { return c.proxy_max_len; }));
    f.push_back(count_field("eval.max_len", [](RunConfig& c) -> std::size_t& { return c.eval_max_len; }));
    f.push_back(count_field("probe.top_k", [](RunConfig& c) -> std::size_t& { return c.probe_top_k; }));
    f.push_back(count_field("probe.top_m", [](RunConfig& c) -> std::size_t& { return c.probe_top_m; }));
    f.push_back(count_field("probe.slots", [](RunConfig& c) -> std::size_t& { return c.probe_slots; }));
    f.push_back({"probe.ranking",
                 [](RunConfig& c, const std::string&, const std::string& v) {
                   c.probe_ranking = slot_ranking_from_string(v);
                 },
                 [](const RunConfig& c) { return to_string(c.probe_ranking); }});
    f.push_back(count_field("surgery.controls",
                            [](RunConfig& c) -> std::size_t& { return c.surgery_controls; }));
    f.push_back(count_field("surgery.max_edits",
                            [](RunConfig& c) -> std::size_t& { return c.surgery_max_edits; }));
    f.push_back({"surgery.lambdas",
                 [](RunConfig& c, const std::string& k, const std::string& v) {
                   c.surgery_lambdas.clear();
                   std::stringstream ss(v);
                   std::string item;
                   while (std::getline(ss, item, ',')) c.surgery_lambdas.push_back(parse_real(k, trim(item)));
                   if (c.surgery_lambdas.empty()) throw ConfigError("config key '" + k + "' is empty");
                 },
                 [](const RunConfig& c) {
                   std::string s;
                   for (double l : c.surgery_lambdas) s += (s.empty() ? "" : ",") + fmt_double(l);
                   return s;
                 }});
    std::sort(f.begin(), f.end(), [](const Field& a, const Field& b) { return a.key < b.key; });
    return f;
  }();
  return table;
}

const Field* find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

}  // namespace

ConfigMap parse_config_text(const std::string& text, const std::string& base_dir,
                            bool allow_include) {
  ConfigMap out;
  std::istringstream is(text);
  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.rfind("include", 0) == 0 && line.find('=') == std::string::npos) {
      if (!allow_include) {
        throw ConfigError("config line " + std::to_string(lineno) +
                          ": include is only allowed in the top-level file");
      }
      const std::string rel = trim(line.substr(7));
      if (rel.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": include without a path");
      const auto path = std::filesystem::path(base_dir) / rel;
      std::ifstream in(path);
      if (!in) throw ConfigError("cannot read included config '" + path.string() + "'");
      std::stringstream ss;
      ss << in.rdbuf();
      for (auto& [k, v] : parse_config_text(ss.str(), path.parent_path().string(), false)) {
        out[k] = v;
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

ConfigMap parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), std::filesystem::path(path).parent_path().string());
}

std::uint64_t RunConfig::derived(const char* label) const { return derive_seed(seed, label); }

RunConfig RunConfig::from_map(const ConfigMap& map, const std::vector<std::string>& required) {
  for (const auto& k : required) {
    if (!map.count(k)) throw ConfigError("missing required config key '" + k + "'");
  }
  RunConfig c;
  // Defaults that are not plain constants.
  c.finetune.dropout = 0.1;
  c.pretrain.max_steps = 3000;
  c.finetune.max_steps = 600;
  c.finetune.peak_lr = 1e-3;
  c.proxy.max_steps = 600;
  c.proxy.peak_lr = 1e-3;
  c.model.nkb_dim = 64;
  if (auto it = map.find("seed"); it != map.end()) c.seed = parse_u64("seed", it->second);
  c.world.seed = c.derived("world");
  c.pretrain.seed = c.derived("pretrain");
  c.inject.seed = c.derived("inject");
  c.finetune.seed = c.derived("finetune");
  c.proxy.seed = c.derived("proxy");
  for (const auto& [k, v] : map) {
    const Field* f = find_field(k);
    if (f == nullptr) throw ConfigError("unknown config key '" + k + "'");
    f->set(c, k, v);
  }
  const std::pair<const char*, const TrainConfig*> phases[] = {
      {"pretrain", &c.pretrain}, {"inject", &c.inject}, {"finetune", &c.finetune}, {"proxy", &c.proxy}};
  for (const auto& [name, t] : phases) {
    try {
      t->validate();
    } catch (const ConfigError& e) {
      throw ConfigError(std::string(name) + ": " + e.what());
    }
  }
  return c;
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& f : fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

const std::vector<std::string>& world_keys() {
  static const std::vector<std::string> keys{
      "world.entities_per_category", "world.relations", "world.base_facts", "world.new_facts",
      "world.withheld_facts"};
  return keys;
}

std::vector<std::string> known_config_keys() {
  std::vector<std::string> keys;
  for (const auto& f : fields()) keys.push_back(f.key);
  return keys;
}

}  // namespace nkb
