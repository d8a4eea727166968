#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "ssmt/losses.hpp"
#include "ssmt/model.hpp"

namespace ssmt {

using json = nlohmann::json;

/// Every knob of a pretrain / fine-tune / evaluate run. Defaults follow the
/// reference setup (inner/outer rates 0.01/0.001, 20 memory items of width 64,
/// loss weights 0.5/0.2/0.3).
struct TrainConfig {
  // model
  std::size_t input_len = 12;
  std::size_t horizon = 12;
  std::size_t hidden = 32;
  std::size_t memory_items = 20;
  std::size_t embed_dim = 64;
  double tau = 0.5;
  bool use_memory = true;
  bool hard_graph = false;  // straight-through hard sampling during training

  // tasks
  std::vector<int> periods{1, 7, 30};
  bool enable_pe = true;
  bool enable_mpe = true;

  LossWeights loss;

  // optimization
  double inner_lr = 0.01;
  double outer_lr = 0.001;
  int inner_steps = 1;
  std::size_t batch_size = 60;
  int max_epochs = 100;
  double finetune_lr = 0.001;
  int finetune_epochs = 20;
  std::uint64_t seed = 0;

  // data
  int samples_per_hour = 12;
  std::size_t stride = 1;       // pretraining window stride
  double finetune_days = 7.0;   // few-shot range at the start of the target series
  std::size_t eval_stride = 1;
  bool finetune_pe = true;      // daily PE on fine-tune / evaluation inputs

  // evaluation
  std::vector<std::size_t> horizons{1, 3, 6};
  std::uint64_t eval_seed = 12345;

  [[nodiscard]] ModelDims dims(std::size_t nodes) const {
    return {nodes, input_len, horizon, hidden, memory_items, embed_dim};
  }

  [[nodiscard]] ForwardOptions forward_options() const {
    return {tau, hard_graph ? SampleMode::hard : SampleMode::soft, use_memory};
  }

  [[nodiscard]] TaskOptions task_options() const { return {enable_pe, enable_mpe}; }
};

inline void validate(const TrainConfig& c) {
  if (!(c.inner_lr > 0) || !(c.outer_lr > 0) || !(c.finetune_lr > 0)) throw ConfigError("learning rates must be positive");
  if (!(c.tau > 0)) throw ConfigError("model.tau must be positive");
  if (c.inner_steps < 0 || c.max_epochs < 0 || c.finetune_epochs < 0) throw ConfigError("step/epoch counts must be >= 0");
  if (c.periods.empty() || c.periods.size() > 3) throw ConfigError("tasks.periods must list 1 to 3 periods");
  for (int v : c.periods) {
    if (v <= 0) throw ConfigError("tasks.periods entries must be positive");
  }
  check_batch_size(c.batch_size);
  if (c.batch_size % (2 * c.periods.size()) != 0) {
    throw ConfigError("train.batch_size must split into equal support/query halves for every task");
  }
  if (c.memory_items < 2) throw ConfigError("model.memory_items must be >= 2");
  if (c.input_len == 0 || c.horizon == 0 || c.hidden == 0 || c.embed_dim == 0) throw ConfigError("model sizes must be >= 1");
  if (c.samples_per_hour <= 0) throw ConfigError("data.samples_per_hour must be positive");
  if (c.stride == 0 || c.eval_stride == 0) throw ConfigError("strides must be >= 1");
  if (!(c.finetune_days > 0)) throw ConfigError("data.finetune_days must be positive");
  if (c.loss.c1 < 0 || c.loss.c2 < 0 || c.loss.c3 < 0 || c.loss.margin < 0) throw ConfigError("loss weights must be >= 0");
  for (std::size_t h : c.horizons) {
    if (h < 1 || h > c.horizon) {
      throw ConfigError("horizon " + std::to_string(h) + " outside [1, " + std::to_string(c.horizon) + "]");
    }
  }
}

inline json to_json(const TrainConfig& c) {
  return json{
      {"model",
       {{"input_len", c.input_len},
        {"horizon", c.horizon},
        {"hidden", c.hidden},
        {"memory_items", c.memory_items},
        {"embed_dim", c.embed_dim},
        {"tau", c.tau},
        {"use_memory", c.use_memory},
        {"hard_graph", c.hard_graph}}},
      {"tasks", {{"periods", c.periods}, {"enable_pe", c.enable_pe}, {"enable_mpe", c.enable_mpe}}},
      {"loss", {{"c1", c.loss.c1}, {"c2", c.loss.c2}, {"c3", c.loss.c3}, {"lambda", c.loss.margin}}},
      {"train",
       {{"inner_lr", c.inner_lr},
        {"outer_lr", c.outer_lr},
        {"inner_steps", c.inner_steps},
        {"batch_size", c.batch_size},
        {"max_epochs", c.max_epochs},
        {"finetune_lr", c.finetune_lr},
        {"finetune_epochs", c.finetune_epochs},
        {"seed", c.seed}}},
      {"data",
       {{"samples_per_hour", c.samples_per_hour},
        {"stride", c.stride},
        {"finetune_days", c.finetune_days},
        {"eval_stride", c.eval_stride},
        {"finetune_pe", c.finetune_pe}}},
      {"eval", {{"horizons", c.horizons}, {"seed", c.eval_seed}}},
  };
}

namespace detail {

template <class T>
void read_key(const json& section, const std::string& sname, const char* key, T& out, std::set<std::string>& seen) {
  auto it = section.find(key);
  if (it == section.end()) return;
  seen.insert(key);
  try {
    out = it->template get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("config key '" + sname + "." + key + "': " + e.what());
  }
}

inline void reject_unknown(const json& section, const std::string& sname, const std::set<std::string>& seen) {
  for (auto it = section.begin(); it != section.end(); ++it) {
    if (!seen.contains(it.key())) throw ConfigError("unknown config key '" + sname + "." + it.key() + "'");
  }
}

}  // namespace detail

/// Reads a (possibly partial) config; missing keys keep their defaults,
/// unknown keys are rejected.
inline TrainConfig config_from_json(const json& j, TrainConfig c = {}) {
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  static const std::set<std::string> sections{"model", "tasks", "loss", "train", "data", "eval"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!sections.contains(it.key())) throw ConfigError("unknown config section '" + it.key() + "'");
    if (!it.value().is_object()) throw ConfigError("config section '" + it.key() + "' must be an object");
  }
  auto section = [&](const char* name, auto&& fn) {
    if (!j.contains(name)) return;
    std::set<std::string> seen;
    fn(j.at(name), std::string(name), seen);
    detail::reject_unknown(j.at(name), name, seen);
  };
  using detail::read_key;
  section("model", [&](const json& s, const std::string& n, std::set<std::string>& seen) {
    read_key(s, n, "input_len", c.input_len, seen);
    read_key(s, n, "horizon", c.horizon, seen);
    read_key(s, n, "hidden", c.hidden, seen);
    read_key(s, n, "memory_items", c.memory_items, seen);
    read_key(s, n, "embed_dim", c.embed_dim, seen);
    read_key(s, n, "tau", c.tau, seen);
    read_key(s, n, "use_memory", c.use_memory, seen);
    read_key(s, n, "hard_graph", c.hard_graph, seen);
  });
  section("tasks", [&](const json& s, const std::string& n, std::set<std::string>& seen) {
    read_key(s, n, "periods", c.periods, seen);
    read_key(s, n, "enable_pe", c.enable_pe, seen);
    read_key(s, n, "enable_mpe", c.enable_mpe, seen);
  });
  section("loss", [&](const json& s, const std::string& n, std::set<std::string>& seen) {
    read_key(s, n, "c1", c.loss.c1, seen);
    read_key(s, n, "c2", c.loss.c2, seen);
    read_key(s, n, "c3", c.loss.c3, seen);
    read_key(s, n, "lambda", c.loss.margin, seen);
  });
  section("train", [&](const json& s, const std::string& n, std::set<std::string>& seen) {
    read_key(s, n, "inner_lr", c.inner_lr, seen);
    read_key(s, n, "outer_lr", c.outer_lr, seen);
    read_key(s, n, "inner_steps", c.inner_steps, seen);
    read_key(s, n, "batch_size", c.batch_size, seen);
    read_key(s, n, "max_epochs", c.max_epochs, seen);
    read_key(s, n, "finetune_lr", c.finetune_lr, seen);
    read_key(s, n, "finetune_epochs", c.finetune_epochs, seen);
    read_key(s, n, "seed", c.seed, seen);
  });
  section("data", [&](const json& s, const std::string& n, std::set<std::string>& seen) {
    read_key(s, n, "samples_per_hour", c.samples_per_hour, seen);
    read_key(s, n, "stride", c.stride, seen);
    read_key(s, n, "finetune_days", c.finetune_days, seen);
    read_key(s, n, "eval_stride", c.eval_stride, seen);
    read_key(s, n, "finetune_pe", c.finetune_pe, seen);
  });
  section("eval", [&](const json& s, const std::string& n, std::set<std::string>& seen) {
    read_key(s, n, "horizons", c.horizons, seen);
    read_key(s, n, "seed", c.eval_seed, seen);
  });
  validate(c);
  return c;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

/// Applies `section.key = value` to a config JSON. The value is parsed as JSON
/// when possible (numbers, booleans, arrays) and taken as a string otherwise.
inline void apply_override(json& j, const std::string& dotted_key, const std::string& value) {
  const auto dot = dotted_key.find('.');
  if (dot == std::string::npos || dot == 0 || dot + 1 == dotted_key.size()) {
    throw ConfigError("override key '" + dotted_key + "' must look like section.key");
  }
  json v = json::parse(value, nullptr, false);
  if (v.is_discarded()) v = value;
  j[dotted_key.substr(0, dot)][dotted_key.substr(dot + 1)] = std::move(v);
}

/// Stable fingerprint of the full effective config.
inline std::string config_hash(const TrainConfig& c) { return hex64(fnv1a(to_json(c).dump())); }

}  // namespace ssmt
