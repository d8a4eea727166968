#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ssmt/checkpoint.hpp"
#include "ssmt/maml.hpp"

namespace ssmt {

/// A batch of windows stacked row-wise for one forward pass.
struct BatchInput {
  Tensor x;  // (B*N) x T, encoded inputs without eta
  Tensor y;  // (B*N) x T'
  std::size_t blocks = 0;
  bool add_meta_pe = false;
};

inline BatchInput stack_batch(const std::vector<WindowSample>& samples, bool add_meta_pe) {
  if (samples.empty()) throw std::invalid_argument("stack_batch: empty sample set");
  std::vector<const Tensor*> xs, ys;
  for (const auto& s : samples) {
    xs.push_back(&s.x);
    ys.push_back(&s.y);
  }
  return {stack_rows(xs), stack_rows(ys), samples.size(), add_meta_pe};
}

/// Model input on the tape: x, plus eta tiled over the batch when requested.
inline Var encoded_input(Tape& tape, const BoundParams& p, const BatchInput& in) {
  const Var x = tape.constant(in.x);
  if (!in.add_meta_pe) return x;
  return ad::add(x, ad::tile_rows(eta(p.at(param::pe_scale), p.at(param::pe_basis)), in.blocks));
}

/// Pretraining optimizes MAE alone; fine-tuning adds the memory regularizers.
enum class LossRegime { mae_only, total };

struct LossTerms {
  Var loss;
  Var mae;
  std::optional<Var> separate;  // present when the memory regularizers are computed
  std::optional<Var> compact;
  ForwardVars forward;
};

inline LossTerms batch_loss(Tape& tape, const BoundParams& p, const BatchInput& in, const Tensor& noise,
                            const ForwardOptions& opt, LossRegime regime, const LossWeights& weights) {
  LossTerms terms;
  terms.forward = forward_on_tape(tape, p, encoded_input(tape, p, in), in.blocks, noise, opt);
  terms.mae = mae(terms.forward.prediction, tape.constant(in.y));
  if (regime == LossRegime::mae_only) {
    terms.loss = terms.mae;
    return terms;
  }
  if (opt.use_memory) {
    const Var& mem = p.at(param::memory);
    terms.separate = separate_loss(terms.forward.gcn_out, mem, terms.forward.top2, weights.margin, in.blocks);
    terms.compact = compact_loss(terms.forward.gcn_out, mem, terms.forward.top2, in.blocks);
    terms.loss = total_loss(terms.mae, *terms.separate, *terms.compact, weights);
  } else {
    // without a memory bank there is nothing to regularize
    terms.loss = ad::scale(terms.mae, weights.c1);
  }
  return terms;
}

enum class TrainPhase { pretrain_support, pretrain_query, finetune };

/// Loss breakdown of one optimization step, for instrumentation.
struct StepRecord {
  TrainPhase phase;
  int epoch = 0;
  double loss = 0;                 // value that was differentiated
  double mae = 0;
  double separate = 0;             // raw regularizer values (0 when not computed)
  double compact = 0;
  double separate_contribution = 0;  // weight * value actually inside `loss`
  double compact_contribution = 0;
  LossWeights weights;
};

struct TrainHooks {
  std::function<void(const StepRecord&)> observer;
  std::ostream* log = nullptr;  // one JSON object per epoch
};

inline StepRecord record_of(TrainPhase phase, int epoch, const LossTerms& t, LossRegime regime, const LossWeights& w) {
  StepRecord r{phase, epoch, t.loss.value().item(), t.mae.value().item(), 0, 0, 0, 0, w};
  if (t.separate) r.separate = t.separate->value().item();
  if (t.compact) r.compact = t.compact->value().item();
  if (regime == LossRegime::total) {
    r.separate_contribution = w.c2 * r.separate;
    r.compact_contribution = w.c3 * r.compact;
  }
  return r;
}

namespace detail {
inline std::vector<WindowSample> gather(const std::vector<WindowSample>& windows, const std::vector<std::size_t>& idx) {
  std::vector<WindowSample> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(windows[i]);
  return out;
}

inline double elapsed_ms(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}
}  // namespace detail

// ---- source pretraining ----------------------------------------------------

struct PretrainEpoch {
  int epoch = 0;
  double mean_query_mae = 0;
  double wall_ms = 0;
};

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<PretrainEpoch> epochs;
};

/// Meta-trains on the source city: each batch becomes one task per period,
/// every task is adapted on its support half and scored on its query half.
inline PretrainResult pretrain(const TrafficSeries& source, const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  validate(cfg);
  if (source.samples_per_hour != cfg.samples_per_hour) {
    throw ConfigError("source sampled at " + std::to_string(source.samples_per_hour) + "/h, config says " +
                      std::to_string(cfg.samples_per_hour));
  }
  const Normalizer norm = Normalizer::fit(source);
  const auto windows = make_windows(norm.apply(source), cfg.input_len, cfg.horizon, cfg.stride);
  if (windows.size() < cfg.batch_size) {
    throw ConfigError("source yields " + std::to_string(windows.size()) + " windows, fewer than batch_size " +
                      std::to_string(cfg.batch_size));
  }
  const Rng root(cfg.seed);
  Rng init_rng = root.split(1);
  Rng batch_rng = root.split(2);
  Rng noise_rng = root.split(3);

  ModelParams params = init_params(cfg.dims(source.nodes()), init_rng);
  const auto specs = period_specs(cfg.periods, cfg.samples_per_hour);
  const ForwardOptions fopt = cfg.forward_options();
  const MetaStepConfig mcfg{cfg.inner_lr, cfg.outer_lr, cfg.inner_steps,
                            [](std::string_view name) { return is_meta_pe(name); }};
  PretrainResult result;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    std::size_t loss_count = 0;
    for (const auto& idx : epoch_batches(windows.size(), cfg.batch_size, batch_rng)) {
      const auto tasks = build_tasks(detail::gather(windows, idx), specs, params.meta_pe(), cfg.task_options());
      std::vector<MetaTask> meta_tasks;
      for (const Task& task : tasks) {
        auto make = [&, epoch](const std::vector<WindowSample>& part, bool with_eta, TrainPhase phase) -> LossFn {
          if (part.empty()) throw std::invalid_argument("pretrain: empty support or query set");
          auto input = std::make_shared<BatchInput>(stack_batch(part, with_eta));
          return [&, input, phase, epoch](Tape& tape, const BoundParams& p) {
            const Tensor noise = draw_gumbel_difference(source.nodes(), noise_rng);
            LossTerms terms = batch_loss(tape, p, *input, noise, fopt, LossRegime::mae_only, cfg.loss);
            if (hooks.observer) hooks.observer(record_of(phase, epoch, terms, LossRegime::mae_only, cfg.loss));
            return terms.loss;
          };
        };
        meta_tasks.push_back({make(task.support, false, TrainPhase::pretrain_support),
                              make(task.query, task.query_uses_meta_pe, TrainPhase::pretrain_query)});
      }
      const MetaStepStats stats = meta_step(params.tensors, meta_tasks, mcfg);
      for (double l : stats.query_losses) loss_sum += l;
      loss_count += stats.query_losses.size();
    }
    PretrainEpoch e{epoch, loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0, detail::elapsed_ms(t0)};
    result.epochs.push_back(e);
    if (hooks.log) {
      *hooks.log << json{{"epoch", e.epoch}, {"mean_query_mae", e.mean_query_mae}, {"wall_ms", e.wall_ms}}.dump()
                 << '\n';
    }
  }

  result.checkpoint = Checkpoint{std::move(params), to_json(cfg), CityMeta{"source", source.nodes(), norm}};
  return result;
}

// ---- target fine-tuning ----------------------------------------------------

/// Input encoding on the target: the daily PE only (no task split).
inline WindowSample encode_target_window(WindowSample w, const TrainConfig& cfg) {
  if (cfg.enable_pe && cfg.finetune_pe) w.x = add_periodic_encoding(w.x, w.t_start, {1, cfg.samples_per_hour});
  return w;
}

struct FinetuneEpoch {
  int epoch = 0;
  double total = 0, mae = 0, separate = 0, compact = 0;
};

struct FinetuneResult {
  ModelParams params;
  ModelParams initial;  // parameters at handoff, before the first update
  Normalizer normalizer;
  std::vector<std::string> transferred;  // tensors read from the source checkpoint
  std::vector<FinetuneEpoch> epochs;

  [[nodiscard]] Checkpoint checkpoint(const TrainConfig& cfg) const {
    return {params, to_json(cfg), CityMeta{"target", params.dims.nodes, normalizer}};
  }
};

/// Plain mini-batch Adam on the weighted total loss over `train`.
inline FinetuneResult finetune_params(ModelParams initial, const TrafficSeries& train, const TrainConfig& cfg,
                                      const TrainHooks& hooks = {}) {
  validate(cfg);
  FinetuneResult result;
  result.initial = initial;
  result.normalizer = Normalizer::fit(train);
  std::vector<WindowSample> windows;
  for (auto& w : make_windows(result.normalizer.apply(train), cfg.input_len, cfg.horizon, 1)) {
    windows.push_back(encode_target_window(std::move(w), cfg));
  }
  const Rng root = Rng(cfg.seed).split(10);
  Rng batch_rng = root.split(2);
  Rng noise_rng = root.split(3);
  const std::size_t batch_size = std::min(cfg.batch_size, windows.size());
  const ForwardOptions fopt = cfg.forward_options();

  AdamOptimizer adam(AdamConfig{cfg.finetune_lr});
  ModelParams params = std::move(initial);
  for (int epoch = 1; epoch <= cfg.finetune_epochs; ++epoch) {
    FinetuneEpoch e{epoch};
    std::size_t steps = 0;
    for (const auto& idx : epoch_batches(windows.size(), batch_size, batch_rng)) {
      const BatchInput in = stack_batch(detail::gather(windows, idx), cfg.enable_mpe);
      Tape tape;
      const BoundParams bound = bind_params(tape, params.tensors);
      const Tensor noise = draw_gumbel_difference(params.dims.nodes, noise_rng);
      const LossTerms terms = batch_loss(tape, bound, in, noise, fopt, LossRegime::total, cfg.loss);
      const StepRecord rec = record_of(TrainPhase::finetune, epoch, terms, LossRegime::total, cfg.loss);
      if (hooks.observer) hooks.observer(rec);
      ParamMap grads = gradients(tape, terms.loss, bound);
      if (!cfg.enable_mpe) {
        for (auto& [name, g] : grads) {
          if (is_meta_pe(name)) g.fill(0.0);
        }
      }
      params.tensors = adam.step(params.tensors, grads);
      e.total += rec.loss;
      e.mae += rec.mae;
      e.separate += rec.separate;
      e.compact += rec.compact;
      ++steps;
    }
    if (steps > 0) {
      const auto n = static_cast<double>(steps);
      e.total /= n;
      e.mae /= n;
      e.separate /= n;
      e.compact /= n;
    }
    result.epochs.push_back(e);
    if (hooks.log) {
      *hooks.log << json{{"epoch", e.epoch}, {"total", e.total}, {"mae", e.mae}, {"sep", e.separate}, {"comp", e.compact}}
                        .dump()
                 << '\n';
    }
  }
  result.params = std::move(params);
  return result;
}

/// Fresh target-city parameters: shared tensors from the checkpoint, private
/// tensors (node embedding, meta-PE basis) newly initialized for `nodes`.
inline ModelParams transfer_to_city(const Checkpoint& ckpt, std::size_t nodes, const TrainConfig& cfg,
                                    std::vector<std::string>* transferred = nullptr) {
  const ModelDims want = cfg.dims(nodes);
  const ModelDims& have = ckpt.params.dims;
  if (have.input_len != want.input_len || have.horizon != want.horizon || have.hidden != want.hidden ||
      have.memory_items != want.memory_items || have.embed_dim != want.embed_dim) {
    throw ConfigError("checkpoint dimensions (T=" + std::to_string(have.input_len) + ", T'=" +
                      std::to_string(have.horizon) + ", H=" + std::to_string(have.hidden) + ", b=" +
                      std::to_string(have.memory_items) + ", d=" + std::to_string(have.embed_dim) +
                      ") do not match the config");
  }
  Rng init_rng = Rng(cfg.seed).split(10).split(1);
  ModelParams fresh = init_params(want, init_rng);
  for (auto& [name, t] : fresh.tensors) {
    if (transfer_class(name) != TransferClass::shared) continue;
    t = ckpt.params.at(name);
    if (transferred) transferred->push_back(name);
  }
  return fresh;
}

/// Same initialization without any source knowledge.
inline ModelParams scratch_params(std::size_t nodes, const TrainConfig& cfg) {
  Rng init_rng = Rng(cfg.seed).split(10).split(1);
  return init_params(cfg.dims(nodes), init_rng);
}

inline FinetuneResult finetune(const Checkpoint& ckpt, const TrafficSeries& target, const TrainConfig& cfg,
                               const TrainHooks& hooks = {}) {
  const FewShotSplit split = split_few_shot(target, cfg.finetune_days);
  std::vector<std::string> transferred;
  ModelParams initial = transfer_to_city(ckpt, target.nodes(), cfg, &transferred);
  FinetuneResult r = finetune_params(std::move(initial), split.train, cfg, hooks);
  r.transferred = std::move(transferred);
  return r;
}

inline FinetuneResult finetune_from_scratch(const TrafficSeries& target, const TrainConfig& cfg,
                                            const TrainHooks& hooks = {}) {
  const FewShotSplit split = split_few_shot(target, cfg.finetune_days);
  return finetune_params(scratch_params(target.nodes(), cfg), split.train, cfg, hooks);
}

}  // namespace ssmt
