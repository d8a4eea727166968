#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "ssmt/trainer.hpp"

namespace ssmt {

/// Maps normalized, unencoded windows to normalized N x T' predictions.
using Predictor = std::function<std::vector<Tensor>(const std::vector<WindowSample>&)>;

inline constexpr std::size_t kEvalChunk = 64;

/// Hard-mode forward passes with graph noise drawn from a fixed seed, one
/// draw per chunk of up to 64 windows.
inline Predictor model_predictor(ModelParams params, TrainConfig cfg) {
  return [params = std::move(params), cfg = std::move(cfg)](const std::vector<WindowSample>& windows) {
    ForwardOptions opt = cfg.forward_options();
    opt.mode = SampleMode::hard;
    Rng noise_rng(cfg.eval_seed);
    std::vector<Tensor> out;
    out.reserve(windows.size());
    for (std::size_t begin = 0; begin < windows.size(); begin += kEvalChunk) {
      const std::size_t end = std::min(windows.size(), begin + kEvalChunk);
      std::vector<WindowSample> chunk;
      for (std::size_t i = begin; i < end; ++i) chunk.push_back(encode_target_window(windows[i], cfg));
      const BatchInput in = stack_batch(chunk, cfg.enable_mpe);
      const Tensor noise = draw_gumbel_difference(params.dims.nodes, noise_rng);
      Tape tape;
      const BoundParams bound = bind_params(tape, params.tensors, false);
      const Tensor pred = forward_on_tape(tape, bound, encoded_input(tape, bound, in), in.blocks, noise, opt)
                              .prediction.value();
      const std::size_t n = params.dims.nodes, h = pred.cols();
      for (std::size_t b = 0; b < chunk.size(); ++b) {
        Tensor p(n, h);
        std::copy_n(pred.values().begin() + static_cast<std::ptrdiff_t>(b * n * h), n * h, p.values().begin());
        out.push_back(std::move(p));
      }
    }
    return out;
  };
}

struct HorizonMetrics {
  std::size_t step = 0;  // 1-based prediction step
  double mae = 0;
  double rmse = 0;
};

struct EvalReport {
  std::vector<HorizonMetrics> horizons;
  double mae = 0;   // over every predicted step
  double rmse = 0;
  std::size_t samples = 0;  // test windows
  std::string config_hash;
  std::uint64_t seed = 0;
  std::uint64_t eval_seed = 0;

  [[nodiscard]] json to_json() const {
    json rows = json::array();
    for (const auto& h : horizons) rows.push_back({{"step", h.step}, {"mae", h.mae}, {"rmse", h.rmse}});
    return {{"horizons", rows}, {"overall", {{"mae", mae}, {"rmse", rmse}}}, {"samples", samples},
            {"config_hash", config_hash}, {"seed", seed}, {"eval_seed", eval_seed}};
  }
};

struct EvalOptions {
  std::size_t input_len = 12;
  std::size_t horizon = 12;
  std::size_t stride = 1;
  std::vector<std::size_t> horizons{1, 3, 6};

  static EvalOptions from(const TrainConfig& c) { return {c.input_len, c.horizon, c.eval_stride, c.horizons}; }
};

/// Windows the test range, predicts, de-normalizes and scores each requested
/// step across all windows and nodes.
inline EvalReport evaluate(const Predictor& predict, const TrafficSeries& test, const Normalizer& norm,
                           const EvalOptions& opt) {
  for (std::size_t h : opt.horizons) {
    if (h < 1 || h > opt.horizon) {
      throw ConfigError("horizon " + std::to_string(h) + " outside [1, " + std::to_string(opt.horizon) + "]");
    }
  }
  const auto windows = make_windows(norm.apply(test), opt.input_len, opt.horizon, opt.stride);
  const auto preds = predict(windows);
  if (preds.size() != windows.size()) throw ShapeError("predictor returned a wrong number of predictions");

  std::vector<double> abs_sum(opt.horizon, 0.0), sq_sum(opt.horizon, 0.0);
  for (std::size_t w = 0; w < windows.size(); ++w) {
    if (preds[w].shape() != windows[w].y.shape()) {
      throw ShapeError("prediction " + shape_string(preds[w].shape()) + " vs target " +
                       shape_string(windows[w].y.shape()));
    }
    const Tensor p = norm.invert(preds[w]);
    const Tensor y = norm.invert(windows[w].y);
    for (std::size_t n = 0; n < p.rows(); ++n) {
      for (std::size_t k = 0; k < p.cols(); ++k) {
        const double e = p(n, k) - y(n, k);
        abs_sum[k] += std::abs(e);
        sq_sum[k] += e * e;
      }
    }
  }
  const auto per_step = static_cast<double>(windows.size() * test.nodes());
  EvalReport r;
  r.samples = windows.size();
  for (std::size_t h : opt.horizons) {
    r.horizons.push_back({h, abs_sum[h - 1] / per_step, std::sqrt(sq_sum[h - 1] / per_step)});
  }
  const double all = per_step * static_cast<double>(opt.horizon);
  r.mae = std::accumulate(abs_sum.begin(), abs_sum.end(), 0.0) / all;
  r.rmse = std::sqrt(std::accumulate(sq_sum.begin(), sq_sum.end(), 0.0) / all);
  return r;
}

inline EvalReport evaluate(const ModelParams& params, const Normalizer& norm, const TrafficSeries& test,
                           const TrainConfig& cfg) {
  if (params.dims.nodes != test.nodes()) {
    throw ShapeError("model has " + std::to_string(params.dims.nodes) + " nodes, test series has " +
                     std::to_string(test.nodes()));
  }
  EvalReport r = evaluate(model_predictor(params, cfg), test, norm, EvalOptions::from(cfg));
  r.config_hash = config_hash(cfg);
  r.seed = cfg.seed;
  r.eval_seed = cfg.eval_seed;
  return r;
}

// ---- end-to-end runs -------------------------------------------------------

/// Fingerprint of a few-shot split: values and positions of both halves.
inline std::string split_hash(const FewShotSplit& s) {
  std::uint64_t h = fnv1a(s.train.values);
  h = fnv1a(s.test.values, h);
  h = fnv1a(std::to_string(s.train.origin_index) + "," + std::to_string(s.test.origin_index), h);
  return hex64(h);
}

struct PipelineResult {
  EvalReport transferred;
  std::optional<EvalReport> scratch;
  std::string split_hash;
};

/// Source pretraining, target fine-tuning, test evaluation; optionally the
/// same fine-tuning budget from a random start for comparison.
inline PipelineResult run_pipeline(const TrafficSeries& source, const TrafficSeries& target, const TrainConfig& cfg,
                                   bool with_scratch = false) {
  const FewShotSplit split = split_few_shot(target, cfg.finetune_days);
  PipelineResult out;
  out.split_hash = split_hash(split);
  const PretrainResult pre = pretrain(source, cfg);
  const FinetuneResult ft = finetune(pre.checkpoint, target, cfg);
  out.transferred = evaluate(ft.params, ft.normalizer, split.test, cfg);
  if (with_scratch) {
    const FinetuneResult sc = finetune_from_scratch(target, cfg);
    out.scratch = evaluate(sc.params, sc.normalizer, split.test, cfg);
  }
  return out;
}

struct Summary {
  double mean = 0;
  double std = 0;  // sample standard deviation, 0 for a single value
};

inline Summary summarize(const std::vector<double>& v) {
  if (v.empty()) return {};
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double sq = 0.0;
  for (double x : v) sq += (x - m) * (x - m);
  return {m, v.size() > 1 ? std::sqrt(sq / static_cast<double>(v.size() - 1)) : 0.0};
}

/// Test MAE of one configuration over several training seeds.
struct SeedRuns {
  std::vector<double> mae;
  std::vector<std::string> split_hashes;
  [[nodiscard]] Summary summary() const { return summarize(mae); }
};

/// Optional memo so that experiments sharing a configuration train it once.
using RunCache = std::map<std::string, EvalReport>;

inline std::string run_cache_key(const TrafficSeries& source, const TrafficSeries& target, const TrainConfig& cfg) {
  return config_hash(cfg) + "/" + hex64(fnv1a(source.values, fnv1a(target.values)));
}

inline EvalReport cached_run(const TrafficSeries& source, const TrafficSeries& target, const TrainConfig& cfg,
                             RunCache* cache) {
  const std::string key = run_cache_key(source, target, cfg);
  if (cache) {
    if (auto it = cache->find(key); it != cache->end()) return it->second;
  }
  EvalReport r = run_pipeline(source, target, cfg).transferred;
  if (cache) cache->emplace(key, r);
  return r;
}

inline SeedRuns run_seeds(const TrafficSeries& source, const TrafficSeries& target, TrainConfig cfg,
                          const std::vector<std::uint64_t>& seeds, RunCache* cache = nullptr) {
  SeedRuns out;
  const std::string sh = split_hash(split_few_shot(target, cfg.finetune_days));
  for (std::uint64_t s : seeds) {
    cfg.seed = s;
    out.mae.push_back(cached_run(source, target, cfg, cache).mae);
    out.split_hashes.push_back(sh);
  }
  return out;
}

struct AblationCell {
  bool memory = true;
  bool mpe = true;
  SeedRuns runs;
};

/// The 2x2 grid {memory on/off} x {meta-PE on/off}, all cells on the same
/// split and seeds.
inline std::vector<AblationCell> run_ablation(const TrafficSeries& source, const TrafficSeries& target,
                                              const TrainConfig& cfg, const std::vector<std::uint64_t>& seeds,
                                              RunCache* cache = nullptr) {
  std::vector<AblationCell> cells;
  for (bool memory : {false, true}) {
    for (bool mpe : {false, true}) {
      TrainConfig c = cfg;
      c.use_memory = memory;
      c.enable_mpe = mpe;
      cells.push_back({memory, mpe, run_seeds(source, target, c, seeds, cache)});
    }
  }
  return cells;
}

inline std::string ablation_csv(const std::vector<AblationCell>& cells) {
  std::string out = "memory,mpe,mae_mean,mae_std\n";
  for (const auto& c : cells) {
    const Summary s = c.runs.summary();
    out += std::string(c.memory ? "on" : "off") + "," + (c.mpe ? "on" : "off") + "," + detail::format_double(s.mean) + "," +
           detail::format_double(s.std) + "\n";
  }
  return out;
}

struct CurvePoint {
  std::size_t x = 0;
  SeedRuns runs;
};

inline std::string curve_csv(const std::string& x_name, const std::vector<CurvePoint>& curve) {
  std::string out = x_name + ",mae_mean,mae_std\n";
  for (const auto& p : curve) {
    const Summary s = p.runs.summary();
    out += std::to_string(p.x) + "," + detail::format_double(s.mean) + "," + detail::format_double(s.std) + "\n";
  }
  return out;
}

/// Retrains from scratch for each memory size.
inline std::vector<CurvePoint> sweep_memory(const TrafficSeries& source, const TrafficSeries& target,
                                            const TrainConfig& cfg, const std::vector<std::size_t>& sizes,
                                            const std::vector<std::uint64_t>& seeds, RunCache* cache = nullptr) {
  std::vector<CurvePoint> curve;
  for (std::size_t b : sizes) {
    if (b < 2) throw ConfigError("memory sizes must be >= 2, got " + std::to_string(b));
    TrainConfig c = cfg;
    c.memory_items = b;
    curve.push_back({b, run_seeds(source, target, c, seeds, cache)});
  }
  return curve;
}

/// Uses the first k of the configured periods (daily, weekly, monthly).
inline std::vector<CurvePoint> sweep_tasks(const TrafficSeries& source, const TrafficSeries& target,
                                           const TrainConfig& cfg, const std::vector<std::size_t>& ks,
                                           const std::vector<std::uint64_t>& seeds, RunCache* cache = nullptr) {
  std::vector<CurvePoint> curve;
  for (std::size_t k : ks) {
    if (k == 0 || k > cfg.periods.size()) {
      throw ConfigError("task count " + std::to_string(k) + " outside [1, " + std::to_string(cfg.periods.size()) + "]");
    }
    TrainConfig c = cfg;
    c.periods.assign(cfg.periods.begin(), cfg.periods.begin() + static_cast<std::ptrdiff_t>(k));
    validate(c);
    curve.push_back({k, run_seeds(source, target, c, seeds, cache)});
  }
  return curve;
}

// ---- gradient check --------------------------------------------------------

struct GradcheckEntry {
  std::string name;
  double max_rel_error = 0;
  std::size_t worst_index = 0;
  double analytic = 0;
  double numeric = 0;
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;  // one per parameter tensor
  double tolerance = 1e-4;
  [[nodiscard]] bool passed() const {
    return std::all_of(entries.begin(), entries.end(), [&](const auto& e) { return e.max_rel_error < tolerance; });
  }
};

struct GradcheckOptions {
  std::uint64_t seed = 7;
  double step = 1e-5;
  double tolerance = 1e-4;
  double floor = 1e-6;          // denominator floor of the relative error
  std::string corrupt_tensor;   // test hook: perturb this tensor's analytic gradient
};

/// Central finite differences of the full fine-tuning objective on a tiny
/// instance (N=4, T=6, T'=2, H=3, b=4, d=5, two stacked samples, periodic
/// and meta-PE on the input, soft graph with fixed noise).
inline GradcheckReport gradcheck(const GradcheckOptions& o = {}) {
  const ModelDims dims{4, 6, 2, 3, 4, 5};
  const std::size_t blocks = 2;
  Rng rng(o.seed);
  Rng init_rng = rng.split(1);
  Rng data_rng = rng.split(2);
  Rng noise_rng = rng.split(3);
  const ModelParams params = init_params(dims, init_rng);
  ParamMap theta = params.tensors;
  // nontrivial meta-PE so its gradient path is exercised
  for (auto& v : theta.at(param::pe_scale).values()) v = 1.0 + 0.3 * data_rng.normal();
  for (auto& v : theta.at(param::pe_basis).values()) v = 0.3 * data_rng.normal();

  std::vector<WindowSample> samples;
  for (std::size_t b = 0; b < blocks; ++b) {
    WindowSample w{data_rng.normal_tensor(dims.nodes, dims.input_len, 1.0),
                   data_rng.normal_tensor(dims.nodes, dims.horizon, 1.0), static_cast<std::int64_t>(5 + 7 * b)};
    w.x = add_periodic_encoding(w.x, w.t_start, {1, 6});
    samples.push_back(std::move(w));
  }
  const BatchInput in = stack_batch(samples, true);
  const Tensor noise = draw_gumbel_difference(dims.nodes, noise_rng);
  const ForwardOptions fopt{0.5, SampleMode::soft, true};
  const LossWeights weights;

  auto loss_at = [&](const ParamMap& p, ParamMap* grads) {
    Tape tape;
    const BoundParams bound = bind_params(tape, p, grads != nullptr);
    const Var loss = batch_loss(tape, bound, in, noise, fopt, LossRegime::total, weights).loss;
    if (grads) *grads = gradients(tape, loss, bound);
    return loss.value().item();
  };

  ParamMap analytic;
  loss_at(theta, &analytic);
  if (!o.corrupt_tensor.empty()) {
    auto it = analytic.find(o.corrupt_tensor);
    if (it == analytic.end()) throw ConfigError("gradcheck: unknown tensor '" + o.corrupt_tensor + "'");
    for (auto& g : it->second.values()) g += 1e-3 + 0.05 * std::abs(g);
  }

  GradcheckReport report;
  report.tolerance = o.tolerance;
  for (auto& [name, tensor] : theta) {
    GradcheckEntry e{name};
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double orig = tensor[i];
      tensor[i] = orig + o.step;
      const double up = loss_at(theta, nullptr);
      tensor[i] = orig - o.step;
      const double down = loss_at(theta, nullptr);
      tensor[i] = orig;
      const double num = (up - down) / (2.0 * o.step);
      const double ana = analytic.at(name)[i];
      const double rel = std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), o.floor});
      if (rel > e.max_rel_error || i == 0) e = {name, rel, i, ana, num};
    }
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace ssmt
