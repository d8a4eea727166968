// Acceptance gate: one PASS/FAIL line per criterion, exit status 0 iff all pass.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <optional>
#include <iostream>
#include <set>
#include <sstream>

#include "ssmt.hpp"

using namespace ssmt;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.precision(prec);
  s << v;
  return s.str();
}

// Desk-scale setup shared by criteria 6 to 9.
TrainConfig desk_config() {
  TrainConfig c;
  c.samples_per_hour = 6;
  c.hidden = 8;
  c.embed_dim = 8;
  c.stride = 6;
  c.max_epochs = 20;
  c.outer_lr = 0.2;
  c.finetune_epochs = 5;
  c.finetune_days = 7;
  return c;
}

const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};

struct Desk {
  TrafficSeries source = synth_city(20, 30 * 24 * 6, 6, 101, CityProfile::source());
  TrafficSeries target = synth_city(12, 14 * 24 * 6, 6, 202, CityProfile::target());
  RunCache cache;
  // seed-1 artifacts reused by criteria 6 and 11
  std::optional<Checkpoint> source_ckpt;
  std::optional<FinetuneResult> transfer_run;
  std::optional<EvalReport> transfer_report;
};

Outcome gradient_correctness() {
  const GradcheckReport r = gradcheck();
  double worst = 0;
  std::string worst_name;
  for (const auto& e : r.entries) {
    if (e.max_rel_error >= worst) {
      worst = e.max_rel_error;
      worst_name = e.name;
    }
  }
  return {r.passed() && r.entries.size() == param_shapes(ModelDims{4, 6, 2, 3, 4, 5}).size(),
          std::to_string(r.entries.size()) + " tensors, worst rel err " + fmt(worst, 3) + " (" + worst_name + ")"};
}

Outcome gumbel_exactness() {
  Rng rng(2024);
  std::string detail;
  bool ok = true;
  for (double xi : {0.1, 0.5, 0.7, 0.9}) {
    const Tensor p(2, 2, xi);
    int ones = 0;
    const int draws = 10000;
    for (int i = 0; i < draws; ++i) ones += gumbel_adjacency(p, draw_gumbel_difference(2, rng), 0.5, SampleMode::hard)(0, 1) > 0.5;
    const double freq = static_cast<double>(ones) / draws;
    ok = ok && std::abs(freq - xi) <= 0.02;
    detail += "xi=" + fmt(xi, 2) + ":" + fmt(freq, 4) + " ";
  }
  return {ok, detail};
}

Outcome memory_laws() {
  Rng rng(303);
  double sum_err = 0, convex_err = 0, scale_err = 0;
  bool nonneg = true;
  for (int i = 0; i < 1000; ++i) {
    const std::size_t n = 1 + rng.index(8), b = 2 + rng.index(10), d = 1 + rng.index(8);
    const Tensor o = rng.normal_tensor(n, d, 1.0), mem = rng.normal_tensor(b, d, 1.0);
    const MemoryReadValues r = memory_address(o, mem);
    for (std::size_t a = 0; a < n; ++a) {
      double s = 0;
      for (std::size_t j = 0; j < b; ++j) {
        s += r.weights(a, j);
        nonneg = nonneg && r.weights(a, j) >= 0.0;
      }
      sum_err = std::max(sum_err, std::abs(s - 1.0));
      // recovered row equals the weighted combination of memory rows
      for (std::size_t k = 0; k < d; ++k) {
        double v = 0;
        for (std::size_t j = 0; j < b; ++j) v += r.weights(a, j) * mem(j, k);
        convex_err = std::max(convex_err, std::abs(v - r.recovered(a, k)));
      }
    }
    Tensor scaled = o;
    for (std::size_t a = 0; a < n; ++a) {
      const double c = 0.01 + 100.0 * rng.uniform();
      for (std::size_t k = 0; k < d; ++k) scaled(a, k) *= c;
    }
    scale_err = std::max(scale_err, max_abs_diff(memory_address(scaled, mem).weights, r.weights));
  }
  return {nonneg && sum_err <= 1e-12 && convex_err <= 1e-12 && scale_err <= 1e-9,
          "row-sum err " + fmt(sum_err, 3) + ", convex err " + fmt(convex_err, 3) + ", rescale err " + fmt(scale_err, 3)};
}

Outcome pe_periodicity() {
  Rng rng(404);
  double worst = 0;
  int checked = 0;
  for (int v : {1, 7, 30}) {
    for (int sph : {6, 12}) {
      const PeriodSpec spec{v, sph};
      const std::int64_t cycle = 24LL * sph * v;
      for (int i = 0; i < 1000; ++i) {
        auto pos = static_cast<std::int64_t>(rng.index(10000000));
        if ((pos % 2) != (i % 2)) ++pos;  // alternate even and odd positions
        worst = std::max(worst, std::abs(periodic_encoding_at(pos, spec) - periodic_encoding_at(pos + cycle, spec)));
        ++checked;
      }
    }
  }
  return {worst <= 1e-9, std::to_string(checked) + " positions, max diff " + fmt(worst, 3)};
}

Outcome partition_laws() {
  Rng rng(505);
  const auto specs = period_specs(std::vector<int>{1, 7, 30}, 12);
  int bad = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t size = 6 * (1 + rng.index(12));
    std::vector<WindowSample> batch;
    std::int64_t t = static_cast<std::int64_t>(rng.index(1000));
    for (std::size_t i = 0; i < size; ++i) {
      t += 1 + static_cast<std::int64_t>(rng.index(9));
      batch.push_back({rng.normal_tensor(3, 4, 1.0), rng.normal_tensor(3, 2, 1.0), t});
    }
    const auto tasks = build_tasks(batch, specs, MetaPE{Tensor(1, 4, 1.0), Tensor(3, 4)}, {false, false});
    std::multiset<std::int64_t> seen, all;
    bool halves = tasks.size() == 3;
    for (const auto& task : tasks) {
      halves = halves && task.support.size() == task.query.size() && !task.support.empty();
      for (const auto* part : {&task.support, &task.query})
        for (const auto& s : *part) seen.insert(s.t_start);
    }
    for (const auto& s : batch) all.insert(s.t_start);
    const bool disjoint = std::set<std::int64_t>(seen.begin(), seen.end()).size() == seen.size();
    if (!(halves && disjoint && seen == all)) ++bad;
  }
  return {bad == 0, "200 batches, " + std::to_string(bad) + " violations"};
}

Outcome meta_learning_benefit(Desk& desk) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<double> tr, sc, rel;
  const FewShotSplit split = split_few_shot(desk.target, desk_config().finetune_days);
  for (std::uint64_t seed : kSeeds) {
    TrainConfig cfg = desk_config();
    cfg.seed = seed;
    const PretrainResult pre = pretrain(desk.source, cfg);
    const FinetuneResult ft = finetune(pre.checkpoint, desk.target, cfg);
    const FinetuneResult scratch = finetune_from_scratch(desk.target, cfg);
    const EvalReport a = evaluate(ft.params, ft.normalizer, split.test, cfg);
    const EvalReport b = evaluate(scratch.params, scratch.normalizer, split.test, cfg);
    desk.cache.emplace(run_cache_key(desk.source, desk.target, cfg), a);
    if (seed == kSeeds.front()) {
      desk.source_ckpt = pre.checkpoint;
      desk.transfer_run = ft;
      desk.transfer_report = a;
    }
    tr.push_back(a.mae);
    sc.push_back(b.mae);
    rel.push_back((b.mae - a.mae) / b.mae);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const double mt = summarize(tr).mean, ms = summarize(sc).mean, paired = summarize(rel).mean;
  return {mt < ms && paired >= 0.05 && secs < 480,
          "transfer MAE " + fmt(mt) + " vs scratch " + fmt(ms) + ", paired improvement " + fmt(100 * paired, 3) +
              "%, " + fmt(secs, 3) + " s"};
}

Outcome transfer_contract(const Desk& desk) {
  if (!desk.source_ckpt || !desk.transfer_run) return {false, "no seed-1 run available"};
  const Checkpoint& ck = *desk.source_ckpt;
  const FinetuneResult& ft = *desk.transfer_run;
  TrainConfig cfg = desk_config();
  cfg.seed = kSeeds.front();
  const ModelParams fresh = scratch_params(desk.target.nodes(), cfg);
  bool shared_ok = true, private_ok = true;
  std::set<std::string> read(ft.transferred.begin(), ft.transferred.end()), shared;
  for (const auto& [name, t] : ft.initial.tensors) {
    if (transfer_class(name) == TransferClass::shared) {
      shared.insert(name);
      shared_ok = shared_ok && t == ck.params.at(name);
    } else {
      private_ok = private_ok && t == fresh.at(name) && t.rows() == desk.target.nodes() &&
                   ck.params.at(name).rows() == desk.source.nodes();
    }
  }
  const bool ran = desk.transfer_report && std::isfinite(desk.transfer_report->mae) &&
                   ft.params.at(param::node_embedding).rows() == 12;
  return {shared_ok && private_ok && read == shared && ran,
          std::to_string(shared.size()) + " shared tensors bit-identical at handoff, E_t/pe_basis fresh (" +
              std::to_string(desk.source.nodes()) + " -> " + std::to_string(desk.target.nodes()) + " nodes)"};
}

Outcome ablation_ordering(Desk& desk) {
  const auto cells = run_ablation(desk.source, desk.target, desk_config(), kSeeds, &desk.cache);
  double m[2][2];
  std::set<std::string> splits;
  for (const auto& c : cells) {
    m[c.memory][c.mpe] = c.runs.summary().mean;
    splits.insert(c.runs.split_hashes.begin(), c.runs.split_hashes.end());
  }
  const bool best = m[1][1] < m[0][0] && m[1][1] < m[0][1] && m[1][1] < m[1][0];
  const bool singles = m[1][0] < m[0][0] && m[0][1] < m[0][0];
  return {best && singles && splits.size() == 1,
          "off/off " + fmt(m[0][0]) + ", mpe " + fmt(m[0][1]) + ", memory " + fmt(m[1][0]) + ", both " + fmt(m[1][1])};
}

Outcome sweep_shapes(Desk& desk) {
  const auto mem = sweep_memory(desk.source, desk.target, desk_config(), {2, 8, 32, 64}, kSeeds, &desk.cache);
  const auto tasks = sweep_tasks(desk.source, desk.target, desk_config(), {1, 3}, kSeeds, &desk.cache);
  const double b2 = mem[0].runs.summary().mean, b8 = mem[1].runs.summary().mean;
  const double b32 = mem[2].runs.summary().mean, b64 = mem[3].runs.summary().mean;
  const double k1 = tasks[0].runs.summary().mean, k3 = tasks[1].runs.summary().mean;
  const bool ok = b2 >= b32 && std::abs(b32 - b64) < std::abs(b2 - b32) && k3 <= k1;
  return {ok, "b=2/8/32/64: " + fmt(b2) + "/" + fmt(b8) + "/" + fmt(b32) + "/" + fmt(b64) + "; k=1: " + fmt(k1) +
                  ", k=3: " + fmt(k3)};
}

Outcome loss_regimes(const Desk& desk) {
  TrainConfig cfg = desk_config();
  cfg.max_epochs = 2;
  cfg.finetune_epochs = 2;
  cfg.seed = 9;
  std::vector<StepRecord> pre, fine;
  TrainHooks hp, hf;
  hp.observer = [&](const StepRecord& r) { pre.push_back(r); };
  hf.observer = [&](const StepRecord& r) { fine.push_back(r); };
  const Checkpoint ck = pretrain(desk.source, cfg, hp).checkpoint;
  finetune(ck, desk.target, cfg, hf);
  const LossWeights w{0.5, 0.2, 0.3, 1.0};
  bool weights_ok = cfg.loss.c1 == w.c1 && cfg.loss.c2 == w.c2 && cfg.loss.c3 == w.c3;
  double pre_err = 0, fine_err = 0, min_reg = INFINITY;
  bool zero_contrib = true;
  for (const auto& r : pre) {
    zero_contrib = zero_contrib && r.separate_contribution == 0.0 && r.compact_contribution == 0.0;
    pre_err = std::max(pre_err, std::abs(r.loss - r.mae));
  }
  for (const auto& r : fine) {
    const double expected = w.c1 * r.mae + w.c2 * r.separate + w.c3 * r.compact;
    fine_err = std::max(fine_err, std::abs(r.loss - expected));
    min_reg = std::min(min_reg, w.c2 * r.separate + w.c3 * r.compact);
  }
  const bool ok = weights_ok && zero_contrib && !pre.empty() && !fine.empty() && pre_err == 0.0 &&
                  fine_err <= 1e-12 && min_reg > 0.0;
  return {ok, std::to_string(pre.size()) + " pretrain steps with loss == MAE, " + std::to_string(fine.size()) +
                  " finetune steps, max |total - sum| " + fmt(fine_err, 3)};
}

Outcome determinism(const Desk& desk) {
  if (!desk.source_ckpt || !desk.transfer_run || !desk.transfer_report) return {false, "no seed-1 run available"};
  TrainConfig cfg = desk_config();
  cfg.seed = kSeeds.front();
  const Checkpoint again = pretrain(desk.source, cfg).checkpoint;
  const bool pre_same = serialize_checkpoint(again) == serialize_checkpoint(*desk.source_ckpt);
  const FinetuneResult ft = finetune(again, desk.target, cfg);
  const bool ft_same = serialize_checkpoint(ft.checkpoint(cfg)) == serialize_checkpoint(desk.transfer_run->checkpoint(cfg));
  const FewShotSplit split = split_few_shot(desk.target, cfg.finetune_days);
  const bool report_same =
      evaluate(ft.params, ft.normalizer, split.test, cfg).to_json().dump() == desk.transfer_report->to_json().dump();

  const auto path = std::filesystem::temp_directory_path() / "ssmt_acceptance.ckpt";
  save_checkpoint(ft.checkpoint(cfg), path.string());
  const Checkpoint back = load_checkpoint(path.string());
  std::filesystem::remove(path);
  bool round_trip = back.params.tensors.size() == ft.params.tensors.size();
  for (const auto& [name, t] : ft.params.tensors) {
    const Tensor& u = back.params.at(name);
    round_trip = round_trip && u.shape() == t.shape() &&
                 std::memcmp(u.values().data(), t.values().data(), t.size() * sizeof(double)) == 0;
  }
  return {pre_same && ft_same && report_same && round_trip,
          std::string("pretrain ") + (pre_same ? "identical" : "DIFFERS") + ", finetune " +
              (ft_same ? "identical" : "DIFFERS") + ", report " + (report_same ? "identical" : "DIFFERS") +
              ", round trip " + (round_trip ? "bit-exact" : "BROKEN")};
}

}  // namespace

int main() {
  Desk desk;
  bool all = true;
  auto run = [&](int id, const char* name, const std::function<Outcome()>& fn, double limit_s = 0) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (limit_s > 0 && secs >= limit_s) {
      o.pass = false;
      o.detail += "; over the " + fmt(limit_s, 3) + " s budget";
    }
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << id << ". " << name << ": " << o.detail << " [" << fmt(secs, 3)
              << " s]" << std::endl;
  };
  run(1, "gradient correctness", gradient_correctness, 30);
  run(2, "Gumbel-Bernoulli exactness", gumbel_exactness, 5);
  run(3, "memory addressing laws", memory_laws);
  run(4, "PE periodicity", pe_periodicity);
  run(5, "partition laws", partition_laws);
  // criterion 7 trains the runs that 6 and 11 inspect
  run(7, "meta-learning benefit", [&] { return meta_learning_benefit(desk); }, 480);
  run(6, "transfer contract", [&] { return transfer_contract(desk); });
  run(8, "ablation ordering", [&] { return ablation_ordering(desk); });
  run(9, "sweep shapes", [&] { return sweep_shapes(desk); });
  run(10, "loss regimes", [&] { return loss_regimes(desk); });
  run(11, "determinism and serialization", [&] { return determinism(desk); });
  std::cout << (all ? "ALL CRITERIA PASS" : "SOME CRITERIA FAIL") << std::endl;
  return all ? 0 : 1;
}
