// ssmt: command-line front end for synthesis, training, evaluation and sweeps.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "ssmt.hpp"

namespace fs = std::filesystem;
using namespace ssmt;

namespace {

struct Common {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out = ".";
  bool no_memory = false;
  bool no_mpe = false;
  bool hard_graph = false;
};

// --section.key value pairs left over after CLI11 parsing
std::vector<std::pair<std::string, std::string>> dotted_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& a = extras[i];
    if (a.rfind("--", 0) != 0 || a.find('.') == std::string::npos) throw ConfigError("unexpected argument '" + a + "'");
    const std::string key = a.substr(2);
    if (auto eq = key.find('='); eq != std::string::npos) {
      out.emplace_back(key.substr(0, eq), key.substr(eq + 1));
      continue;
    }
    if (i + 1 >= extras.size()) throw ConfigError("override '" + a + "' needs a value");
    out.emplace_back(key, extras[++i]);
  }
  return out;
}

TrainConfig resolve_config(const json& base, const Common& c, const std::vector<std::string>& extras, bool with_seed) {
  TrainConfig cfg = config_from_json(base);
  if (!c.config_path.empty()) {
    std::ifstream in(c.config_path);
    if (!in) throw ConfigError("cannot open config '" + c.config_path + "'");
    const json file = json::parse(in, nullptr, false);
    if (file.is_discarded()) throw ConfigError("config '" + c.config_path + "' is not valid JSON");
    cfg = config_from_json(file, cfg);
  }
  json j = to_json(cfg);
  for (const auto& [k, v] : dotted_overrides(extras)) apply_override(j, k, v);
  cfg = config_from_json(j);
  if (c.no_memory) cfg.use_memory = false;
  if (c.no_mpe) cfg.enable_mpe = false;
  if (c.hard_graph) cfg.hard_graph = true;
  if (with_seed) cfg.seed = c.seed;
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
}

std::vector<std::uint64_t> seed_list(std::uint64_t first, int count) {
  std::vector<std::uint64_t> s;
  for (int i = 0; i < count; ++i) s.push_back(first + static_cast<std::uint64_t>(i));
  return s;
}

void add_common(CLI::App* cmd, Common& c, bool training) {
  cmd->add_option("--config", c.config_path, "JSON config file");
  cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
  if (training) cmd->add_option("--seed", c.seed, "Training seed")->required();
  cmd->add_flag("--no-memory", c.no_memory, "Use node embeddings directly instead of the memory read");
  cmd->add_flag("--no-mpe", c.no_mpe, "Disable the learnable meta positional encoding");
  cmd->add_flag("--hard-graph", c.hard_graph, "Straight-through hard graph sampling during training");
  cmd->allow_extras();
  cmd->footer("Any config key can be overridden with --section.key value, e.g. --train.outer_lr 0.2");
}

std::string matrix_csv(const Tensor& m, const std::vector<std::string>& ids) {
  std::ostringstream s;
  s << "node";
  for (const auto& id : ids) s << ',' << id;
  s << '\n';
  for (std::size_t i = 0; i < m.rows(); ++i) {
    s << ids[i];
    for (std::size_t j = 0; j < m.cols(); ++j) s << ',' << detail::format_double(m(i, j));
    s << '\n';
  }
  return s.str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Single-source meta-transfer traffic forecasting"};
  app.require_subcommand(1);
  Common common;

  // synth
  auto* synth = app.add_subcommand("synth", "Write a synthetic city as CSV");
  std::size_t synth_nodes = 20;
  double synth_days = 30;
  int synth_sph = 12;
  std::string synth_profile = "source", synth_file = "city.csv";
  synth->add_option("--nodes", synth_nodes)->capture_default_str();
  synth->add_option("--days", synth_days)->capture_default_str();
  synth->add_option("--samples-per-hour", synth_sph)->capture_default_str();
  synth->add_option("--profile", synth_profile, "source | target")->capture_default_str();
  synth->add_option("--seed", common.seed)->required();
  synth->add_option("--file", synth_file, "Output CSV")->capture_default_str();

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "Meta-train on a source city");
  std::string source_csv, target_csv, ckpt_path;
  pre->add_option("--source", source_csv, "Source city CSV")->required()->check(CLI::ExistingFile);
  add_common(pre, common, true);

  // finetune
  auto* fin = app.add_subcommand("finetune", "Fine-tune a source checkpoint on the target's few-shot range");
  bool from_scratch = false;
  fin->add_option("--checkpoint", ckpt_path, "Source checkpoint")->check(CLI::ExistingFile);
  fin->add_option("--target", target_csv, "Target city CSV")->required()->check(CLI::ExistingFile);
  fin->add_flag("--scratch", from_scratch, "Ignore any checkpoint and train from a random initialization");
  add_common(fin, common, true);

  // eval
  auto* ev = app.add_subcommand("eval", "Score a fine-tuned checkpoint on the target's test range");
  ev->add_option("--checkpoint", ckpt_path, "Fine-tuned checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--target", target_csv, "Target city CSV")->required()->check(CLI::ExistingFile);
  add_common(ev, common, false);

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of every parameter gradient");
  GradcheckOptions gopt;
  gc->add_option("--corrupt", gopt.corrupt_tensor, "Perturb this tensor's analytic gradient (negative control)");
  gc->add_option("--tolerance", gopt.tolerance)->capture_default_str();

  // experiments
  int runs = 5;
  std::vector<std::size_t> sizes{2, 8, 32, 64}, ks{1, 2, 3};
  auto* abl = app.add_subcommand("ablate", "Memory x meta-PE ablation grid");
  auto* swm = app.add_subcommand("sweep-memory", "Test MAE against memory size");
  auto* swt = app.add_subcommand("sweep-tasks", "Test MAE against the number of tasks");
  for (auto* cmd : {abl, swm, swt}) {
    cmd->add_option("--source", source_csv)->required()->check(CLI::ExistingFile);
    cmd->add_option("--target", target_csv)->required()->check(CLI::ExistingFile);
    cmd->add_option("--runs", runs, "Seeds seed, seed+1, ...")->capture_default_str();
    add_common(cmd, common, true);
  }
  swm->add_option("--sizes", sizes)->delimiter(',')->capture_default_str();
  swt->add_option("--tasks", ks)->delimiter(',')->capture_default_str();

  // dump-graph
  auto* dg = app.add_subcommand("dump-graph", "Write the learned edge probabilities and thresholded edge list");
  dg->add_option("--checkpoint", ckpt_path)->required()->check(CLI::ExistingFile);
  dg->add_option("--out", common.out)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    CLI::App* cmd = app.get_subcommands().front();
    const std::vector<std::string> extras = cmd->remaining();
    const fs::path out_dir(common.out);
    const json defaults = to_json(TrainConfig{});

    if (cmd == synth) {
      const auto length = static_cast<std::size_t>(synth_days * 24.0 * synth_sph);
      const TrafficSeries s =
          synth_city(synth_nodes, length, synth_sph, common.seed, CityProfile::by_name(synth_profile));
      if (fs::path(synth_file).has_parent_path()) fs::create_directories(fs::path(synth_file).parent_path());
      save_csv(synth_file, s);
      std::cout << "wrote " << synth_file << " (" << s.nodes() << " nodes, " << s.length() << " steps)\n";
      return 0;
    }

    if (cmd == gc) {
      const GradcheckReport r = gradcheck(gopt);
      std::cout << std::left << std::setw(16) << "tensor" << "max_rel_error\n";
      for (const auto& e : r.entries) {
        std::cout << std::left << std::setw(16) << e.name << std::scientific << std::setprecision(3) << e.max_rel_error
                  << (e.max_rel_error < r.tolerance ? "" : "  FAIL") << '\n';
      }
      std::cout << (r.passed() ? "gradcheck passed" : "gradcheck FAILED") << '\n';
      return r.passed() ? 0 : 1;
    }

    if (cmd == dg) {
      const Checkpoint ck = load_checkpoint(ckpt_path);
      const TrainConfig cfg = config_from_json(ck.config);
      Tape tape;
      const BoundParams b = bind_params(tape, ck.params.tensors, false);
      const Tensor xi = (cfg.use_memory ? node_similarity(b.at(param::node_embedding), b.at(param::memory))
                                        : squashed_cosine_gram(b.at(param::node_embedding)))
                            .value();
      std::vector<std::string> ids;
      for (std::size_t i = 0; i < xi.rows(); ++i) ids.push_back(std::to_string(i));
      std::string edges = "src,dst,probability\n";
      for (std::size_t i = 0; i < xi.rows(); ++i)
        for (std::size_t j = 0; j < xi.cols(); ++j)
          if (i != j && xi(i, j) > 0.5)
            edges += std::to_string(i) + "," + std::to_string(j) + "," + detail::format_double(xi(i, j)) + "\n";
      write_text(out_dir / "graph.csv", matrix_csv(xi, ids));
      write_text(out_dir / "edges.csv", edges);
      std::cout << "wrote " << (out_dir / "graph.csv").string() << " and " << (out_dir / "edges.csv").string() << '\n';
      return 0;
    }

    if (cmd == pre) {
      const TrainConfig cfg = resolve_config(defaults, common, extras, true);
      const TrafficSeries src = load_csv(source_csv, cfg.samples_per_hour);
      fs::create_directories(out_dir);
      std::ofstream log(out_dir / "log.jsonl");
      TrainHooks hooks;
      hooks.log = &log;
      const PretrainResult r = pretrain(src, cfg, hooks);
      save_checkpoint(r.checkpoint, (out_dir / "source.ckpt").string());
      std::cout << "pretrained " << r.epochs.size() << " epochs; checkpoint " << (out_dir / "source.ckpt").string()
                << '\n';
      return 0;
    }

    if (cmd == fin) {
      std::optional<Checkpoint> src;
      json base = defaults;
      if (!from_scratch) {
        if (ckpt_path.empty()) throw ConfigError("finetune needs --checkpoint (or --scratch)");
        src = load_checkpoint(ckpt_path);
        base = src->config;
      }
      const TrainConfig cfg = resolve_config(base, common, extras, true);
      const TrafficSeries tgt = load_csv(target_csv, cfg.samples_per_hour);
      fs::create_directories(out_dir);
      std::ofstream log(out_dir / "log.jsonl");
      TrainHooks hooks;
      hooks.log = &log;
      const FinetuneResult r = src ? finetune(*src, tgt, cfg, hooks) : finetune_from_scratch(tgt, cfg, hooks);
      save_checkpoint(r.checkpoint(cfg), (out_dir / "target.ckpt").string());
      std::cout << "fine-tuned " << r.epochs.size() << " epochs; checkpoint " << (out_dir / "target.ckpt").string()
                << '\n';
      return 0;
    }

    if (cmd == ev) {
      const Checkpoint ck = load_checkpoint(ckpt_path);
      TrainConfig cfg = resolve_config(ck.config, common, extras, false);
      const TrafficSeries tgt = load_csv(target_csv, cfg.samples_per_hour);
      const FewShotSplit split = split_few_shot(tgt, cfg.finetune_days);
      const EvalReport r = evaluate(ck.params, ck.city.normalizer, split.test, cfg);
      write_text(out_dir / "report.json", r.to_json().dump(2) + "\n");
      std::cout << "test MAE " << r.mae << ", RMSE " << r.rmse << " over " << r.samples << " windows\n";
      return 0;
    }

    // experiments
    const TrainConfig cfg = resolve_config(defaults, common, extras, true);
    const TrafficSeries src = load_csv(source_csv, cfg.samples_per_hour);
    const TrafficSeries tgt = load_csv(target_csv, cfg.samples_per_hour);
    const auto seeds = seed_list(common.seed, runs);
    RunCache cache;
    if (cmd == abl) {
      const auto cells = run_ablation(src, tgt, cfg, seeds, &cache);
      write_text(out_dir / "ablation.csv", ablation_csv(cells));
      json rows = json::array();
      for (const auto& c : cells) {
        rows.push_back({{"memory", c.memory}, {"mpe", c.mpe}, {"mae", c.runs.mae}, {"split_hash", c.runs.split_hashes.front()}});
      }
      write_text(out_dir / "report.json",
                 json{{"config_hash", config_hash(cfg)}, {"seeds", seeds}, {"cells", rows}}.dump(2) + "\n");
      std::cout << ablation_csv(cells);
    } else {
      const bool memory = cmd == swm;
      const auto curve = memory ? sweep_memory(src, tgt, cfg, sizes, seeds, &cache) : sweep_tasks(src, tgt, cfg, ks, seeds, &cache);
      const std::string csv = curve_csv(memory ? "b" : "k", curve);
      write_text(out_dir / "curve.csv", csv);
      json points = json::array();
      for (const auto& p : curve) points.push_back({{"x", p.x}, {"mae", p.runs.mae}});
      write_text(out_dir / "report.json",
                 json{{"config_hash", config_hash(cfg)}, {"seeds", seeds}, {"points", points}}.dump(2) + "\n");
      std::cout << csv;
    }
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
}
