#pragma once

// Experiment runner behind the command-line tool: config handling, seed
// fan-out, report files and the per-command output manifest.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "medmix/checkpoint.hpp"
#include "medmix/config_io.hpp"
#include "medmix/dataset_io.hpp"
#include "medmix/synthetic.hpp"
#include "medmix/train.hpp"

namespace medmix {

namespace fs = std::filesystem;

struct ExperimentConfig {
  std::optional<std::string> dataset;
  std::optional<SyntheticSpec> synthetic;
  std::optional<std::string> external_dataset;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  std::vector<CorruptionSpec> grid;
  std::vector<std::string> checkpoints;
  std::string method;  // label in plot files; defaults to the fusion mode
  std::string out;

  std::string method_label() const { return method.empty() ? to_string(train.variant.fusion_mode) : method; }
};

inline ojson experiment_to_json(const ExperimentConfig& c) {
  ojson j;
  j["dataset"] = c.dataset ? ojson(*c.dataset) : ojson(nullptr);
  j["synthetic"] = c.synthetic ? synthetic_to_json(*c.synthetic) : ojson(nullptr);
  j["external_dataset"] = c.external_dataset ? ojson(*c.external_dataset) : ojson(nullptr);
  j["train"] = train_config_to_json(c.train);
  j["seeds"] = c.seeds;
  auto grid = ojson::array();
  for (const auto& g : c.grid) grid.push_back(corruption_to_json(g));
  j["grid"] = grid;
  j["checkpoints"] = c.checkpoints;
  j["method"] = c.method;
  return j;
}

inline ExperimentConfig experiment_from_json(const ojson& j) {
  const std::string w = "config";
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  detail::check_keys(j, {"dataset", "synthetic", "external_dataset", "train", "seeds", "grid", "checkpoints", "method", "out"},
                     w);
  ExperimentConfig c;
  auto opt_path = [&](const char* key, std::optional<std::string>& dst) {
    if (j.contains(key) && !j[key].is_null()) dst = detail::read_string(j, key, "", w);
  };
  opt_path("dataset", c.dataset);
  opt_path("external_dataset", c.external_dataset);
  if (j.contains("synthetic") && !j["synthetic"].is_null()) c.synthetic = synthetic_from_json(j["synthetic"]);
  if (j.contains("train")) c.train = train_config_from_json(j["train"]);
  detail::read_opt(j, "seeds", c.seeds, w);
  if (j.contains("grid")) {
    if (!j["grid"].is_array()) throw ConfigError("config.grid: must be an array");
    for (const auto& g : j["grid"]) c.grid.push_back(corruption_from_json(g));
  }
  detail::read_opt(j, "checkpoints", c.checkpoints, w);
  c.method = detail::read_string(j, "method", "", w);
  c.out = detail::read_string(j, "out", "", w);
  return c;
}

inline ExperimentConfig load_experiment(const fs::path& path) {
  ojson j;
  try {
    j = ojson::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return experiment_from_json(j);
}

inline EmbeddingDataset load_experiment_dataset(const ExperimentConfig& c) {
  if (c.dataset && c.synthetic) throw ConfigError("config: give either 'dataset' or 'synthetic', not both");
  if (c.dataset) return read_dataset(*c.dataset);
  if (c.synthetic) return generate_synthetic(*c.synthetic);
  throw ConfigError("config: a 'dataset' path or a 'synthetic' spec is required");
}

inline void validate_experiment(const ExperimentConfig& c, const Schema& schema) {
  if (c.seeds.empty()) throw ConfigError("config.seeds: at least one seed is required");
  c.train.validate();
  c.train.variant.validate(schema);
  if (c.train.train_corruption) c.train.train_corruption->validate(schema.num_modalities());
  for (const auto& g : c.grid) g.validate(schema.num_modalities());
}

// ---------------------------------------------------------------- output

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) throw Error("format_double failed");
  return std::string(buf, end);
}

/// Collects files written under one output root and emits outputs.json.
class OutputDir {
 public:
  explicit OutputDir(fs::path root) : root_(std::move(root)) {
    if (root_.empty()) throw ConfigError("an output directory is required (--out)");
    fs::create_directories(root_);
  }

  const fs::path& root() const { return root_; }

  void write(const std::string& rel, std::string_view content) {
    const fs::path p = root_ / rel;
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_file(p, content);
    record(rel);
  }

  void record(const std::string& rel) {
    std::lock_guard lock(mu_);
    files_.push_back(rel);
  }

  void fail(const std::string& what) {
    std::lock_guard lock(mu_);
    std::cerr << "failed: " << what << "\n";
    failures_.push_back(what);
  }

  bool ok() const { return failures_.empty(); }

  void finish(const std::string& command, const ojson& config) {
    std::sort(files_.begin(), files_.end());
    files_.erase(std::unique(files_.begin(), files_.end()), files_.end());
    std::sort(failures_.begin(), failures_.end());
    ojson j;
    j["command"] = command;
    j["config"] = config;
    auto files = ojson::array();
    for (const auto& f : files_) {
      const std::string bytes = read_file(root_ / f);
      Fnv1a h;
      h.update(bytes);
      files.push_back(ojson{{"path", f}, {"bytes", bytes.size()}, {"fnv1a64", hex64(h.digest())}});
    }
    j["files"] = files;
    j["failures"] = failures_;
    write_file(root_ / "outputs.json", j.dump(2) + "\n");
  }

 private:
  fs::path root_;
  std::mutex mu_;
  std::vector<std::string> files_;
  std::vector<std::string> failures_;
};

inline std::size_t worker_count(std::size_t jobs) {
  std::size_t cap = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("MDX_THREADS")) {
    std::size_t v = 0;
    const std::string_view s(env);
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size() || v == 0)
      throw ConfigError("MDX_THREADS must be a positive integer");
    cap = v;
  }
  return std::max<std::size_t>(1, std::min(cap, jobs));
}

/// Runs job(i) for i in [0, n) on up to MDX_THREADS workers. Failures are
/// reported through `on_error` and do not stop the remaining jobs.
inline void run_jobs(std::size_t n, const std::function<void(std::size_t)>& job,
                     const std::function<void(std::size_t, const std::string&)>& on_error) {
  std::mutex mu;
  std::size_t next = 0;
  auto worker = [&] {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu);
        if (next == n) return;
        i = next++;
      }
      try {
        job(i);
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        on_error(i, e.what());
      }
    }
  };
  const std::size_t w = worker_count(n);
  if (w == 1) return worker();
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < w; ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
}

// ------------------------------------------------------------- reporting

struct MetricStat {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
};

inline MetricStat mean_std(const std::vector<double>& v) {
  MetricStat s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

inline ojson metrics_json(const MetricsReport& r) {
  return ojson{{"auroc", r.auroc}, {"auprc", r.auprc}, {"mf1", r.mf1}, {"acc", r.acc}, {"n_evaluated", r.n_evaluated}};
}

inline ojson aggregate_json(const std::vector<const MetricsReport*>& reports) {
  ojson j;
  j["n_seeds"] = reports.size();
  for (auto [name, get] : std::initializer_list<std::pair<const char*, double MetricsReport::*>>{
           {"auroc", &MetricsReport::auroc}, {"auprc", &MetricsReport::auprc}, {"mf1", &MetricsReport::mf1},
           {"acc", &MetricsReport::acc}}) {
    std::vector<double> v;
    for (const auto* r : reports) v.push_back(r->*get);
    const auto s = mean_std(v);
    j[name] = ojson{{"mean", s.mean}, {"std", s.std}};
  }
  return j;
}

/// One evaluated (cell, seed) pair.
struct EvalRow {
  std::string protocol = "none";
  std::string phase = "none";
  std::string modality = "none";
  double rate = 0.0;
  std::uint64_t seed = 0;
  MetricsReport metrics;
};

inline constexpr const char* kMetricsHeader = "protocol,phase,modality,rate,seed,auroc,auprc,mf1,acc";

inline EvalRow row_for(const CorruptionSpec* cell, const Schema& schema, std::uint64_t seed) {
  EvalRow r;
  r.seed = seed;
  if (cell) {
    r.protocol = to_string(cell->protocol);
    r.phase = to_string(cell->phase);
    r.modality = cell->protocol == CorruptionProtocol::one_modality ? schema.modalities[cell->target_modality].name : "all";
    r.rate = cell->rate;
  }
  return r;
}

inline std::string metrics_csv(const std::vector<EvalRow>& rows) {
  std::string s = std::string(kMetricsHeader) + "\n";
  for (const auto& r : rows) {
    s += r.protocol + "," + r.phase + "," + r.modality + "," + format_double(r.rate) + "," + std::to_string(r.seed) + ",";
    s += format_double(r.metrics.auroc) + "," + format_double(r.metrics.auprc) + "," + format_double(r.metrics.mf1) +
         "," + format_double(r.metrics.acc) + "\n";
  }
  return s;
}

inline std::string plot_csv(const std::vector<EvalRow>& rows, const std::string& method, const std::string& cohort) {
  std::string s = "method,cohort,protocol,phase,modality,rate,seed,metric,value\n";
  for (const auto& r : rows)
    for (auto [name, v] : {std::pair{"auroc", r.metrics.auroc}, std::pair{"auprc", r.metrics.auprc},
                           std::pair{"mf1", r.metrics.mf1}, std::pair{"acc", r.metrics.acc}})
      s += method + "," + cohort + "," + r.protocol + "," + r.phase + "," + r.modality + "," + format_double(r.rate) +
           "," + std::to_string(r.seed) + "," + name + "," + format_double(v) + "\n";
  return s;
}

/// Mean and std per cell, cells in first-appearance order.
inline ojson cell_aggregate(const std::vector<EvalRow>& rows) {
  std::vector<std::string> order;
  std::map<std::string, std::vector<const EvalRow*>> groups;
  for (const auto& r : rows) {
    const std::string key = r.protocol + "|" + r.phase + "|" + r.modality + "|" + format_double(r.rate);
    if (!groups.contains(key)) order.push_back(key);
    groups[key].push_back(&r);
  }
  auto cells = ojson::array();
  for (const auto& key : order) {
    const auto& g = groups[key];
    std::vector<const MetricsReport*> reps;
    for (const auto* r : g) reps.push_back(&r->metrics);
    ojson c{{"protocol", g[0]->protocol}, {"phase", g[0]->phase}, {"modality", g[0]->modality}, {"rate", g[0]->rate}};
    c.update(aggregate_json(reps));
    cells.push_back(c);
  }
  return cells;
}

inline std::string epochs_csv(const TrainLog& log, const Schema& schema) {
  std::string s = "epoch,task_loss,distill_loss,total_loss,lambda_d,lr_other,lr_router,grad_norm,val_loss,val_auroc,"
                  "val_auprc,val_mf1,val_acc";
  for (const auto& m : schema.modalities) s += ",cos_" + m.name + ",rkd_" + m.name;
  s += ",wall_seconds\n";
  for (const auto& e : log.epochs) {
    s += std::to_string(e.epoch);
    for (double v : {e.train.task_loss, e.train.distill_loss, e.train.total, e.lambda_d, e.lr_other, e.lr_router,
                     e.grad_norm, e.val_loss, e.val_metrics.auroc, e.val_metrics.auprc, e.val_metrics.mf1,
                     e.val_metrics.acc})
      s += "," + format_double(v);
    for (std::size_t m = 0; m < schema.num_modalities(); ++m)
      s += "," + format_double(e.train.cos_loss[m]) + "," + format_double(e.train.rkd_loss[m]);
    s += "," + format_double(e.wall_seconds) + "\n";
  }
  return s;
}

inline std::vector<std::size_t> all_rows(const EmbeddingDataset& ds) {
  std::vector<std::size_t> r(ds.num_samples());
  std::iota(r.begin(), r.end(), 0);
  return r;
}

/// Test-phase cell as applied to the model trained with `model_seed`.
inline CorruptionSpec seeded_cell(CorruptionSpec cell, std::uint64_t model_seed) {
  cell.seed = mix_key({cell.seed, model_seed});
  return cell;
}

// -------------------------------------------------------------- commands

inline std::string schema_summary(const EmbeddingDataset& ds, bool null_dataset) {
  std::ostringstream os;
  os << "samples " << ds.num_samples() << ", classes " << ds.schema.num_classes << " (" << to_string(ds.schema.task_kind)
     << ")\n";
  for (Split s : {Split::train, Split::val, Split::test})
    os << "  " << (s == Split::train ? "train" : s == Split::val ? "val" : "test") << " " << ds.indices(s).size() << "\n";
  for (std::size_t m = 0; m < ds.schema.num_modalities(); ++m) {
    const auto& mod = ds.schema.modalities[m];
    std::size_t avail = 0;
    for (std::size_t i = 0; i < ds.num_samples(); ++i) avail += ds.available(i, m);
    os << "  modality " << mod.name << ": experts [";
    for (std::size_t k = 0; k < mod.experts.size(); ++k) os << (k ? ", " : "") << mod.experts[k].dim;
    os << "], teacher " << mod.teacher_dim << ", available " << avail << "/" << ds.num_samples() << "\n";
  }
  os << "schema hash " << hex64(schema_hash(ds.schema)) << ", dataset hash " << hex64(dataset_hash(ds)) << "\n";
  if (null_dataset) os << "null dataset: every modality has zero SNR, labels are independent of the embeddings\n";
  return os.str();
}

inline bool cmd_synth(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log = std::cout) {
  if (!cfg.synthetic) throw ConfigError("synth: config needs a 'synthetic' spec");
  const auto ds = generate_synthetic(*cfg.synthetic);
  OutputDir dir(out);
  write_dataset(ds, out);
  for (const auto& e : fs::directory_iterator(out))
    if (e.is_regular_file() && e.path().filename() != "outputs.json") dir.record(e.path().filename().string());
  const std::string summary = schema_summary(ds, cfg.synthetic->is_null());
  dir.write("summary.txt", summary);
  log << summary;
  dir.finish("synth", experiment_to_json(cfg));
  return true;
}

struct SeedRun {
  TrainResult result;
  MetricsReport val;
  MetricsReport test;
};

inline SeedRun train_and_score(const EmbeddingDataset& ds, TrainConfig tc, std::uint64_t seed) {
  tc.seed = seed;
  SeedRun run{train(ds, tc), {}, {}};
  const auto& r = run.result;
  run.val = evaluate(r.params, ds, ds.indices(Split::val), r.thresholds);
  run.test = evaluate(r.params, ds, ds.indices(Split::test), r.thresholds);
  return run;
}

inline bool cmd_train(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log = std::cout) {
  const auto ds = load_experiment_dataset(cfg);
  validate_experiment(cfg, ds.schema);
  OutputDir dir(out);
  std::vector<std::optional<SeedRun>> runs(cfg.seeds.size());
  run_jobs(
      cfg.seeds.size(),
      [&](std::size_t i) {
        const std::uint64_t seed = cfg.seeds[i];
        auto run = train_and_score(ds, cfg.train, seed);
        const auto& r = run.result;
        const std::string sub = "seed_" + std::to_string(seed) + "/";
        dir.write(sub + "model.ckpt", serialize_checkpoint({r.params, r.log.best_epoch, seed, r.thresholds}));
        dir.write(sub + "epochs.csv", epochs_csv(r.log, ds.schema));
        ojson s{{"seed", seed},
                {"best_epoch", r.log.best_epoch},
                {"epochs_run", r.log.epochs.size()},
                {"stop_reason", r.log.stop_reason},
                {"best_val_loss", r.log.epochs.at(static_cast<std::size_t>(r.log.best_epoch)).val_loss},
                {"thresholds", r.thresholds},
                {"val", metrics_json(run.val)},
                {"test", metrics_json(run.test)}};
        dir.write(sub + "summary.json", s.dump(2) + "\n");
        runs[i] = std::move(run);
      },
      [&](std::size_t i, const std::string& what) {
        dir.fail("seed " + std::to_string(cfg.seeds[i]) + ": " + what);
      });
  std::vector<const MetricsReport*> val, test;
  for (const auto& r : runs)
    if (r) {
      val.push_back(&r->val);
      test.push_back(&r->test);
    }
  ojson agg{{"method", cfg.method_label()}, {"val", aggregate_json(val)}, {"test", aggregate_json(test)}};
  dir.write("aggregate.json", agg.dump(2) + "\n");
  dir.finish("train", experiment_to_json(cfg));
  const auto v = aggregate_json(val);
  log << "trained " << val.size() << "/" << cfg.seeds.size() << " seeds, val AUROC "
      << v["auroc"]["mean"].get<double>() << " +- " << v["auroc"]["std"].get<double>() << "\n";
  return dir.ok();
}

namespace detail {

inline std::vector<EvalRow> evaluate_cells(const Checkpoint& ck, const EmbeddingDataset& ds,
                                           std::span<const std::size_t> rows, const std::vector<CorruptionSpec>& grid) {
  std::vector<EvalRow> out;
  if (grid.empty()) {
    EvalRow r = row_for(nullptr, ds.schema, ck.seed);
    r.metrics = evaluate(ck.params, ds, rows, ck.thresholds);
    out.push_back(std::move(r));
  }
  for (const auto& cell : grid) {
    if (cell.phase != CorruptionPhase::test) throw ConfigError("eval: grid cells must use phase 'test'");
    EvalRow r = row_for(&cell, ds.schema, ck.seed);
    const auto seeded = seeded_cell(cell, ck.seed);
    r.metrics = evaluate(ck.params, ds, rows, ck.thresholds, &seeded);
    out.push_back(std::move(r));
  }
  return out;
}

/// Regroups per-model rows as grid-cell major, seed minor.
inline std::vector<EvalRow> cell_major(const std::vector<std::vector<EvalRow>>& per_model) {
  std::vector<EvalRow> out;
  const std::size_t cells = per_model.empty() ? 0 : per_model[0].size();
  for (std::size_t c = 0; c < cells; ++c)
    for (const auto& m : per_model)
      if (c < m.size()) out.push_back(m[c]);
  return out;
}

inline void emit_rows(OutputDir& dir, const std::string& stem, const std::vector<EvalRow>& rows,
                      const std::string& method, const std::string& cohort) {
  dir.write(stem + ".csv", metrics_csv(rows));
  dir.write(stem + "_plot.csv", plot_csv(rows, method, cohort));
  ojson agg{{"method", method}, {"cohort", cohort}, {"cells", cell_aggregate(rows)}};
  dir.write(stem + ".json", agg.dump(2) + "\n");
}

}  // namespace detail

inline bool cmd_eval(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log = std::cout) {
  if (cfg.checkpoints.empty()) throw ConfigError("eval: at least one checkpoint is required");
  const auto ds = load_experiment_dataset(cfg);
  for (const auto& g : cfg.grid) {
    g.validate(ds.schema.num_modalities());
    if (g.phase != CorruptionPhase::test) throw ConfigError("eval: grid cells must use phase 'test'");
  }
  std::optional<EmbeddingDataset> external;
  if (cfg.external_dataset) external = read_dataset(*cfg.external_dataset);
  OutputDir dir(out);
  const std::size_t n = cfg.checkpoints.size();
  std::vector<std::vector<EvalRow>> internal_rows(n), external_rows(n);
  run_jobs(
      n,
      [&](std::size_t i) {
        const auto ck = load_checkpoint(cfg.checkpoints[i], &ds.schema);
        internal_rows[i] = detail::evaluate_cells(ck, ds, ds.indices(Split::test), cfg.grid);
        if (external) {
          if (schema_hash(external->schema) != schema_hash(ds.schema))
            throw ValidationError("schema_hash", "external cohort schema differs from the checkpoint schema");
          const auto rows = all_rows(*external);
          external_rows[i] = detail::evaluate_cells(ck, *external, rows, cfg.grid);
        }
      },
      [&](std::size_t i, const std::string& what) { dir.fail(cfg.checkpoints[i] + ": " + what); });
  const auto rows = detail::cell_major(internal_rows);
  detail::emit_rows(dir, "metrics", rows, cfg.method_label(), "internal");
  if (external) detail::emit_rows(dir, "metrics_external", detail::cell_major(external_rows), cfg.method_label(), "external");
  dir.finish("eval", experiment_to_json(cfg));
  log << "evaluated " << n << " checkpoint(s), " << rows.size() << " rows\n";
  return dir.ok();
}

inline bool cmd_sweep(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log = std::cout) {
  if (cfg.grid.empty()) throw ConfigError("sweep: the grid must not be empty");
  const auto ds = load_experiment_dataset(cfg);
  validate_experiment(cfg, ds.schema);
  OutputDir dir(out);
  const std::size_t S = cfg.seeds.size();
  const auto test_rows = ds.indices(Split::test);

  bool need_base = false;
  for (const auto& g : cfg.grid) need_base |= g.phase == CorruptionPhase::test;
  if (!cfg.checkpoints.empty() && cfg.checkpoints.size() != S)
    throw ConfigError("sweep: give one checkpoint per seed or none");

  // Stage 1: base models (one per seed) and one model per train-phase cell and seed.
  std::vector<std::optional<Checkpoint>> base(S);
  std::vector<std::optional<EvalRow>> rows(cfg.grid.size() * S);
  struct Job {
    std::size_t cell;  // grid.size() marks a base model
    std::size_t seed;
  };
  std::vector<Job> jobs;
  if (need_base)
    for (std::size_t s = 0; s < S; ++s) jobs.push_back({cfg.grid.size(), s});
  for (std::size_t c = 0; c < cfg.grid.size(); ++c)
    if (cfg.grid[c].phase == CorruptionPhase::train)
      for (std::size_t s = 0; s < S; ++s) jobs.push_back({c, s});
  auto job_name = [&](const Job& j) {
    return (j.cell == cfg.grid.size() ? std::string("base model") : "cell " + std::to_string(j.cell)) + ", seed " +
           std::to_string(cfg.seeds[j.seed]);
  };
  run_jobs(
      jobs.size(),
      [&](std::size_t i) {
        const Job j = jobs[i];
        const std::uint64_t seed = cfg.seeds[j.seed];
        if (j.cell == cfg.grid.size()) {
          if (!cfg.checkpoints.empty()) {
            base[j.seed] = load_checkpoint(cfg.checkpoints[j.seed], &ds.schema);
          } else {
            TrainConfig tc = cfg.train;
            tc.seed = seed;
            auto r = train(ds, tc);
            base[j.seed] = Checkpoint{std::move(r.params), r.log.best_epoch, seed, r.thresholds};
          }
          return;
        }
        TrainConfig tc = cfg.train;
        tc.train_corruption = cfg.grid[j.cell];
        tc.seed = seed;
        auto r = train(ds, tc);
        EvalRow row = row_for(&cfg.grid[j.cell], ds.schema, seed);
        row.metrics = evaluate(r.params, ds, test_rows, r.thresholds);
        rows[j.cell * S + j.seed] = std::move(row);
      },
      [&](std::size_t i, const std::string& what) { dir.fail(job_name(jobs[i]) + ": " + what); });

  // Stage 2: test-phase cells against the base models.
  std::vector<Job> evals;
  for (std::size_t c = 0; c < cfg.grid.size(); ++c)
    if (cfg.grid[c].phase == CorruptionPhase::test)
      for (std::size_t s = 0; s < S; ++s)
        if (base[s]) evals.push_back({c, s});
  run_jobs(
      evals.size(),
      [&](std::size_t i) {
        const Job j = evals[i];
        const auto& ck = *base[j.seed];
        EvalRow row = row_for(&cfg.grid[j.cell], ds.schema, ck.seed);
        const auto seeded = seeded_cell(cfg.grid[j.cell], ck.seed);
        row.metrics = evaluate(ck.params, ds, test_rows, ck.thresholds, &seeded);
        rows[j.cell * S + j.seed] = std::move(row);
      },
      [&](std::size_t i, const std::string& what) { dir.fail(job_name(evals[i]) + ": " + what); });

  std::vector<EvalRow> done;
  for (auto& r : rows)
    if (r) done.push_back(std::move(*r));
  if (done.size() != rows.size()) dir.fail(std::to_string(rows.size() - done.size()) + " cell(s) did not complete");
  detail::emit_rows(dir, "sweep", done, cfg.method_label(), "internal");
  dir.finish("sweep", experiment_to_json(cfg));
  log << "sweep: " << done.size() << "/" << rows.size() << " (cell, seed) results\n";
  return dir.ok();
}

struct AblationVariant {
  std::string name;
  VariantSpec variant;
  bool needs_best_expert = false;
};

/// The fixed ablation grid for a schema, starting from `base`.
inline std::vector<AblationVariant> ablation_grid(const Schema& schema, const VariantSpec& base) {
  const std::size_t M = schema.num_modalities();
  std::vector<AblationVariant> g;
  g.push_back({"full", base});
  VariantSpec v = base;
  v.distillation_enabled = false;
  g.push_back({"no-distill", v});
  v = base;
  v.intra_mode = IntraMode::uniform_mean;
  g.push_back({"uniform-mean", v});
  v = base;
  v.intra_mode = IntraMode::best_expert_only;
  g.push_back({"best-expert-only", v, true});

  // Expert families are experts sharing a name across modalities.
  std::vector<std::string> families;
  for (const auto& mod : schema.modalities)
    for (const auto& e : mod.experts)
      if (std::find(families.begin(), families.end(), e.name) == families.end()) families.push_back(e.name);
  for (const auto& fam : families) {
    v = base;
    v.experts_enabled.assign(M, {});
    v.modalities_enabled.assign(M, 1);
    for (std::size_t m = 0; m < M; ++m) {
      v.experts_enabled[m].assign(schema.num_experts(m), 1);
      if (!base.experts_enabled.empty()) v.experts_enabled[m] = base.experts_enabled[m];
      if (!base.modalities_enabled.empty()) v.modalities_enabled[m] = base.modalities_enabled[m];
      bool left = false;
      for (std::size_t k = 0; k < schema.num_experts(m); ++k) {
        if (schema.modalities[m].experts[k].name == fam) v.experts_enabled[m][k] = 0;
        left |= v.experts_enabled[m][k] != 0;
      }
      if (!left) v.modalities_enabled[m] = 0;
    }
    if (std::ranges::count(v.modalities_enabled, std::uint8_t{1}) == 0) continue;
    g.push_back({"drop-" + fam, v});
  }
  for (std::size_t m = 0; m < M; ++m) {
    v = base;
    v.modalities_enabled.assign(M, 0);
    v.modalities_enabled[m] = 1;
    g.push_back({"only-" + schema.modalities[m].name, v});
  }
  return g;
}

inline std::vector<std::size_t> best_experts_from_gates(const Prediction& p) {
  std::vector<std::size_t> best;
  for (const auto& gates : p.mean_gates)
    best.push_back(static_cast<std::size_t>(std::max_element(gates.begin(), gates.end()) - gates.begin()));
  return best;
}

inline bool cmd_ablate(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log = std::cout) {
  const auto ds = load_experiment_dataset(cfg);
  validate_experiment(cfg, ds.schema);
  if (cfg.train.variant.intra_mode != IntraMode::learned_router)
    throw ConfigError("ablate: the base variant must use the learned router");
  OutputDir dir(out);
  const auto grid = ablation_grid(ds.schema, cfg.train.variant);
  const std::size_t V = grid.size(), S = cfg.seeds.size();
  std::vector<std::optional<SeedRun>> runs(V * S);
  std::vector<std::vector<std::size_t>> best(S);

  auto run_cell = [&](std::size_t v, std::size_t s) {
    TrainConfig tc = cfg.train;
    tc.variant = grid[v].variant;
    if (grid[v].needs_best_expert) tc.variant.best_expert = best[s];
    runs[v * S + s] = train_and_score(ds, tc, cfg.seeds[s]);
    if (v == 0) best[s] = best_experts_from_gates(predict(runs[v * S + s]->result.params, ds, ds.indices(Split::val)));
  };
  auto on_error = [&](std::size_t v, std::size_t s, const std::string& what) {
    dir.fail(grid[v].name + ", seed " + std::to_string(cfg.seeds[s]) + ": " + what);
  };
  // The best-expert variant depends on the full model of the same seed.
  std::vector<std::pair<std::size_t, std::size_t>> first, second;
  for (std::size_t v = 0; v < V; ++v)
    for (std::size_t s = 0; s < S; ++s) (grid[v].needs_best_expert ? second : first).push_back({v, s});
  run_jobs(
      first.size(), [&](std::size_t i) { run_cell(first[i].first, first[i].second); },
      [&](std::size_t i, const std::string& w) { on_error(first[i].first, first[i].second, w); });
  run_jobs(
      second.size(),
      [&](std::size_t i) {
        if (best[second[i].second].empty()) throw Error("full model for this seed failed");
        run_cell(second[i].first, second[i].second);
      },
      [&](std::size_t i, const std::string& w) { on_error(second[i].first, second[i].second, w); });

  std::string csv = "variant,seed,auroc,auprc,mf1,acc\n";
  auto table = ojson::array();
  for (std::size_t v = 0; v < V; ++v) {
    std::vector<const MetricsReport*> reps;
    for (std::size_t s = 0; s < S; ++s) {
      const auto& r = runs[v * S + s];
      if (!r) continue;
      reps.push_back(&r->test);
      csv += grid[v].name + "," + std::to_string(cfg.seeds[s]) + "," + format_double(r->test.auroc) + "," +
             format_double(r->test.auprc) + "," + format_double(r->test.mf1) + "," + format_double(r->test.acc) + "\n";
    }
    ojson row{{"variant", grid[v].name}, {"spec", variant_to_json(grid[v].variant)}};
    if (grid[v].needs_best_expert) {
      auto be = ojson::array();
      for (std::size_t s = 0; s < S; ++s) be.push_back(best[s]);
      row["best_expert_per_seed"] = be;
    }
    row.update(aggregate_json(reps));
    table.push_back(row);
  }
  dir.write("ablation.csv", csv);
  dir.write("ablation.json", ojson{{"variants", table}}.dump(2) + "\n");
  dir.finish("ablate", experiment_to_json(cfg));
  log << "ablation: " << V << " variants x " << S << " seeds\n";
  return dir.ok();
}

}  // namespace medmix
