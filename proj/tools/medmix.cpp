#include <charconv>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "medmix/experiment.hpp"

using namespace medmix;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string seeds;
  std::string out;
  std::string variant;
  std::string fusion;
  std::string rates;
  std::string protocol;
  std::string phase;
  std::string modality;
  std::string dataset;
  std::vector<std::string> checkpoints;
};

std::vector<double> parse_rates(const std::string& s) {
  std::vector<double> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t end = std::min(s.find(',', pos), s.size());
    double v = 0.0;
    auto [p, ec] = std::from_chars(s.data() + pos, s.data() + end, v);
    if (ec != std::errc() || p != s.data() + end) throw ConfigError("--rate: cannot parse '" + s.substr(pos, end - pos) + "'");
    out.push_back(v);
    pos = end + 1;
  }
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t end = std::min(s.find(',', pos), s.size());
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data() + pos, s.data() + end, v);
    if (ec != std::errc() || p != s.data() + end) throw ConfigError("--seeds: cannot parse '" + s.substr(pos, end - pos) + "'");
    out.push_back(v);
    pos = end + 1;
  }
  return out;
}

std::size_t modality_index(const ExperimentConfig& cfg, const std::string& name) {
  if (name.empty()) return 0;
  std::size_t idx = 0;
  auto [p, ec] = std::from_chars(name.data(), name.data() + name.size(), idx);
  if (ec == std::errc() && p == name.data() + name.size()) return idx;
  if (cfg.synthetic)
    for (std::size_t m = 0; m < cfg.synthetic->modalities.size(); ++m)
      if (cfg.synthetic->modalities[m].name == name) return m;
  if (cfg.dataset) {
    const auto schema = read_dataset(*cfg.dataset).schema;
    for (std::size_t m = 0; m < schema.num_modalities(); ++m)
      if (schema.modalities[m].name == name) return m;
  }
  throw ConfigError("--modality: unknown modality '" + name + "'");
}

void apply_variant(VariantSpec& v, const std::string& name) {
  if (name.empty() || name == "full") return;
  if (name == "no-distill") {
    v.distillation_enabled = false;
  } else if (name == "uniform-mean") {
    v.intra_mode = IntraMode::uniform_mean;
  } else if (name == "best-expert-only") {
    if (v.best_expert.empty()) throw ConfigError("--variant best-expert-only needs train.variant.best_expert in the config");
    v.intra_mode = IntraMode::best_expert_only;
  } else {
    throw ConfigError("--variant: expected full, no-distill, uniform-mean or best-expert-only, got '" + name + "'");
  }
}

ExperimentConfig resolve(const Flags& f, const std::string& command) {
  ExperimentConfig cfg = f.config.empty() ? ExperimentConfig{} : load_experiment(f.config);
  if (!f.dataset.empty()) {
    cfg.dataset = f.dataset;
    cfg.synthetic.reset();
  }
  if (f.seed && !f.seeds.empty()) throw ConfigError("give --seed or --seeds, not both");
  if (f.seed) cfg.seeds = {*f.seed};
  if (!f.seeds.empty()) cfg.seeds = parse_seeds(f.seeds);
  if (command == "synth" && cfg.synthetic && (f.seed || !f.seeds.empty())) cfg.synthetic->seed = cfg.seeds.front();
  apply_variant(cfg.train.variant, f.variant);
  if (!f.fusion.empty()) cfg.train.variant.fusion_mode = fusion_mode_from_string(f.fusion);
  if (!f.out.empty()) cfg.out = f.out;
  if (!f.checkpoints.empty()) cfg.checkpoints = f.checkpoints;

  const bool corruption_flags = !f.rates.empty() || !f.protocol.empty() || !f.phase.empty() || !f.modality.empty();
  if (corruption_flags) {
    if (f.rates.empty()) throw ConfigError("--protocol/--phase/--modality need --rate");
    CorruptionSpec base;
    base.protocol = f.protocol.empty() ? CorruptionProtocol::multi_random : protocol_from_string(f.protocol);
    base.phase = !f.phase.empty() ? phase_from_string(f.phase)
                                  : (command == "train" ? CorruptionPhase::train : CorruptionPhase::test);
    base.target_modality = modality_index(cfg, f.modality);
    const auto rates = parse_rates(f.rates);
    if (command == "train") {
      if (rates.size() != 1) throw ConfigError("train: --rate takes a single value");
      if (base.phase != CorruptionPhase::train) throw ConfigError("train: corruption must use --phase train");
      base.rate = rates[0];
      cfg.train.train_corruption = base;
    } else {
      cfg.grid.clear();
      for (double r : rates) {
        base.rate = r;
        cfg.grid.push_back(base);
      }
    }
  }
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal mixture-of-experts fusion over frozen embeddings"};
  app.require_subcommand(1);
  Flags f;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "Experiment config (JSON)");
    sub->add_option("--seed", f.seed, "Single seed");
    sub->add_option("--seeds", f.seeds, "Comma-separated seeds");
    sub->add_option("--out", f.out, "Output directory");
  };
  auto add_model = [&](CLI::App* sub) {
    sub->add_option("--variant", f.variant, "full | no-distill | uniform-mean | best-expert-only");
    sub->add_option("--fusion", f.fusion, "medmix | mean_avg | concat | max | attention");
    sub->add_option("--dataset", f.dataset, "Dataset directory (overrides the config)");
  };
  auto add_corruption = [&](CLI::App* sub) {
    sub->add_option("--rate", f.rates, "Corruption rate(s), comma-separated");
    sub->add_option("--protocol", f.protocol, "one_modality | multi_random");
    sub->add_option("--phase", f.phase, "train | test");
    sub->add_option("--modality", f.modality, "Target modality (name or index) for one_modality");
  };

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  add_common(synth);
  auto* trn = app.add_subcommand("train", "Train one model per seed");
  add_common(trn);
  add_model(trn);
  add_corruption(trn);
  auto* ev = app.add_subcommand("eval", "Evaluate checkpoints, optionally under test-time corruption");
  add_common(ev);
  add_model(ev);
  add_corruption(ev);
  ev->add_option("--checkpoint", f.checkpoints, "Checkpoint file (repeatable)");
  auto* abl = app.add_subcommand("ablate", "Run the ablation grid");
  add_common(abl);
  add_model(abl);
  auto* sw = app.add_subcommand("sweep", "Corruption sweep over a grid of cells");
  add_common(sw);
  add_model(sw);
  add_corruption(sw);
  sw->add_option("--checkpoint", f.checkpoints, "Checkpoint per seed for test-phase cells (repeatable)");

  CLI11_PARSE(app, argc, argv);

  try {
    const std::string command = app.get_subcommands().front()->get_name();
    const ExperimentConfig cfg = resolve(f, command);
    const fs::path out = cfg.out;
    bool ok = false;
    if (command == "synth") ok = cmd_synth(cfg, out);
    if (command == "train") ok = cmd_train(cfg, out);
    if (command == "eval") ok = cmd_eval(cfg, out);
    if (command == "ablate") ok = cmd_ablate(cfg, out);
    if (command == "sweep") ok = cmd_sweep(cfg, out);
    if (!ok) std::cerr << "some cells failed; see outputs.json\n";
    return ok ? 0 : 1;
  } catch (const ValidationError& e) {
    std::cerr << "validation error (" << e.field() << "): " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
