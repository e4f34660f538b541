#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>

#include "medmix/experiment.hpp"
#include "support.hpp"

using namespace medmix;

namespace {

const fs::path& work() {
  static const testkit::TempDir dir("cli");
  return dir.path();
}

int run(const std::string& args, const std::string& log = "cli.log") {
  const std::string cmd = std::string(MEDMIX_CLI_PATH) + " " + args + " > " + (work() / log).string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) { return read_file(p); }

ojson tiny_config(std::size_t modalities = 3, double snr = 2.0) {
  auto mods = ojson::array();
  for (std::size_t m = 0; m < modalities; ++m)
    mods.push_back(ojson{{"name", "m" + std::to_string(m)},
                         {"expert_dims", m == 0 ? std::vector<int>{12, 9} : std::vector<int>{7}},
                         {"snr", snr},
                         {"missing_rate", 0.2},
                         {"teacher_dim", 6}});
  return ojson{{"synthetic", {{"num_samples", 200}, {"num_classes", 3}, {"latent_dim", 4}, {"modalities", mods}, {"seed", 5}}},
               {"train",
                {{"optimizer", {{"base_lr", 0.003}, {"warmup_epochs", 2}}},
                 {"model", {{"latent_dim", 8}}},
                 {"max_epochs", 4},
                 {"batch_size", 32}}},
               {"seeds", {0, 1}}};
}

fs::path write_config(const std::string& name, const ojson& j) {
  const auto p = work() / name;
  write_file(p, j.dump(2));
  return p;
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  for (std::string f; std::getline(is, f, ',');) out.push_back(f);
  return out;
}

double parse_double(const std::string& s) {
  double v = 0;
  std::from_chars(s.data(), s.data() + s.size(), v);
  return v;
}

// Trains the shared two-seed model once.
const fs::path& trained() {
  static const fs::path out = [] {
    const auto cfg = write_config("base.json", tiny_config());
    EXPECT_EQ(run("synth --config " + cfg.string() + " --out " + (work() / "data").string()), 0);
    const auto out = work() / "train";
    EXPECT_EQ(run("train --config " + cfg.string() + " --dataset " + (work() / "data").string() + " --out " + out.string()), 0);
    return out;
  }();
  return out;
}

fs::path synth_once(const std::string& name, const ojson& cfg) {
  const auto out = work() / name;
  if (!fs::exists(out / "outputs.json"))
    EXPECT_EQ(run("synth --config " + write_config(name + ".json", cfg).string() + " --out " + out.string()), 0);
  return out;
}

std::string both_checkpoints() {
  const auto& tr = trained();
  return " --checkpoint " + (tr / "seed_0" / "model.ckpt").string() + " --checkpoint " +
         (tr / "seed_1" / "model.ckpt").string();
}

const fs::path& clean_eval() {
  static const fs::path out = [] {
    const auto out = work() / "eval_clean";
    EXPECT_EQ(run("eval --config " + (work() / "base.json").string() + " --dataset " + (work() / "data").string() +
                  both_checkpoints() + " --out " + out.string()),
              0);
    return out;
  }();
  return out;
}

const fs::path& grid_eval() {
  static const fs::path out = [] {
    const auto out = work() / "eval_grid";
    auto cfg = tiny_config();
    cfg["external_dataset"] = synth_once("d1", tiny_config()).string();
    EXPECT_EQ(run("eval --config " + write_config("ext.json", cfg).string() + " --dataset " +
                  (work() / "data").string() + both_checkpoints() + " --rate 0.1,0.3,0.5,0.7 --out " + out.string()),
              0);
    return out;
  }();
  return out;
}

const fs::path& zero_sweep() {
  static const fs::path out = [] {
    const auto out = work() / "sweep0";
    EXPECT_EQ(run("sweep --config " + (work() / "base.json").string() + " --dataset " + (work() / "data").string() +
                  both_checkpoints() + " --rate 0 --out " + out.string()),
              0);
    return out;
  }();
  return out;
}

}  // namespace

TEST(CliSynth, MinimalSpecGivesManifestAndFiveMatrices) {
  const auto cfg = write_config("two.json", tiny_config(2));
  const auto out = work() / "two";
  ASSERT_EQ(run("synth --config " + cfg.string() + " --out " + out.string()), 0);
  std::size_t mats = 0;
  for (const auto& e : fs::directory_iterator(out)) mats += e.path().extension() == ".mat";
  // m0 has two experts: 3 expert blobs + 2 teachers + labels
  EXPECT_EQ(mats, 6u);
  EXPECT_TRUE(fs::exists(out / "manifest.json"));
  EXPECT_TRUE(fs::exists(out / "outputs.json"));

  auto one = tiny_config(2);
  for (auto& m : one["synthetic"]["modalities"]) m["expert_dims"] = {7};
  const auto out1 = work() / "two_single";
  ASSERT_EQ(run("synth --config " + write_config("two1.json", one).string() + " --out " + out1.string()), 0);
  mats = 0;
  for (const auto& e : fs::directory_iterator(out1)) mats += e.path().extension() == ".mat";
  EXPECT_EQ(mats, 5u);
}

TEST(CliSynth, SameSpecSameBytesAndNullFlag) {
  const auto cfg = write_config("det.json", tiny_config());
  ASSERT_EQ(run("synth --config " + cfg.string() + " --out " + (work() / "d1a").string()), 0);
  ASSERT_EQ(run("synth --config " + cfg.string() + " --out " + (work() / "d2").string()), 0);
  EXPECT_EQ(slurp(work() / "d1a" / "outputs.json"), slurp(work() / "d2" / "outputs.json"));
  EXPECT_EQ(dataset_hash(read_dataset(work() / "d1a")), dataset_hash(read_dataset(work() / "d2")));
  EXPECT_EQ(slurp(work() / "d1a" / "summary.txt").find("null dataset"), std::string::npos);

  ASSERT_EQ(run("synth --config " + write_config("null.json", tiny_config(3, 0.0)).string() + " --out " +
                (work() / "dnull").string()),
            0);
  EXPECT_NE(slurp(work() / "dnull" / "summary.txt").find("null dataset"), std::string::npos);
}

TEST(CliTrain, PerSeedArtifactsAndAggregate) {
  const auto& out = trained();
  for (int s : {0, 1}) {
    const auto sub = out / ("seed_" + std::to_string(s));
    EXPECT_TRUE(fs::exists(sub / "model.ckpt"));
    EXPECT_EQ(lines(slurp(sub / "epochs.csv")).size(), 5u);
    auto summary = ojson::parse(slurp(sub / "summary.json"));
    EXPECT_EQ(summary["seed"], s);
  }
  auto agg = ojson::parse(slurp(out / "aggregate.json"));
  EXPECT_EQ(agg["val"]["n_seeds"], 2);
  EXPECT_GE(agg["val"]["auroc"]["std"].get<double>(), 0.0);
}

TEST(CliTrain, RerunIsByteIdentical) {
  const auto& first = trained();
  const auto cfg = work() / "base.json";
  const auto again = work() / "train_again";
  ASSERT_EQ(run("train --config " + cfg.string() + " --dataset " + (work() / "data").string() + " --out " + again.string()), 0);
  EXPECT_EQ(slurp(first / "outputs.json"), slurp(again / "outputs.json"));
  EXPECT_EQ(slurp(first / "seed_1" / "model.ckpt"), slurp(again / "seed_1" / "model.ckpt"));
}

TEST(CliTrain, NoDistillVariantLogsZeroDistillation) {
  trained();
  const auto out = work() / "nodistill";
  ASSERT_EQ(run("train --config " + (work() / "base.json").string() + " --dataset " + (work() / "data").string() +
                " --seed 0 --variant no-distill --out " + out.string()),
            0);
  auto rows = lines(slurp(out / "seed_0" / "epochs.csv"));
  ASSERT_EQ(split_csv(rows[0])[2], "distill_loss");
  for (std::size_t i = 1; i < rows.size(); ++i) EXPECT_EQ(split_csv(rows[i])[2], "0");
}

TEST(CliTrain, FusionFlagSelectsBaseline) {
  trained();
  const auto out = work() / "meanavg";
  ASSERT_EQ(run("train --config " + (work() / "base.json").string() + " --dataset " + (work() / "data").string() +
                " --seed 0 --fusion mean_avg --out " + out.string()),
            0);
  auto ck = load_checkpoint(out / "seed_0" / "model.ckpt");
  EXPECT_EQ(ck.params.variant.fusion_mode, FusionMode::mean_avg);
  EXPECT_EQ(ojson::parse(slurp(out / "aggregate.json"))["method"], "mean_avg");
}

TEST(CliEval, EmptyGridGivesOneCleanRowPerCheckpoint) {
  const auto& tr = trained();
  auto rows = lines(slurp(clean_eval() / "metrics.csv"));
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], kMetricsHeader);
  EXPECT_EQ(rows[1].substr(0, 15), "none,none,none,");

  // The reloaded checkpoint reproduces the trainer's test metrics.
  auto summary = ojson::parse(slurp(tr / "seed_0" / "summary.json"));
  EXPECT_EQ(parse_double(split_csv(rows[1])[5]), summary["test"]["auroc"].get<double>());
}

TEST(CliEval, GridOfFourRatesAndExternalCohort) {
  const auto& out = grid_eval();
  EXPECT_EQ(lines(slurp(out / "metrics.csv")).size(), 1u + 4u * 2u);
  auto plot = lines(slurp(out / "metrics_external_plot.csv"));
  EXPECT_EQ(plot.size(), 1u + 4u * 2u * 4u);
  EXPECT_EQ(split_csv(plot[1])[1], "external");
  auto agg = ojson::parse(slurp(out / "metrics.json"));
  EXPECT_EQ(agg["cells"].size(), 4u);
  EXPECT_EQ(agg["cells"][0]["n_seeds"], 2);
}

TEST(CliEval, SchemaMismatchFails) {
  const auto& tr = trained();
  const auto other = synth_once("two", tiny_config(2));
  const int rc = run("eval --config " + (work() / "base.json").string() + " --dataset " + other.string() +
                         " --checkpoint " + (tr / "seed_0" / "model.ckpt").string() + " --out " +
                         (work() / "eval_bad").string(),
                     "bad.log");
  EXPECT_NE(rc, 0);
  EXPECT_NE(slurp(work() / "bad.log").find("schema_hash"), std::string::npos);
}

TEST(CliSweep, RateZeroMatchesCleanEvaluationAndRerunsIdentically) {
  const auto& first = zero_sweep();
  const auto again = work() / "sweep0b";
  ASSERT_EQ(run("sweep --config " + (work() / "base.json").string() + " --dataset " + (work() / "data").string() +
                both_checkpoints() + " --rate 0 --out " + again.string()),
            0);
  EXPECT_EQ(slurp(first / "outputs.json"), slurp(again / "outputs.json"));
  auto sweep = lines(slurp(first / "sweep.csv"));
  auto clean = lines(slurp(clean_eval() / "metrics.csv"));
  ASSERT_EQ(sweep.size(), 3u);
  for (std::size_t i = 1; i < 3; ++i) {
    auto a = split_csv(sweep[i]), b = split_csv(clean[i]);
    for (std::size_t c = 4; c < 9; ++c) EXPECT_EQ(a[c], b[c]);
  }
}

TEST(CliSweep, EmptyGridIsAnError) {
  trained();
  EXPECT_NE(run("sweep --config " + (work() / "base.json").string() + " --dataset " + (work() / "data").string() +
                " --out " + (work() / "sweep_empty").string()),
            0);
}

TEST(CliAblate, GridAndCrossCommandConsistency) {
  trained();
  const auto out = work() / "ablate";
  ASSERT_EQ(run("ablate --config " + (work() / "base.json").string() + " --dataset " + (work() / "data").string() +
                " --seeds 0 --out " + out.string()),
            0);
  auto table = ojson::parse(slurp(out / "ablation.json"))["variants"];
  std::vector<std::string> names;
  for (const auto& v : table) names.push_back(v["variant"]);
  EXPECT_EQ(names, (std::vector<std::string>{"full", "no-distill", "uniform-mean", "best-expert-only", "drop-expert0",
                                             "drop-expert1", "only-m0", "only-m1", "only-m2"}));
  for (const auto& v : table)
    if (v["variant"].get<std::string>().starts_with("only-")) {
      std::size_t on = 0;
      for (const auto& e : v["spec"]["modalities_enabled"]) on += e.get<int>();
      EXPECT_EQ(on, 1u);
    }
  auto rows = lines(slurp(out / "ablation.csv"));
  auto full = split_csv(rows[1]);
  ASSERT_EQ(full[0], "full");
  auto clean = split_csv(lines(slurp(clean_eval() / "metrics.csv"))[1]);
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(full[2 + c], clean[5 + c]);
}

TEST(CliConfig, UnknownKeysAndBadFlagsAreRejected) {
  auto cfg = tiny_config();
  cfg["train"]["learning_rate"] = 0.1;
  EXPECT_EQ(run("train --config " + write_config("unknown.json", cfg).string() + " --out " +
                    (work() / "unk").string(),
                "unk.log"),
            2);
  EXPECT_NE(slurp(work() / "unk.log").find("unknown key 'learning_rate'"), std::string::npos);
  EXPECT_NE(run("train --config " + (work() / "base.json").string() + " --fusion sum --out " + (work() / "x").string()), 0);
  EXPECT_NE(run("train --config " + (work() / "base.json").string() + " --rate 1.5 --out " + (work() / "y").string()), 0);
}

TEST(CliFlags, OverrideTheConfigFile) {
  auto cfg = tiny_config();
  cfg["seeds"] = {7, 8, 9};
  const auto out = work() / "override";
  ASSERT_EQ(run("train --config " + write_config("ov.json", cfg).string() + " --seeds 3 --out " + out.string()), 0);
  EXPECT_TRUE(fs::exists(out / "seed_3" / "model.ckpt"));
  EXPECT_FALSE(fs::exists(out / "seed_7"));
}

TEST(CliCsv, EmittedCsvRoundTrips) {
  for (const auto& f : {grid_eval() / "metrics.csv", zero_sweep() / "sweep.csv", clean_eval() / "metrics.csv"}) {
    const std::string text = slurp(f);
    auto rows = lines(text);
    std::vector<EvalRow> parsed;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      auto c = split_csv(rows[i]);
      EvalRow r;
      r.protocol = c[0];
      r.phase = c[1];
      r.modality = c[2];
      r.rate = parse_double(c[3]);
      r.seed = std::stoull(c[4]);
      r.metrics.auroc = parse_double(c[5]);
      r.metrics.auprc = parse_double(c[6]);
      r.metrics.mf1 = parse_double(c[7]);
      r.metrics.acc = parse_double(c[8]);
      parsed.push_back(r);
    }
    EXPECT_EQ(metrics_csv(parsed), text) << f;
  }
}

TEST(Aggregation, SampleStandardDeviation) {
  auto s = mean_std({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.std, std::sqrt(5.0 / 3.0), 1e-15);
  EXPECT_EQ(mean_std({0.7}).std, 0.0);
}
