#include <gtest/gtest.h>

#include "medmix/checkpoint.hpp"
#include "medmix/train.hpp"
#include "support.hpp"

using namespace medmix;

namespace {

TrainResult small_run(const EmbeddingDataset& ds) {
  TrainConfig c;
  c.model = testkit::small_model(6, 0.1);
  c.optim.base_lr = 3e-3;
  c.max_epochs = 3;
  c.batch_size = 32;
  c.seed = 11;
  return train(ds, c);
}

}  // namespace

TEST(Checkpoint, RoundTripGivesIdenticalPredictions) {
  auto ds = generate_synthetic(testkit::small_spec(2, 150));
  auto r = small_run(ds);
  auto dir = testkit::temp_dir("ckpt");
  save_checkpoint({r.params, r.log.best_epoch, 11, r.thresholds}, dir / "m.ckpt");
  auto ck = load_checkpoint(dir / "m.ckpt", &ds.schema);
  EXPECT_EQ(ck.epoch, r.log.best_epoch);
  EXPECT_EQ(ck.seed, 11u);
  EXPECT_EQ(ck.thresholds, r.thresholds);
  auto rows = ds.indices(Split::test);
  EXPECT_EQ(predict(ck.params, ds, rows).probs, predict(r.params, ds, rows).probs);
  auto a = evaluate(ck.params, ds, rows, ck.thresholds);
  auto b = evaluate(r.params, ds, rows, r.thresholds);
  EXPECT_EQ(a.auroc, b.auroc);
  EXPECT_EQ(a.mf1, b.mf1);
  EXPECT_EQ(serialize_checkpoint(ck), serialize_checkpoint({r.params, r.log.best_epoch, 11, r.thresholds}));
}

TEST(Checkpoint, VariantsWithoutTeacherOrWithAttentionRoundTrip) {
  auto ds = generate_synthetic(testkit::small_spec(2, 60));
  for (auto mode : {FusionMode::attention, FusionMode::concat}) {
    VariantSpec v;
    v.fusion_mode = mode;
    v.distillation_enabled = false;
    auto p = init_params<float>(ds.schema, v, testkit::small_model(), 4);
    auto ck = deserialize_checkpoint(serialize_checkpoint({p, 0, 4, {0.5, 0.5, 0.5}}));
    EXPECT_EQ(ck.params.variant.fusion_mode, mode);
    std::size_t n = 0;
    ck.params.for_each_param([&](const Param<float>&) { ++n; });
    EXPECT_EQ(n, param_refs(p).size());
  }
}

TEST(Checkpoint, SchemaMismatchIsRejected) {
  auto ds = generate_synthetic(testkit::small_spec(2, 60));
  auto p = init_params<float>(ds.schema, VariantSpec{}, testkit::small_model(), 4);
  const auto bytes = serialize_checkpoint({p, 0, 4, {}});
  auto other_spec = testkit::small_spec(2, 60);
  other_spec.modalities[0].expert_dims[0] = 11;
  auto other = generate_synthetic(other_spec);
  try {
    deserialize_checkpoint(bytes, &other.schema);
    FAIL() << "expected a schema mismatch";
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.field(), "schema_hash");
  }
  EXPECT_NO_THROW(deserialize_checkpoint(bytes, &ds.schema));
}

TEST(Checkpoint, CorruptBytesAreRejected) {
  auto ds = generate_synthetic(testkit::small_spec(2, 60));
  auto p = init_params<float>(ds.schema, VariantSpec{}, testkit::small_model(), 4);
  const auto bytes = serialize_checkpoint({p, 0, 4, {}});
  EXPECT_THROW(deserialize_checkpoint("MDXEMB01" + bytes.substr(8)), FormatError);
  EXPECT_THROW(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
  EXPECT_THROW(deserialize_checkpoint(bytes + "x"), FormatError);
}
