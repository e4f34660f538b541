#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "medmix/corruption.hpp"
#include "medmix/dataset.hpp"
#include "medmix/fusion.hpp"
#include "medmix/losses.hpp"
#include "medmix/metrics.hpp"
#include "medmix/optim.hpp"

namespace medmix {

/// Every knob of one training run. Defaults follow the reference recipe
/// (AdamW, 1e-5 base rate, 0.3x router rate, 50 warmup epochs, 200 epochs,
/// patience 20, batch 256, lambda ramp to 0.3 over 30 epochs, RKD 0.05).
struct TrainConfig {
  OptimizerConfig optim;
  LossConfig loss;
  ModelConfig model;
  VariantSpec variant;
  int max_epochs = 200;
  int early_stop_patience = 20;
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  std::optional<CorruptionSpec> train_corruption;
  bool monitor_distill_in_val = false;
  bool record_timing = false;

  void validate() const {
    if (!(optim.base_lr >= 0.0)) throw ConfigError("base_lr must be >= 0");
    if (!(optim.router_lr_factor >= 0.0)) throw ConfigError("router_lr_factor must be >= 0");
    if (!(optim.weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(optim.clip_norm > 0.0)) throw ConfigError("clip_norm must be > 0");
    if (optim.warmup_epochs < 0) throw ConfigError("warmup_epochs must be >= 0");
    if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
    if (early_stop_patience < 1) throw ConfigError("early_stop_patience must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (loss.distill_ramp_epochs < 0) throw ConfigError("distill_ramp_epochs must be >= 0");
    if (!(loss.lambda_max >= 0.0) || !(loss.lambda_rkd >= 0.0)) throw ConfigError("distillation weights must be >= 0");
    if (train_corruption && train_corruption->phase != CorruptionPhase::train)
      throw ConfigError("train_corruption must use phase 'train'");
  }
};

struct EpochRecord {
  int epoch = 0;
  LossBreakdown train;  // averaged over the epoch's samples
  double val_loss = 0.0;
  MetricsReport val_metrics;
  double lr_other = 0.0;
  double lr_router = 0.0;
  double lambda_d = 0.0;
  double grad_norm = 0.0;  // mean pre-clip norm over the epoch's steps
  double wall_seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  std::string stop_reason;
};

struct TrainResult {
  FusionParams<float> params;  // from the best epoch
  TrainLog log;
  std::vector<double> thresholds;  // tuned on the clean validation split
};

template <class T>
ParamRefs<T> param_refs(FusionParams<T>& p) {
  ParamRefs<T> refs;
  p.for_each_param([&](Param<T>& t) { refs.push_back(&t); });
  return refs;
}

inline bool distillation_active(const FusionParams<float>& p) {
  if (!p.variant.distillation_enabled) return false;
  for (const auto& mod : p.modalities)
    if (mod.has_teacher) return true;
  return false;
}

struct Prediction {
  Matrix<double> probs;   // N x C
  Matrix<float> labels;   // N x label_width
  std::vector<std::uint8_t> all_missing;
  std::vector<std::vector<double>> mean_gates;  // [m][k] mean gate over rows with the modality
};

/// Task activation: sigmoid per label or softmax over classes.
inline Matrix<double> activate(const Matrix<float>& logits, TaskKind kind) {
  Matrix<double> out(logits.rows(), logits.cols());
  if (kind == TaskKind::multi_label) {
    for (std::size_t i = 0; i < logits.size(); ++i) out.data()[i] = 1.0 / (1.0 + std::exp(-double(logits.data()[i])));
  } else {
    out = softmax_rows(logits.cast<double>());
  }
  return out;
}

/// Evaluation-mode prediction over `rows`, optionally under test-phase
/// corruption.
inline Prediction predict(const FusionParams<float>& params, const EmbeddingDataset& ds,
                          std::span<const std::size_t> rows, const CorruptionSpec* corruption = nullptr,
                          std::size_t chunk = 512) {
  const std::size_t C = params.num_classes();
  const std::size_t M = params.schema.num_modalities();
  Prediction out;
  out.probs = Matrix<double>(rows.size(), C);
  out.labels = gather_rows(ds.labels, rows);
  out.all_missing.assign(rows.size(), 0);
  out.mean_gates.resize(M);
  std::vector<std::size_t> gate_rows(M, 0);
  for (std::size_t m = 0; m < M; ++m) out.mean_gates[m].assign(params.schema.num_experts(m), 0.0);
  for (std::size_t start = 0; start < rows.size(); start += chunk) {
    const std::size_t stop = std::min(rows.size(), start + chunk);
    auto batch = make_batch<float>(ds, rows.subspan(start, stop - start));
    if (corruption) apply_corruption(batch, ds.schema, *corruption, 0);
    const auto trace = forward(batch, params, false);
    const Matrix<double> p = activate(trace.fused_logits, params.schema.task_kind);
    for (std::size_t i = 0; i < p.rows(); ++i) {
      std::copy_n(p.row(i).data(), C, out.probs.row(start + i).data());
      out.all_missing[start + i] = trace.all_missing[i];
    }
    for (std::size_t m = 0; m < M; ++m)
      for (std::size_t i : trace.modalities[m].rows) {
        ++gate_rows[m];
        for (std::size_t k = 0; k < out.mean_gates[m].size(); ++k) out.mean_gates[m][k] += trace.modalities[m].gates(i, k);
      }
  }
  for (std::size_t m = 0; m < M; ++m)
    for (double& g : out.mean_gates[m]) g = gate_rows[m] ? g / static_cast<double>(gate_rows[m]) : 0.0;
  return out;
}

inline MetricsReport evaluate(const FusionParams<float>& params, const EmbeddingDataset& ds,
                              std::span<const std::size_t> rows, const std::vector<double>& thresholds,
                              const CorruptionSpec* corruption = nullptr) {
  const Prediction p = predict(params, ds, rows, corruption);
  return evaluate_metrics(p.probs, p.labels, ds.schema.task_kind, thresholds);
}

/// Clean validation loss: task loss over all validation samples with at
/// least one modality, plus lambda_D * distillation when requested.
inline double validation_loss(const FusionParams<float>& params, const EmbeddingDataset& ds,
                              std::span<const std::size_t> rows, const TrainConfig& cfg, int epoch) {
  double weighted = 0.0;
  std::size_t counted = 0;
  const bool distill = cfg.monitor_distill_in_val && distillation_active(params);
  for (std::size_t start = 0; start < rows.size(); start += cfg.batch_size) {
    const std::size_t stop = std::min(rows.size(), start + cfg.batch_size);
    const auto batch = make_batch<float>(ds, rows.subspan(start, stop - start));
    const auto trace = forward(batch, params, false);
    if (trace.present.empty()) continue;
    double value;
    if (distill) {
      const auto tp = project_teacher(batch, params, trace);
      value = total_loss(params, trace, trace, &tp, batch.labels, cfg.loss, epoch).first.total;
    } else {
      value = task_loss(trace.fused_logits, batch.labels, params.schema.task_kind, trace.present).value;
    }
    weighted += value * static_cast<double>(trace.present.size());
    counted += trace.present.size();
  }
  if (counted == 0) throw Error("validation split has no sample with an available modality");
  return weighted / static_cast<double>(counted);
}

/// Trains one model. Deterministic given (dataset, config): shuffling,
/// dropout and train-time corruption draw from streams keyed by the seed,
/// the epoch and the batch.
inline TrainResult train(const EmbeddingDataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  const auto train_rows = ds.indices(Split::train);
  const auto val_rows = ds.indices(Split::val);
  if (train_rows.empty()) throw ConfigError("dataset has an empty train split");
  if (val_rows.empty()) throw ConfigError("dataset has an empty validation split");
  if (cfg.train_corruption) cfg.train_corruption->validate(ds.schema.num_modalities());

  FusionParams<float> params = init_params<float>(ds.schema, cfg.variant, cfg.model, cfg.seed);
  params.prior_logits = label_prior_logits<float>(ds, train_rows);
  const bool distill = distillation_active(params);
  if (distill)
    for (std::size_t m = 0; m < ds.schema.num_modalities(); ++m)
      if (params.modalities[m].has_teacher && ds.teacher[m].empty())
        throw ConfigError("distillation enabled but dataset has no teacher matrix for modality " + std::to_string(m));

  std::optional<CorruptionSpec> corruption = cfg.train_corruption;
  if (corruption) corruption->seed = mix_key({corruption->seed, cfg.seed});

  AdamW<float> opt(cfg.optim);
  const ParamRefs<float> refs = param_refs(params);
  EarlyStopper stopper(cfg.early_stop_patience);
  TrainResult result;
  result.log.stop_reason = "max_epochs";
  FusionParams<float> best = params;
  std::vector<std::size_t> order = train_rows;

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr_other = lr_at(epoch, cfg.optim, ParamGroup::other);
    rec.lr_router = lr_at(epoch, cfg.optim, ParamGroup::router);
    rec.train.cos_loss.assign(ds.schema.num_modalities(), 0.0);
    rec.train.rkd_loss.assign(ds.schema.num_modalities(), 0.0);

    order = train_rows;
    Rng shuffle_rng = make_rng({cfg.seed, static_cast<std::uint64_t>(RngPurpose::shuffle), static_cast<std::uint64_t>(epoch)});
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    std::size_t seen = 0, steps = 0;
    double norm_sum = 0.0;
    for (std::size_t start = 0, batch_no = 0; start < order.size(); start += cfg.batch_size, ++batch_no) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      auto batch = make_batch<float>(ds, std::span<const std::size_t>(order).subspan(start, stop - start));
      if (corruption) apply_corruption(batch, ds.schema, *corruption, epoch);
      const std::uint64_t dropout_key = mix_key({cfg.seed, static_cast<std::uint64_t>(RngPurpose::dropout),
                                                 static_cast<std::uint64_t>(epoch), batch_no});
      const auto trace = forward(batch, params, true, dropout_key);
      if (trace.present.empty()) continue;

      std::optional<ForwardTrace<float>> eval_trace;
      const ForwardTrace<float>* student = &trace;
      std::optional<TeacherProjection<float>> tp;
      if (distill) {
        if (cfg.model.dropout > 0.0) {
          eval_trace = forward(batch, params, false);
          student = &*eval_trace;
        }
        tp = project_teacher(batch, params, *student);
      }
      auto [lb, grads] = total_loss(params, trace, *student, tp ? &*tp : nullptr, batch.labels, cfg.loss, epoch);
      if (!std::isfinite(lb.total)) throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));

      params.zero_grad();
      if (student == &trace) {
        backward(params, trace, grads.d_fused, grads.dz_student);
      } else {
        backward(params, trace, grads.d_fused);
        if (lb.lambda_d > 0.0) backward(params, *student, Matrix<float>(), grads.dz_student);
      }
      if (tp && lb.lambda_d > 0.0) project_teacher_backward(params, *tp, grads.dz_teacher);
      norm_sum += clip_global_norm(refs, cfg.optim.clip_norm);
      opt.step(refs, rec.lr_other, rec.lr_router);
      ++steps;

      const double w = static_cast<double>(trace.present.size());
      seen += trace.present.size();
      rec.train.task_loss += w * lb.task_loss;
      rec.train.distill_loss += w * lb.distill_loss;
      rec.train.total += w * lb.total;
      for (std::size_t m = 0; m < lb.cos_loss.size(); ++m) {
        rec.train.cos_loss[m] += w * lb.cos_loss[m];
        rec.train.rkd_loss[m] += w * lb.rkd_loss[m];
      }
      rec.lambda_d = lb.lambda_d;
    }
    if (seen > 0) {
      const double inv = 1.0 / static_cast<double>(seen);
      rec.train.task_loss *= inv;
      rec.train.distill_loss *= inv;
      rec.train.total *= inv;
      for (auto& v : rec.train.cos_loss) v *= inv;
      for (auto& v : rec.train.rkd_loss) v *= inv;
    }
    rec.train.lambda_d = rec.lambda_d;
    rec.grad_norm = steps ? norm_sum / static_cast<double>(steps) : 0.0;

    rec.val_loss = validation_loss(params, ds, val_rows, cfg, epoch);
    if (!std::isfinite(rec.val_loss)) throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
    rec.val_metrics = evaluate(params, ds, val_rows, std::vector<double>(ds.schema.num_classes, 0.5));
    if (cfg.record_timing)
      rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.epochs.push_back(std::move(rec));

    if (stopper.update(epoch, result.log.epochs.back().val_loss)) best = params;
    if (stopper.should_stop(epoch)) {
      result.log.stop_reason = "early_stop";
      break;
    }
  }
  result.log.best_epoch = stopper.best_epoch();
  result.params = std::move(best);
  const Prediction vp = predict(result.params, ds, val_rows);
  result.thresholds = tune_thresholds(vp.probs, vp.labels, ds.schema.task_kind);
  return result;
}

}  // namespace medmix
