#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "medmix/dataset.hpp"
#include "medmix/diffcore.hpp"
#include "medmix/fusion.hpp"

namespace medmix {

template <class T>
struct LossValue {
  double value = 0.0;
  Matrix<T> grad;  // gradient w.r.t. the first argument
};

/// Mean BCE-with-logits (multi-label) or mean softmax cross-entropy
/// (multi-class) over the rows in `rows`. Other rows get zero gradient.
template <class T>
LossValue<T> task_loss(const Matrix<T>& logits, const Matrix<float>& labels, TaskKind kind,
                       std::span<const std::size_t> rows) {
  if (rows.empty()) throw Error("task_loss: empty effective batch");
  const std::size_t C = logits.cols();
  LossValue<T> out{0.0, Matrix<T>(logits.rows(), C)};
  if (kind == TaskKind::multi_label) {
    require_shape(labels.cols() == C, "task_loss multi-label width");
    const double scale = 1.0 / (static_cast<double>(rows.size()) * static_cast<double>(C));
    double acc = 0.0;
    for (std::size_t i : rows)
      for (std::size_t c = 0; c < C; ++c) {
        const double x = logits(i, c);
        const double y = labels(i, c);
        acc += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
        const double sig = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        out.grad(i, c) = static_cast<T>((sig - y) * scale);
      }
    out.value = acc * scale;
  } else {
    require_shape(labels.cols() == 1, "task_loss multi-class width");
    const double scale = 1.0 / static_cast<double>(rows.size());
    double acc = 0.0;
    for (std::size_t i : rows) {
      const auto y = static_cast<std::size_t>(labels(i, 0));
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, static_cast<double>(logits(i, c)));
      double sum = 0.0;
      for (std::size_t c = 0; c < C; ++c) sum += std::exp(logits(i, c) - mx);
      const double lse = mx + std::log(sum);
      acc += lse - logits(i, y);
      for (std::size_t c = 0; c < C; ++c) {
        const double p = std::exp(logits(i, c) - lse);
        out.grad(i, c) = static_cast<T>((p - (c == y ? 1.0 : 0.0)) * scale);
      }
    }
    out.value = acc * scale;
  }
  return out;
}

template <class T>
struct PairLoss {
  double value = 0.0;
  Matrix<T> grad_student;
  Matrix<T> grad_teacher;
};

/// Mean of (1 - cos) over the rows in `rows`; 0 with zero gradient when
/// `rows` is empty.
template <class T>
PairLoss<T> cos_distill(const Matrix<T>& z, const Matrix<T>& zt, std::span<const std::size_t> rows) {
  require_shape(z.same_shape(zt), "cos_distill");
  PairLoss<T> out{0.0, Matrix<T>(z.rows(), z.cols()), Matrix<T>(zt.rows(), zt.cols())};
  if (rows.empty()) return out;
  const Matrix<T> a = gather_rows(z, rows);
  const Matrix<T> b = gather_rows(zt, rows);
  const std::vector<T> cos = cosine_rows(a, b);
  double acc = 0.0;
  for (T c : cos) acc += 1.0 - static_cast<double>(c);
  out.value = acc / static_cast<double>(rows.size());
  std::vector<T> dcos(rows.size(), static_cast<T>(-1.0 / static_cast<double>(rows.size())));
  Matrix<T> da, db;
  cosine_rows_backward(a, b, std::span<const T>(dcos), da, db);
  scatter_rows(da, rows, out.grad_student);
  scatter_rows(db, rows, out.grad_teacher);
  return out;
}

inline constexpr double kRkdMeanFloor = 1e-8;

inline double huber(double x) { return std::abs(x) < 1.0 ? 0.5 * x * x : std::abs(x) - 0.5; }
inline double huber_grad(double x) { return std::abs(x) < 1.0 ? x : (x > 0 ? 1.0 : -1.0); }

/// Distance-wise relational distillation over the rows in `rows`:
/// pairwise distances in each space are divided by their mean nonzero
/// distance and compared with a Huber loss (delta 1), averaged over pairs.
template <class T>
PairLoss<T> rkd_distill(const Matrix<T>& z, const Matrix<T>& zt, std::span<const std::size_t> rows) {
  require_shape(z.rows() == zt.rows(), "rkd_distill");
  PairLoss<T> out{0.0, Matrix<T>(z.rows(), z.cols()), Matrix<T>(zt.rows(), zt.cols())};
  const std::size_t n = rows.size();
  if (n < 2) return out;
  const Matrix<T> ds = pairwise_distances(z, rows);
  const Matrix<T> dt = pairwise_distances(zt, rows);
  auto mean_nonzero = [&](const Matrix<T>& dm, std::size_t& count) {
    double sum = 0.0;
    count = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (dm(i, j) > T{}) {
          sum += dm(i, j);
          ++count;
        }
    return count ? sum / static_cast<double>(count) : 0.0;
  };
  std::size_t ns = 0, nt = 0;
  const double mu_s_raw = mean_nonzero(ds, ns);
  const double mu_t_raw = mean_nonzero(dt, nt);
  const double mu_s = std::max(mu_s_raw, kRkdMeanFloor);
  const double mu_t = std::max(mu_t_raw, kRkdMeanFloor);
  const double pairs = static_cast<double>(n * (n - 1) / 2);

  Matrix<T> gs(n, n), gt(n, n);
  double acc = 0.0, dmu_s = 0.0, dmu_t = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double r = ds(i, j) / mu_s - dt(i, j) / mu_t;
      acc += huber(r);
      const double g = huber_grad(r) / pairs;
      gs(i, j) = static_cast<T>(g / mu_s);
      gt(i, j) = static_cast<T>(-g / mu_t);
      dmu_s += -g * ds(i, j) / (mu_s * mu_s);
      dmu_t += g * dt(i, j) / (mu_t * mu_t);
    }
  out.value = acc / pairs;
  // Chain through the normalizing means (only when not clamped).
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      if (mu_s_raw >= kRkdMeanFloor && ds(i, j) > T{}) gs(i, j) += static_cast<T>(dmu_s / static_cast<double>(ns));
      if (mu_t_raw >= kRkdMeanFloor && dt(i, j) > T{}) gt(i, j) += static_cast<T>(dmu_t / static_cast<double>(nt));
    }
  pairwise_distances_backward(z, rows, ds, gs, out.grad_student);
  pairwise_distances_backward(zt, rows, dt, gt, out.grad_teacher);
  return out;
}

/// lambda_max * min(1, epoch / ramp_epochs); constant when ramp_epochs = 0.
inline double lambda_schedule(double epoch, int ramp_epochs, double lambda_max) {
  if (ramp_epochs <= 0) return lambda_max;
  return lambda_max * std::min(1.0, epoch / static_cast<double>(ramp_epochs));
}

struct LossConfig {
  double lambda_max = 0.3;
  int distill_ramp_epochs = 30;
  double lambda_rkd = 0.05;
};

struct LossBreakdown {
  double task_loss = 0.0;
  std::vector<double> cos_loss;  // per modality
  std::vector<double> rkd_loss;  // per modality
  double distill_loss = 0.0;
  double lambda_d = 0.0;
  double total = 0.0;
};

template <class T>
struct LossGradients {
  Matrix<T> d_fused;                   // B x C, for the task trace
  std::vector<Matrix<T>> dz_student;   // [m] B x d, for the distillation trace
  std::vector<Matrix<T>> dz_teacher;   // [m] B x d
};

/// Task loss on `trace` plus lambda_D(epoch) times the availability-gated
/// distillation loss between `distill_trace` (the student z^(m)) and the
/// projected teachers. Distillation is skipped entirely when the variant
/// disables it or no teacher head exists.
template <class T>
std::pair<LossBreakdown, LossGradients<T>> total_loss(const FusionParams<T>& params, const ForwardTrace<T>& trace,
                                                      const ForwardTrace<T>& distill_trace,
                                                      const TeacherProjection<T>* teacher,
                                                      const Matrix<float>& labels, const LossConfig& cfg,
                                                      double epoch) {
  const std::size_t M = params.schema.num_modalities();
  LossBreakdown lb;
  LossGradients<T> grads;
  auto task = task_loss(trace.fused_logits, labels, params.schema.task_kind, trace.present);
  lb.task_loss = task.value;
  grads.d_fused = std::move(task.grad);
  lb.cos_loss.assign(M, 0.0);
  lb.rkd_loss.assign(M, 0.0);
  grads.dz_student.resize(M);
  grads.dz_teacher.resize(M);

  bool any_teacher = false;
  for (const auto& mod : params.modalities) any_teacher |= mod.has_teacher;
  if (params.variant.distillation_enabled && any_teacher && teacher) {
    lb.lambda_d = lambda_schedule(epoch, cfg.distill_ramp_epochs, cfg.lambda_max);
    for (std::size_t m = 0; m < M; ++m) {
      if (!params.modalities[m].has_teacher) continue;
      const auto& rows = distill_trace.modalities[m].rows;
      const auto& z = distill_trace.modalities[m].z;
      const auto& zt = teacher->z[m];
      auto cl = cos_distill(z, zt, rows);
      auto rl = rkd_distill(z, zt, rows);
      lb.cos_loss[m] = cl.value;
      lb.rkd_loss[m] = rl.value;
      lb.distill_loss += cl.value + cfg.lambda_rkd * rl.value;
      if (lb.lambda_d == 0.0 || rows.empty()) continue;
      const T ws = static_cast<T>(lb.lambda_d);
      const T wr = static_cast<T>(lb.lambda_d * cfg.lambda_rkd);
      Matrix<T> gz(z.rows(), z.cols()), gt(z.rows(), z.cols());
      for (std::size_t i = 0; i < gz.size(); ++i) {
        gz.data()[i] = ws * cl.grad_student.data()[i] + wr * rl.grad_student.data()[i];
        gt.data()[i] = ws * cl.grad_teacher.data()[i] + wr * rl.grad_teacher.data()[i];
      }
      grads.dz_student[m] = std::move(gz);
      grads.dz_teacher[m] = std::move(gt);
    }
  }
  lb.total = lb.task_loss + lb.lambda_d * lb.distill_loss;
  return {lb, std::move(grads)};
}

}  // namespace medmix
