#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "medmix/diffcore.hpp"
#include "medmix/error.hpp"

namespace medmix {

struct OptimizerConfig {
  double base_lr = 1e-5;
  double router_lr_factor = 0.3;
  double weight_decay = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 1.0;
  int warmup_epochs = 50;
};

/// Learning rate of `group` at `epoch`: linear per-epoch warmup,
/// min(1, (epoch + 1) / warmup), then constant.
inline double lr_at(int epoch, const OptimizerConfig& cfg, ParamGroup group) {
  const double factor =
      cfg.warmup_epochs <= 0 ? 1.0 : std::min(1.0, static_cast<double>(epoch + 1) / cfg.warmup_epochs);
  return factor * cfg.base_lr * (group == ParamGroup::router ? cfg.router_lr_factor : 1.0);
}

template <class T>
using ParamRefs = std::vector<Param<T>*>;

/// L2 norm over every gradient; if it exceeds `max_norm` all gradients
/// are scaled by max_norm / norm. Returns the pre-clip norm.
template <class T>
double clip_global_norm(const ParamRefs<T>& params, double max_norm) {
  if (!(max_norm > 0.0)) throw Error("clip_global_norm: max_norm must be positive");
  double sq = 0.0;
  for (const auto* p : params)
    for (T g : p->grad.values()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const T scale = static_cast<T>(max_norm / norm);
    for (auto* p : params)
      for (T& g : p->grad.values()) g *= scale;
  }
  return norm;
}

/// AdamW with decoupled weight decay and bias-corrected moments.
template <class T>
class AdamW {
 public:
  explicit AdamW(const OptimizerConfig& cfg) : cfg_(cfg) {}

  void step(const ParamRefs<T>& params, double lr_other, double lr_router) {
    if (first_.empty()) {
      for (const auto* p : params) {
        first_.emplace_back(p->value.rows(), p->value.cols());
        second_.emplace_back(p->value.rows(), p->value.cols());
      }
    }
    if (first_.size() != params.size()) throw Error("AdamW: parameter list changed between steps");
    for (const auto* p : params)
      if (!p->grad.all_finite()) throw NumericError("non-finite gradient in " + p->name);
    ++steps_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto* p = params[i];
      const double lr = p->group == ParamGroup::router ? lr_router : lr_other;
      const T decay = static_cast<T>(1.0 - lr * cfg_.weight_decay);
      T* w = p->value.data();
      const T* g = p->grad.data();
      T* m = first_[i].data();
      T* v = second_[i].data();
      for (std::size_t j = 0; j < p->value.size(); ++j) {
        w[j] *= decay;
        m[j] = static_cast<T>(b1) * m[j] + static_cast<T>(1.0 - b1) * g[j];
        v[j] = static_cast<T>(b2) * v[j] + static_cast<T>(1.0 - b2) * g[j] * g[j];
        const T mhat = m[j] / static_cast<T>(bc1);
        const T vhat = v[j] / static_cast<T>(bc2);
        w[j] -= static_cast<T>(lr) * mhat / (std::sqrt(vhat) + static_cast<T>(cfg_.adam_eps));
      }
    }
  }

  std::uint64_t steps() const { return steps_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Matrix<T>> first_, second_;
  std::uint64_t steps_ = 0;
};

/// Validation-loss early stopping. A new best needs a strictly lower loss,
/// so ties keep the earlier epoch.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {}

  /// Returns true when `loss` is a new minimum.
  bool update(int epoch, double loss) {
    if (best_epoch_ < 0 || loss < best_loss_) {
      best_loss_ = loss;
      best_epoch_ = epoch;
      return true;
    }
    return false;
  }

  bool should_stop(int epoch) const { return best_epoch_ >= 0 && epoch - best_epoch_ >= patience_; }
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }

 private:
  int patience_;
  int best_epoch_ = -1;
  double best_loss_ = std::numeric_limits<double>::infinity();
};

}  // namespace medmix
