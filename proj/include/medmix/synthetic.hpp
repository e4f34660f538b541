#pragma once

// Synthetic multimodal embeddings with planted structure.
//
// Generative model, per sample:
//   y ~ Uniform{0..C-1}
//   u_m = snr_m * mu_m[y] + eps,        eps ~ N(0, I_L)
//   e_mk = inf_mk * (A_mk u_m) + (1 - inf_mk) * noise,   noise ~ N(0, I)
//   t_m = B_m u_m + teacher_noise * N(0, I)
// mu_m rows come from a seeded random orthonormal L x L matrix; A_mk and
// B_m are fixed Gaussian maps scaled by 1/sqrt(L). A modality is dropped
// with probability missing_rate (all experts masked, content zeroed);
// surviving modalities lose individual experts with expert_missing_rate.

#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "medmix/dataset.hpp"
#include "medmix/rng.hpp"

namespace medmix {

struct SyntheticModality {
  std::string name;
  std::vector<std::size_t> expert_dims;
  std::vector<double> informativeness;  // one per expert, in [0, 1]
  double snr = 1.0;
  double missing_rate = 0.0;
  double expert_missing_rate = 0.0;
  std::size_t teacher_dim = 0;  // 0 -> 2 * latent_dim when teachers are enabled
};

struct SyntheticSpec {
  std::size_t num_samples = 1000;
  std::size_t num_classes = 2;
  TaskKind task_kind = TaskKind::multi_class;
  std::size_t latent_dim = 16;
  std::vector<SyntheticModality> modalities;
  bool with_teacher = true;
  double teacher_noise = 0.1;
  std::array<double, 3> split = {0.65, 0.15, 0.20};
  std::uint64_t seed = 0;

  bool is_null() const {
    for (const auto& m : modalities)
      if (m.snr != 0.0) return false;
    return true;
  }

  void validate() const {
    if (num_samples == 0) throw ValidationError("num_samples", "must be >= 1");
    if (num_classes == 0) throw ValidationError("num_classes", "must be >= 1");
    if (latent_dim == 0) throw ValidationError("latent_dim", "must be >= 1");
    if (num_classes > latent_dim)
      throw ValidationError("num_classes", "orthogonal prototypes need num_classes <= latent_dim");
    if (modalities.empty()) throw ValidationError("modalities", "at least one modality is required");
    for (std::size_t m = 0; m < modalities.size(); ++m) {
      const auto& mod = modalities[m];
      const std::string w = "modalities[" + std::to_string(m) + "]";
      if (mod.expert_dims.empty()) throw ValidationError(w + ".expert_dims", "need at least one expert");
      if (mod.informativeness.size() != mod.expert_dims.size())
        throw ValidationError(w + ".informativeness", "one value per expert required");
      for (double v : mod.informativeness)
        if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(w + ".informativeness", "must lie in [0,1]");
      for (std::size_t d : mod.expert_dims)
        if (d == 0) throw ValidationError(w + ".expert_dims", "must be >= 1");
      if (!(mod.snr >= 0.0)) throw ValidationError(w + ".snr", "must be >= 0");
      if (!(mod.missing_rate >= 0.0 && mod.missing_rate <= 1.0))
        throw ValidationError(w + ".missing_rate", "must lie in [0,1]");
      if (!(mod.expert_missing_rate >= 0.0 && mod.expert_missing_rate <= 1.0))
        throw ValidationError(w + ".expert_missing_rate", "must lie in [0,1]");
    }
    if (!(teacher_noise >= 0.0)) throw ValidationError("teacher_noise", "must be >= 0");
    for (double f : split)
      if (!(f >= 0.0 && f <= 1.0)) throw ValidationError("split", "fractions must lie in [0,1]");
    if (std::abs(split[0] + split[1] + split[2] - 1.0) > 1e-9)
      throw ValidationError("split", "fractions must sum to 1");
  }
};

/// Target split sizes: floor each share, then hand the remainder out by
/// largest fractional part (ties to the earlier split).
inline std::array<std::size_t, 3> split_sizes(std::size_t n, const std::array<double, 3>& fractions) {
  std::array<std::size_t, 3> sizes{};
  std::array<double, 3> frac{};
  std::size_t assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double exact = fractions[s] * static_cast<double>(n);
    sizes[s] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    frac[s] = exact - static_cast<double>(sizes[s]);
    assigned += sizes[s];
  }
  while (assigned < n) {
    int best = 0;
    for (int s = 1; s < 3; ++s)
      if (frac[s] > frac[best]) best = s;
    ++sizes[best];
    frac[best] = -1.0;
    ++assigned;
  }
  return sizes;
}

/// Seeded split assignment. Multi-class data is stratified: samples are
/// shuffled, grouped by class, then dealt splits in an evenly interleaved
/// sequence that hits the global sizes exactly.
inline void partition(EmbeddingDataset& ds, const std::array<double, 3>& fractions, std::uint64_t seed) {
  for (double f : fractions)
    if (!(f >= 0.0)) throw ValidationError("fractions", "must be non-negative");
  if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9)
    throw ValidationError("fractions", "must sum to 1");
  const std::size_t n = ds.num_samples();
  const auto sizes = split_sizes(n, fractions);
  for (int s = 0; s < 3; ++s)
    if (fractions[s] > 0.0 && sizes[s] == 0)
      throw ValidationError("fractions", "split " + std::to_string(s) + " would be empty at N=" + std::to_string(n));

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng({seed, static_cast<std::uint64_t>(RngPurpose::partition)});
  std::shuffle(order.begin(), order.end(), rng);
  if (ds.schema.task_kind == TaskKind::multi_class)
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return ds.class_of(a) < ds.class_of(b); });

  std::array<std::size_t, 3> given{};
  for (std::size_t pos = 0; pos < n; ++pos) {
    int pick = -1;
    double best = -1e300;
    for (int s = 0; s < 3; ++s) {
      if (given[s] >= sizes[s]) continue;
      const double deficit = static_cast<double>(sizes[s]) * static_cast<double>(pos + 1) / static_cast<double>(n) -
                             static_cast<double>(given[s]);
      if (deficit > best) {
        best = deficit;
        pick = s;
      }
    }
    ds.split[order[pos]] = static_cast<Split>(pick);
    ++given[pick];
  }
}

namespace detail {

inline Eigen::MatrixXd gaussian(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = nd(rng) * scale;
  return m;
}

}  // namespace detail

inline Schema synthetic_schema(const SyntheticSpec& spec) {
  Schema s;
  s.num_classes = spec.num_classes;
  s.task_kind = spec.task_kind;
  for (std::size_t m = 0; m < spec.modalities.size(); ++m) {
    const auto& sm = spec.modalities[m];
    ModalitySpec mod;
    mod.name = sm.name.empty() ? "modality" + std::to_string(m) : sm.name;
    for (std::size_t k = 0; k < sm.expert_dims.size(); ++k)
      mod.experts.push_back({m, k, sm.expert_dims[k], "expert" + std::to_string(k)});
    if (spec.with_teacher) mod.teacher_dim = sm.teacher_dim > 0 ? sm.teacher_dim : 2 * spec.latent_dim;
    s.modalities.push_back(std::move(mod));
  }
  return s;
}

inline EmbeddingDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  const Schema schema = synthetic_schema(spec);
  const std::size_t n = spec.num_samples;
  const std::size_t L = spec.latent_dim;
  const auto Li = static_cast<Eigen::Index>(L);
  const double map_scale = 1.0 / std::sqrt(static_cast<double>(L));

  // Fixed structure: prototypes, expert maps, teacher maps.
  Rng structure = make_rng({spec.seed, static_cast<std::uint64_t>(RngPurpose::synthetic), 0});
  std::vector<Eigen::MatrixXd> prototypes;
  std::vector<std::vector<Eigen::MatrixXd>> expert_maps;
  std::vector<Eigen::MatrixXd> teacher_maps;
  for (std::size_t m = 0; m < schema.num_modalities(); ++m) {
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(detail::gaussian(L, L, 1.0, structure));
    Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(Li, Li);
    prototypes.push_back(q.transpose());  // rows orthonormal
    std::vector<Eigen::MatrixXd> maps;
    for (std::size_t k = 0; k < schema.num_experts(m); ++k)
      maps.push_back(detail::gaussian(schema.modalities[m].experts[k].dim, L, map_scale, structure));
    expert_maps.push_back(std::move(maps));
    teacher_maps.push_back(schema.modalities[m].teacher_dim > 0
                               ? detail::gaussian(schema.modalities[m].teacher_dim, L, map_scale, structure)
                               : Eigen::MatrixXd());
  }

  EmbeddingDataset ds = EmbeddingDataset::allocate(schema, n);
  Rng draws = make_rng({spec.seed, static_cast<std::uint64_t>(RngPurpose::synthetic), 1});
  std::uniform_int_distribution<std::size_t> cls(0, spec.num_classes - 1);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Eigen::VectorXd u(Li);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = cls(draws);
    if (spec.task_kind == TaskKind::multi_class) {
      ds.labels(i, 0) = static_cast<float>(y);
    } else {
      ds.labels(i, y) = 1.0f;
    }
    for (std::size_t m = 0; m < schema.num_modalities(); ++m) {
      const auto& sm = spec.modalities[m];
      for (Eigen::Index j = 0; j < Li; ++j) u(j) = nd(draws);
      u += sm.snr * prototypes[m].row(static_cast<Eigen::Index>(y)).transpose();
      const bool modality_present = unit(draws) >= sm.missing_rate;
      for (std::size_t k = 0; k < schema.num_experts(m); ++k) {
        const bool expert_present = modality_present && unit(draws) >= sm.expert_missing_rate;
        const Eigen::VectorXd view = expert_maps[m][k] * u;
        const double inf = sm.informativeness[k];
        auto row = ds.embeddings[m][k].row(i);
        for (std::size_t c = 0; c < row.size(); ++c) {
          const double noise = nd(draws);
          row[c] = expert_present
                       ? static_cast<float>(inf * view(static_cast<Eigen::Index>(c)) + (1.0 - inf) * noise)
                       : 0.0f;
        }
        ds.expert_mask(i, schema.expert_column(m, k)) = expert_present ? 1 : 0;
      }
      if (!teacher_maps[m].size()) continue;
      const Eigen::VectorXd t = teacher_maps[m] * u;
      auto trow = ds.teacher[m].row(i);
      for (std::size_t c = 0; c < trow.size(); ++c) {
        const double noise = nd(draws);
        trow[c] = static_cast<float>(t(static_cast<Eigen::Index>(c)) + spec.teacher_noise * noise);
      }
    }
  }
  ds.derive_availability();
  for (std::size_t m = 0; m < schema.num_modalities(); ++m) {
    if (ds.teacher[m].empty()) continue;
    for (std::size_t i = 0; i < n; ++i)
      if (!ds.available(i, m)) std::ranges::fill(ds.teacher[m].row(i), 0.0f);
  }
  partition(ds, spec.split, spec.seed);
  ds.validate();
  return ds;
}

}  // namespace medmix
