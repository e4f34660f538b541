#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "medmix/fusion.hpp"
#include "medmix/losses.hpp"
#include "medmix/synthetic.hpp"

namespace medmix::testkit {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag)
      : path_(std::filesystem::temp_directory_path() / ("medmix_test_" + tag + "_" + std::to_string(::getpid()))) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }

  operator const std::filesystem::path&() const { return path_; }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::filesystem::path& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

inline TempDir temp_dir(const std::string& tag) { return TempDir(tag); }

template <class T>
Matrix<T> random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix<T> m(r, c);
  for (auto& v : m.values()) v = static_cast<T>(n(rng));
  return m;
}

/// Three modalities, two to three experts each, teachers on, moderate
/// missingness at both levels.
inline SyntheticSpec small_spec(std::uint64_t seed = 7, std::size_t n = 120,
                                TaskKind kind = TaskKind::multi_class, std::size_t classes = 3) {
  SyntheticSpec s;
  s.num_samples = n;
  s.num_classes = classes;
  s.task_kind = kind;
  s.latent_dim = 6;
  s.seed = seed;
  s.modalities = {
      SyntheticModality{"img", {10, 7}, {1.0, 0.3}, 2.0, 0.3, 0.3, 5},
      SyntheticModality{"txt", {6, 9, 5}, {0.0, 1.0, 0.5}, 1.0, 0.3, 0.3, 0},
      SyntheticModality{"ehr", {8}, {1.0}, 0.5, 0.3, 0.0, 4},
  };
  return s;
}

inline ModelConfig small_model(std::size_t d = 5, double dropout = 0.0) {
  ModelConfig c;
  c.latent_dim = d;
  c.dropout = dropout;
  return c;
}

/// Full objective for one batch in evaluation mode (deterministic), with
/// gradients accumulated into `params` when `with_grad`.
template <class T>
std::pair<LossBreakdown, ForwardTrace<T>> objective(FusionParams<T>& params, const Batch<T>& batch,
                                                    const LossConfig& cfg, double epoch, bool with_grad) {
  auto trace = forward(batch, params, false);
  std::optional<TeacherProjection<T>> tp;
  bool any_teacher = false;
  for (const auto& m : params.modalities) any_teacher |= m.has_teacher;
  if (params.variant.distillation_enabled && any_teacher) tp = project_teacher(batch, params, trace);
  auto [lb, grads] = total_loss(params, trace, trace, tp ? &*tp : nullptr, batch.labels, cfg, epoch);
  if (with_grad) {
    params.zero_grad();
    backward(params, trace, grads.d_fused, grads.dz_student);
    if (tp) project_teacher_backward(params, *tp, grads.dz_teacher);
  }
  return {lb, std::move(trace)};
}

/// Rows that have at least one modality available.
inline std::vector<std::size_t> rows_with_any_modality(const EmbeddingDataset& ds) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < ds.num_samples(); ++i)
    for (std::size_t m = 0; m < ds.schema.num_modalities(); ++m)
      if (ds.available(i, m)) {
        out.push_back(i);
        break;
      }
  return out;
}

}  // namespace medmix::testkit
