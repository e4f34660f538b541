#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "medmix/error.hpp"
#include "medmix/tensor.hpp"

namespace medmix {

enum class TaskKind : std::uint8_t { multi_label, multi_class };

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

inline const char* to_string(TaskKind k) {
  return k == TaskKind::multi_label ? "multi_label" : "multi_class";
}

inline TaskKind task_kind_from_string(const std::string& s) {
  if (s == "multi_label") return TaskKind::multi_label;
  if (s == "multi_class") return TaskKind::multi_class;
  throw ValidationError("task_kind", "unknown task kind '" + s + "'");
}

struct ExpertSpec {
  std::size_t modality_id = 0;
  std::size_t expert_id = 0;
  std::size_t dim = 0;
  std::string name;
};

struct ModalitySpec {
  std::string name;
  std::vector<ExpertSpec> experts;
  std::size_t teacher_dim = 0;  // 0 = no teacher embedding for this modality
};

/// Shape information shared by a dataset, a model and a checkpoint.
struct Schema {
  std::vector<ModalitySpec> modalities;
  std::size_t num_classes = 0;
  TaskKind task_kind = TaskKind::multi_class;

  std::size_t num_modalities() const { return modalities.size(); }
  std::size_t num_experts(std::size_t m) const { return modalities[m].experts.size(); }

  /// Column of expert (m, k) in the flat mask layout ordered by (m, k).
  std::size_t expert_column(std::size_t m, std::size_t k) const {
    std::size_t off = 0;
    for (std::size_t i = 0; i < m; ++i) off += modalities[i].experts.size();
    return off + k;
  }

  std::size_t total_experts() const {
    std::size_t n = 0;
    for (const auto& mod : modalities) n += mod.experts.size();
    return n;
  }

  bool has_teachers() const {
    for (const auto& mod : modalities)
      if (mod.teacher_dim == 0) return false;
    return !modalities.empty();
  }

  std::vector<ExpertSpec> experts() const {
    std::vector<ExpertSpec> out;
    for (const auto& mod : modalities) out.insert(out.end(), mod.experts.begin(), mod.experts.end());
    return out;
  }

  /// Width of a label row on disk and in memory.
  std::size_t label_width() const { return task_kind == TaskKind::multi_label ? num_classes : 1; }

  void validate() const {
    if (modalities.empty()) throw ValidationError("modalities", "at least one modality is required");
    if (num_classes == 0) throw ValidationError("num_classes", "must be >= 1");
    for (std::size_t m = 0; m < modalities.size(); ++m) {
      const auto& mod = modalities[m];
      const std::string where = "modalities[" + std::to_string(m) + "]";
      if (mod.experts.empty()) throw ValidationError(where, "every modality needs at least one expert");
      for (std::size_t k = 0; k < mod.experts.size(); ++k) {
        const auto& e = mod.experts[k];
        const std::string ew = where + ".experts[" + std::to_string(k) + "]";
        if (e.dim == 0) throw ValidationError(ew + ".dim", "must be >= 1");
        if (e.modality_id != m || e.expert_id != k)
          throw ValidationError(ew, "(modality_id, expert_id) must equal its position");
      }
    }
  }

  friend bool operator==(const Schema& a, const Schema& b) {
    if (a.num_classes != b.num_classes || a.task_kind != b.task_kind ||
        a.modalities.size() != b.modalities.size())
      return false;
    for (std::size_t m = 0; m < a.modalities.size(); ++m) {
      const auto& x = a.modalities[m];
      const auto& y = b.modalities[m];
      if (x.name != y.name || x.teacher_dim != y.teacher_dim || x.experts.size() != y.experts.size())
        return false;
      for (std::size_t k = 0; k < x.experts.size(); ++k)
        if (x.experts[k].dim != y.experts[k].dim || x.experts[k].name != y.experts[k].name) return false;
    }
    return true;
  }
};

class EmbeddingDataset;

/// Read-only view of one sample.
class SampleView {
 public:
  SampleView(const EmbeddingDataset& ds, std::size_t index) : ds_(&ds), index_(index) {}
  std::size_t index() const { return index_; }
  std::span<const float> expert(std::size_t m, std::size_t k) const;
  bool expert_mask(std::size_t m, std::size_t k) const;
  bool available(std::size_t m) const;
  std::span<const float> teacher(std::size_t m) const;
  std::span<const float> labels() const;
  Split split() const;

 private:
  const EmbeddingDataset* ds_;
  std::size_t index_;
};

/// Per-sample, per-expert embeddings stored column-wise: one N x d_k
/// matrix per expert, which is also the on-disk layout.
class EmbeddingDataset {
 public:
  Schema schema;
  std::vector<std::vector<Matrix<float>>> embeddings;  // [m][k] -> N x d_k
  Mask expert_mask;                                     // N x total_experts, (m,k) order
  Mask available;                                       // N x M
  std::vector<Matrix<float>> teacher;                   // [m] -> N x d_T (empty when d_T = 0)
  Matrix<float> labels;                                 // N x C (multi-label) or N x 1 class index
  std::vector<Split> split;

  std::size_t num_samples() const { return split.size(); }
  SampleView sample(std::size_t i) const { return SampleView(*this, i); }

  /// Allocates zeroed storage for `n` samples matching `schema`.
  static EmbeddingDataset allocate(const Schema& s, std::size_t n) {
    EmbeddingDataset ds;
    ds.schema = s;
    ds.embeddings.resize(s.num_modalities());
    ds.teacher.resize(s.num_modalities());
    for (std::size_t m = 0; m < s.num_modalities(); ++m) {
      for (const auto& e : s.modalities[m].experts) ds.embeddings[m].emplace_back(n, e.dim);
      if (s.modalities[m].teacher_dim > 0) ds.teacher[m] = Matrix<float>(n, s.modalities[m].teacher_dim);
    }
    ds.expert_mask = Mask(n, s.total_experts());
    ds.available = Mask(n, s.num_modalities());
    ds.labels = Matrix<float>(n, s.label_width());
    ds.split.assign(n, Split::train);
    return ds;
  }

  /// Sets a^(m) to the OR of the expert masks of every modality.
  void derive_availability() {
    available = Mask(num_samples(), schema.num_modalities());
    for (std::size_t i = 0; i < num_samples(); ++i)
      for (std::size_t m = 0; m < schema.num_modalities(); ++m) {
        std::uint8_t any = 0;
        for (std::size_t k = 0; k < schema.num_experts(m); ++k)
          any |= expert_mask(i, schema.expert_column(m, k));
        available(i, m) = any ? 1 : 0;
      }
  }

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
      if (split[i] == s) out.push_back(i);
    return out;
  }

  /// Class index of sample i (multi-class) or the first positive label.
  std::size_t class_of(std::size_t i) const {
    if (schema.task_kind == TaskKind::multi_class) return static_cast<std::size_t>(labels(i, 0));
    for (std::size_t c = 0; c < schema.num_classes; ++c)
      if (labels(i, c) > 0.5f) return c;
    return 0;
  }

  /// Throws ValidationError naming the first offending field.
  void validate() const {
    schema.validate();
    const std::size_t n = num_samples();
    const std::size_t mcount = schema.num_modalities();
    if (embeddings.size() != mcount) throw ValidationError("embeddings", "modality count mismatch");
    for (std::size_t m = 0; m < mcount; ++m) {
      if (embeddings[m].size() != schema.num_experts(m))
        throw ValidationError("embeddings[" + std::to_string(m) + "]", "expert count mismatch");
      for (std::size_t k = 0; k < schema.num_experts(m); ++k) {
        const auto& mat = embeddings[m][k];
        const std::string where = "embeddings[" + std::to_string(m) + "][" + std::to_string(k) + "]";
        if (mat.rows() != n || mat.cols() != schema.modalities[m].experts[k].dim)
          throw ValidationError(where, "shape does not match schema");
        if (!mat.all_finite()) throw ValidationError(where, "non-finite value");
      }
    }
    if (expert_mask.rows() != n || expert_mask.cols() != schema.total_experts())
      throw ValidationError("expert_mask", "shape does not match schema");
    if (available.rows() != n || available.cols() != mcount)
      throw ValidationError("modality_available", "shape does not match schema");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t m = 0; m < mcount; ++m) {
        std::uint8_t any = 0;
        for (std::size_t k = 0; k < schema.num_experts(m); ++k) {
          const std::uint8_t b = expert_mask(i, schema.expert_column(m, k));
          if (b > 1) throw ValidationError("expert_mask", "mask bytes must be 0 or 1");
          any |= b;
        }
        if (available(i, m) > 1) throw ValidationError("modality_available", "bytes must be 0 or 1");
        if (any != available(i, m))
          throw ValidationError("modality_available",
                                "sample " + std::to_string(i) + " modality " + std::to_string(m) +
                                    ": availability disagrees with expert masks");
      }
    if (teacher.size() != mcount) throw ValidationError("teacher", "modality count mismatch");
    for (std::size_t m = 0; m < mcount; ++m) {
      const std::size_t dt = schema.modalities[m].teacher_dim;
      const std::string where = "teacher[" + std::to_string(m) + "]";
      if (dt == 0) {
        if (!teacher[m].empty()) throw ValidationError(where, "present but teacher_dim is 0");
        continue;
      }
      if (teacher[m].rows() != n || teacher[m].cols() != dt)
        throw ValidationError(where, "shape does not match schema");
      if (!teacher[m].all_finite()) throw ValidationError(where, "non-finite value");
      for (std::size_t i = 0; i < n; ++i) {
        if (available(i, m)) continue;
        for (float v : teacher[m].row(i))
          if (v != 0.0f)
            throw ValidationError(where, "sample " + std::to_string(i) +
                                             ": teacher row of a missing modality must be zero");
      }
    }
    if (labels.rows() != n || labels.cols() != schema.label_width())
      throw ValidationError("labels", "shape does not match schema");
    for (std::size_t i = 0; i < n; ++i) {
      if (schema.task_kind == TaskKind::multi_class) {
        const float v = labels(i, 0);
        if (!(v >= 0.0f) || v != std::floor(v) || v >= static_cast<float>(schema.num_classes))
          throw ValidationError("labels", "class index out of range at sample " + std::to_string(i));
      } else {
        for (float v : labels.row(i))
          if (v != 0.0f && v != 1.0f)
            throw ValidationError("labels", "multi-label entries must be 0 or 1 at sample " + std::to_string(i));
      }
    }
    for (Split s : split)
      if (static_cast<std::uint8_t>(s) > 2) throw ValidationError("split_assignment", "tag must be 0, 1 or 2");
  }

  friend bool operator==(const EmbeddingDataset& a, const EmbeddingDataset& b) {
    return a.schema == b.schema && a.embeddings == b.embeddings && a.expert_mask == b.expert_mask &&
           a.available == b.available && a.teacher == b.teacher && a.labels == b.labels && a.split == b.split;
  }
};

inline std::span<const float> SampleView::expert(std::size_t m, std::size_t k) const {
  return ds_->embeddings[m][k].row(index_);
}
inline bool SampleView::expert_mask(std::size_t m, std::size_t k) const {
  return ds_->expert_mask(index_, ds_->schema.expert_column(m, k)) != 0;
}
inline bool SampleView::available(std::size_t m) const { return ds_->available(index_, m) != 0; }
inline std::span<const float> SampleView::teacher(std::size_t m) const {
  if (ds_->teacher[m].empty()) return {};
  return ds_->teacher[m].row(index_);
}
inline std::span<const float> SampleView::labels() const { return ds_->labels.row(index_); }
inline Split SampleView::split() const { return ds_->split[index_]; }

}  // namespace medmix
