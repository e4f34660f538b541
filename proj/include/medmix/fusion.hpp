#pragma once

// Two-level fusion model.
//
// Intra-modality: each expert embedding is refined by a residual
// bottleneck adapter, projected to the shared width d through
// Linear -> LayerNorm -> GELU -> Dropout, scored by a router shared across
// the experts of its modality, and aggregated with a masked softmax.
//
// Inter-modality: each modality representation feeds its own classifier
// head; a scorer per modality produces a fusion score and the fused logits
// are the masked-softmax weighted sum of the per-modality logits. Baseline
// fusers (mean, max, concat, attention) replace this second level.
//
// Masked experts and unavailable modalities are never read: every op
// gathers the rows that are present, so stored content behind a zero mask
// cannot reach any output or gradient.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "medmix/dataset.hpp"
#include "medmix/diffcore.hpp"
#include "medmix/rng.hpp"
#include "medmix/tensor.hpp"

namespace medmix {

enum class IntraMode : std::uint8_t { learned_router, uniform_mean, best_expert_only };
enum class FusionMode : std::uint8_t { medmix, mean_avg, concat, max, attention };

inline const char* to_string(IntraMode m) {
  switch (m) {
    case IntraMode::learned_router: return "learned_router";
    case IntraMode::uniform_mean: return "uniform_mean";
    case IntraMode::best_expert_only: return "best_expert_only";
  }
  return "?";
}

inline const char* to_string(FusionMode m) {
  switch (m) {
    case FusionMode::medmix: return "medmix";
    case FusionMode::mean_avg: return "mean_avg";
    case FusionMode::concat: return "concat";
    case FusionMode::max: return "max";
    case FusionMode::attention: return "attention";
  }
  return "?";
}

inline IntraMode intra_mode_from_string(const std::string& s) {
  if (s == "learned_router") return IntraMode::learned_router;
  if (s == "uniform_mean") return IntraMode::uniform_mean;
  if (s == "best_expert_only") return IntraMode::best_expert_only;
  throw ConfigError("unknown intra_mode '" + s + "'");
}

inline FusionMode fusion_mode_from_string(const std::string& s) {
  if (s == "medmix") return FusionMode::medmix;
  if (s == "mean_avg") return FusionMode::mean_avg;
  if (s == "concat") return FusionMode::concat;
  if (s == "max") return FusionMode::max;
  if (s == "attention") return FusionMode::attention;
  throw ConfigError("unknown fusion_mode '" + s + "'");
}

/// Structural variant of the model (ablations and baselines).
struct VariantSpec {
  IntraMode intra_mode = IntraMode::learned_router;
  std::vector<std::size_t> best_expert;                      // per modality, best_expert_only
  std::vector<std::vector<std::uint8_t>> experts_enabled;    // [m][k]; empty = all enabled
  std::vector<std::uint8_t> modalities_enabled;              // [m]; empty = all enabled
  bool distillation_enabled = true;
  FusionMode fusion_mode = FusionMode::medmix;

  bool modality_enabled(std::size_t m) const {
    return modalities_enabled.empty() || modalities_enabled.at(m) != 0;
  }

  bool expert_enabled(std::size_t m, std::size_t k) const {
    if (!modality_enabled(m)) return false;
    if (!experts_enabled.empty() && experts_enabled.at(m).at(k) == 0) return false;
    if (intra_mode == IntraMode::best_expert_only) return best_expert.at(m) == k;
    return true;
  }

  void validate(const Schema& s) const {
    const std::size_t mcount = s.num_modalities();
    if (!modalities_enabled.empty() && modalities_enabled.size() != mcount)
      throw ConfigError("variant.modalities_enabled: one entry per modality required");
    if (!experts_enabled.empty()) {
      if (experts_enabled.size() != mcount) throw ConfigError("variant.experts_enabled: one row per modality required");
      for (std::size_t m = 0; m < mcount; ++m)
        if (experts_enabled[m].size() != s.num_experts(m))
          throw ConfigError("variant.experts_enabled[" + std::to_string(m) + "]: one entry per expert required");
    }
    if (intra_mode == IntraMode::best_expert_only) {
      if (best_expert.size() != mcount) throw ConfigError("variant.best_expert: one index per modality required");
      for (std::size_t m = 0; m < mcount; ++m)
        if (best_expert[m] >= s.num_experts(m)) throw ConfigError("variant.best_expert: index out of range");
    }
    bool any_modality = false;
    for (std::size_t m = 0; m < mcount; ++m) {
      if (!modality_enabled(m)) continue;
      any_modality = true;
      bool any_expert = false;
      for (std::size_t k = 0; k < s.num_experts(m); ++k) any_expert |= expert_enabled(m, k);
      if (!any_expert)
        throw ConfigError("variant: modality " + std::to_string(m) + " is enabled but has no enabled expert");
    }
    if (!any_modality) throw ConfigError("variant: at least one modality must stay enabled");
  }
};

struct ModelConfig {
  std::size_t latent_dim = 256;
  double dropout = 0.1;
  double layernorm_eps = 1e-5;
  bool scorer_in_router_group = true;
};

/// Bottleneck width of the residual adapter for an expert of width `dim`.
inline std::size_t adapter_rank(std::size_t dim) {
  return std::min<std::size_t>(128, std::max<std::size_t>(32, dim / 16));
}

template <class T>
struct ExpertBlock {
  bool active = false;
  Linear<T> down, up, proj;
  LayerNorm<T> norm;
};

template <class T>
struct ModalityBlock {
  bool active = false;
  std::vector<ExpertBlock<T>> experts;
  bool has_router = false, has_head = false, has_scorer = false, has_teacher = false;
  Linear<T> router;   // d -> 1, shared across the experts of the modality
  Linear<T> head;     // d -> C
  Linear<T> scorer;   // d -> 1
  Linear<T> teacher;  // d_T -> d, training only
};

template <class T>
struct FusionParams {
  Schema schema;
  VariantSpec variant;
  ModelConfig config;
  std::vector<ModalityBlock<T>> modalities;
  bool has_fused_head = false;
  Linear<T> fused_head;  // concat: M*d -> C, attention: d -> C
  bool has_query = false;
  Param<T> attention_query;  // 1 x d
  std::vector<T> prior_logits;  // C; prediction for samples with no modality

  std::size_t latent_dim() const { return config.latent_dim; }
  std::size_t num_classes() const { return schema.num_classes; }

  /// Visits every trainable tensor in a fixed order (the checkpoint order).
  template <class F>
  void for_each_param(F&& f) {
    for_each_param_impl(*this, f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    for_each_param_impl(*this, f);
  }

  void zero_grad() {
    for_each_param([](Param<T>& p) { p.zero_grad(); });
  }

 private:
  template <class Self, class F>
  static void for_each_param_impl(Self& self, F& f) {
    auto linear = [&](auto& lin) {
      f(lin.weight);
      f(lin.bias);
    };
    for (auto& mod : self.modalities) {
      if (!mod.active) continue;
      for (auto& e : mod.experts) {
        if (!e.active) continue;
        linear(e.down);
        linear(e.up);
        linear(e.proj);
        f(e.norm.gain);
        f(e.norm.bias);
      }
      if (mod.has_router) linear(mod.router);
      if (mod.has_head) linear(mod.head);
      if (mod.has_scorer) linear(mod.scorer);
      if (mod.has_teacher) linear(mod.teacher);
    }
    if (self.has_fused_head) linear(self.fused_head);
    if (self.has_query) f(self.attention_query);
  }
};

/// Builds the parameter structure for a schema/variant without
/// initializing values (weights zero, layernorm gain one).
template <class T>
FusionParams<T> build_params(const Schema& schema, const VariantSpec& variant, const ModelConfig& cfg) {
  schema.validate();
  variant.validate(schema);
  if (cfg.latent_dim == 0) throw ConfigError("latent_dim must be >= 1");
  if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) throw ConfigError("dropout must lie in [0,1)");
  FusionParams<T> p;
  p.schema = schema;
  p.variant = variant;
  p.config = cfg;
  const std::size_t d = cfg.latent_dim;
  const std::size_t C = schema.num_classes;
  const ParamGroup scorer_group = cfg.scorer_in_router_group ? ParamGroup::router : ParamGroup::other;
  const bool per_modality_heads = variant.fusion_mode == FusionMode::medmix ||
                                  variant.fusion_mode == FusionMode::mean_avg ||
                                  variant.fusion_mode == FusionMode::max;
  p.modalities.resize(schema.num_modalities());
  for (std::size_t m = 0; m < schema.num_modalities(); ++m) {
    auto& mod = p.modalities[m];
    const std::string mp = "m" + std::to_string(m);
    mod.active = variant.modality_enabled(m);
    mod.experts.resize(schema.num_experts(m));
    if (!mod.active) continue;
    for (std::size_t k = 0; k < schema.num_experts(m); ++k) {
      auto& e = mod.experts[k];
      e.active = variant.expert_enabled(m, k);
      if (!e.active) continue;
      const std::size_t dk = schema.modalities[m].experts[k].dim;
      const std::size_t r = adapter_rank(dk);
      const std::string ep = mp + ".e" + std::to_string(k);
      e.down = Linear<T>(ep + ".adapter.down", dk, r);
      e.up = Linear<T>(ep + ".adapter.up", r, dk);
      e.proj = Linear<T>(ep + ".proj", dk, d);
      e.norm = LayerNorm<T>(ep + ".norm", d, static_cast<T>(cfg.layernorm_eps));
    }
    if (variant.intra_mode == IntraMode::learned_router) {
      mod.has_router = true;
      mod.router = Linear<T>(mp + ".router", d, 1, ParamGroup::router);
    }
    if (per_modality_heads) {
      mod.has_head = true;
      mod.head = Linear<T>(mp + ".head", d, C);
    }
    if (variant.fusion_mode == FusionMode::medmix) {
      mod.has_scorer = true;
      mod.scorer = Linear<T>(mp + ".scorer", d, 1, scorer_group);
    }
    if (variant.distillation_enabled && schema.modalities[m].teacher_dim > 0) {
      mod.has_teacher = true;
      mod.teacher = Linear<T>(mp + ".teacher_proj", schema.modalities[m].teacher_dim, d);
    }
  }
  if (variant.fusion_mode == FusionMode::concat) {
    p.has_fused_head = true;
    p.fused_head = Linear<T>("concat.head", schema.num_modalities() * d, C);
  } else if (variant.fusion_mode == FusionMode::attention) {
    p.has_fused_head = true;
    p.fused_head = Linear<T>("attention.head", d, C);
    p.has_query = true;
    p.attention_query = Param<T>("attention.query", 1, d, ParamGroup::router);
  }
  p.prior_logits.assign(C, T{});
  return p;
}

/// Seeded fan-in uniform weights, zero biases, unit layernorm gains.
template <class T>
FusionParams<T> init_params(const Schema& schema, const VariantSpec& variant, const ModelConfig& cfg,
                            std::uint64_t seed) {
  FusionParams<T> p = build_params<T>(schema, variant, cfg);
  Rng rng = make_rng({seed, static_cast<std::uint64_t>(RngPurpose::init)});
  auto init = [&](Linear<T>& lin) { lin.init_uniform(rng); };
  for (auto& mod : p.modalities) {
    if (!mod.active) continue;
    for (auto& e : mod.experts) {
      if (!e.active) continue;
      init(e.down);
      init(e.up);
      init(e.proj);
    }
    if (mod.has_router) init(mod.router);
    if (mod.has_head) init(mod.head);
    if (mod.has_scorer) init(mod.scorer);
    if (mod.has_teacher) init(mod.teacher);
  }
  if (p.has_fused_head) init(p.fused_head);
  if (p.has_query) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.latent_dim));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : p.attention_query.value.values()) v = static_cast<T>(dist(rng));
  }
  return p;
}

/// Same structure, values converted to another scalar type.
template <class U, class T>
FusionParams<U> convert_params(const FusionParams<T>& src) {
  FusionParams<U> dst = build_params<U>(src.schema, src.variant, src.config);
  std::vector<const Param<T>*> from;
  src.for_each_param([&](const Param<T>& p) { from.push_back(&p); });
  std::size_t i = 0;
  dst.for_each_param([&](Param<U>& p) {
    p.value = from[i]->value.template cast<U>();
    p.grad = from[i]->grad.template cast<U>();
    ++i;
  });
  dst.prior_logits.assign(src.prior_logits.begin(), src.prior_logits.end());
  return dst;
}

/// Number of trainable scalars. `deployed` drops the training-only
/// teacher projection heads.
template <class T>
std::size_t count_parameters(const FusionParams<T>& p, bool deployed = false) {
  std::size_t n = 0;
  p.for_each_param([&](const Param<T>& t) {
    if (deployed && t.name.find(".teacher_proj.") != std::string::npos) return;
    n += t.numel();
  });
  return n;
}

// ------------------------------------------------------------------ batch

/// Rows of a dataset gathered into model precision. Masked rows are
/// copied verbatim but never read by the model.
template <class T>
struct Batch {
  std::vector<std::size_t> indices;
  std::vector<std::vector<Matrix<T>>> embeddings;  // [m][k] -> B x d_k
  Mask expert_mask;                                // B x total_experts
  Mask available;                                  // B x M
  std::vector<Matrix<T>> teacher;                  // [m] -> B x d_T or empty
  Matrix<float> labels;                            // B x label_width

  std::size_t size() const { return indices.size(); }
};

template <class T>
Batch<T> make_batch(const EmbeddingDataset& ds, std::span<const std::size_t> rows) {
  Batch<T> b;
  b.indices.assign(rows.begin(), rows.end());
  b.embeddings.resize(ds.schema.num_modalities());
  b.teacher.resize(ds.schema.num_modalities());
  for (std::size_t m = 0; m < ds.schema.num_modalities(); ++m) {
    for (const auto& mat : ds.embeddings[m]) b.embeddings[m].push_back(gather_rows(mat, rows).template cast<T>());
    if (!ds.teacher[m].empty()) b.teacher[m] = gather_rows(ds.teacher[m], rows).template cast<T>();
  }
  b.expert_mask = gather_rows(ds.expert_mask, rows);
  b.available = gather_rows(ds.available, rows);
  b.labels = gather_rows(ds.labels, rows);
  return b;
}

// ------------------------------------------------------------------ trace

template <class T>
struct ExpertTrace {
  std::vector<std::size_t> rows;  // batch rows where the expert is present
  std::vector<std::ptrdiff_t> position;  // batch row -> index in rows, or -1
  Matrix<T> input, down_pre, down_act, refined, proj_pre, norm_out, act, keep, z;
  LayerNormCache<T> norm_cache;
};

template <class T>
struct ModalityTrace {
  std::vector<ExpertTrace<T>> experts;
  Mask mask;                       // B x K effective expert mask
  std::vector<std::uint8_t> empty; // 1 where no expert is present
  Matrix<T> scores;                // B x K router scores (0 where masked)
  Matrix<T> gates;                 // B x K
  std::vector<std::size_t> rows;   // batch rows where the modality is available
  Matrix<T> z;                     // B x d, zero rows where unavailable
  Matrix<T> z_rows;                // |rows| x d, compact copy of z
  Matrix<T> logits;                // |rows| x C
  Matrix<T> fusion_score;          // |rows| x 1
};

template <class T>
struct ForwardTrace {
  std::vector<ModalityTrace<T>> modalities;
  Mask available;                       // B x M effective availability a^(m)
  std::vector<std::uint8_t> all_missing;
  std::vector<std::size_t> present;     // rows with at least one modality
  Matrix<T> fusion_scores;              // B x M
  Matrix<T> fusion_weights;             // B x M
  Matrix<T> fused_logits;               // B x C
  Matrix<T> per_modality_logits;        // B x (M*C), zero where unavailable
  std::vector<std::uint32_t> max_source;  // B x C, argmax modality (max fusion)
  Matrix<T> fused_input;                // concat / attention head input, |present| x width
  Matrix<T> attention_weights;          // B x M

  std::size_t batch_size() const { return all_missing.size(); }
};

// ---------------------------------------------------------------- forward

/// Per-modality representation z^(m), gates and the effective masks.
template <class T>
void intra_modality_forward(const Batch<T>& batch, const FusionParams<T>& params, bool training,
                            std::uint64_t dropout_key, ForwardTrace<T>& trace) {
  const Schema& s = params.schema;
  const std::size_t B = batch.size();
  const std::size_t d = params.latent_dim();
  if (batch.embeddings.size() != s.num_modalities()) throw Error("batch does not match schema");
  trace.modalities.assign(s.num_modalities(), ModalityTrace<T>{});
  trace.available = Mask(B, s.num_modalities());
  for (std::size_t m = 0; m < s.num_modalities(); ++m) {
    const auto& block = params.modalities[m];
    auto& mt = trace.modalities[m];
    const std::size_t K = s.num_experts(m);
    mt.experts.resize(K);
    mt.mask = Mask(B, K);
    mt.scores = Matrix<T>(B, K);
    mt.z = Matrix<T>(B, d);
    for (std::size_t i = 0; i < B; ++i)
      for (std::size_t k = 0; k < K; ++k)
        mt.mask(i, k) = (params.variant.expert_enabled(m, k) && batch.expert_mask(i, s.expert_column(m, k))) ? 1 : 0;

    for (std::size_t k = 0; k < K; ++k) {
      auto& et = mt.experts[k];
      et.position.assign(B, -1);
      for (std::size_t i = 0; i < B; ++i)
        if (mt.mask(i, k)) {
          et.position[i] = static_cast<std::ptrdiff_t>(et.rows.size());
          et.rows.push_back(i);
        }
      if (et.rows.empty()) continue;
      const auto& eb = block.experts[k];
      if (batch.embeddings[m][k].cols() != eb.down.in_features()) throw Error("expert width does not match schema");
      et.input = gather_rows(batch.embeddings[m][k], et.rows);
      et.down_pre = eb.down.forward(et.input);
      et.down_act = gelu(et.down_pre);
      et.refined = eb.up.forward(et.down_act);
      add_inplace(et.refined, et.input);
      et.proj_pre = eb.proj.forward(et.refined);
      et.norm_out = eb.norm.forward(et.proj_pre, &et.norm_cache);
      et.act = gelu(et.norm_out);
      Rng rng = make_rng({dropout_key, m, k});
      et.z = dropout(et.act, params.config.dropout, training, rng, &et.keep);
      if (block.has_router) {
        const Matrix<T> sc = block.router.forward(et.z);
        for (std::size_t r = 0; r < et.rows.size(); ++r) mt.scores(et.rows[r], k) = sc(r, 0);
      }
    }

    if (params.variant.intra_mode == IntraMode::learned_router) {
      auto ms = masked_softmax(mt.scores, mt.mask);
      mt.gates = std::move(ms.weights);
      mt.empty = std::move(ms.empty);
    } else {
      mt.gates = Matrix<T>(B, K);
      mt.empty.assign(B, 0);
      for (std::size_t i = 0; i < B; ++i) {
        std::size_t cnt = 0;
        for (std::size_t k = 0; k < K; ++k) cnt += mt.mask(i, k);
        if (cnt == 0) {
          mt.empty[i] = 1;
          continue;
        }
        for (std::size_t k = 0; k < K; ++k)
          if (mt.mask(i, k)) mt.gates(i, k) = T(1) / static_cast<T>(cnt);
      }
    }

    for (std::size_t i = 0; i < B; ++i) {
      if (mt.empty[i]) continue;
      mt.rows.push_back(i);
      trace.available(i, m) = 1;
      auto zi = mt.z.row(i);
      for (std::size_t k = 0; k < K; ++k) {
        if (!mt.mask(i, k)) continue;
        const T g = mt.gates(i, k);
        auto zk = mt.experts[k].z.row(static_cast<std::size_t>(mt.experts[k].position[i]));
        for (std::size_t c = 0; c < d; ++c) zi[c] += g * zk[c];
      }
    }
    mt.z_rows = gather_rows(mt.z, mt.rows);
  }
}

/// Per-modality logits and the second-level fusion.
template <class T>
void inter_modality_forward(const FusionParams<T>& params, ForwardTrace<T>& trace) {
  const std::size_t M = params.schema.num_modalities();
  const std::size_t C = params.num_classes();
  const std::size_t d = params.latent_dim();
  const std::size_t B = trace.available.rows();
  trace.all_missing.assign(B, 0);
  trace.present.clear();
  for (std::size_t i = 0; i < B; ++i) {
    bool any = false;
    for (std::size_t m = 0; m < M; ++m) any |= trace.available(i, m) != 0;
    trace.all_missing[i] = any ? 0 : 1;
    if (any) trace.present.push_back(i);
  }
  trace.fused_logits = Matrix<T>(B, C);
  trace.fusion_scores = Matrix<T>(B, M);
  trace.fusion_weights = Matrix<T>(B, M);
  trace.per_modality_logits = Matrix<T>(B, M * C);
  const FusionMode mode = params.variant.fusion_mode;

  if (mode == FusionMode::medmix || mode == FusionMode::mean_avg || mode == FusionMode::max) {
    for (std::size_t m = 0; m < M; ++m) {
      auto& mt = trace.modalities[m];
      if (mt.rows.empty()) continue;
      const auto& block = params.modalities[m];
      mt.logits = block.head.forward(mt.z_rows);
      for (std::size_t r = 0; r < mt.rows.size(); ++r)
        for (std::size_t c = 0; c < C; ++c) trace.per_modality_logits(mt.rows[r], m * C + c) = mt.logits(r, c);
      if (block.has_scorer) {
        mt.fusion_score = block.scorer.forward(mt.z_rows);
        for (std::size_t r = 0; r < mt.rows.size(); ++r) trace.fusion_scores(mt.rows[r], m) = mt.fusion_score(r, 0);
      }
    }
    if (mode == FusionMode::medmix) {
      trace.fusion_weights = masked_softmax(trace.fusion_scores, trace.available).weights;
    } else if (mode == FusionMode::mean_avg) {
      for (std::size_t i : trace.present) {
        std::size_t cnt = 0;
        for (std::size_t m = 0; m < M; ++m) cnt += trace.available(i, m);
        for (std::size_t m = 0; m < M; ++m)
          if (trace.available(i, m)) trace.fusion_weights(i, m) = T(1) / static_cast<T>(cnt);
      }
    }
    if (mode == FusionMode::max) {
      trace.max_source.assign(B * C, 0);
      for (std::size_t i : trace.present)
        for (std::size_t c = 0; c < C; ++c) {
          T best = -std::numeric_limits<T>::infinity();
          std::uint32_t src = 0;
          for (std::size_t m = 0; m < M; ++m) {
            if (!trace.available(i, m)) continue;
            const T v = trace.per_modality_logits(i, m * C + c);
            if (v > best) {
              best = v;
              src = static_cast<std::uint32_t>(m);
            }
          }
          trace.fused_logits(i, c) = best;
          trace.max_source[i * C + c] = src;
        }
    } else {
      for (std::size_t i : trace.present)
        for (std::size_t m = 0; m < M; ++m) {
          const T w = trace.fusion_weights(i, m);
          if (!trace.available(i, m)) continue;
          for (std::size_t c = 0; c < C; ++c) trace.fused_logits(i, c) += w * trace.per_modality_logits(i, m * C + c);
        }
    }
  } else if (mode == FusionMode::concat) {
    trace.fused_input = Matrix<T>(trace.present.size(), M * d);
    for (std::size_t r = 0; r < trace.present.size(); ++r)
      for (std::size_t m = 0; m < M; ++m) {
        const std::size_t i = trace.present[r];
        if (!trace.available(i, m)) continue;
        auto src = trace.modalities[m].z.row(i);
        std::copy(src.begin(), src.end(), trace.fused_input.row(r).begin() + static_cast<std::ptrdiff_t>(m * d));
      }
    const Matrix<T> out = params.fused_head.forward(trace.fused_input);
    scatter_rows(out, trace.present, trace.fused_logits);
  } else {  // attention
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
    Matrix<T> scores(B, M);
    for (std::size_t i : trace.present)
      for (std::size_t m = 0; m < M; ++m)
        if (trace.available(i, m))
          scores(i, m) = dot<T>(std::as_const(trace.modalities[m].z).row(i), params.attention_query.value.row(0)) * inv_sqrt_d;
    trace.fusion_scores = scores;
    trace.attention_weights = masked_softmax(scores, trace.available).weights;
    trace.fusion_weights = trace.attention_weights;
    trace.fused_input = Matrix<T>(trace.present.size(), d);
    for (std::size_t r = 0; r < trace.present.size(); ++r) {
      const std::size_t i = trace.present[r];
      for (std::size_t m = 0; m < M; ++m) {
        if (!trace.available(i, m)) continue;
        const T a = trace.attention_weights(i, m);
        auto zi = trace.modalities[m].z.row(i);
        auto h = trace.fused_input.row(r);
        for (std::size_t c = 0; c < d; ++c) h[c] += a * zi[c];
      }
    }
    const Matrix<T> out = params.fused_head.forward(trace.fused_input);
    scatter_rows(out, trace.present, trace.fused_logits);
  }

  for (std::size_t i = 0; i < B; ++i)
    if (trace.all_missing[i])
      for (std::size_t c = 0; c < C; ++c) trace.fused_logits(i, c) = params.prior_logits[c];
}

template <class T>
ForwardTrace<T> forward(const Batch<T>& batch, const FusionParams<T>& params, bool training,
                        std::uint64_t dropout_key = 0) {
  ForwardTrace<T> trace;
  intra_modality_forward(batch, params, training, dropout_key, trace);
  inter_modality_forward(params, trace);
  return trace;
}

// --------------------------------------------------------------- teacher

template <class T>
struct TeacherProjection {
  std::vector<std::vector<std::size_t>> rows;  // [m] batch rows that were projected
  std::vector<Matrix<T>> inputs;               // [m] |rows| x d_T
  std::vector<Matrix<T>> z;                    // [m] B x d, zero where not projected
  std::size_t calls = 0;                       // number of (sample, modality) projections
};

/// Projects teacher embeddings for the available rows of every modality
/// that carries a teacher head. Throws if distillation is enabled but the
/// batch has no teacher matrix for such a modality.
template <class T>
TeacherProjection<T> project_teacher(const Batch<T>& batch, const FusionParams<T>& params,
                                     const ForwardTrace<T>& trace) {
  const std::size_t M = params.schema.num_modalities();
  TeacherProjection<T> tp;
  tp.rows.resize(M);
  tp.inputs.resize(M);
  tp.z.resize(M);
  for (std::size_t m = 0; m < M; ++m) {
    const auto& block = params.modalities[m];
    tp.z[m] = Matrix<T>(trace.batch_size(), params.latent_dim());
    if (!block.has_teacher) continue;
    if (batch.teacher.size() <= m || batch.teacher[m].empty())
      throw ConfigError("distillation enabled but no teacher embeddings for modality " + std::to_string(m));
    tp.rows[m] = trace.modalities[m].rows;
    if (tp.rows[m].empty()) continue;
    tp.inputs[m] = gather_rows(batch.teacher[m], tp.rows[m]);
    scatter_rows(block.teacher.forward(tp.inputs[m]), tp.rows[m], tp.z[m]);
    tp.calls += tp.rows[m].size();
  }
  return tp;
}

template <class T>
void project_teacher_backward(FusionParams<T>& params, const TeacherProjection<T>& tp,
                              const std::vector<Matrix<T>>& dz_teacher) {
  for (std::size_t m = 0; m < params.modalities.size(); ++m) {
    auto& block = params.modalities[m];
    if (!block.has_teacher || tp.rows[m].empty() || dz_teacher[m].empty()) continue;
    block.teacher.backward_params(tp.inputs[m], gather_rows(dz_teacher[m], tp.rows[m]));
  }
}

// --------------------------------------------------------------- backward

/// Accumulates parameter gradients given dL/d(fused logits) (B x C) and
/// optional extra gradients on z^(m) (B x d per modality, may be empty).
/// Rows of samples with no available modality are ignored. An empty
/// `d_fused` skips the inter-modality level.
template <class T>
void backward(FusionParams<T>& params, const ForwardTrace<T>& trace, const Matrix<T>& d_fused,
              const std::vector<Matrix<T>>& dz_extra = {}) {
  const std::size_t M = params.schema.num_modalities();
  const std::size_t C = params.num_classes();
  const std::size_t d = params.latent_dim();
  const std::size_t B = trace.batch_size();
  const FusionMode mode = params.variant.fusion_mode;
  std::vector<Matrix<T>> dz(M, Matrix<T>(B, d));

  if (d_fused.empty()) {
    // distillation-only pass
  } else if (mode == FusionMode::medmix || mode == FusionMode::mean_avg || mode == FusionMode::max) {
    Matrix<T> dlogits(B, M * C);
    Matrix<T> dw(B, M);
    for (std::size_t i : trace.present) {
      for (std::size_t m = 0; m < M; ++m) {
        if (!trace.available(i, m)) continue;
        if (mode == FusionMode::max) continue;
        const T w = trace.fusion_weights(i, m);
        T acc{};
        for (std::size_t c = 0; c < C; ++c) {
          dlogits(i, m * C + c) = w * d_fused(i, c);
          acc += trace.per_modality_logits(i, m * C + c) * d_fused(i, c);
        }
        dw(i, m) = acc;
      }
      if (mode == FusionMode::max)
        for (std::size_t c = 0; c < C; ++c) dlogits(i, trace.max_source[i * C + c] * C + c) = d_fused(i, c);
    }
    Matrix<T> dscore;
    if (mode == FusionMode::medmix) dscore = softmax_backward(trace.fusion_weights, dw);
    for (std::size_t m = 0; m < M; ++m) {
      const auto& mt = trace.modalities[m];
      if (mt.rows.empty()) continue;
      auto& block = params.modalities[m];
      Matrix<T> dl(mt.rows.size(), C);
      for (std::size_t r = 0; r < mt.rows.size(); ++r)
        for (std::size_t c = 0; c < C; ++c) dl(r, c) = dlogits(mt.rows[r], m * C + c);
      Matrix<T> dzm = block.head.backward(mt.z_rows, dl);
      if (block.has_scorer) {
        Matrix<T> ds(mt.rows.size(), 1);
        for (std::size_t r = 0; r < mt.rows.size(); ++r) ds(r, 0) = dscore(mt.rows[r], m);
        add_inplace(dzm, block.scorer.backward(mt.z_rows, ds));
      }
      scatter_rows(dzm, mt.rows, dz[m]);
    }
  } else if (mode == FusionMode::concat) {
    const Matrix<T> dp = gather_rows(d_fused, trace.present);
    const Matrix<T> dx = params.fused_head.backward(trace.fused_input, dp);
    for (std::size_t r = 0; r < trace.present.size(); ++r) {
      const std::size_t i = trace.present[r];
      for (std::size_t m = 0; m < M; ++m) {
        if (!trace.available(i, m)) continue;
        std::copy_n(dx.row(r).begin() + static_cast<std::ptrdiff_t>(m * d), d, dz[m].row(i).begin());
      }
    }
  } else {  // attention
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));
    const Matrix<T> dp = gather_rows(d_fused, trace.present);
    const Matrix<T> dh = params.fused_head.backward(trace.fused_input, dp);
    Matrix<T> da(B, M);
    for (std::size_t r = 0; r < trace.present.size(); ++r) {
      const std::size_t i = trace.present[r];
      for (std::size_t m = 0; m < M; ++m) {
        if (!trace.available(i, m)) continue;
        const T a = trace.attention_weights(i, m);
        da(i, m) = dot(trace.modalities[m].z.row(i), dh.row(r));
        auto g = dz[m].row(i);
        for (std::size_t c = 0; c < d; ++c) g[c] += a * dh(r, c);
      }
    }
    const Matrix<T> ds = softmax_backward(trace.attention_weights, da);
    auto q = params.attention_query.value.row(0);
    auto dq = params.attention_query.grad.row(0);
    for (std::size_t i : trace.present)
      for (std::size_t m = 0; m < M; ++m) {
        if (!trace.available(i, m)) continue;
        const T g = ds(i, m) * inv_sqrt_d;
        auto zi = trace.modalities[m].z.row(i);
        auto gz = dz[m].row(i);
        for (std::size_t c = 0; c < d; ++c) {
          dq[c] += g * zi[c];
          gz[c] += g * q[c];
        }
      }
  }

  for (std::size_t m = 0; m < M && m < dz_extra.size(); ++m) {
    if (dz_extra[m].empty()) continue;
    for (std::size_t i : trace.modalities[m].rows) {
      auto g = dz[m].row(i);
      auto e = dz_extra[m].row(i);
      for (std::size_t c = 0; c < d; ++c) g[c] += e[c];
    }
  }

  // Intra-modality level.
  for (std::size_t m = 0; m < M; ++m) {
    const auto& mt = trace.modalities[m];
    if (mt.rows.empty()) continue;
    auto& block = params.modalities[m];
    const std::size_t K = mt.experts.size();
    std::vector<Matrix<T>> dzk(K);
    for (std::size_t k = 0; k < K; ++k) dzk[k] = Matrix<T>(mt.experts[k].rows.size(), d);
    Matrix<T> dg(B, K);
    for (std::size_t i : mt.rows) {
      auto gi = dz[m].row(i);
      for (std::size_t k = 0; k < K; ++k) {
        if (!mt.mask(i, k)) continue;
        const auto pos = static_cast<std::size_t>(mt.experts[k].position[i]);
        const T g = mt.gates(i, k);
        auto dst = dzk[k].row(pos);
        for (std::size_t c = 0; c < d; ++c) dst[c] = g * gi[c];
        dg(i, k) = dot(std::span<const T>(gi), mt.experts[k].z.row(pos));
      }
    }
    if (block.has_router) {
      const Matrix<T> ds = softmax_backward(mt.gates, dg);
      for (std::size_t k = 0; k < K; ++k) {
        const auto& et = mt.experts[k];
        if (et.rows.empty()) continue;
        Matrix<T> dsk(et.rows.size(), 1);
        for (std::size_t r = 0; r < et.rows.size(); ++r) dsk(r, 0) = ds(et.rows[r], k);
        add_inplace(dzk[k], block.router.backward(et.z, dsk));
      }
    }
    for (std::size_t k = 0; k < K; ++k) {
      const auto& et = mt.experts[k];
      if (et.rows.empty()) continue;
      auto& eb = block.experts[k];
      const Matrix<T> dact = dropout_backward(et.keep, dzk[k]);
      const Matrix<T> dnorm = gelu_backward(et.norm_out, dact);
      const Matrix<T> dproj = eb.norm.backward(et.norm_cache, dnorm);
      const Matrix<T> drefined = eb.proj.backward(et.refined, dproj);
      const Matrix<T> ddown_act = eb.up.backward(et.down_act, drefined);
      eb.down.backward_params(et.input, gelu_backward(et.down_pre, ddown_act));
    }
  }
}

/// Prior logits from training labels: log-odds (multi-label) or log class
/// frequencies (multi-class), clamped away from 0 and 1.
template <class T>
std::vector<T> label_prior_logits(const EmbeddingDataset& ds, std::span<const std::size_t> rows) {
  const std::size_t C = ds.schema.num_classes;
  std::vector<double> freq(C, 0.0);
  for (std::size_t i : rows) {
    if (ds.schema.task_kind == TaskKind::multi_class) {
      freq[static_cast<std::size_t>(ds.labels(i, 0))] += 1.0;
    } else {
      for (std::size_t c = 0; c < C; ++c) freq[c] += ds.labels(i, c);
    }
  }
  std::vector<T> out(C);
  const double n = std::max<double>(1.0, static_cast<double>(rows.size()));
  for (std::size_t c = 0; c < C; ++c) {
    const double p = std::clamp(freq[c] / n, 1e-4, 1.0 - 1e-4);
    out[c] = static_cast<T>(ds.schema.task_kind == TaskKind::multi_label ? std::log(p / (1.0 - p)) : std::log(p));
  }
  return out;
}

}  // namespace medmix
