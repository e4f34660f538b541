#pragma once

// JSON (de)serialization of schemas, variants and run configs. Readers
// reject unknown keys and report the offending path.

#include <cstdint>
#include <initializer_list>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "medmix/corruption.hpp"
#include "medmix/dataset.hpp"
#include "medmix/fusion.hpp"
#include "medmix/losses.hpp"
#include "medmix/optim.hpp"
#include "medmix/synthetic.hpp"
#include "medmix/train.hpp"

namespace medmix {

using ojson = nlohmann::ordered_json;

namespace detail {

inline void check_keys(const ojson& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& item : j.items()) {
    bool ok = false;
    for (auto a : allowed) ok |= item.key() == a;
    if (!ok) throw ConfigError(where + ": unknown key '" + item.key() + "'");
  }
}

template <class V>
void read_opt(const ojson& j, const char* key, V& out, const std::string& where) {
  auto it = j.find(key);
  if (it == j.end()) return;
  try {
    out = it->template get<V>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(where + "." + key + ": " + e.what());
  }
}

inline std::string read_string(const ojson& j, const char* key, const std::string& fallback, const std::string& where) {
  std::string s = fallback;
  read_opt(j, key, s, where);
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------- schema

inline ojson schema_to_json(const Schema& s) {
  ojson j;
  j["task_kind"] = to_string(s.task_kind);
  j["num_classes"] = s.num_classes;
  auto mods = ojson::array();
  for (const auto& mod : s.modalities) {
    ojson jm;
    jm["name"] = mod.name;
    auto experts = ojson::array();
    for (const auto& e : mod.experts) experts.push_back(ojson{{"name", e.name}, {"dim", e.dim}});
    jm["experts"] = experts;
    jm["teacher_dim"] = mod.teacher_dim;
    mods.push_back(jm);
  }
  j["modalities"] = mods;
  return j;
}

inline Schema schema_from_json(const ojson& j) {
  detail::check_keys(j, {"task_kind", "num_classes", "modalities"}, "schema");
  Schema s;
  s.task_kind = task_kind_from_string(j.at("task_kind").get<std::string>());
  s.num_classes = j.at("num_classes").get<std::size_t>();
  for (std::size_t m = 0; m < j.at("modalities").size(); ++m) {
    const auto& jm = j["modalities"][m];
    ModalitySpec mod;
    mod.name = jm.at("name").get<std::string>();
    mod.teacher_dim = jm.at("teacher_dim").get<std::size_t>();
    for (std::size_t k = 0; k < jm.at("experts").size(); ++k) {
      const auto& je = jm["experts"][k];
      mod.experts.push_back(ExpertSpec{m, k, je.at("dim").get<std::size_t>(), je.at("name").get<std::string>()});
    }
    s.modalities.push_back(std::move(mod));
  }
  s.validate();
  return s;
}

// --------------------------------------------------------------- variant

inline ojson variant_to_json(const VariantSpec& v) {
  ojson j;
  j["intra_mode"] = to_string(v.intra_mode);
  j["fusion_mode"] = to_string(v.fusion_mode);
  j["distillation_enabled"] = v.distillation_enabled;
  j["best_expert"] = v.best_expert;
  j["experts_enabled"] = v.experts_enabled;
  j["modalities_enabled"] = v.modalities_enabled;
  return j;
}

inline VariantSpec variant_from_json(const ojson& j, VariantSpec v = {}) {
  const std::string w = "variant";
  detail::check_keys(j, {"intra_mode", "fusion_mode", "distillation_enabled", "best_expert", "experts_enabled",
                         "modalities_enabled"},
                     w);
  if (j.contains("intra_mode")) v.intra_mode = intra_mode_from_string(j["intra_mode"].get<std::string>());
  if (j.contains("fusion_mode")) v.fusion_mode = fusion_mode_from_string(j["fusion_mode"].get<std::string>());
  detail::read_opt(j, "distillation_enabled", v.distillation_enabled, w);
  detail::read_opt(j, "best_expert", v.best_expert, w);
  detail::read_opt(j, "experts_enabled", v.experts_enabled, w);
  detail::read_opt(j, "modalities_enabled", v.modalities_enabled, w);
  return v;
}

// ----------------------------------------------------------- run configs

inline ojson model_config_to_json(const ModelConfig& c) {
  return ojson{{"latent_dim", c.latent_dim},
               {"dropout", c.dropout},
               {"layernorm_eps", c.layernorm_eps},
               {"scorer_in_router_group", c.scorer_in_router_group}};
}

inline ModelConfig model_config_from_json(const ojson& j, ModelConfig c = {}) {
  const std::string w = "model";
  detail::check_keys(j, {"latent_dim", "dropout", "layernorm_eps", "scorer_in_router_group"}, w);
  detail::read_opt(j, "latent_dim", c.latent_dim, w);
  detail::read_opt(j, "dropout", c.dropout, w);
  detail::read_opt(j, "layernorm_eps", c.layernorm_eps, w);
  detail::read_opt(j, "scorer_in_router_group", c.scorer_in_router_group, w);
  return c;
}

inline ojson optimizer_to_json(const OptimizerConfig& c) {
  return ojson{{"base_lr", c.base_lr},         {"router_lr_factor", c.router_lr_factor},
               {"weight_decay", c.weight_decay}, {"beta1", c.beta1},
               {"beta2", c.beta2},             {"adam_eps", c.adam_eps},
               {"clip_norm", c.clip_norm},     {"warmup_epochs", c.warmup_epochs}};
}

inline OptimizerConfig optimizer_from_json(const ojson& j, OptimizerConfig c = {}) {
  const std::string w = "optimizer";
  detail::check_keys(
      j, {"base_lr", "router_lr_factor", "weight_decay", "beta1", "beta2", "adam_eps", "clip_norm", "warmup_epochs"},
      w);
  detail::read_opt(j, "base_lr", c.base_lr, w);
  detail::read_opt(j, "router_lr_factor", c.router_lr_factor, w);
  detail::read_opt(j, "weight_decay", c.weight_decay, w);
  detail::read_opt(j, "beta1", c.beta1, w);
  detail::read_opt(j, "beta2", c.beta2, w);
  detail::read_opt(j, "adam_eps", c.adam_eps, w);
  detail::read_opt(j, "clip_norm", c.clip_norm, w);
  detail::read_opt(j, "warmup_epochs", c.warmup_epochs, w);
  return c;
}

inline ojson loss_config_to_json(const LossConfig& c) {
  return ojson{
      {"lambda_max", c.lambda_max}, {"distill_ramp_epochs", c.distill_ramp_epochs}, {"lambda_rkd", c.lambda_rkd}};
}

inline LossConfig loss_config_from_json(const ojson& j, LossConfig c = {}) {
  const std::string w = "loss";
  detail::check_keys(j, {"lambda_max", "distill_ramp_epochs", "lambda_rkd"}, w);
  detail::read_opt(j, "lambda_max", c.lambda_max, w);
  detail::read_opt(j, "distill_ramp_epochs", c.distill_ramp_epochs, w);
  detail::read_opt(j, "lambda_rkd", c.lambda_rkd, w);
  return c;
}

inline ojson corruption_to_json(const CorruptionSpec& c) {
  return ojson{{"protocol", to_string(c.protocol)},
               {"modality", c.target_modality},
               {"phase", to_string(c.phase)},
               {"rate", c.rate},
               {"seed", c.seed}};
}

inline CorruptionSpec corruption_from_json(const ojson& j, CorruptionSpec c = {}) {
  const std::string w = "corruption";
  detail::check_keys(j, {"protocol", "modality", "phase", "rate", "seed"}, w);
  if (j.contains("protocol")) c.protocol = protocol_from_string(j["protocol"].get<std::string>());
  if (j.contains("phase")) c.phase = phase_from_string(j["phase"].get<std::string>());
  detail::read_opt(j, "modality", c.target_modality, w);
  detail::read_opt(j, "rate", c.rate, w);
  detail::read_opt(j, "seed", c.seed, w);
  return c;
}

inline ojson train_config_to_json(const TrainConfig& c) {
  ojson j;
  j["optimizer"] = optimizer_to_json(c.optim);
  j["loss"] = loss_config_to_json(c.loss);
  j["model"] = model_config_to_json(c.model);
  j["variant"] = variant_to_json(c.variant);
  j["max_epochs"] = c.max_epochs;
  j["early_stop_patience"] = c.early_stop_patience;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  j["train_corruption"] = c.train_corruption ? corruption_to_json(*c.train_corruption) : ojson(nullptr);
  j["monitor_distill_in_val"] = c.monitor_distill_in_val;
  j["record_timing"] = c.record_timing;
  return j;
}

inline TrainConfig train_config_from_json(const ojson& j, TrainConfig c = {}) {
  const std::string w = "train";
  detail::check_keys(j, {"optimizer", "loss", "model", "variant", "max_epochs", "early_stop_patience", "batch_size",
                         "seed", "train_corruption", "monitor_distill_in_val", "record_timing"},
                     w);
  if (j.contains("optimizer")) c.optim = optimizer_from_json(j["optimizer"], c.optim);
  if (j.contains("loss")) c.loss = loss_config_from_json(j["loss"], c.loss);
  if (j.contains("model")) c.model = model_config_from_json(j["model"], c.model);
  if (j.contains("variant")) c.variant = variant_from_json(j["variant"], c.variant);
  detail::read_opt(j, "max_epochs", c.max_epochs, w);
  detail::read_opt(j, "early_stop_patience", c.early_stop_patience, w);
  detail::read_opt(j, "batch_size", c.batch_size, w);
  detail::read_opt(j, "seed", c.seed, w);
  if (j.contains("train_corruption")) {
    if (j["train_corruption"].is_null()) {
      c.train_corruption.reset();
    } else {
      CorruptionSpec base;
      base.phase = CorruptionPhase::train;
      c.train_corruption = corruption_from_json(j["train_corruption"], base);
    }
  }
  detail::read_opt(j, "monitor_distill_in_val", c.monitor_distill_in_val, w);
  detail::read_opt(j, "record_timing", c.record_timing, w);
  return c;
}

// ------------------------------------------------------------- synthetic

inline ojson synthetic_to_json(const SyntheticSpec& s) {
  ojson j;
  j["num_samples"] = s.num_samples;
  j["num_classes"] = s.num_classes;
  j["task_kind"] = to_string(s.task_kind);
  j["latent_dim"] = s.latent_dim;
  auto mods = ojson::array();
  for (const auto& m : s.modalities)
    mods.push_back(ojson{{"name", m.name},
                         {"expert_dims", m.expert_dims},
                         {"informativeness", m.informativeness},
                         {"snr", m.snr},
                         {"missing_rate", m.missing_rate},
                         {"expert_missing_rate", m.expert_missing_rate},
                         {"teacher_dim", m.teacher_dim}});
  j["modalities"] = mods;
  j["with_teacher"] = s.with_teacher;
  j["teacher_noise"] = s.teacher_noise;
  j["split"] = s.split;
  j["seed"] = s.seed;
  return j;
}

inline SyntheticSpec synthetic_from_json(const ojson& j) {
  const std::string w = "synthetic";
  detail::check_keys(j, {"num_samples", "num_classes", "task_kind", "latent_dim", "modalities", "with_teacher",
                         "teacher_noise", "split", "seed"},
                     w);
  SyntheticSpec s;
  detail::read_opt(j, "num_samples", s.num_samples, w);
  detail::read_opt(j, "num_classes", s.num_classes, w);
  if (j.contains("task_kind")) s.task_kind = task_kind_from_string(j["task_kind"].get<std::string>());
  detail::read_opt(j, "latent_dim", s.latent_dim, w);
  detail::read_opt(j, "with_teacher", s.with_teacher, w);
  detail::read_opt(j, "teacher_noise", s.teacher_noise, w);
  detail::read_opt(j, "split", s.split, w);
  detail::read_opt(j, "seed", s.seed, w);
  if (j.contains("modalities")) {
    for (std::size_t m = 0; m < j["modalities"].size(); ++m) {
      const auto& jm = j["modalities"][m];
      const std::string wm = w + ".modalities[" + std::to_string(m) + "]";
      detail::check_keys(jm, {"name", "expert_dims", "informativeness", "snr", "missing_rate", "expert_missing_rate",
                              "teacher_dim"},
                         wm);
      SyntheticModality mod;
      mod.name = detail::read_string(jm, "name", "m" + std::to_string(m), wm);
      detail::read_opt(jm, "expert_dims", mod.expert_dims, wm);
      detail::read_opt(jm, "informativeness", mod.informativeness, wm);
      if (mod.informativeness.empty()) mod.informativeness.assign(mod.expert_dims.size(), 1.0);
      detail::read_opt(jm, "snr", mod.snr, wm);
      detail::read_opt(jm, "missing_rate", mod.missing_rate, wm);
      detail::read_opt(jm, "expert_missing_rate", mod.expert_missing_rate, wm);
      detail::read_opt(jm, "teacher_dim", mod.teacher_dim, wm);
      s.modalities.push_back(std::move(mod));
    }
  }
  s.validate();
  return s;
}

}  // namespace medmix
