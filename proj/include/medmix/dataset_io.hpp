#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "medmix/dataset.hpp"
#include "medmix/format.hpp"

namespace medmix {

namespace fs = std::filesystem;

inline constexpr int kManifestVersion = 1;

inline std::string expert_file_name(std::size_t m, std::size_t k) {
  return "expert_m" + std::to_string(m) + "_k" + std::to_string(k) + ".mat";
}
inline std::string teacher_file_name(std::size_t m) { return "teacher_m" + std::to_string(m) + ".mat"; }

/// Writes the manifest plus one blob per expert, per teacher, the masks,
/// the labels and the split tags. Validates first.
inline void write_dataset(const EmbeddingDataset& ds, const fs::path& dir) {
  ds.validate();
  fs::create_directories(dir);
  nlohmann::ordered_json man;
  man["version"] = kManifestVersion;
  man["task_kind"] = to_string(ds.schema.task_kind);
  man["num_classes"] = ds.schema.num_classes;
  auto mods = nlohmann::ordered_json::array();
  for (std::size_t m = 0; m < ds.schema.num_modalities(); ++m) {
    const auto& mod = ds.schema.modalities[m];
    nlohmann::ordered_json jm;
    jm["name"] = mod.name;
    auto experts = nlohmann::ordered_json::array();
    for (std::size_t k = 0; k < mod.experts.size(); ++k) {
      nlohmann::ordered_json je;
      je["name"] = mod.experts[k].name;
      je["dim"] = mod.experts[k].dim;
      je["file"] = expert_file_name(m, k);
      experts.push_back(je);
      auto os = open_out(dir / expert_file_name(m, k));
      write_matrix(os, ds.embeddings[m][k]);
    }
    jm["experts"] = experts;
    jm["teacher_dim"] = mod.teacher_dim;
    if (mod.teacher_dim > 0) {
      jm["teacher_file"] = teacher_file_name(m);
      auto os = open_out(dir / teacher_file_name(m));
      write_matrix(os, ds.teacher[m]);
    } else {
      jm["teacher_file"] = nullptr;
    }
    mods.push_back(jm);
  }
  man["modalities"] = mods;
  man["mask_file"] = "masks.msk";
  man["label_file"] = "labels.mat";
  man["split_file"] = "splits.bin";
  man["num_samples"] = ds.num_samples();
  {
    auto os = open_out(dir / "masks.msk");
    write_mask(os, ds.expert_mask);
  }
  {
    auto os = open_out(dir / "labels.mat");
    write_matrix(os, ds.labels);
  }
  {
    std::string bytes(ds.num_samples(), '\0');
    for (std::size_t i = 0; i < ds.num_samples(); ++i) bytes[i] = static_cast<char>(ds.split[i]);
    write_file(dir / "splits.bin", bytes);
  }
  write_file(dir / "manifest.json", man.dump(2) + "\n");
}

namespace detail {

template <class J>
const J& require_key(const J& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw FormatError(where + ": missing key '" + key + "'");
  return j.at(key);
}

}  // namespace detail

/// Reads a dataset directory and re-validates every invariant.
inline EmbeddingDataset read_dataset(const fs::path& dir) {
  nlohmann::json man;
  try {
    man = nlohmann::json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest.json: ") + e.what());
  }
  using detail::require_key;
  if (require_key(man, "version", "manifest").get<int>() != kManifestVersion)
    throw FormatError("manifest: unsupported version");
  Schema schema;
  schema.task_kind = task_kind_from_string(require_key(man, "task_kind", "manifest").get<std::string>());
  schema.num_classes = require_key(man, "num_classes", "manifest").get<std::size_t>();
  const std::size_t n = require_key(man, "num_samples", "manifest").get<std::size_t>();
  const auto& mods = require_key(man, "modalities", "manifest");
  for (std::size_t m = 0; m < mods.size(); ++m) {
    const auto& jm = mods[m];
    ModalitySpec mod;
    mod.name = require_key(jm, "name", "modality").get<std::string>();
    const auto& experts = require_key(jm, "experts", "modality");
    for (std::size_t k = 0; k < experts.size(); ++k)
      mod.experts.push_back({m, k, require_key(experts[k], "dim", "expert").get<std::size_t>(),
                             require_key(experts[k], "name", "expert").get<std::string>()});
    mod.teacher_dim = jm.value("teacher_dim", std::size_t{0});
    schema.modalities.push_back(std::move(mod));
  }
  schema.validate();

  EmbeddingDataset ds;
  ds.schema = schema;
  ds.embeddings.resize(schema.num_modalities());
  ds.teacher.resize(schema.num_modalities());
  for (std::size_t m = 0; m < schema.num_modalities(); ++m) {
    const auto& jm = mods[m];
    for (std::size_t k = 0; k < schema.num_experts(m); ++k) {
      const auto file = jm["experts"][k]["file"].get<std::string>();
      auto is = open_in(dir / file);
      const MatrixHeader h = read_matrix_header(is);
      const std::string tag = "(" + std::to_string(m) + "," + std::to_string(k) + ")";
      if (h.cols != schema.modalities[m].experts[k].dim)
        throw ValidationError("expert" + tag, "dim mismatch: manifest " +
                                                  std::to_string(schema.modalities[m].experts[k].dim) +
                                                  " vs matrix header " + std::to_string(h.cols));
      if (h.rows != n) throw ValidationError("expert" + tag, "row count does not match num_samples");
      ds.embeddings[m].push_back(read_matrix_body(is, h));
    }
    if (schema.modalities[m].teacher_dim > 0) {
      auto is = open_in(dir / jm["teacher_file"].get<std::string>());
      const MatrixHeader h = read_matrix_header(is);
      if (h.cols != schema.modalities[m].teacher_dim || h.rows != n)
        throw ValidationError("teacher(" + std::to_string(m) + ")", "dim mismatch with manifest");
      ds.teacher[m] = read_matrix_body(is, h);
    }
  }
  {
    auto is = open_in(dir / require_key(man, "mask_file", "manifest").get<std::string>());
    ds.expert_mask = read_mask(is);
    if (ds.expert_mask.rows() != n || ds.expert_mask.cols() != schema.total_experts())
      throw ValidationError("expert_mask", "shape does not match manifest");
  }
  {
    auto is = open_in(dir / require_key(man, "label_file", "manifest").get<std::string>());
    ds.labels = read_matrix(is);
  }
  {
    const std::string bytes = read_file(dir / require_key(man, "split_file", "manifest").get<std::string>());
    if (bytes.size() != n) throw ValidationError("split_assignment", "length does not match num_samples");
    ds.split.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto b = static_cast<std::uint8_t>(bytes[i]);
      if (b > 2) throw ValidationError("split_assignment", "tag must be 0, 1 or 2");
      ds.split[i] = static_cast<Split>(b);
    }
  }
  ds.derive_availability();
  ds.validate();
  return ds;
}

/// Hash of the shape-defining part of a schema; checkpoints carry it.
inline std::uint64_t schema_hash(const Schema& s) {
  Fnv1a h;
  h.update(to_string(s.task_kind));
  h.update("|C=" + std::to_string(s.num_classes));
  for (const auto& mod : s.modalities) {
    h.update("|m:" + mod.name + ":T=" + std::to_string(mod.teacher_dim));
    for (const auto& e : mod.experts) h.update("|e:" + e.name + ":" + std::to_string(e.dim));
  }
  return h.digest();
}

/// Hash of every stored byte of the dataset (content, masks, labels, splits).
inline std::uint64_t dataset_hash(const EmbeddingDataset& ds) {
  Fnv1a h;
  const std::uint64_t sh = schema_hash(ds.schema);
  h.update(&sh, sizeof sh);
  for (const auto& mod : ds.embeddings)
    for (const auto& mat : mod) h.update(mat.data(), mat.size() * sizeof(float));
  for (const auto& t : ds.teacher) h.update(t.data(), t.size() * sizeof(float));
  h.update(ds.expert_mask.data(), ds.expert_mask.size());
  h.update(ds.available.data(), ds.available.size());
  h.update(ds.labels.data(), ds.labels.size() * sizeof(float));
  h.update(ds.split.data(), ds.split.size());
  return h.digest();
}

}  // namespace medmix
