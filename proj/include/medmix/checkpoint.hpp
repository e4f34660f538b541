#pragma once

// Checkpoint layout:
//   "MDXCKPT1" | u32 header length | JSON header | one matrix blob per
//   parameter tensor, in for_each_param order.

#include <cstdint>
#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "medmix/config_io.hpp"
#include "medmix/dataset_io.hpp"
#include "medmix/format.hpp"
#include "medmix/fusion.hpp"

namespace medmix {

inline constexpr std::string_view kCheckpointMagic = "MDXCKPT1";

struct Checkpoint {
  FusionParams<float> params;
  int epoch = -1;
  std::uint64_t seed = 0;
  std::vector<double> thresholds;
};

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  const auto& p = ck.params;
  ojson h;
  h["format"] = std::string(kCheckpointMagic);
  h["schema_hash"] = hex64(schema_hash(p.schema));
  h["schema"] = schema_to_json(p.schema);
  h["latent_dim"] = p.config.latent_dim;
  h["model"] = model_config_to_json(p.config);
  h["variant"] = variant_to_json(p.variant);
  h["epoch"] = ck.epoch;
  h["rng_state"] = ojson{{"seed", ck.seed}, {"epoch", ck.epoch}};
  h["thresholds"] = ck.thresholds;
  h["prior_logits"] = p.prior_logits;
  auto tensors = ojson::array();
  p.for_each_param([&](const Param<float>& t) {
    tensors.push_back(ojson{{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()}});
  });
  h["tensors"] = tensors;
  const std::string header = h.dump();

  std::ostringstream os(std::ios::binary);
  os.write(kCheckpointMagic.data(), static_cast<std::streamsize>(kCheckpointMagic.size()));
  put_u32(os, checked_u32(header.size()));
  os.write(header.data(), static_cast<std::streamsize>(header.size()));
  p.for_each_param([&](const Param<float>& t) { write_matrix(os, t.value); });
  return os.str();
}

/// Parses a checkpoint. When `expected_schema` is given its hash must match
/// the stored one.
inline Checkpoint deserialize_checkpoint(const std::string& bytes, const Schema* expected_schema = nullptr) {
  std::istringstream is(bytes, std::ios::binary);
  expect_magic(is, kCheckpointMagic);
  const std::uint32_t len = get_u32(is);
  std::string header(len, '\0');
  if (!is.read(header.data(), len)) throw FormatError("truncated checkpoint header");
  ojson h;
  try {
    h = ojson::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  Checkpoint ck;
  const Schema schema = schema_from_json(h.at("schema"));
  const std::string stored = h.at("schema_hash").get<std::string>();
  if (stored != hex64(schema_hash(schema))) throw FormatError("checkpoint schema hash does not match its schema");
  if (expected_schema && stored != hex64(schema_hash(*expected_schema)))
    throw ValidationError("schema_hash", "checkpoint " + stored + " vs dataset " + hex64(schema_hash(*expected_schema)));
  ck.params = build_params<float>(schema, variant_from_json(h.at("variant")), model_config_from_json(h.at("model")));
  ck.epoch = h.at("epoch").get<int>();
  ck.seed = h.at("rng_state").at("seed").get<std::uint64_t>();
  ck.thresholds = h.at("thresholds").get<std::vector<double>>();
  ck.params.prior_logits = h.at("prior_logits").get<std::vector<float>>();
  const auto& tensors = h.at("tensors");
  std::size_t i = 0;
  ck.params.for_each_param([&](Param<float>& t) {
    if (i >= tensors.size() || tensors[i].at("name").get<std::string>() != t.name)
      throw FormatError("checkpoint tensor list does not match the model structure");
    Matrix<float> v = read_matrix(is);
    if (!v.same_shape(t.value)) throw FormatError("checkpoint tensor '" + t.name + "' has the wrong shape");
    t.value = std::move(v);
    ++i;
  });
  if (i != tensors.size()) throw FormatError("checkpoint has extra tensors");
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint");
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path, const Schema* expected_schema = nullptr) {
  return deserialize_checkpoint(read_file(path), expected_schema);
}

}  // namespace medmix
