#pragma once

// Missing-modality protocols. Draws are keyed hashes, so a sample's fate
// depends only on (seed, [epoch,] sample index, modality) and never on
// batch composition or evaluation order.

#include <cstdint>
#include <optional>
#include <string>

#include "medmix/fusion.hpp"
#include "medmix/rng.hpp"

namespace medmix {

enum class CorruptionProtocol : std::uint8_t { one_modality, multi_random };
enum class CorruptionPhase : std::uint8_t { train, test };

inline const char* to_string(CorruptionProtocol p) {
  return p == CorruptionProtocol::one_modality ? "one_modality" : "multi_random";
}
inline const char* to_string(CorruptionPhase p) { return p == CorruptionPhase::train ? "train" : "test"; }

inline CorruptionProtocol protocol_from_string(const std::string& s) {
  if (s == "one_modality") return CorruptionProtocol::one_modality;
  if (s == "multi_random") return CorruptionProtocol::multi_random;
  throw ConfigError("unknown corruption protocol '" + s + "'");
}
inline CorruptionPhase phase_from_string(const std::string& s) {
  if (s == "train") return CorruptionPhase::train;
  if (s == "test") return CorruptionPhase::test;
  throw ConfigError("unknown corruption phase '" + s + "'");
}

struct CorruptionSpec {
  CorruptionProtocol protocol = CorruptionProtocol::multi_random;
  std::size_t target_modality = 0;  // one_modality only
  CorruptionPhase phase = CorruptionPhase::test;
  double rate = 0.0;
  std::uint64_t seed = 0;

  void validate(std::size_t num_modalities) const {
    if (!(rate >= 0.0 && rate <= 1.0)) throw ValidationError("corruption.rate", "must lie in [0,1]");
    if (protocol == CorruptionProtocol::one_modality && target_modality >= num_modalities)
      throw ValidationError("corruption.modality", "target modality out of range");
  }
};

/// True when the draw for (sample, modality) removes the modality.
inline bool corruption_drops(const CorruptionSpec& spec, int epoch, std::size_t sample, std::size_t modality) {
  if (spec.protocol == CorruptionProtocol::one_modality && modality != spec.target_modality) return false;
  const std::uint64_t key =
      spec.phase == CorruptionPhase::test
          ? mix_key({spec.seed, static_cast<std::uint64_t>(RngPurpose::corruption_test), sample, modality})
          : mix_key({spec.seed, static_cast<std::uint64_t>(RngPurpose::corruption_train),
                     static_cast<std::uint64_t>(epoch), sample, modality});
  return keyed_uniform(key) < spec.rate;
}

/// Zeroes every expert mask and the availability bit of each dropped
/// (sample, modality) in the batch copy. The batch keys samples by their
/// dataset index. Samples may end up with no modality at all.
template <class T>
void apply_corruption(Batch<T>& batch, const Schema& schema, const CorruptionSpec& spec, int epoch) {
  spec.validate(schema.num_modalities());
  if (spec.rate == 0.0) return;
  for (std::size_t i = 0; i < batch.size(); ++i)
    for (std::size_t m = 0; m < schema.num_modalities(); ++m) {
      if (!corruption_drops(spec, epoch, batch.indices[i], m)) continue;
      for (std::size_t k = 0; k < schema.num_experts(m); ++k) batch.expert_mask(i, schema.expert_column(m, k)) = 0;
      batch.available(i, m) = 0;
    }
}

}  // namespace medmix
