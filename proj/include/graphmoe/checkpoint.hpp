#pragma once

// Versioned binary checkpoint: resolved config, run seed and step, every
// named tensor (trainable and frozen), each layer's MoE graph edge list and
// activation-tracker state. Little-endian.

#include <cstdint>
#include <filesystem>
#include <memory>

#include "graphmoe/config.hpp"
#include "graphmoe/toy_model.hpp"

namespace graphmoe {

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const ToyModel& model, const ExperimentConfig& cfg,
                     std::uint64_t seed, std::uint64_t step);

struct LoadedCheckpoint {
  ExperimentConfig config;
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::unique_ptr<ToyModel> model;
};

// Rebuilds the model from the stored config and seed, then overwrites every
// tensor, graph and tracker. Any name, shape or structure mismatch raises
// FormatError.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace graphmoe
