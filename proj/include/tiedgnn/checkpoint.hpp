#pragma once

#include <cstdint>
#include <string>

#include "tiedgnn/model.hpp"
#include "tiedgnn/optim.hpp"
#include "tiedgnn/training.hpp"

namespace tiedgnn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Self-describing training snapshot: a JSON header (tool version, full
// config, artifact fingerprints, report without wall times, parameter names
// and shapes, Adam step counter) followed by the raw 64-bit values and Adam
// moments of every parameter in registration order.
struct Checkpoint {
  TrainConfig config;
  ModelParams params;
  AdamState adam;
  TrainReport report;  // wall times are not stored; they reload as zero
  std::string bundle_hash;
  std::string graph_hash;
};

void save_checkpoint(const std::string& path, const ModelParams& params,
                     const AdamState& adam, const TrainConfig& config,
                     const TrainReport& report, const std::string& bundle_hash,
                     const std::string& graph_hash);

// Rejects wrong magic, unsupported versions, and truncated or inconsistent
// payloads without returning partial state.
Checkpoint load_checkpoint(const std::string& path);

}  // namespace tiedgnn
