#pragma once

#include <string>

#include "json.hpp"
#include "peftlab/model.hpp"
#include "peftlab/peft.hpp"

namespace peftlab {

// Checkpoint container: 8-byte magic "PEFTCKPT", little-endian u64 manifest
// length, JSON manifest (config, tensor names/shapes/offsets), then a raw
// little-endian f64 payload. Offsets are byte positions into the payload.

nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::json adapter_config_to_json(const AdapterState& state);
AdapterState adapter_config_from_json(const nlohmann::json& j);

/// Full model (base weights plus any adapter tensors and config).
void save_model(const EncoderModel& model, const std::string& path);
EncoderModel load_model(const std::string& path);

/// Adapter-only checkpoint: adapter config, adapter tensors, and the task
/// head, keyed to the base model's config so one base checkpoint can serve
/// many tasks.
void save_adapter(const EncoderModel& model, const std::string& path);

/// Injects the stored adapter into a plain base model and restores adapter +
/// head tensors. The base config must match the checkpoint's.
void load_adapter(EncoderModel& model, const std::string& path);

}  // namespace peftlab
