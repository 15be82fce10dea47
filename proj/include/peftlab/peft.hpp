#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "peftlab/errors.hpp"

namespace peftlab {

class EncoderModel;
struct ModelConfig;

enum class LoraTarget { key, value, query, ffn };

const char* lora_target_name(LoraTarget target);
LoraTarget lora_target_from_name(const std::string& name);

/// Low-rank adapter hyperparameters. Defaults follow the shared recipe used
/// for every experiment: r=8, alpha=8, dropout=0.1, targets key+value, all
/// layers.
struct LoraConfig {
  std::size_t rank = 8;
  double alpha = 8.0;
  double dropout = 0.1;
  std::vector<LoraTarget> targets = {LoraTarget::key, LoraTarget::value};
  std::vector<std::size_t> layers;  // empty = every layer

  // adapter path multiplier alpha/r
  double scaling() const { return alpha / static_cast<double>(rank); }
};

/// IA3 sites are fixed: per-dimension scaling vectors on keys, values, and
/// the FFN intermediate activation, initialized to ones.
struct Ia3Config {
  double dropout = 0.1;
};

enum class AdapterKind { lora, ia3 };

struct AdapterState {
  AdapterKind kind = AdapterKind::lora;
  LoraConfig lora;
  Ia3Config ia3;
  bool merged = false;
};

/// Freezes all base weights (the head stays trainable) and adds zero-initialized
/// low-rank update paths h = Wx + (alpha/r)·B·A·dropout(x) on the targeted
/// matrices. A is truncated-normal, B is zero, so the injected model reproduces
/// the base forward exactly until trained.
AdapterState& inject_lora(EncoderModel& model, const LoraConfig& config, std::uint64_t seed);

/// Freezes all base weights and adds per-layer all-ones scaling vectors
/// l_k, l_v (attention keys/values) and l_ff (FFN intermediate).
AdapterState& inject_ia3(EncoderModel& model, const Ia3Config& config);

/// Folds adapter parameters into the base weights and removes them; the merged
/// model has the base architecture and matches the adapted forward within
/// floating-point reassociation error.
void merge_adapter(EncoderModel& model);

struct TrainableCounts {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
  std::size_t total = 0;
};

TrainableCounts count_trainable(const EncoderModel& model);

/// Closed-form adapter parameter counts (cross-checked against enumeration in
/// the tests).
std::size_t lora_param_count(const ModelConfig& config, const LoraConfig& lora);
std::size_t ia3_param_count(const ModelConfig& config);

struct FrozenSnapshot {
  std::vector<std::pair<std::string, std::vector<double>>> tensors;
};

/// Copies every frozen tensor, by name, for later bitwise comparison.
FrozenSnapshot snapshot_frozen(const EncoderModel& model);

struct FreezeReport {
  bool ok = true;
  std::vector<std::string> violations;  // tensor names that changed or vanished
};

/// Bitwise-compares currently frozen state against a snapshot taken at
/// injection time.
FreezeReport assert_frozen(const EncoderModel& model, const FrozenSnapshot& snapshot);

}  // namespace peftlab
