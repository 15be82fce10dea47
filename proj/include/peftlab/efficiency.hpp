#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "peftlab/errors.hpp"
#include "peftlab/model.hpp"

namespace peftlab {

enum class Precision { fp32, bf16, fp16 };

const char* precision_name(Precision precision);
Precision precision_from_name(const std::string& name);
std::size_t bytes_per_param(Precision precision);

/// Weights-only VRAM estimate in GiB: params * bytes(precision) / 2^30.
double estimate_vram_gib(double params, Precision precision);

/// Analytic forward FLOPs for `num_tokens` tokens through the encoder.
/// Per token, per layer MACs: 4d² (projections) + 2·num_tokens·d (scores+mix)
/// + 2·d·d_ff (FFN); total = 2·MACs·num_tokens plus the head
/// (2·d·labels for the sequence head, 2·d·labels·num_tokens for the token
/// head). Embedding lookups are excluded; 1 MAC counts as 2 FLOPs.
double estimate_flops(const ModelConfig& config, std::size_t num_tokens);

/// (T, P, S) triple for one run: seconds to peak, trainable params, total
/// params.
struct RunStats {
  std::string label;
  double time_to_peak = 0.0;
  double trainable_params = 0.0;
  double total_params = 0.0;
};

/// Holistic efficiency: min-max normalize T, P, S across the cohort
/// (a degenerate axis contributes 0), average the three, then rescale so
/// 1 = most efficient and 0 = least. Cohorts of identical runs are rejected
/// ("indistinguishable cohort").
std::map<std::string, double> efficiency_index(const std::vector<RunStats>& cohort);

struct CostRates {
  double train_rate = 0.0;  // currency per hour
  double infer_rate = 0.0;
};

double estimate_cost(double train_hours, double infer_hours, const CostRates& rates);

/// One published benchmark cost row (train hours, inference hours, total).
struct CostRow {
  std::string model;
  std::string method;
  double train_hours = 0.0;
  double infer_hours = 0.0;
  double total = 0.0;
};

/// Reference rows used to calibrate the default rate profile (AWS
/// g5.16xlarge training / g4dn.16xlarge inference, GBP).
const std::vector<CostRow>& reference_cost_rows();

/// Least-squares fit of (train_rate, infer_rate) over a set of rows.
CostRates fit_cost_rates(const std::vector<CostRow>& rows);

/// "aws-2023-fitted" profile: fit_cost_rates(reference_cost_rows()).
const CostRates& default_cost_rates();

}  // namespace peftlab
