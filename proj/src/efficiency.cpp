#include "peftlab/efficiency.hpp"

#include <algorithm>
#include <cmath>

namespace peftlab {

const char* precision_name(Precision precision) {
  switch (precision) {
    case Precision::fp32: return "fp32";
    case Precision::bf16: return "bf16";
    case Precision::fp16: return "fp16";
  }
  return "unknown";
}

Precision precision_from_name(const std::string& name) {
  if (name == "fp32") return Precision::fp32;
  if (name == "bf16") return Precision::bf16;
  if (name == "fp16") return Precision::fp16;
  throw ConfigError("precision: unknown variant '" + name + "'");
}

std::size_t bytes_per_param(Precision precision) {
  return precision == Precision::fp32 ? 4 : 2;
}

double estimate_vram_gib(double params, Precision precision) {
  if (params < 0.0) throw ConfigError("estimate_vram: params must be >= 0");
  return params * static_cast<double>(bytes_per_param(precision)) / 1073741824.0;
}

double estimate_flops(const ModelConfig& config, std::size_t num_tokens) {
  if (num_tokens < 1) throw ConfigError("estimate_flops: num_tokens must be >= 1");
  const double d = static_cast<double>(config.model_dim);
  const double dff = static_cast<double>(config.ffn_dim);
  const double n = static_cast<double>(num_tokens);
  const double layers = static_cast<double>(config.layers);
  const double macs_per_token_layer = 4.0 * d * d + 2.0 * n * d + 2.0 * d * dff;
  const double head_macs =
      d * static_cast<double>(config.num_labels) *
      (config.head_kind == HeadKind::sequence ? 1.0 : n);
  return 2.0 * (layers * macs_per_token_layer * n + head_macs);
}

std::map<std::string, double> efficiency_index(const std::vector<RunStats>& cohort) {
  if (cohort.size() < 2) {
    throw CohortError("efficiency_index: cohort must contain at least 2 runs");
  }
  for (const RunStats& r : cohort) {
    if (r.time_to_peak < 0.0 || r.trainable_params < 0.0 || r.total_params < 0.0 ||
        r.total_params < r.trainable_params) {
      throw ConfigError("efficiency_index: invalid run stats for '" + r.label + "'");
    }
  }

  auto axis = [&](auto getter) {
    std::vector<double> values;
    values.reserve(cohort.size());
    for (const RunStats& r : cohort) values.push_back(getter(r));
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it, span = *hi_it - *lo_it;
    // degenerate axis contributes 0 for every run
    for (double& v : values) v = span > 0.0 ? (v - lo) / span : 0.0;
    return values;
  };
  const std::vector<double> t = axis([](const RunStats& r) { return r.time_to_peak; });
  const std::vector<double> p = axis([](const RunStats& r) { return r.trainable_params; });
  const std::vector<double> s = axis([](const RunStats& r) { return r.total_params; });

  std::vector<double> raw(cohort.size());
  for (std::size_t i = 0; i < cohort.size(); ++i) raw[i] = (t[i] + p[i] + s[i]) / 3.0;
  const auto [lo_it, hi_it] = std::minmax_element(raw.begin(), raw.end());
  const double lo = *lo_it, hi = *hi_it;
  if (!(hi > lo)) {
    throw CohortError("efficiency_index: indistinguishable cohort (all runs rescale equally)");
  }

  std::map<std::string, double> out;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    out[cohort[i].label] = 1.0 - (raw[i] - lo) / (hi - lo);
  }
  return out;
}

double estimate_cost(double train_hours, double infer_hours, const CostRates& rates) {
  if (train_hours < 0.0 || infer_hours < 0.0) {
    throw ConfigError("estimate_cost: hours must be >= 0");
  }
  if (rates.train_rate < 0.0 || rates.infer_rate < 0.0) {
    throw ConfigError("estimate_cost: rates must be >= 0");
  }
  return train_hours * rates.train_rate + infer_hours * rates.infer_rate;
}

const std::vector<CostRow>& reference_cost_rows() {
  static const std::vector<CostRow> rows = {
      {"llama2-7b", "lora", 51.07, 4.06, 112.22},
      {"biobert", "full", 2.51, 0.22, 5.56},
      {"biobert", "lora", 2.16, 0.22, 4.84},
      {"biomobilebert", "full", 1.57, 0.14, 3.48},
      {"biomobilebert", "lora", 1.35, 0.14, 3.03},
      {"biodistilbert", "full", 1.35, 0.12, 2.99},
      {"biodistilbert", "lora", 1.21, 0.13, 2.73},
      {"tinybiobert", "full", 0.53, 0.06, 1.20},
      {"tinybiobert", "lora", 0.46, 0.06, 1.06},
  };
  return rows;
}

CostRates fit_cost_rates(const std::vector<CostRow>& rows) {
  if (rows.size() < 2) throw ConfigError("fit_cost_rates: need at least 2 rows");
  // normal equations for total ~ a*train_hours + b*infer_hours
  double stt = 0.0, stf = 0.0, sff = 0.0, stc = 0.0, sfc = 0.0;
  for (const CostRow& r : rows) {
    stt += r.train_hours * r.train_hours;
    stf += r.train_hours * r.infer_hours;
    sff += r.infer_hours * r.infer_hours;
    stc += r.train_hours * r.total;
    sfc += r.infer_hours * r.total;
  }
  const double det = stt * sff - stf * stf;
  if (std::fabs(det) < 1e-12) throw NumericError("fit_cost_rates: singular system");
  CostRates rates;
  rates.train_rate = (stc * sff - sfc * stf) / det;
  rates.infer_rate = (stt * sfc - stf * stc) / det;
  return rates;
}

const CostRates& default_cost_rates() {
  static const CostRates rates = fit_cost_rates(reference_cost_rows());
  return rates;
}

}  // namespace peftlab
