#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "peftlab/errors.hpp"

namespace peftlab {

struct Metrics {
  double accuracy = 0.0;
  double f1_micro = 0.0;
  double f1_macro = 0.0;
  double auroc_macro = std::numeric_limits<double>::quiet_NaN();
  // plain AUROC of class 1 when the task is binary (labeled separately from
  // the macro average, which for binary tasks equals it by symmetry)
  double auroc_binary = std::numeric_limits<double>::quiet_NaN();
  double span_f1 = std::numeric_limits<double>::quiet_NaN();  // token tasks
  std::vector<double> per_class_f1;        // indexed by class id
  std::vector<std::size_t> auroc_skipped;  // classes lacking pos or neg in gold

  double get(const std::string& name) const;
};

/// Rank-based AUROC with midpoint tie handling (ties count as 0.5
/// concordance); invariant under strictly monotone score transforms.
double rank_auroc(std::span<const double> scores, std::span<const std::uint8_t> is_positive);

/// Confusion-count metrics from per-item gold/pred plus per-class scores
/// (row-major [n, classes], used for the AUROC family; pass empty to skip).
/// exclude_class removes one class (the O tag) from the F1/AUROC aggregation.
Metrics compute_metrics(std::span<const std::int64_t> gold, std::span<const std::int64_t> pred,
                        std::span<const double> scores, std::size_t classes,
                        std::optional<std::size_t> exclude_class = std::nullopt);

struct TagSpan {
  std::size_t type = 0;
  std::size_t start = 0;
  std::size_t len = 0;
  bool operator==(const TagSpan&) const = default;
};

/// Decodes BIO tag ids (0 = O, 1+2t = B, 2+2t = I) into typed spans.
std::vector<TagSpan> bio_spans(std::span<const std::int64_t> tags);

/// Exact-match span micro-F1 over parallel gold/pred tag sequences.
double span_f1_score(const std::vector<std::vector<std::int64_t>>& gold,
                     const std::vector<std::vector<std::int64_t>>& pred);

}  // namespace peftlab
