#include "peftlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace peftlab {

double Metrics::get(const std::string& name) const {
  if (name == "accuracy") return accuracy;
  if (name == "f1_micro") return f1_micro;
  if (name == "f1_macro") return f1_macro;
  if (name == "auroc_macro") return auroc_macro;
  if (name == "auroc_binary") return auroc_binary;
  if (name == "span_f1") return span_f1;
  throw ContractError("metrics: unknown metric '" + name + "'");
}

double rank_auroc(std::span<const double> scores, std::span<const std::uint8_t> is_positive) {
  if (scores.size() != is_positive.size()) {
    throw ContractError("rank_auroc: scores and labels differ in length");
  }
  std::size_t n_pos = 0;
  for (std::uint8_t p : is_positive) n_pos += p ? 1 : 0;
  const std::size_t n_neg = scores.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) {
    throw ContractError("rank_auroc: need both positive and negative items");
  }

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // midpoint ranks over tied scores
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid_rank = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t k = i; k <= j; ++k) {
      if (is_positive[order[k]]) rank_sum_pos += mid_rank;
    }
    i = j + 1;
  }
  const double np = static_cast<double>(n_pos);
  const double nn = static_cast<double>(n_neg);
  return (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

Metrics compute_metrics(std::span<const std::int64_t> gold, std::span<const std::int64_t> pred,
                        std::span<const double> scores, std::size_t classes,
                        std::optional<std::size_t> exclude_class) {
  if (gold.size() != pred.size()) throw ContractError("metrics: gold/pred size mismatch");
  if (gold.empty()) throw DataError("metrics: empty prediction set");
  if (!scores.empty() && scores.size() != gold.size() * classes) {
    throw ContractError("metrics: scores must be [n, classes]");
  }

  Metrics m;
  std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0), gold_count(classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const auto g = static_cast<std::size_t>(gold[i]);
    const auto p = static_cast<std::size_t>(pred[i]);
    if (g >= classes || p >= classes) throw DataError("metrics: label out of range");
    gold_count[g]++;
    if (g == p) {
      ++correct;
      tp[g]++;
    } else {
      fn[g]++;
      fp[p]++;
    }
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(gold.size());

  m.per_class_f1.assign(classes, 0.0);
  double micro_tp = 0.0, micro_fp = 0.0, micro_fn = 0.0;
  double macro_sum = 0.0;
  std::size_t macro_n = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    const double denom = 2.0 * tp[c] + fp[c] + fn[c];
    m.per_class_f1[c] = denom > 0.0 ? 2.0 * tp[c] / denom : 0.0;
    if (exclude_class && *exclude_class == c) continue;
    // classes absent from both gold and predictions do not dilute the macro
    if (tp[c] + fp[c] + fn[c] == 0) continue;
    micro_tp += tp[c];
    micro_fp += fp[c];
    micro_fn += fn[c];
    macro_sum += m.per_class_f1[c];
    ++macro_n;
  }
  const double micro_denom = 2.0 * micro_tp + micro_fp + micro_fn;
  m.f1_micro = micro_denom > 0.0 ? 2.0 * micro_tp / micro_denom : 0.0;
  m.f1_macro = macro_n > 0 ? macro_sum / static_cast<double>(macro_n) : 0.0;

  if (!scores.empty()) {
    double auc_sum = 0.0;
    std::size_t auc_n = 0;
    std::vector<double> cls_scores(gold.size());
    std::vector<std::uint8_t> cls_pos(gold.size());
    for (std::size_t c = 0; c < classes; ++c) {
      if (exclude_class && *exclude_class == c) continue;
      if (gold_count[c] == 0 || gold_count[c] == gold.size()) {
        m.auroc_skipped.push_back(c);
        continue;
      }
      for (std::size_t i = 0; i < gold.size(); ++i) {
        cls_scores[i] = scores[i * classes + c];
        cls_pos[i] = static_cast<std::size_t>(gold[i]) == c ? 1 : 0;
      }
      const double auc = rank_auroc(cls_scores, cls_pos);
      auc_sum += auc;
      ++auc_n;
      if (classes == 2 && c == 1) m.auroc_binary = auc;
    }
    if (auc_n > 0) m.auroc_macro = auc_sum / static_cast<double>(auc_n);
  }
  return m;
}

std::vector<TagSpan> bio_spans(std::span<const std::int64_t> tags) {
  std::vector<TagSpan> spans;
  std::size_t i = 0;
  while (i < tags.size()) {
    const std::int64_t tag = tags[i];
    if (tag > 0 && tag % 2 == 1) {  // B-
      const std::size_t type = static_cast<std::size_t>((tag - 1) / 2);
      std::size_t len = 1;
      while (i + len < tags.size() &&
             tags[i + len] == tag + 1) {  // matching I-
        ++len;
      }
      spans.push_back({type, i, len});
      i += len;
    } else {
      ++i;
    }
  }
  return spans;
}

double span_f1_score(const std::vector<std::vector<std::int64_t>>& gold,
                     const std::vector<std::vector<std::int64_t>>& pred) {
  if (gold.size() != pred.size()) throw ContractError("span_f1: sequence count mismatch");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const std::vector<TagSpan> gs = bio_spans(gold[i]);
    std::vector<TagSpan> ps = bio_spans(pred[i]);
    for (const TagSpan& s : gs) {
      auto it = std::find(ps.begin(), ps.end(), s);
      if (it != ps.end()) {
        ++tp;
        ps.erase(it);
      } else {
        ++fn;
      }
    }
    fp += ps.size();
  }
  const double denom = 2.0 * tp + fp + fn;
  return denom > 0.0 ? 2.0 * tp / denom : 0.0;
}

}  // namespace peftlab
