#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "peftlab/model.hpp"
#include "peftlab/tensor.hpp"

namespace peftlab {

enum class TaskKind { sequence, token };

const char* task_kind_name(TaskKind kind);
HeadKind head_kind_for(TaskKind kind);

/// Whitespace-token vocabulary with reserved ids PAD=0, UNK=1, CLS=2.
struct Vocab {
  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kUnk = 1;
  static constexpr std::int64_t kCls = 2;

  std::vector<std::string> tokens;  // index == id, reserved entries first
  std::unordered_map<std::string, std::int64_t> ids;

  static Vocab with_reserved();
  std::int64_t add(const std::string& token);           // idempotent
  std::int64_t lookup(const std::string& token) const;  // kUnk when absent
  std::size_t size() const { return tokens.size(); }
};

struct LabeledExample {
  std::vector<std::string> tokens;
  std::optional<std::int64_t> seq_label;
  std::optional<std::vector<std::int64_t>> token_labels;  // tag ids, aligned with tokens
};

struct Dataset {
  TaskKind kind = TaskKind::sequence;
  Vocab vocab;
  std::size_t num_classes = 0;        // sequence classes, or BIO tag count for token tasks
  std::vector<std::string> tag_names; // token tasks: tag id -> name ("O", "B-x", "I-x")
  std::vector<LabeledExample> examples;
  // marker n-grams planted by gen_sequence_task, one list per class (empty
  // for loaded/NER data); kept so tests can run the Bayes-rule classifier
  std::vector<std::vector<std::string>> class_markers;

  std::size_t size() const { return examples.size(); }
  std::vector<std::size_t> class_counts() const;
};

/// Length of the class-marker n-gram planted by gen_sequence_task.
inline constexpr std::size_t kMarkerLen = 3;
/// Target fraction of O tags emitted by gen_ner_task.
inline constexpr double kNerOFraction = 0.7;

/// Balanced sequence-classification task: each class has a unique marker
/// trigram planted in filler text; `noise` flips each marker token to a random
/// filler with that probability. `vocab_size` sizes the filler pool.
Dataset gen_sequence_task(std::uint64_t seed, std::size_t n, std::size_t num_classes,
                          std::size_t vocab_size, std::size_t seq_len, double noise);

/// Optimal accuracy for gen_sequence_task's corruption law:
/// 1 - noise^markerlen * (1 - 1/num_classes).
double sequence_task_bayes_accuracy(std::size_t num_classes, double noise);

/// Marker-count decision rule (the Bayes classifier for the generator);
/// returns accuracy over the dataset.
double marker_rule_accuracy(const Dataset& dataset);

/// BIO tagging task with non-adjacent entity spans drawn from type-specific
/// sub-vocabularies; O fraction is kNerOFraction per sequence (rounded).
Dataset gen_ner_task(std::uint64_t seed, std::size_t n, std::size_t entity_types,
                     std::size_t seq_len);

/// True when tags form a valid BIO sequence over `num_tags` = 1 + 2*types.
bool bio_valid(std::span<const std::int64_t> tags, std::size_t num_tags);

enum class VocabPolicy { build, reuse };

/// JSONL ingestion: {"text": str, "label": int} per line for sequence tasks,
/// {"tokens": [str], "tags": [str]} for token tasks. Malformed lines are
/// reported with their line number. expected_classes=0 infers the label space.
Dataset load_jsonl(const std::string& path, TaskKind kind, VocabPolicy policy,
                   const Vocab* existing = nullptr, std::size_t expected_classes = 0);

void write_jsonl(const Dataset& dataset, const std::string& path);

void save_vocab(const Vocab& vocab, const std::string& path);  // sorted token list
Vocab load_vocab(const std::string& path);

struct FewShotSpec {
  std::size_t k_per_class = 8;
  std::uint64_t seed = 0;
};

/// Seeded per-class subsampling without replacement. Selections are nested:
/// with equal seeds, the k1 selection is a subset of the k2 selection for
/// k1 < k2. For token tasks a class means an entity type, and "has the class"
/// means the sequence contains at least one B-/I- token of that type; per-class
/// picks are unioned, so overlap can push a class above k.
Dataset sample_few_shot(const Dataset& dataset, const FewShotSpec& spec);

/// Power-of-two ladder 8, 16, ... capped at the smallest per-class count.
std::vector<std::size_t> few_shot_ladder(const Dataset& dataset, std::size_t start = 8,
                                         std::size_t limit = 4096);

/// Assembles a padded batch (CLS prepended, mask over real tokens, labels with
/// kIgnoreLabel at CLS/padding for token tasks). Sequences are truncated to
/// max_positions.
TaskBatch make_batch(const Dataset& dataset, std::span<const std::size_t> indices,
                     std::size_t max_positions);

/// Deterministic batches in dataset order.
std::vector<TaskBatch> make_batches(const Dataset& dataset, std::size_t batch_size,
                                    std::size_t max_positions);

}  // namespace peftlab
