#include "peftlab/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace peftlab {

namespace {

using nlohmann::json;

std::vector<std::string> split_whitespace(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += tokens[i];
  }
  return out;
}

}  // namespace

const char* task_kind_name(TaskKind kind) {
  return kind == TaskKind::sequence ? "sequence" : "token";
}

HeadKind head_kind_for(TaskKind kind) {
  return kind == TaskKind::sequence ? HeadKind::sequence : HeadKind::token;
}

Vocab Vocab::with_reserved() {
  Vocab v;
  v.tokens = {"<pad>", "<unk>", "<cls>"};
  for (std::size_t i = 0; i < v.tokens.size(); ++i) v.ids.emplace(v.tokens[i], i);
  return v;
}

std::int64_t Vocab::add(const std::string& token) {
  auto it = ids.find(token);
  if (it != ids.end()) return it->second;
  const std::int64_t id = static_cast<std::int64_t>(tokens.size());
  tokens.push_back(token);
  ids.emplace(token, id);
  return id;
}

std::int64_t Vocab::lookup(const std::string& token) const {
  auto it = ids.find(token);
  return it == ids.end() ? kUnk : it->second;
}

std::vector<std::size_t> Dataset::class_counts() const {
  std::vector<std::size_t> counts(num_classes, 0);
  for (const LabeledExample& e : examples) {
    if (kind == TaskKind::sequence) {
      counts.at(static_cast<std::size_t>(*e.seq_label))++;
    } else {
      std::set<std::int64_t> seen(e.token_labels->begin(), e.token_labels->end());
      for (std::int64_t tag : seen) counts.at(static_cast<std::size_t>(tag))++;
    }
  }
  return counts;
}

Dataset gen_sequence_task(std::uint64_t seed, std::size_t n, std::size_t num_classes,
                          std::size_t vocab_size, std::size_t seq_len, double noise) {
  if (num_classes < 2) throw ConfigError("gen_sequence_task: need at least 2 classes");
  if (seq_len < kMarkerLen) {
    throw ConfigError("gen_sequence_task: seq_len " + std::to_string(seq_len) +
                      " too small for marker length " + std::to_string(kMarkerLen));
  }
  if (vocab_size == 0) throw ConfigError("gen_sequence_task: filler vocab must be non-empty");
  if (!(noise >= 0.0 && noise <= 1.0)) throw ConfigError("gen_sequence_task: noise must be in [0,1]");

  Dataset d;
  d.kind = TaskKind::sequence;
  d.num_classes = num_classes;
  d.vocab = Vocab::with_reserved();

  std::vector<std::string> filler(vocab_size);
  for (std::size_t i = 0; i < vocab_size; ++i) {
    filler[i] = "w" + std::to_string(i);
    d.vocab.add(filler[i]);
  }
  d.class_markers.resize(num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    for (std::size_t i = 0; i < kMarkerLen; ++i) {
      std::string tok = "mk" + std::to_string(c) + "_" + std::to_string(i);
      d.class_markers[c].push_back(tok);
      d.vocab.add(tok);
    }
  }

  Rng rng(Rng::mix(seed, 0x7365712dull));
  d.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i % num_classes;  // balanced ±1
    LabeledExample ex;
    ex.tokens.resize(seq_len);
    for (std::size_t j = 0; j < seq_len; ++j) {
      ex.tokens[j] = filler[rng.uniform_int(vocab_size)];
    }
    const std::size_t start = rng.uniform_int(seq_len - kMarkerLen + 1);
    for (std::size_t j = 0; j < kMarkerLen; ++j) {
      // corrupted marker tokens fall back to filler, never another marker
      const bool corrupt = noise > 0.0 && rng.uniform() < noise;
      ex.tokens[start + j] = corrupt ? filler[rng.uniform_int(vocab_size)]
                                     : d.class_markers[cls][j];
    }
    ex.seq_label = static_cast<std::int64_t>(cls);
    d.examples.push_back(std::move(ex));
  }
  return d;
}

double sequence_task_bayes_accuracy(std::size_t num_classes, double noise) {
  const double erased = std::pow(noise, static_cast<double>(kMarkerLen));
  return 1.0 - erased * (1.0 - 1.0 / static_cast<double>(num_classes));
}

double marker_rule_accuracy(const Dataset& dataset) {
  if (dataset.class_markers.empty()) {
    throw ContractError("marker_rule_accuracy: dataset has no planted markers");
  }
  std::size_t correct = 0;
  for (const LabeledExample& ex : dataset.examples) {
    std::vector<std::size_t> hits(dataset.num_classes, 0);
    for (const std::string& tok : ex.tokens) {
      for (std::size_t c = 0; c < dataset.num_classes; ++c) {
        const auto& mk = dataset.class_markers[c];
        if (std::find(mk.begin(), mk.end(), tok) != mk.end()) hits[c]++;
      }
    }
    const std::size_t best =
        std::distance(hits.begin(), std::max_element(hits.begin(), hits.end()));
    if (static_cast<std::int64_t>(best) == *ex.seq_label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.examples.size());
}

Dataset gen_ner_task(std::uint64_t seed, std::size_t n, std::size_t entity_types,
                     std::size_t seq_len) {
  if (entity_types < 1) throw ConfigError("gen_ner_task: need at least one entity type");
  if (seq_len < 4) throw ConfigError("gen_ner_task: seq_len too small");

  Dataset d;
  d.kind = TaskKind::token;
  d.num_classes = 1 + 2 * entity_types;
  d.vocab = Vocab::with_reserved();
  d.tag_names.push_back("O");
  for (std::size_t t = 0; t < entity_types; ++t) {
    d.tag_names.push_back("B-E" + std::to_string(t));
    d.tag_names.push_back("I-E" + std::to_string(t));
  }

  constexpr std::size_t kFillerPool = 30;
  constexpr std::size_t kEntityPool = 10;
  std::vector<std::string> filler(kFillerPool);
  for (std::size_t i = 0; i < kFillerPool; ++i) {
    filler[i] = "w" + std::to_string(i);
    d.vocab.add(filler[i]);
  }
  std::vector<std::vector<std::string>> entity_vocab(entity_types);
  for (std::size_t t = 0; t < entity_types; ++t) {
    for (std::size_t k = 0; k < kEntityPool; ++k) {
      std::string tok = "e" + std::to_string(t) + "_" + std::to_string(k);
      entity_vocab[t].push_back(tok);
      d.vocab.add(tok);
    }
  }

  Rng rng(Rng::mix(seed, 0x6e65722dull));
  const std::size_t entity_budget =
      static_cast<std::size_t>(std::lround((1.0 - kNerOFraction) * static_cast<double>(seq_len)));

  d.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    // split the entity budget into spans of length 1..3
    std::vector<std::size_t> span_lens;
    std::size_t remaining = entity_budget;
    while (remaining > 0) {
      const std::size_t len = 1 + rng.uniform_int(std::min<std::size_t>(3, remaining));
      span_lens.push_back(len);
      remaining -= len;
    }
    const std::size_t o_count = seq_len - entity_budget;
    // one span per gap between O tokens keeps spans non-adjacent
    std::vector<std::size_t> gaps(o_count + 1);
    for (std::size_t g = 0; g < gaps.size(); ++g) gaps[g] = g;
    rng.shuffle(gaps);
    gaps.resize(span_lens.size());
    std::sort(gaps.begin(), gaps.end());

    LabeledExample ex;
    ex.token_labels.emplace();
    std::size_t span_idx = 0;
    auto emit_span = [&]() {
      const std::size_t type = rng.uniform_int(entity_types);
      for (std::size_t j = 0; j < span_lens[span_idx]; ++j) {
        ex.tokens.push_back(entity_vocab[type][rng.uniform_int(kEntityPool)]);
        ex.token_labels->push_back(static_cast<std::int64_t>(j == 0 ? 1 + 2 * type : 2 + 2 * type));
      }
      ++span_idx;
    };
    for (std::size_t o = 0; o <= o_count; ++o) {
      while (span_idx < gaps.size() && gaps[span_idx] == o) emit_span();
      if (o < o_count) {
        ex.tokens.push_back(filler[rng.uniform_int(kFillerPool)]);
        ex.token_labels->push_back(0);
      }
    }
    d.examples.push_back(std::move(ex));
  }
  return d;
}

bool bio_valid(std::span<const std::int64_t> tags, std::size_t num_tags) {
  std::int64_t prev = 0;  // O
  for (std::int64_t tag : tags) {
    if (tag < 0 || static_cast<std::size_t>(tag) >= num_tags) return false;
    if (tag != 0 && tag % 2 == 0) {
      // I-type requires a preceding B-/I- of the same type
      if (prev != tag && prev != tag - 1) return false;
    }
    prev = tag;
  }
  return true;
}

Dataset load_jsonl(const std::string& path, TaskKind kind, VocabPolicy policy,
                   const Vocab* existing, std::size_t expected_classes) {
  std::ifstream in(path);
  if (!in) throw DataError("load_jsonl: cannot open " + path);

  if (policy == VocabPolicy::reuse && existing == nullptr) {
    throw ContractError("load_jsonl: reuse policy requires an existing vocab");
  }

  Dataset d;
  d.kind = kind;
  std::vector<json> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::exception& e) {
      throw DataError("load_jsonl: line " + std::to_string(line_no) + ": malformed JSON (" +
                      e.what() + ")");
    }
    obj["__line"] = line_no;
    rows.push_back(std::move(obj));
  }
  if (rows.empty()) throw DataError("load_jsonl: empty file " + path);

  auto line_of = [](const json& obj) { return obj.at("__line").get<std::size_t>(); };
  auto require = [&](const json& obj, const char* field) -> const json& {
    if (!obj.contains(field)) {
      throw DataError("load_jsonl: line " + std::to_string(line_of(obj)) + ": missing field '" +
                      std::string(field) + "'");
    }
    return obj.at(field);
  };

  std::set<std::string> token_set;
  std::set<std::string> tag_set;
  for (const json& obj : rows) {
    if (kind == TaskKind::sequence) {
      const json& text = require(obj, "text");
      if (!text.is_string()) {
        throw DataError("load_jsonl: line " + std::to_string(line_of(obj)) +
                        ": field 'text' must be a string");
      }
      require(obj, "label");
      for (const std::string& t : split_whitespace(text.get<std::string>())) token_set.insert(t);
    } else {
      const json& toks = require(obj, "tokens");
      const json& tags = require(obj, "tags");
      if (!toks.is_array() || !tags.is_array() || toks.size() != tags.size()) {
        throw DataError("load_jsonl: line " + std::to_string(line_of(obj)) +
                        ": 'tokens' and 'tags' must be arrays of equal length");
      }
      for (const json& t : toks) token_set.insert(t.get<std::string>());
      for (const json& t : tags) tag_set.insert(t.get<std::string>());
    }
  }

  if (policy == VocabPolicy::build) {
    d.vocab = Vocab::with_reserved();
    for (const std::string& t : token_set) d.vocab.add(t);  // sorted (std::set order)
  } else {
    d.vocab = *existing;
  }

  std::unordered_map<std::string, std::int64_t> tag_ids;
  if (kind == TaskKind::token) {
    // canonical tag order: O, then B-*/I-* pairs by sorted type name
    std::set<std::string> types;
    for (const std::string& t : tag_set) {
      if (t == "O") continue;
      if ((t.rfind("B-", 0) == 0 || t.rfind("I-", 0) == 0) && t.size() > 2) {
        types.insert(t.substr(2));
      } else {
        throw DataError("load_jsonl: unknown tag '" + t + "' (expected O, B-*, I-*)");
      }
    }
    d.tag_names.push_back("O");
    tag_ids["O"] = 0;
    for (const std::string& ty : types) {
      tag_ids["B-" + ty] = static_cast<std::int64_t>(d.tag_names.size());
      d.tag_names.push_back("B-" + ty);
      tag_ids["I-" + ty] = static_cast<std::int64_t>(d.tag_names.size());
      d.tag_names.push_back("I-" + ty);
    }
    d.num_classes = d.tag_names.size();
  }

  std::int64_t max_label = -1;
  for (const json& obj : rows) {
    LabeledExample ex;
    if (kind == TaskKind::sequence) {
      ex.tokens = split_whitespace(obj.at("text").get<std::string>());
      const json& label = obj.at("label");
      if (!label.is_number_integer()) {
        throw DataError("load_jsonl: line " + std::to_string(line_of(obj)) +
                        ": field 'label' must be an integer");
      }
      const std::int64_t value = label.get<std::int64_t>();
      if (value < 0 || (expected_classes > 0 &&
                        value >= static_cast<std::int64_t>(expected_classes))) {
        throw DataError("load_jsonl: line " + std::to_string(line_of(obj)) + ": label " +
                        std::to_string(value) + " out of range");
      }
      max_label = std::max(max_label, value);
      ex.seq_label = value;
    } else {
      ex.token_labels.emplace();
      for (const json& t : obj.at("tokens")) ex.tokens.push_back(t.get<std::string>());
      for (const json& t : obj.at("tags")) {
        ex.token_labels->push_back(tag_ids.at(t.get<std::string>()));
      }
      if (!bio_valid(*ex.token_labels, d.num_classes)) {
        throw DataError("load_jsonl: line " + std::to_string(line_of(obj)) +
                        ": invalid BIO tag sequence");
      }
    }
    d.examples.push_back(std::move(ex));
  }

  if (kind == TaskKind::sequence) {
    d.num_classes = expected_classes > 0 ? expected_classes
                                         : static_cast<std::size_t>(max_label + 1);
  }
  return d;
}

void write_jsonl(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("write_jsonl: cannot open " + path);
  for (const LabeledExample& ex : dataset.examples) {
    json obj;
    if (dataset.kind == TaskKind::sequence) {
      obj["text"] = join_tokens(ex.tokens);
      obj["label"] = *ex.seq_label;
    } else {
      obj["tokens"] = ex.tokens;
      json tags = json::array();
      for (std::int64_t t : *ex.token_labels) {
        tags.push_back(dataset.tag_names.at(static_cast<std::size_t>(t)));
      }
      obj["tags"] = std::move(tags);
    }
    out << obj.dump() << "\n";
  }
}

void save_vocab(const Vocab& vocab, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("save_vocab: cannot open " + path);
  std::vector<std::string> sorted(vocab.tokens.begin() + 3, vocab.tokens.end());
  std::sort(sorted.begin(), sorted.end());
  for (const std::string& t : sorted) out << t << "\n";
}

Vocab load_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("load_vocab: cannot open " + path);
  Vocab v = Vocab::with_reserved();
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) v.add(line);
  }
  return v;
}

namespace {

// entity types present in a token example (classes for few-shot purposes)
std::set<std::size_t> entity_types_present(const LabeledExample& ex) {
  std::set<std::size_t> types;
  for (std::int64_t tag : *ex.token_labels) {
    if (tag > 0) types.insert(static_cast<std::size_t>((tag - 1) / 2));
  }
  return types;
}

}  // namespace

Dataset sample_few_shot(const Dataset& dataset, const FewShotSpec& spec) {
  if (spec.k_per_class == 0) throw ConfigError("sample_few_shot: k_per_class must be >= 1");

  const std::size_t class_count = dataset.kind == TaskKind::sequence
                                      ? dataset.num_classes
                                      : (dataset.num_classes - 1) / 2;
  std::vector<std::vector<std::size_t>> per_class(class_count);
  for (std::size_t i = 0; i < dataset.examples.size(); ++i) {
    const LabeledExample& ex = dataset.examples[i];
    if (dataset.kind == TaskKind::sequence) {
      per_class.at(static_cast<std::size_t>(*ex.seq_label)).push_back(i);
    } else {
      for (std::size_t t : entity_types_present(ex)) per_class.at(t).push_back(i);
    }
  }

  Rng base(Rng::mix(spec.seed, 0x66657773ull));
  std::set<std::size_t> selected;
  for (std::size_t c = 0; c < class_count; ++c) {
    if (per_class[c].size() < spec.k_per_class) {
      throw BudgetError("sample_few_shot: class " + std::to_string(c) + " has " +
                        std::to_string(per_class[c].size()) + " examples, need " +
                        std::to_string(spec.k_per_class));
    }
    // per-class shuffle; taking a prefix makes selections nested across k
    Rng rng = base.child(c + 1);
    rng.shuffle(per_class[c]);
    for (std::size_t j = 0; j < spec.k_per_class; ++j) selected.insert(per_class[c][j]);
  }

  std::vector<std::size_t> order(selected.begin(), selected.end());
  Rng out_rng = base.child(0);
  out_rng.shuffle(order);

  Dataset out;
  out.kind = dataset.kind;
  out.vocab = dataset.vocab;
  out.num_classes = dataset.num_classes;
  out.tag_names = dataset.tag_names;
  out.class_markers = dataset.class_markers;
  out.examples.reserve(order.size());
  for (std::size_t i : order) out.examples.push_back(dataset.examples[i]);
  return out;
}

std::vector<std::size_t> few_shot_ladder(const Dataset& dataset, std::size_t start,
                                         std::size_t limit) {
  const std::size_t class_count = dataset.kind == TaskKind::sequence
                                      ? dataset.num_classes
                                      : (dataset.num_classes - 1) / 2;
  std::vector<std::size_t> available(class_count, 0);
  for (const LabeledExample& ex : dataset.examples) {
    if (dataset.kind == TaskKind::sequence) {
      available.at(static_cast<std::size_t>(*ex.seq_label))++;
    } else {
      for (std::size_t t : entity_types_present(ex)) available.at(t)++;
    }
  }
  const std::size_t cap = *std::min_element(available.begin(), available.end());
  std::vector<std::size_t> ladder;
  for (std::size_t k = start; k <= std::min(cap, limit); k *= 2) ladder.push_back(k);
  return ladder;
}

TaskBatch make_batch(const Dataset& dataset, std::span<const std::size_t> indices,
                     std::size_t max_positions) {
  if (indices.empty()) throw DataError("make_batch: empty index list");
  std::size_t max_len = 0;
  for (std::size_t i : indices) {
    max_len = std::max(max_len, dataset.examples[i].tokens.size() + 1);  // +CLS
  }
  max_len = std::min(max_len, max_positions);

  TaskBatch batch;
  batch.batch_size = indices.size();
  batch.seq_len = max_len;
  batch.head_kind = head_kind_for(dataset.kind);
  batch.token_ids.assign(indices.size() * max_len, Vocab::kPad);
  batch.attention_mask.assign(indices.size() * max_len, 0);
  if (dataset.kind == TaskKind::token) {
    batch.labels.assign(indices.size() * max_len, kIgnoreLabel);
  } else {
    batch.labels.resize(indices.size());
  }

  for (std::size_t row = 0; row < indices.size(); ++row) {
    const LabeledExample& ex = dataset.examples[indices[row]];
    const std::size_t base = row * max_len;
    batch.token_ids[base] = Vocab::kCls;
    batch.attention_mask[base] = 1;
    const std::size_t usable = std::min(ex.tokens.size(), max_len - 1);
    for (std::size_t j = 0; j < usable; ++j) {
      batch.token_ids[base + 1 + j] = dataset.vocab.lookup(ex.tokens[j]);
      batch.attention_mask[base + 1 + j] = 1;
      if (dataset.kind == TaskKind::token) {
        batch.labels[base + 1 + j] = (*ex.token_labels)[j];
      }
    }
    if (dataset.kind == TaskKind::sequence) batch.labels[row] = *ex.seq_label;
  }
  return batch;
}

std::vector<TaskBatch> make_batches(const Dataset& dataset, std::size_t batch_size,
                                    std::size_t max_positions) {
  if (batch_size == 0) throw ConfigError("make_batches: batch_size must be >= 1");
  std::vector<TaskBatch> out;
  std::vector<std::size_t> indices;
  for (std::size_t i = 0; i < dataset.examples.size(); i += batch_size) {
    indices.clear();
    for (std::size_t j = i; j < std::min(i + batch_size, dataset.examples.size()); ++j) {
      indices.push_back(j);
    }
    out.push_back(make_batch(dataset, indices, max_positions));
  }
  return out;
}

}  // namespace peftlab
