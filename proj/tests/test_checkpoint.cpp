#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "peftlab/checkpoint.hpp"
#include "peftlab/data.hpp"
#include "peftlab/harness.hpp"
#include "test_util.hpp"

using namespace peftlab;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("peftlab_ckpt_test_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

ModelConfig small_config() {
  ModelConfig c;
  c.layers = 2;
  c.model_dim = 8;
  c.heads = 2;
  c.ffn_dim = 12;
  c.vocab = 30;
  c.max_positions = 12;
  c.num_labels = 3;
  return c;
}

}  // namespace

TEST_CASE("model checkpoints round trip bitwise") {
  TempDir tmp;
  const EncoderModel model = build_model(small_config(), 77);
  const std::string path = (tmp.path / "model.ckpt").string();
  save_model(model, path);
  const EncoderModel loaded = load_model(path);
  REQUIRE(loaded.params.size() == model.params.size());
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    CHECK(loaded.params[i].name == model.params[i].name);
    CHECK(loaded.params[i].trainable == model.params[i].trainable);
    CHECK(testutil::bitwise_equal(loaded.params[i].tensor, model.params[i].tensor));
  }
  CHECK(loaded.config.model_dim == model.config.model_dim);
}

TEST_CASE("manifest header is readable JSON with shapes and offsets") {
  TempDir tmp;
  const EncoderModel model = build_model(small_config(), 3);
  const std::string path = (tmp.path / "model.ckpt").string();
  save_model(model, path);

  std::ifstream in(path, std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  CHECK(std::string(magic, 8) == "PEFTCKPT");
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), 8);
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  const nlohmann::json manifest = nlohmann::json::parse(text);
  CHECK(manifest.at("kind") == "model");
  CHECK(manifest.at("config").at("model_dim") == 8);
  REQUIRE(manifest.at("tensors").is_array());
  const auto& first = manifest.at("tensors").at(0);
  CHECK(first.contains("name"));
  CHECK(first.contains("shape"));
  CHECK(first.at("offset") == 0);
}

TEST_CASE("adapter checkpoints restore the adapted forward on a fresh base") {
  TempDir tmp;
  const Dataset train_set = gen_sequence_task(3, 48, 2, 20, 8, 0.05);
  const Dataset eval_set = gen_sequence_task(4, 24, 2, 20, 8, 0.05);
  ModelConfig c = small_config();
  c.vocab = train_set.vocab.size();
  c.num_labels = train_set.num_classes;

  EncoderModel trained = build_model(c, 55);
  inject_lora(trained, LoraConfig{}, 9);
  TrainConfig cfg;
  cfg.mode = TrainMode::lora;
  cfg.batch_size = 16;
  cfg.eval_every = 1000;
  (void)train(trained, train_set, eval_set, cfg, {BudgetKind::epochs, 3});

  const std::string path = (tmp.path / "adapter.ckpt").string();
  save_adapter(trained, path);

  // one base checkpoint serves many tasks: rebuild the base and attach
  EncoderModel base = build_model(c, 55);
  load_adapter(base, path);
  REQUIRE(base.adapter.has_value());
  CHECK(base.adapter->kind == AdapterKind::lora);

  const TaskBatch batch = make_batch(eval_set, std::vector<std::size_t>{0, 1, 2, 3}, 12);
  CHECK(testutil::bitwise_equal(predict(trained, batch), predict(base, batch)));

  // wrong base config is refused
  ModelConfig other = c;
  other.ffn_dim += 2;
  EncoderModel mismatched = build_model(other, 55);
  CHECK_THROWS_AS(load_adapter(mismatched, path), DataError);

  // plain models have nothing to save
  EncoderModel plain = build_model(c, 1);
  CHECK_THROWS_AS(save_adapter(plain, (tmp.path / "none.ckpt").string()), StateError);
}

TEST_CASE("ia3 adapter checkpoints round trip") {
  TempDir tmp;
  ModelConfig c = small_config();
  EncoderModel model = build_model(c, 8);
  inject_ia3(model, Ia3Config{});
  // poke the vectors so the checkpoint is not all-ones
  model.param("layer.0.ia3.l_ff").tensor[2] = 1.75;
  const std::string path = (tmp.path / "ia3.ckpt").string();
  save_adapter(model, path);

  EncoderModel base = build_model(c, 8);
  load_adapter(base, path);
  CHECK(base.param("layer.0.ia3.l_ff").tensor[2] == 1.75);
  REQUIRE(base.adapter.has_value());
  CHECK(base.adapter->kind == AdapterKind::ia3);
}

TEST_CASE("corrupt checkpoints are rejected with data errors") {
  TempDir tmp;
  const std::string path = (tmp.path / "bogus.ckpt").string();
  {
    std::ofstream out(path, std::ios::binary);
    out << "definitely not a checkpoint";
  }
  CHECK_THROWS_AS((void)load_model(path), DataError);
  CHECK_THROWS_AS((void)load_model((tmp.path / "missing.ckpt").string()), DataError);
}

TEST_CASE("full-model checkpoints preserve adapter state") {
  TempDir tmp;
  ModelConfig c = small_config();
  EncoderModel model = build_model(c, 4);
  LoraConfig lora;
  lora.rank = 2;
  lora.targets = {LoraTarget::key, LoraTarget::value, LoraTarget::ffn};
  inject_lora(model, lora, 6);
  const std::string path = (tmp.path / "adapted.ckpt").string();
  save_model(model, path);
  const EncoderModel loaded = load_model(path);
  REQUIRE(loaded.adapter.has_value());
  CHECK(loaded.adapter->kind == AdapterKind::lora);
  CHECK(loaded.adapter->lora.rank == 2);
  CHECK(loaded.adapter->lora.targets.size() == 3);
  CHECK(count_trainable(loaded).trainable == count_trainable(model).trainable);
}
