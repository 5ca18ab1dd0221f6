#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mhss/config.hpp"

using namespace mhss;

TEST_CASE("defaults survive an empty config", "[config]") {
  const RunConfig cfg = parse_run_config("");
  CHECK(cfg.data_path.empty());
  CHECK(cfg.synth_height == 32);
  CHECK(cfg.synth_width == 32);
  CHECK(cfg.synth_bands == 30);
  CHECK(cfg.synth_classes == 3);
  CHECK(cfg.synth_noise == 0.05);
  CHECK(cfg.patch_size == 4);
  CHECK(cfg.split_train == 0.1);
  CHECK(cfg.split_test == 0.8);
  CHECK(cfg.model_embed_dim == 64);
  CHECK(cfg.model_heads == 4);
  CHECK(cfg.model_state_dim == 128);
  CHECK(cfg.model_layers == 1);
  CHECK(cfg.train_lr == 0.001);
  CHECK(cfg.train_epochs == 50);
  CHECK(cfg.train_batch_size == 256);
  CHECK(cfg.train_shuffle);
  CHECK(cfg.out_dir == "out");
}

TEST_CASE("all keys parse", "[config]") {
  const std::string text = R"(
# a full configuration
data.path = /data/scene.hsc
synth.seed = 9
synth.height = 16
synth.width = 17
synth.bands = 12
synth.classes = 4
synth.noise = 0.125
patch.size = 5
patch.stride = 2
split.train = 0.2
split.val = 0.25
split.test = 0.55
split.seed = 77
model.embed_dim = 48
model.heads = 6
model.state_dim = 96
model.layers = 2
model.seed = 123
train.lr = 0.01      # inline comment
train.epochs = 7
train.batch_size = 64
train.seed = 99
train.shuffle = false
out.dir = /tmp/exp1
)";
  const RunConfig cfg = parse_run_config(text);
  CHECK(cfg.data_path == "/data/scene.hsc");
  CHECK(cfg.synth_seed == 9);
  CHECK(cfg.synth_height == 16);
  CHECK(cfg.synth_width == 17);
  CHECK(cfg.synth_bands == 12);
  CHECK(cfg.synth_classes == 4);
  CHECK(cfg.synth_noise == 0.125);
  CHECK(cfg.patch_size == 5);
  CHECK(cfg.patch_stride == 2);
  CHECK(cfg.split_train == 0.2);
  CHECK(cfg.split_val == 0.25);
  CHECK(cfg.split_test == 0.55);
  CHECK(cfg.split_seed == 77);
  CHECK(cfg.model_embed_dim == 48);
  CHECK(cfg.model_heads == 6);
  CHECK(cfg.model_state_dim == 96);
  CHECK(cfg.model_layers == 2);
  CHECK(cfg.model_seed == 123);
  CHECK(cfg.train_lr == 0.01);
  CHECK(cfg.train_epochs == 7);
  CHECK(cfg.train_batch_size == 64);
  CHECK(cfg.train_seed == 99);
  CHECK_FALSE(cfg.train_shuffle);
  CHECK(cfg.out_dir == "/tmp/exp1");

  // derived views carry the values through
  CHECK(cfg.patch_config().patch_size == 5);
  CHECK(cfg.split_spec().val_fraction == 0.25);
  CHECK(cfg.hyper_params(4).embed_dim == 48);
  CHECK(cfg.hyper_params(4).num_classes == 4);
  CHECK(cfg.train_config().epochs == 7);
  CHECK_FALSE(cfg.train_config().shuffle);
}

TEST_CASE("unknown keys are hard errors", "[config]") {
  try {
    parse_run_config("model.embed_dims = 64\n");
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("model.embed_dims") != std::string::npos);
    CHECK(msg.find("line 1") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_run_config("totally.wrong = 1\n"), ConfigError);
}

TEST_CASE("malformed values are rejected with the key name", "[config]") {
  CHECK_THROWS_WITH(parse_run_config("train.epochs = soon\n"),
                    Catch::Matchers::ContainsSubstring("train.epochs"));
  CHECK_THROWS_AS(parse_run_config("train.epochs = -3\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("train.epochs = 3x\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("train.lr = fast\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("train.lr = 0.1.2\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("train.shuffle = maybe\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("just a line\n"), ConfigError);
  CHECK_THROWS_AS(parse_run_config("= 5\n"), ConfigError);
  CHECK_THROWS_WITH(parse_run_config("ok = 1\n"), Catch::Matchers::ContainsSubstring("line 1"));
  CHECK_THROWS_WITH(parse_run_config("\n\npatch.size = abc\n"),
                    Catch::Matchers::ContainsSubstring("patch.size"));
}

TEST_CASE("comments, blanks, and repeated keys", "[config]") {
  const RunConfig cfg = parse_run_config(
      "# full-line comment\n"
      "\n"
      "   \t  \n"
      "patch.size = 3\n"
      "patch.size = 6  # later assignment wins\n");
  CHECK(cfg.patch_size == 6);
}

TEST_CASE("config files load from disk", "[config]") {
  const std::string path =
      (std::filesystem::temp_directory_path() / "cfg_test.conf").string();
  {
    std::ofstream out(path);
    out << "synth.classes = 5\n";
  }
  CHECK(load_run_config(path).synth_classes == 5);
  std::remove(path.c_str());
  CHECK_THROWS_AS(load_run_config(path), IoError);
}

TEST_CASE("synthetic cube construction from config", "[config]") {
  RunConfig cfg;
  cfg.synth_height = 8;
  cfg.synth_width = 9;
  cfg.synth_bands = 6;
  cfg.synth_classes = 2;
  const HsiCube cube = cfg.make_cube();
  CHECK(cube.height == 8);
  CHECK(cube.width == 9);
  CHECK(cube.bands == 6);
  CHECK(cube.max_label() == 2);
}
