#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mhss/errors.hpp"
#include "mhss/hsi.hpp"
#include "mhss/model.hpp"
#include "mhss/trainer.hpp"

namespace mhss {

// ---------------------------------------------------------------------------
// Flat key=value run configuration. UTF-8 text, `#` starts a comment, blank
// lines ignored, later assignments win. Unknown keys are a hard error so a
// typo cannot silently fall back to a default.
// ---------------------------------------------------------------------------
struct RunConfig {
  // data source: a cube file, or (when data.path is empty) a synthetic scene
  std::string data_path;
  std::uint64_t synth_seed = 7;
  std::size_t synth_height = 32;
  std::size_t synth_width = 32;
  std::size_t synth_bands = 30;
  std::size_t synth_classes = 3;
  double synth_noise = 0.05;
  // patches
  std::size_t patch_size = 4;
  std::size_t patch_stride = 1;
  // splits
  double split_train = 0.1;
  double split_val = 0.1;
  double split_test = 0.8;
  std::uint64_t split_seed = 1;
  // model
  std::size_t model_embed_dim = 64;
  std::size_t model_heads = 4;
  std::size_t model_state_dim = 128;
  std::size_t model_layers = 1;
  std::uint64_t model_seed = 42;
  // training
  double train_lr = 0.001;
  std::size_t train_epochs = 50;
  std::size_t train_batch_size = 256;
  std::uint64_t train_seed = 1;
  bool train_shuffle = true;
  // outputs
  std::string out_dir = "out";

  PatchConfig patch_config() const { return {patch_size, patch_stride}; }

  SplitSpec split_spec() const { return {split_train, split_val, split_test, split_seed}; }

  HyperParams hyper_params(std::size_t num_classes) const {
    HyperParams hp;
    hp.embed_dim = model_embed_dim;
    hp.num_heads = model_heads;
    hp.state_dim = model_state_dim;
    hp.num_layers = model_layers;
    hp.num_classes = num_classes;
    return hp;
  }

  TrainConfig train_config() const {
    TrainConfig tc;
    tc.learning_rate = train_lr;
    tc.epochs = train_epochs;
    tc.batch_size = train_batch_size;
    tc.seed = train_seed;
    tc.shuffle = train_shuffle;
    return tc;
  }

  /// Loads data.path, or generates the configured synthetic scene.
  HsiCube make_cube() const {
    if (!data_path.empty()) return load_cube(data_path);
    return synth_cube(synth_seed, synth_height, synth_width, synth_bands, synth_classes,
                      synth_noise);
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  if (value.empty() || value[0] == '-') {
    throw ConfigError(key + ": expected a non-negative integer, got \"" + value + "\"");
  }
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    v = std::stoull(value, &used);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got \"" + value + "\"");
  }
  if (used != value.size()) {
    throw ConfigError(key + ": trailing characters in integer \"" + value + "\"");
  }
  return v;
}

inline double parse_double(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got \"" + value + "\"");
  }
  if (used != value.size()) {
    throw ConfigError(key + ": trailing characters in number \"" + value + "\"");
  }
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError(key + ": expected true/false, got \"" + value + "\"");
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
  RunConfig cfg;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) eol = text.size();
    std::string line = text.substr(pos, eol - pos);
    pos = eol + 1;
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) {
      if (pos > text.size()) break;
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value, got \"" +
                        line + "\"");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    }

    if (key == "data.path") cfg.data_path = value;
    else if (key == "synth.seed") cfg.synth_seed = detail::parse_u64(key, value);
    else if (key == "synth.height") cfg.synth_height = detail::parse_u64(key, value);
    else if (key == "synth.width") cfg.synth_width = detail::parse_u64(key, value);
    else if (key == "synth.bands") cfg.synth_bands = detail::parse_u64(key, value);
    else if (key == "synth.classes") cfg.synth_classes = detail::parse_u64(key, value);
    else if (key == "synth.noise") cfg.synth_noise = detail::parse_double(key, value);
    else if (key == "patch.size") cfg.patch_size = detail::parse_u64(key, value);
    else if (key == "patch.stride") cfg.patch_stride = detail::parse_u64(key, value);
    else if (key == "split.train") cfg.split_train = detail::parse_double(key, value);
    else if (key == "split.val") cfg.split_val = detail::parse_double(key, value);
    else if (key == "split.test") cfg.split_test = detail::parse_double(key, value);
    else if (key == "split.seed") cfg.split_seed = detail::parse_u64(key, value);
    else if (key == "model.embed_dim") cfg.model_embed_dim = detail::parse_u64(key, value);
    else if (key == "model.heads") cfg.model_heads = detail::parse_u64(key, value);
    else if (key == "model.state_dim") cfg.model_state_dim = detail::parse_u64(key, value);
    else if (key == "model.layers") cfg.model_layers = detail::parse_u64(key, value);
    else if (key == "model.seed") cfg.model_seed = detail::parse_u64(key, value);
    else if (key == "train.lr") cfg.train_lr = detail::parse_double(key, value);
    else if (key == "train.epochs") cfg.train_epochs = detail::parse_u64(key, value);
    else if (key == "train.batch_size") cfg.train_batch_size = detail::parse_u64(key, value);
    else if (key == "train.seed") cfg.train_seed = detail::parse_u64(key, value);
    else if (key == "train.shuffle") cfg.train_shuffle = detail::parse_bool(key, value);
    else if (key == "out.dir") cfg.out_dir = value;
    else {
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key \"" + key +
                        "\"");
    }
    if (pos > text.size()) break;
  }
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  return parse_run_config(detail::read_file(path));
}

}  // namespace mhss
