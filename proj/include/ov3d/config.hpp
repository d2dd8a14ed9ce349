#pragma once

#include <string>
#include <vector>

#include "ov3d/dataset.hpp"
#include "ov3d/encoders.hpp"
#include "ov3d/scenegen.hpp"
#include "ov3d/trainer.hpp"

namespace ov3d {

/// Everything a command needs: scene generation, corpus sizes, model shape
/// and training. model.num_classes always follows scene.num_classes.
struct Config {
  SceneConfig scene;
  DataConfig data;
  ModelConfig model;
  TrainConfig train;

  void validate() const;
};

/// Text format: one `key = value` per line, `#` starts a comment, list
/// values are whitespace separated. Keys not given keep their defaults.
/// Throws ConfigError naming the key on an unknown key or a bad value.
Config parse_config(const std::string& text);
Config load_config(const std::string& path);

/// Sets one key from its text form. Same errors as parse_config.
void set_config_value(Config& cfg, const std::string& key, const std::string& value);

/// Every key in a stable order; parse_config(format_config(c)) == c.
std::string format_config(const Config& cfg);

std::vector<std::string> config_keys();

}  // namespace ov3d
