#pragma once

// JSON config files. Keys are exactly the TrainConfig / SynthConfig field
// names; a file may set any subset. Unknown keys and mistyped values throw
// ConfigError.

#include <filesystem>
#include <string>
#include <string_view>

#include "hydra/data.hpp"
#include "hydra/engine.hpp"

namespace hydra::config {

// Overlays the keys present in `text` onto `cfg`. `origin` prefixes errors.
void apply(std::string_view text, engine::TrainConfig& cfg, std::string_view origin = "config");
void apply(std::string_view text, data::SynthConfig& cfg, std::string_view origin = "config");

// Every field, pretty-printed; applying the output to defaults reproduces cfg.
std::string to_json(const engine::TrainConfig& cfg);
std::string to_json(const data::SynthConfig& cfg);

// Throws ConfigError when the file cannot be read.
std::string read_file(const std::filesystem::path& path);

}  // namespace hydra::config
