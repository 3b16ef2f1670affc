#pragma once

// HYDC checkpoint files: "HYDC", u32 version, u64 entry count, then per entry
// u32 name length, name bytes, u32 rank, u64 extents, f64 LE values.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "hydra/data.hpp"
#include "hydra/model.hpp"
#include "hydra/tape.hpp"

namespace hydra::checkpoint {

inline constexpr std::uint32_t kVersion = 1;

using Entries = std::vector<std::pair<std::string, ad::Tensor>>;

void save(const std::filesystem::path& path, const Entries& entries);
// Throws DataError on a bad magic, version, truncation or trailing bytes.
Entries load(const std::filesystem::path& path);

// Model parameters plus the label scaler under "scaler.*".
Entries pack(const model::Model& m, const data::LabelScaler& scaler);
// Loads parameters into `m` (shapes validated) and returns the scaler.
data::LabelScaler unpack(const Entries& entries, model::Model& m);

}  // namespace hydra::checkpoint
