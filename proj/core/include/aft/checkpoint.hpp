#pragma once

#include <cstdint>
#include <filesystem>

#include "aft/model.hpp"

namespace aft {

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::size_t step = 0;
};

/// Writes dir/manifest.json and dir/params.bin (little-endian f64, tensors
/// back to back in Model::parameters() order). Creates dir if needed.
void save_checkpoint(const std::filesystem::path& dir, const Model& m, const CheckpointMeta& meta);

struct LoadedCheckpoint {
  Model model;
  CheckpointMeta meta;
};

/// IoError for missing/unreadable files, ConfigError for malformed manifests
/// or blobs that disagree with the manifest.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace aft
