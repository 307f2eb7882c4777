#pragma once

#include <filesystem>

#include "ketlab/model.hpp"

namespace ketlab::model {

/// Checkpoint format "ckpt-v1": a JSON manifest listing
/// {name, shape, dtype, byte offset, checksum} per tensor plus one raw blob
/// of little-endian binary32 values, row-major, in registry order.
void save_checkpoint(const TransformerLM& m, const std::filesystem::path& manifest_path,
                     const std::filesystem::path& blob_path);

TransformerLM load_checkpoint(const std::filesystem::path& manifest_path,
                              const std::filesystem::path& blob_path);

/// Convenience pair layout: <dir>/model.json + <dir>/model.bin
void save_checkpoint_dir(const TransformerLM& m, const std::filesystem::path& dir);
TransformerLM load_checkpoint_dir(const std::filesystem::path& dir);
bool checkpoint_exists(const std::filesystem::path& dir);

}  // namespace ketlab::model
