#pragma once

// Versioned checkpoint container.
//
//   "EPCL1\n"
//   u64 header length, header JSON (config, iteration, rng state, ...)
//   u32 blob count, then per blob: u32 name length, name, u64 size, bytes
//
// Integers are little-endian. Writes go to a temporary file that is renamed
// into place.

#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

namespace epcl {

inline constexpr std::string_view kCheckpointMagic = "EPCL1";

struct CheckpointFile {
  nlohmann::json header;
  std::map<std::string, std::string> blobs;
};

void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& ckpt);
/// Throws BadCheckpoint on a wrong magic string or truncated content.
CheckpointFile read_checkpoint_file(const std::filesystem::path& path);

}  // namespace epcl
