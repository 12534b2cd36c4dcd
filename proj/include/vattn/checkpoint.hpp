#ifndef VATTN_CHECKPOINT_HPP_
#define VATTN_CHECKPOINT_HPP_

#include <cstdint>
#include <filesystem>
#include <string>

#include "vattn/model.hpp"

namespace vattn {

// Binary layout, little-endian throughout:
//   magic "VATTNCKP" | u32 version | ModelConfig (8 x i32, u64 seed)
//   | u64 update_count | u32 tensor_count
//   | per tensor: u32 name_len, name bytes, u32 rows, u32 cols, f64 values
//     (row-major)
//   | u32 CRC-32 of every preceding byte
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string SerializeCheckpoint(const ToyModel& model);
// Throws schema-error on bad magic, version or checksum.
ToyModel DeserializeCheckpoint(const std::string& bytes);

void SaveCheckpoint(const ToyModel& model, const std::filesystem::path& path);
ToyModel LoadCheckpoint(const std::filesystem::path& path);

}  // namespace vattn

#endif  // VATTN_CHECKPOINT_HPP_
