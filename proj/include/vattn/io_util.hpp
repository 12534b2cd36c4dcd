#ifndef VATTN_IO_UTIL_HPP_
#define VATTN_IO_UTIL_HPP_

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace vattn {

// Writes via a sibling temp file and rename. Throws io-error.
void WriteFileAtomic(const std::filesystem::path& path, std::string_view data);

// Throws io-error naming the path.
std::string ReadFile(const std::filesystem::path& path);

std::vector<std::string> SplitLines(const std::string& text);

std::uint32_t Crc32(std::string_view data);

// splitmix64 finalizer; used to derive independent seeds.
std::uint64_t MixSeed(std::uint64_t seed, std::uint64_t stream);

}  // namespace vattn

#endif  // VATTN_IO_UTIL_HPP_
