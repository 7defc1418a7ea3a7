#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mixshare/tensor.hpp"

namespace mixshare {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline constexpr char kCheckpointMagic[4] = {'M', 'X', 'S', 'H'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary layout (all integers little-endian):
///   "MXSH" | u32 version | u64 record count |
///   per record: u32 name bytes | UTF-8 name | u32 rank | u64 dims[rank] |
///               f64 payload[prod(dims)]
void write_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors);
NamedTensors read_checkpoint(const std::filesystem::path& path);

/// Byte image of the checkpoint (what write_checkpoint puts on disk).
std::string encode_checkpoint(const NamedTensors& tensors);
NamedTensors decode_checkpoint(const std::string& bytes);

}  // namespace mixshare
