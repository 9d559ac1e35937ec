#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace unidiff {

// Named float32 tensor list with a string metadata block.
//
// Layout (little-endian):
//   "UDCK"  u16 version
//   u32 metadata count, then (u32 len, key bytes, u32 len, value bytes)*
//   u32 tensor count, then per tensor:
//       u16 name len, name, u8 dtype (0 = float32), u8 rank, u32 dims[rank],
//       u64 payload offset, u64 payload bytes
//   payload: raw tensors back to back, offsets relative to payload start
struct CheckpointTensor {
    std::string name;
    std::vector<int> shape;
    std::vector<float> values;
};

struct Checkpoint {
    std::map<std::string, std::string> metadata;
    std::vector<CheckpointTensor> tensors;

    const CheckpointTensor* find(const std::string& name) const;
    const std::string& meta(const std::string& key) const;
};

inline constexpr char kCheckpointMagic[4] = {'U', 'D', 'C', 'K'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace unidiff
