#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace deformer {

// Contents of one IDX file: big-endian header (magic, one 4-byte size per
// dimension) followed by raw unsigned bytes.
struct IdxArray {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

// Accepts magic 0x00000803 (3-D u8) and 0x00000801 (1-D u8). Rejects bad
// magic, truncated payloads and trailing bytes with distinct reasons.
IdxArray parse_idx(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> write_idx(const IdxArray& array);

IdxArray load_idx(const std::string& path);
void save_idx(const IdxArray& array, const std::string& path);

}  // namespace deformer
