#include "deformer/idx.hpp"

#include <fstream>

#include "deformer/errors.hpp"

namespace deformer {

namespace {

std::uint32_t read_u32_be(std::span<const std::uint8_t> bytes, std::size_t offset) {
  return (static_cast<std::uint32_t>(bytes[offset]) << 24) |
         (static_cast<std::uint32_t>(bytes[offset + 1]) << 16) |
         (static_cast<std::uint32_t>(bytes[offset + 2]) << 8) |
         static_cast<std::uint32_t>(bytes[offset + 3]);
}

void append_u32_be(std::vector<std::uint8_t>& out, std::uint32_t value) {
  out.push_back(static_cast<std::uint8_t>(value >> 24));
  out.push_back(static_cast<std::uint8_t>(value >> 16));
  out.push_back(static_cast<std::uint8_t>(value >> 8));
  out.push_back(static_cast<std::uint8_t>(value));
}

}  // namespace

IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw DataError("idx: truncated header (no magic)");
  const std::uint32_t magic = read_u32_be(bytes, 0);
  std::size_t ndim = 0;
  if (magic == 0x00000803u) {
    ndim = 3;
  } else if (magic == 0x00000801u) {
    ndim = 1;
  } else {
    throw DataError("idx: unsupported magic 0x" + [magic] {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%08x", magic);
      return std::string(buf);
    }());
  }

  const std::size_t header_size = 4 + 4 * ndim;
  if (bytes.size() < header_size) throw DataError("idx: truncated header (missing dimension sizes)");

  IdxArray array;
  std::size_t count = 1;
  for (std::size_t d = 0; d < ndim; ++d) {
    const std::uint32_t dim = read_u32_be(bytes, 4 + 4 * d);
    array.dims.push_back(dim);
    count *= dim;
  }

  const std::size_t payload = bytes.size() - header_size;
  if (payload < count) {
    throw DataError("idx: truncated payload, declared " + std::to_string(count) + " bytes, found " +
                    std::to_string(payload));
  }
  if (payload > count) {
    throw DataError("idx: trailing bytes, declared " + std::to_string(count) + " bytes, found " +
                    std::to_string(payload));
  }

  array.data.assign(bytes.begin() + header_size, bytes.end());
  return array;
}

std::vector<std::uint8_t> write_idx(const IdxArray& array) {
  if (array.dims.size() != 1 && array.dims.size() != 3) {
    throw DataError("idx: only 1-D and 3-D u8 arrays are supported, got rank " +
                    std::to_string(array.dims.size()));
  }
  if (array.element_count() != array.data.size()) {
    throw DataError("idx: dims declare " + std::to_string(array.element_count()) + " elements, data has " +
                    std::to_string(array.data.size()));
  }
  std::vector<std::uint8_t> out;
  out.reserve(4 + 4 * array.dims.size() + array.data.size());
  append_u32_be(out, array.dims.size() == 3 ? 0x00000803u : 0x00000801u);
  for (auto dim : array.dims) append_u32_be(out, dim);
  out.insert(out.end(), array.data.begin(), array.data.end());
  return out;
}

IdxArray load_idx(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("idx: cannot open '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_idx(bytes);
}

void save_idx(const IdxArray& array, const std::string& path) {
  const auto bytes = write_idx(array);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("idx: cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace deformer
