#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "deformer/model.hpp"

namespace deformer {

// Checkpoint layout (little-endian):
//   8-byte magic "DEFORMCK", u32 version, u64 metadata length,
//   metadata as UTF-8 "key:value\n" lines,
//   then one block per array: u32 name length, name, u32 rank,
//   u64 dims[rank], raw scalar data.
inline constexpr char kCheckpointMagic[8] = {'D', 'E', 'F', 'O', 'R', 'M', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using Metadata = std::vector<std::pair<std::string, std::string>>;

inline std::string metadata_value(const Metadata& metadata, const std::string& key) {
  for (const auto& [k, v] : metadata) {
    if (k == key) return v;
  }
  throw DataError("checkpoint: missing metadata key '" + key + "'");
}

inline bool metadata_has(const Metadata& metadata, const std::string& key) {
  for (const auto& [k, v] : metadata) {
    if (k == key) return true;
  }
  return false;
}

namespace detail {

inline void write_u32(std::ostream& out, std::uint32_t value) {
  char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  out.write(bytes, 4);
}

inline void write_u64(std::ostream& out, std::uint64_t value) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  out.write(bytes, 8);
}

inline std::uint32_t read_u32(std::istream& in) {
  unsigned char bytes[4];
  in.read(reinterpret_cast<char*>(bytes), 4);
  if (!in) throw DataError("checkpoint: truncated integer field");
  std::uint32_t value = 0;
  for (int i = 3; i >= 0; --i) value = (value << 8) | bytes[i];
  return value;
}

inline std::uint64_t read_u64(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  if (!in) throw DataError("checkpoint: truncated integer field");
  std::uint64_t value = 0;
  for (int i = 7; i >= 0; --i) value = (value << 8) | bytes[i];
  return value;
}

}  // namespace detail

template <typename S>
using NamedArrays = std::vector<std::pair<std::string, Mat<S>>>;

template <typename S>
void save_checkpoint(const std::string& path, const Metadata& metadata, const NamedArrays<S>& arrays) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot write '" + path + "'");
  out.write(kCheckpointMagic, 8);
  detail::write_u32(out, kCheckpointVersion);

  std::string meta_text;
  for (const auto& [key, value] : metadata) meta_text += key + ":" + value + "\n";
  detail::write_u64(out, meta_text.size());
  out.write(meta_text.data(), static_cast<std::streamsize>(meta_text.size()));

  for (const auto& [name, matrix] : arrays) {
    detail::write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_u32(out, 2);
    detail::write_u64(out, static_cast<std::uint64_t>(matrix.rows()));
    detail::write_u64(out, static_cast<std::uint64_t>(matrix.cols()));
    out.write(reinterpret_cast<const char*>(matrix.data()),
              static_cast<std::streamsize>(sizeof(S) * matrix.size()));
  }
  if (!out) throw DataError("checkpoint: write to '" + path + "' failed");
}

inline Metadata parse_metadata(const std::string& text) {
  Metadata metadata;
  std::size_t start = 0;
  while (start < text.size()) {
    const std::size_t end = text.find('\n', start);
    if (end == std::string::npos) throw DataError("checkpoint: unterminated metadata line");
    const std::string line = text.substr(start, end - start);
    const std::size_t colon = line.find(':');
    if (colon == std::string::npos) throw DataError("checkpoint: metadata line without ':': " + line);
    metadata.emplace_back(line.substr(0, colon), line.substr(colon + 1));
    start = end + 1;
  }
  return metadata;
}

inline Metadata read_checkpoint_metadata(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw DataError("checkpoint: bad magic in '" + path + "'");
  }
  const std::uint32_t version = detail::read_u32(in);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint64_t meta_len = detail::read_u64(in);
  std::string meta_text(meta_len, '\0');
  in.read(meta_text.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw DataError("checkpoint: truncated metadata");
  return parse_metadata(meta_text);
}

template <typename S>
std::pair<Metadata, NamedArrays<S>> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kCheckpointMagic, 8) != 0) {
    throw DataError("checkpoint: bad magic in '" + path + "'");
  }
  const std::uint32_t version = detail::read_u32(in);
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  }
  const std::uint64_t meta_len = detail::read_u64(in);
  std::string meta_text(meta_len, '\0');
  in.read(meta_text.data(), static_cast<std::streamsize>(meta_len));
  if (!in) throw DataError("checkpoint: truncated metadata");
  Metadata metadata = parse_metadata(meta_text);

  const std::string file_precision = metadata_value(metadata, "precision");
  if (file_precision != Scalar<S>::name) {
    throw DataError("checkpoint: file precision is " + file_precision + ", loader expects " +
                    Scalar<S>::name);
  }

  NamedArrays<S> arrays;
  while (true) {
    const int peek = in.peek();
    if (peek == std::char_traits<char>::eof()) break;
    const std::uint32_t name_len = detail::read_u32(in);
    if (name_len == 0 || name_len > 4096) throw DataError("checkpoint: implausible block name length");
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const std::uint32_t rank = detail::read_u32(in);
    if (rank != 2) throw DataError("checkpoint: block '" + name + "' has rank " + std::to_string(rank));
    const std::uint64_t rows = detail::read_u64(in);
    const std::uint64_t cols = detail::read_u64(in);
    Mat<S> matrix(static_cast<Index>(rows), static_cast<Index>(cols));
    in.read(reinterpret_cast<char*>(matrix.data()),
            static_cast<std::streamsize>(sizeof(S) * matrix.size()));
    if (!in) throw DataError("checkpoint: truncated data for block '" + name + "'");
    arrays.emplace_back(std::move(name), std::move(matrix));
  }
  return {std::move(metadata), std::move(arrays)};
}

// ---------------------------------------------------------------------------
// Model config <-> metadata
// ---------------------------------------------------------------------------

inline void append_model_config(Metadata& metadata, const ModelConfig& cfg) {
  auto add = [&](const std::string& key, long long value) {
    metadata.emplace_back("model." + key, std::to_string(value));
  };
  metadata.emplace_back("model.identity", cfg.identity == IdentityMode::pixel ? "pixel" : "tabular");
  add("image_rows", cfg.image_rows);
  add("image_cols", cfg.image_cols);
  add("table_width", cfg.table_width);
  add("embed_dim", cfg.embed_dim);
  add("mlp_hidden1", cfg.mlp_hidden1);
  add("mlp_hidden2", cfg.mlp_hidden2);
  metadata.emplace_back("model.head", cfg.head.kind == HeadKind::bernoulli     ? "bernoulli"
                                      : cfg.head.kind == HeadKind::categorical ? "categorical"
                                                                               : "mixture");
  add("labels", cfg.head.labels);
  add("components", cfg.head.components);
  add("d_model", cfg.tf.d_model);
  add("heads", cfg.tf.n_heads);
  add("d_ff", cfg.tf.d_ff);
  add("layers", cfg.tf.n_layers);
  metadata.emplace_back("model.dropout", std::to_string(cfg.tf.dropout_p));
}

inline ModelConfig model_config_from_metadata(const Metadata& metadata) {
  auto get_int = [&](const std::string& key) {
    return std::stoll(metadata_value(metadata, "model." + key));
  };
  ModelConfig cfg;
  const std::string identity = metadata_value(metadata, "model.identity");
  cfg.identity = identity == "pixel" ? IdentityMode::pixel : IdentityMode::tabular;
  cfg.image_rows = static_cast<int>(get_int("image_rows"));
  cfg.image_cols = static_cast<int>(get_int("image_cols"));
  cfg.table_width = static_cast<int>(get_int("table_width"));
  cfg.embed_dim = static_cast<int>(get_int("embed_dim"));
  cfg.mlp_hidden1 = static_cast<int>(get_int("mlp_hidden1"));
  cfg.mlp_hidden2 = static_cast<int>(get_int("mlp_hidden2"));
  const std::string head = metadata_value(metadata, "model.head");
  cfg.head.kind = head == "bernoulli"     ? HeadKind::bernoulli
                  : head == "categorical" ? HeadKind::categorical
                                          : HeadKind::mixture;
  cfg.head.labels = static_cast<int>(get_int("labels"));
  cfg.head.components = static_cast<int>(get_int("components"));
  cfg.tf.d_model = static_cast<int>(get_int("d_model"));
  cfg.tf.n_heads = static_cast<int>(get_int("heads"));
  cfg.tf.d_ff = static_cast<int>(get_int("d_ff"));
  cfg.tf.n_layers = static_cast<int>(get_int("layers"));
  cfg.tf.dropout_p = std::stod(metadata_value(metadata, "model.dropout"));
  return cfg;
}

// Restores parameter values from checkpoint blocks by name.
template <typename S>
void restore_parameters(DeformerModel<S>& model, const NamedArrays<S>& arrays) {
  auto params = model.parameters();
  for (auto& [name, tensor] : params) {
    bool found = false;
    for (const auto& [block_name, matrix] : arrays) {
      if (block_name == name) {
        if (matrix.rows() != tensor.rows() || matrix.cols() != tensor.cols()) {
          throw DataError("checkpoint: block '" + name + "' is " + std::to_string(matrix.rows()) + "x" +
                          std::to_string(matrix.cols()) + ", model expects " +
                          std::to_string(tensor.rows()) + "x" + std::to_string(tensor.cols()));
        }
        tensor.mutable_value() = matrix;
        found = true;
        break;
      }
    }
    if (!found) throw DataError("checkpoint: missing parameter block '" + name + "'");
  }
}

// Loads a full model (config + parameters) from a checkpoint.
template <typename S>
DeformerModel<S> load_model(const std::string& path) {
  auto [metadata, arrays] = load_checkpoint<S>(path);
  ModelConfig cfg = model_config_from_metadata(metadata);
  Rng dummy_init(0);
  DeformerModel<S> model(cfg, dummy_init);
  restore_parameters(model, arrays);
  return model;
}

}  // namespace deformer
