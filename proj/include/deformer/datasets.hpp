#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "deformer/idx.hpp"
#include "deformer/rng.hpp"
#include "deformer/types.hpp"

namespace deformer {

// ---------------------------------------------------------------------------
// Binarization
// ---------------------------------------------------------------------------

struct BinarizeSpec {
  enum class Mode { threshold, stochastic };
  Mode mode = Mode::threshold;
  int threshold = 128;        // pixel >= threshold -> 1
  std::uint64_t seed = 0;     // stochastic mode only
};

// Maps u8 grayscale pixels to {0, 1} in place.
void binarize(std::vector<std::uint8_t>& pixels, const BinarizeSpec& spec);

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

struct ImageDataset {
  int rows = 0;
  int cols = 0;
  std::vector<std::vector<std::uint8_t>> train;  // values in {0, 1}
  std::vector<std::vector<std::uint8_t>> val;
  std::vector<std::vector<std::uint8_t>> test;

  int dim() const { return rows * cols; }
};

// Loads IDX image files and binarizes them. The validation split takes
// val_count training images: the last ones in file order when val_seed == 0,
// or a seeded random selection otherwise.
ImageDataset load_image_dataset(const std::string& train_idx_path, const std::string& test_idx_path,
                                const BinarizeSpec& binarize_spec, int val_count,
                                std::uint64_t val_seed = 0);

// Splits one parsed IDX array into binarized images (test support and tools).
std::vector<std::vector<std::uint8_t>> images_from_idx(const IdxArray& array, const BinarizeSpec& spec,
                                                       int& rows, int& cols);

// ---------------------------------------------------------------------------
// Tabular data
// ---------------------------------------------------------------------------

struct CsvTable {
  std::vector<std::string> header;
  Mat<double> values;
};

// Strict dialect: comma separators, one header row, '.' decimals. Anything
// else is rejected with the offending row/column.
CsvTable parse_csv(const std::string& text);
CsvTable load_csv(const std::string& path);

struct TabularOptions {
  std::vector<std::string> drop_columns;
  double noise_scale = 0.001;   // uniform [0, noise_scale) dequantization noise
  double test_fraction = 0.1;   // of all rows
  double val_fraction = 0.1;    // of the remaining rows
  std::uint64_t seed = 0;       // shuffle + noise
};

struct TabularDataset {
  std::vector<std::string> columns;
  Mat<double> train;
  Mat<double> val;
  Mat<double> test;
  Vec<double> mean;  // training-split statistics used for standardization
  Vec<double> stddev;

  int dim() const { return static_cast<int>(train.cols()); }
};

// Drops excluded columns, shuffles, adds seeded dequantization noise, splits
// test / validation / train and standardizes by training-split mean/std.
TabularDataset preprocess_tabular(const CsvTable& table, const TabularOptions& options);

}  // namespace deformer
