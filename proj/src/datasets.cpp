#include "deformer/datasets.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "deformer/errors.hpp"

namespace deformer {

void binarize(std::vector<std::uint8_t>& pixels, const BinarizeSpec& spec) {
  if (spec.mode == BinarizeSpec::Mode::threshold) {
    if (spec.threshold < 0 || spec.threshold > 255) {
      throw ConfigError("binarize: threshold must be in [0, 255], got " + std::to_string(spec.threshold));
    }
    for (auto& p : pixels) p = p >= spec.threshold ? 1 : 0;
  } else {
    Rng rng(spec.seed);
    for (auto& p : pixels) p = rng.uniform() < p / 255.0 ? 1 : 0;
  }
}

std::vector<std::vector<std::uint8_t>> images_from_idx(const IdxArray& array, const BinarizeSpec& spec,
                                                       int& rows, int& cols) {
  if (array.dims.size() != 3) {
    throw DataError("images: expected a 3-D IDX array, got rank " + std::to_string(array.dims.size()));
  }
  const std::size_t count = array.dims[0];
  rows = static_cast<int>(array.dims[1]);
  cols = static_cast<int>(array.dims[2]);
  const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
  std::vector<std::vector<std::uint8_t>> images(count);
  for (std::size_t i = 0; i < count; ++i) {
    images[i].assign(array.data.begin() + i * pixels, array.data.begin() + (i + 1) * pixels);
    binarize(images[i], spec);
  }
  return images;
}

ImageDataset load_image_dataset(const std::string& train_idx_path, const std::string& test_idx_path,
                                const BinarizeSpec& binarize_spec, int val_count, std::uint64_t val_seed) {
  ImageDataset ds;
  auto train_all = images_from_idx(load_idx(train_idx_path), binarize_spec, ds.rows, ds.cols);

  int test_rows = 0, test_cols = 0;
  ds.test = images_from_idx(load_idx(test_idx_path), binarize_spec, test_rows, test_cols);
  if (test_rows != ds.rows || test_cols != ds.cols) {
    throw DataError("images: train is " + std::to_string(ds.rows) + "x" + std::to_string(ds.cols) +
                    " but test is " + std::to_string(test_rows) + "x" + std::to_string(test_cols));
  }

  if (val_count < 0 || static_cast<std::size_t>(val_count) >= train_all.size()) {
    throw ConfigError("images: validation count " + std::to_string(val_count) +
                      " must be in [0, train size " + std::to_string(train_all.size()) + ")");
  }

  std::vector<std::size_t> order(train_all.size());
  std::iota(order.begin(), order.end(), 0);
  if (val_seed != 0) {
    Rng rng(val_seed);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[rng.uniform_int(i)]);
    }
  }
  const std::size_t train_count = train_all.size() - static_cast<std::size_t>(val_count);
  ds.train.reserve(train_count);
  ds.val.reserve(val_count);
  for (std::size_t i = 0; i < order.size(); ++i) {
    auto& image = train_all[order[i]];
    if (i < train_count) {
      ds.train.push_back(std::move(image));
    } else {
      ds.val.push_back(std::move(image));
    }
  }
  return ds;
}

namespace {

double parse_cell(const std::string& cell, std::size_t row, std::size_t col) {
  const char* begin = cell.data();
  const char* end = begin + cell.size();
  double value = 0.0;
  const auto result = std::from_chars(begin, end, value);
  if (result.ec != std::errc() || result.ptr != end || cell.empty()) {
    throw DataError("csv: cannot parse '" + cell + "' as a number at row " + std::to_string(row) +
                    ", column " + std::to_string(col));
  }
  return value;
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

}  // namespace

CsvTable parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw DataError("csv: empty input (header row required)");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  CsvTable table;
  table.header = split_line(line);
  const std::size_t width = table.header.size();
  if (width == 0) throw DataError("csv: empty header row");

  std::vector<double> cells;
  std::size_t rows = 0;
  std::size_t row_number = 1;
  while (std::getline(in, line)) {
    ++row_number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto fields = split_line(line);
    if (fields.size() != width) {
      throw DataError("csv: row " + std::to_string(row_number) + " has " + std::to_string(fields.size()) +
                      " fields, expected " + std::to_string(width));
    }
    for (std::size_t c = 0; c < width; ++c) cells.push_back(parse_cell(fields[c], row_number, c + 1));
    ++rows;
  }
  if (rows == 0) throw DataError("csv: no data rows");
  table.values.resize(static_cast<Index>(rows), static_cast<Index>(width));
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      table.values(static_cast<Index>(r), static_cast<Index>(c)) = cells[r * width + c];
    }
  }
  return table;
}

CsvTable load_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("csv: cannot open '" + path + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_csv(buffer.str());
}

TabularDataset preprocess_tabular(const CsvTable& table, const TabularOptions& options) {
  // Column dropping.
  std::vector<Index> keep;
  std::vector<std::string> kept_names;
  for (Index c = 0; c < table.values.cols(); ++c) {
    const std::string& name = table.header[static_cast<std::size_t>(c)];
    if (std::find(options.drop_columns.begin(), options.drop_columns.end(), name) ==
        options.drop_columns.end()) {
      keep.push_back(c);
      kept_names.push_back(name);
    }
  }
  if (keep.empty()) throw ConfigError("tabular: all columns dropped");

  const Index n = table.values.rows();
  const Index d = static_cast<Index>(keep.size());
  Mat<double> data(n, d);
  for (Index c = 0; c < d; ++c) data.col(c) = table.values.col(keep[static_cast<std::size_t>(c)]);

  // Seeded shuffle, then dequantization noise.
  Rng rng(options.seed, StreamLabel::data);
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::swap(order[i - 1], order[rng.uniform_int(i)]);
  }
  Mat<double> shuffled(n, d);
  for (Index r = 0; r < n; ++r) shuffled.row(r) = data.row(order[static_cast<std::size_t>(r)]);
  if (options.noise_scale > 0.0) {
    for (Index r = 0; r < n; ++r) {
      for (Index c = 0; c < d; ++c) shuffled(r, c) += rng.uniform(0.0, options.noise_scale);
    }
  }

  // Split: test fraction of all rows, validation fraction of the remainder.
  const Index n_test = static_cast<Index>(options.test_fraction * static_cast<double>(n));
  const Index n_val = static_cast<Index>(options.val_fraction * static_cast<double>(n - n_test));
  const Index n_train = n - n_test - n_val;
  if (n_train < 2) throw DataError("tabular: only " + std::to_string(n_train) + " training rows after splits");

  TabularDataset ds;
  ds.columns = std::move(kept_names);
  ds.train = shuffled.topRows(n_train);
  ds.val = shuffled.middleRows(n_train, n_val);
  ds.test = shuffled.bottomRows(n_test);

  // Standardize by training-split statistics.
  ds.mean = ds.train.colwise().mean();
  Vec<double> var = (ds.train.rowwise() - ds.mean.transpose()).array().square().colwise().mean();
  ds.stddev = var.array().sqrt();
  for (Index c = 0; c < d; ++c) {
    if (!(ds.stddev(c) > 0.0)) {
      throw DataError("tabular: zero variance in column '" + ds.columns[static_cast<std::size_t>(c)] + "'");
    }
  }
  auto standardize = [&](Mat<double>& block) {
    if (block.rows() == 0) return;
    block = (block.rowwise() - ds.mean.transpose()).array().rowwise() /
            ds.stddev.transpose().array();
  };
  standardize(ds.train);
  standardize(ds.val);
  standardize(ds.test);
  return ds;
}

}  // namespace deformer
