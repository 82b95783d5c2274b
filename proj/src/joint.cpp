#include "deformer/joint.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "deformer/errors.hpp"

namespace deformer {

SyntheticJoint::SyntheticJoint(int dim, std::vector<double> table) : dim_(dim), table_(std::move(table)) {
  if (dim_ < 1 || dim_ > 30) throw DataError("joint: dimension must be in [1, 30], got " + std::to_string(dim_));
  const std::size_t expected = std::size_t{1} << dim_;
  if (table_.size() != expected) {
    throw DataError("joint: expected " + std::to_string(expected) + " probabilities, got " +
                    std::to_string(table_.size()));
  }
  double sum = 0.0;
  for (double p : table_) {
    if (!(p >= 0.0)) throw DataError("joint: probabilities must be non-negative");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-12) {
    throw DataError("joint: probabilities sum to " + std::to_string(sum) + ", expected 1");
  }
  build_cumulative();
}

SyntheticJoint SyntheticJoint::uniform(int dim) {
  const std::size_t n = std::size_t{1} << dim;
  return SyntheticJoint(dim, std::vector<double>(n, 1.0 / static_cast<double>(n)));
}

SyntheticJoint SyntheticJoint::random(int dim, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = std::size_t{1} << dim;
  std::vector<double> table(n);
  double sum = 0.0;
  for (auto& p : table) {
    // Exponential draws normalized in place give a Dirichlet(1) table.
    p = -std::log(1.0 - rng.uniform());
    sum += p;
  }
  for (auto& p : table) p /= sum;
  // Renormalize exactly so the 1e-12 construction tolerance always holds.
  double total = 0.0;
  for (double p : table) total += p;
  for (auto& p : table) p /= total;
  return SyntheticJoint(dim, std::move(table));
}

SyntheticJoint SyntheticJoint::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("joint: cannot open '" + path + "'");
  int dim = 0;
  if (!(in >> dim)) throw DataError("joint: '" + path + "' is missing the dimension line");
  if (dim < 1 || dim > 30) throw DataError("joint: dimension must be in [1, 30], got " + std::to_string(dim));
  const std::size_t n = std::size_t{1} << dim;
  std::vector<double> table(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(in >> table[i])) {
      throw DataError("joint: '" + path + "' ended after " + std::to_string(i) + " of " + std::to_string(n) +
                      " probabilities");
    }
  }
  return SyntheticJoint(dim, std::move(table));
}

void SyntheticJoint::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("joint: cannot write '" + path + "'");
  out << dim_ << "\n";
  out.precision(17);
  for (double p : table_) out << p << "\n";
}

std::size_t SyntheticJoint::config_index(std::span<const std::uint8_t> config) const {
  if (config.size() != static_cast<std::size_t>(dim_)) {
    throw DataError("joint: sample has " + std::to_string(config.size()) + " features, expected " +
                    std::to_string(dim_));
  }
  std::size_t index = 0;
  for (std::uint8_t bit : config) {
    if (bit > 1) throw DataError("joint: sample values must be 0 or 1");
    index = index * 2 + bit;
  }
  return index;
}

std::vector<std::uint8_t> SyntheticJoint::config_from_index(std::size_t index) const {
  std::vector<std::uint8_t> config(dim_);
  for (int d = dim_ - 1; d >= 0; --d) {
    config[d] = index & 1;
    index >>= 1;
  }
  return config;
}

double SyntheticJoint::prob(std::span<const std::uint8_t> config) const {
  return table_[config_index(config)];
}

double SyntheticJoint::nll(std::span<const std::uint8_t> config) const {
  const double p = prob(config);
  if (p <= 0.0) return std::numeric_limits<double>::infinity();
  return -std::log(p);
}

double SyntheticJoint::entropy() const {
  double h = 0.0;
  for (double p : table_) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

std::vector<std::uint8_t> SyntheticJoint::sample(Rng& rng) const {
  const double u = rng.uniform();
  const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
  std::size_t index = static_cast<std::size_t>(it - cumulative_.begin());
  if (index >= table_.size()) index = table_.size() - 1;
  return config_from_index(index);
}

void SyntheticJoint::build_cumulative() {
  cumulative_.resize(table_.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < table_.size(); ++i) {
    acc += table_[i];
    cumulative_[i] = acc;
  }
  cumulative_.back() = 1.0;
}

}  // namespace deformer
