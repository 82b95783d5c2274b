#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "deformer/rng.hpp"

namespace deformer {

// Explicit probability table over D binary features; the ground-truth oracle
// for desk-scale verification. Configurations are indexed lexicographically:
// (x_0, ..., x_{D-1}) -> sum_d x_d * 2^(D-1-d).
class SyntheticJoint {
 public:
  SyntheticJoint(int dim, std::vector<double> table);

  static SyntheticJoint uniform(int dim);
  static SyntheticJoint random(int dim, std::uint64_t seed);

  // Text format: line 1 is D, then 2^D probability lines in lexicographic
  // configuration order.
  static SyntheticJoint load(const std::string& path);
  void save(const std::string& path) const;

  int dim() const { return dim_; }
  const std::vector<double>& table() const { return table_; }

  std::size_t config_index(std::span<const std::uint8_t> config) const;
  std::vector<std::uint8_t> config_from_index(std::size_t index) const;

  double prob(std::span<const std::uint8_t> config) const;

  // -ln p(config) in nats; +infinity for zero-probability configurations.
  double nll(std::span<const std::uint8_t> config) const;

  double entropy() const;

  std::vector<std::uint8_t> sample(Rng& rng) const;

 private:
  int dim_;
  std::vector<double> table_;
  std::vector<double> cumulative_;

  void build_cumulative();
};

}  // namespace deformer
