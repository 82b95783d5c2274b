#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "deformer/model.hpp"
#include "deformer/trainer.hpp"

namespace deformer {

// ---------------------------------------------------------------------------
// Order-averaged likelihood
// ---------------------------------------------------------------------------

struct EvalEntry {
  std::size_t sample_id = 0;
  double mean_nll = 0.0;
  double std_nll = 0.0;  // across orderings; 0 when K == 1
};

struct EvalSummary {
  std::size_t count = 0;
  double mean = 0.0;
  double stddev = 0.0;
  double median = 0.0;
  double p5 = 0.0, p25 = 0.0, p75 = 0.0, p95 = 0.0;
};

// Mean and spread of the full-sample NLL over K seeded uniform orderings.
// Deterministic for a fixed seed, independent of evaluation order.
template <typename S>
EvalEntry average_nll(const DeformerModel<S>& model, const SampleFeatures& features, int orderings,
                      std::uint64_t seed) {
  if (orderings < 1) throw ConfigError("average_nll: K must be >= 1");
  NoGradGuard no_grad;
  const int dim = static_cast<int>(features.size());
  double sum = 0.0, sum_squares = 0.0;
  for (int j = 0; j < orderings; ++j) {
    Rng rng(seed, StreamLabel::ordering, static_cast<std::uint64_t>(j));
    const auto sample = order_features(features, shuffle_ordering(dim, rng));
    const double value = static_cast<double>(nll(model, sample).value()(0, 0));
    sum += value;
    sum_squares += value * value;
  }
  EvalEntry entry;
  entry.mean_nll = sum / orderings;
  const double variance = std::max(0.0, sum_squares / orderings - entry.mean_nll * entry.mean_nll);
  entry.std_nll = orderings > 1 ? std::sqrt(variance) : 0.0;
  return entry;
}

// Per-sample evaluation fan-out. Sample i uses the stream derived from
// (seed, i), so results do not depend on the thread count.
template <typename S>
std::vector<EvalEntry> score_dataset(const DeformerModel<S>& model,
                                     const std::function<SampleFeatures(std::size_t)>& split,
                                     std::size_t count, int orderings, std::uint64_t seed,
                                     int threads = 1) {
  if (count == 0) return {};
  {
    const auto first = split(0);
    if (static_cast<int>(first.size()) != model.cfg.dim()) {
      throw DataError("score_dataset: samples have " + std::to_string(first.size()) +
                      " features, model expects " + std::to_string(model.cfg.dim()));
    }
  }
  std::vector<EvalEntry> entries(count);
  const int workers = std::max(1, threads);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) break;
      entries[i] = average_nll(model, split(i), orderings, mix64(seed) ^ i);
      entries[i].sample_id = i;
    }
  };
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int t = 0; t < workers; ++t) pool.emplace_back(work);
    for (auto& thread : pool) thread.join();
  }
  return entries;
}

inline EvalSummary summarize(const std::vector<EvalEntry>& entries) {
  EvalSummary summary;
  summary.count = entries.size();
  if (entries.empty()) return summary;
  std::vector<double> values;
  values.reserve(entries.size());
  double sum = 0.0;
  for (const auto& entry : entries) {
    values.push_back(entry.mean_nll);
    sum += entry.mean_nll;
  }
  summary.mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - summary.mean) * (v - summary.mean);
  summary.stddev = std::sqrt(sq / static_cast<double>(values.size()));
  std::sort(values.begin(), values.end());
  auto percentile = [&](double p) {
    const double rank = p * static_cast<double>(values.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(rank);
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return values[lo] * (1.0 - frac) + values[hi] * frac;
  };
  summary.median = percentile(0.5);
  summary.p5 = percentile(0.05);
  summary.p25 = percentile(0.25);
  summary.p75 = percentile(0.75);
  summary.p95 = percentile(0.95);
  return summary;
}

inline void write_eval_csv(const std::string& path, const std::vector<EvalEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw DataError("eval: cannot write '" + path + "'");
  out << "sample_id,mean_nll,std_nll\n";
  char line[96];
  for (const auto& entry : entries) {
    std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g\n", entry.sample_id, entry.mean_nll, entry.std_nll);
    out << line;
  }
}

inline void write_summary_csv(const std::string& path, const EvalSummary& summary) {
  std::ofstream out(path);
  if (!out) throw DataError("eval: cannot write '" + path + "'");
  out << "count,mean,std,median,p5,p25,p75,p95\n";
  char line[192];
  std::snprintf(line, sizeof(line), "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", summary.count,
                summary.mean, summary.stddev, summary.median, summary.p5, summary.p25, summary.p75,
                summary.p95);
  out << line;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

inline std::vector<FeatureIdentity> canonical_identities(const ModelConfig& cfg) {
  std::vector<FeatureIdentity> ids;
  ids.reserve(static_cast<std::size_t>(cfg.dim()));
  if (cfg.identity == IdentityMode::pixel) {
    for (int r = 0; r < cfg.image_rows; ++r) {
      for (int c = 0; c < cfg.image_cols; ++c) ids.push_back(FeatureIdentity::pixel(r, c));
    }
  } else {
    for (int i = 0; i < cfg.table_width; ++i) ids.push_back(FeatureIdentity::column(i));
  }
  return ids;
}

inline int identity_index(const ModelConfig& cfg, const FeatureIdentity& id) {
  if (cfg.identity == IdentityMode::pixel) {
    if (id.kind != FeatureIdentity::Kind::pixel) throw DataError("expected a pixel identity");
    return id.row * cfg.image_cols + id.col;
  }
  if (id.kind != FeatureIdentity::Kind::column) throw DataError("expected a column identity");
  return id.index;
}

struct GeneratedSample {
  std::vector<FeatureValue> values;  // canonical feature order
  std::vector<int> ordering;         // ordering the sample was drawn under
  double log_prob = 0.0;             // accumulated ln p of the drawn values
};

namespace detail {

template <typename S>
double head_log_prob(const HeadOutput<S>& head, const FeatureValue& value) {
  switch (head.kind) {
    case HeadKind::bernoulli: {
      const double p = static_cast<double>(head.bernoulli_p);
      return std::log(std::max(value.label == 1 ? p : 1.0 - p, 1e-300));
    }
    case HeadKind::categorical:
      return std::log(std::max(static_cast<double>(head.probs(value.label)), 1e-300));
    case HeadKind::mixture: {
      // Full mixture density, accumulated in log space over components.
      double max_term = -std::numeric_limits<double>::infinity();
      std::vector<double> terms(head.pi.size());
      for (Index j = 0; j < head.pi.size(); ++j) {
        const double sigma = static_cast<double>(head.sigma(j));
        const double z = (value.value - static_cast<double>(head.mu(j))) / sigma;
        terms[j] = std::log(static_cast<double>(head.pi(j))) - std::log(sigma) -
                   0.5 * std::log(2.0 * M_PI) - 0.5 * z * z;
        max_term = std::max(max_term, terms[j]);
      }
      double sum = 0.0;
      for (double t : terms) sum += std::exp(t - max_term);
      return max_term + std::log(sum);
    }
  }
  return 0.0;
}

template <typename S>
FeatureValue draw_value(const HeadOutput<S>& head, Rng& rng, double clamp_sigmas) {
  switch (head.kind) {
    case HeadKind::bernoulli:
      return FeatureValue::discrete(rng.uniform() < static_cast<double>(head.bernoulli_p) ? 1 : 0);
    case HeadKind::categorical: {
      const double u = rng.uniform();
      double acc = 0.0;
      for (Index c = 0; c < head.probs.size(); ++c) {
        acc += static_cast<double>(head.probs(c));
        if (u < acc) return FeatureValue::discrete(static_cast<int>(c));
      }
      return FeatureValue::discrete(static_cast<int>(head.probs.size() - 1));
    }
    case HeadKind::mixture: {
      const double u = rng.uniform();
      double acc = 0.0;
      Index component = head.pi.size() - 1;
      for (Index j = 0; j < head.pi.size(); ++j) {
        acc += static_cast<double>(head.pi(j));
        if (u < acc) {
          component = j;
          break;
        }
      }
      double value = static_cast<double>(head.mu(component)) +
                     static_cast<double>(head.sigma(component)) * rng.normal();
      if (clamp_sigmas > 0.0) value = std::clamp(value, -clamp_sigmas, clamp_sigmas);
      return FeatureValue::continuous(value);
    }
  }
  return FeatureValue::discrete(0);
}

template <typename S>
FeatureValue argmax_value(const HeadOutput<S>& head) {
  switch (head.kind) {
    case HeadKind::bernoulli:
      return FeatureValue::discrete(head.bernoulli_p >= S(0.5) ? 1 : 0);
    case HeadKind::categorical: {
      Index best = 0;
      head.probs.maxCoeff(&best);
      return FeatureValue::discrete(static_cast<int>(best));
    }
    case HeadKind::mixture: {
      // Mean of the dominant component approximates the mixture mode.
      Index best = 0;
      head.pi.maxCoeff(&best);
      return FeatureValue::continuous(static_cast<double>(head.mu(best)));
    }
  }
  return FeatureValue::discrete(0);
}

inline FeatureValue dummy_value(HeadKind kind) {
  return kind == HeadKind::mixture ? FeatureValue::continuous(0.0) : FeatureValue::discrete(0);
}

}  // namespace detail

// Ancestral sampling: for k = 1..D the forward pass runs with identities
// i_1..i_k and values v_1..v_{k-1} (v_k is a placeholder the mask hides from
// the z_k row), and v_k is drawn from HeadOutput_k. log_prob accumulates the
// model's log-probability of each drawn value, so a teacher-forced NLL of the
// result under the same ordering reproduces -log_prob.
template <typename S>
GeneratedSample generate(const DeformerModel<S>& model, const std::vector<int>& ordering, Rng& rng,
                         double clamp_sigmas = 10.0) {
  const auto ids = canonical_identities(model.cfg);
  const int dim = model.cfg.dim();
  validate_ordering(ordering, static_cast<std::size_t>(dim));

  OrderedSample prefix;
  prefix.ordering = ordering;
  GeneratedSample out;
  out.ordering = ordering;
  out.values.resize(static_cast<std::size_t>(dim));
  for (int k = 0; k < dim; ++k) {
    prefix.pairs.emplace_back(ids[static_cast<std::size_t>(ordering[k])],
                              detail::dummy_value(model.cfg.head.kind));
    const auto heads = forward_heads(model, prefix);
    const FeatureValue drawn = detail::draw_value(heads[k], rng, clamp_sigmas);
    out.log_prob += detail::head_log_prob(heads[k], drawn);
    prefix.pairs[k].second = drawn;
    out.values[static_cast<std::size_t>(ordering[k])] = drawn;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Imputation
// ---------------------------------------------------------------------------

struct ImputationTask {
  enum class Fill { sample, argmax };
  SampleFeatures observed;
  std::vector<FeatureIdentity> missing;
  Fill fill = Fill::sample;
};

struct ImputationResult {
  std::vector<FeatureValue> values;  // canonical order; observed values untouched
  std::vector<int> ordering;         // logged for reproducibility
};

// Builds an ordering with the observed identities first and the missing ones
// after, teacher-forces the observed values, then fills the missing features
// sequentially. Sample mode randomizes both segment orders; argmax mode keeps
// them in canonical order so the result is independent of the RNG.
template <typename S>
ImputationResult impute(const DeformerModel<S>& model, const ImputationTask& task, Rng& rng,
                        double clamp_sigmas = 10.0) {
  const int dim = model.cfg.dim();
  const auto ids = canonical_identities(model.cfg);

  std::vector<int> observed_indices;
  observed_indices.reserve(task.observed.size());
  std::vector<char> covered(static_cast<std::size_t>(dim), 0);
  for (const auto& [id, value] : task.observed) {
    const int index = identity_index(model.cfg, id);
    if (index < 0 || index >= dim) throw DataError("impute: observed identity out of range");
    if (covered[index]) throw DataError("impute: feature " + std::to_string(index) + " listed twice");
    covered[index] = 1;
    observed_indices.push_back(index);
  }
  std::vector<int> missing_indices;
  missing_indices.reserve(task.missing.size());
  for (const auto& id : task.missing) {
    const int index = identity_index(model.cfg, id);
    if (index < 0 || index >= dim) throw DataError("impute: missing identity out of range");
    if (covered[index]) {
      throw DataError("impute: feature " + std::to_string(index) + " is both observed and missing");
    }
    covered[index] = 1;
    missing_indices.push_back(index);
  }
  for (int i = 0; i < dim; ++i) {
    if (!covered[i]) {
      throw DataError("impute: feature " + std::to_string(i) + " is neither observed nor missing");
    }
  }

  const bool randomize = task.fill == ImputationTask::Fill::sample;
  auto arrange = [&](std::vector<int>& indices) {
    std::sort(indices.begin(), indices.end());
    if (randomize) {
      for (std::size_t i = indices.size(); i > 1; --i) {
        std::swap(indices[i - 1], indices[rng.uniform_int(i)]);
      }
    }
  };
  arrange(observed_indices);
  arrange(missing_indices);

  ImputationResult result;
  result.values.resize(static_cast<std::size_t>(dim));
  for (const auto& [id, value] : task.observed) {
    result.values[static_cast<std::size_t>(identity_index(model.cfg, id))] = value;
  }

  OrderedSample prefix;
  for (int index : observed_indices) {
    prefix.ordering.push_back(index);
    prefix.pairs.emplace_back(ids[static_cast<std::size_t>(index)],
                              result.values[static_cast<std::size_t>(index)]);
  }
  for (int index : missing_indices) prefix.ordering.push_back(index);
  result.ordering = prefix.ordering;
  if (missing_indices.empty()) return result;

  const std::size_t observed_count = observed_indices.size();
  for (std::size_t k = 0; k < missing_indices.size(); ++k) {
    const int index = missing_indices[k];
    prefix.pairs.emplace_back(ids[static_cast<std::size_t>(index)],
                              detail::dummy_value(model.cfg.head.kind));
    const auto heads = forward_heads(model, prefix);
    const auto& head = heads[observed_count + k];
    const FeatureValue filled = task.fill == ImputationTask::Fill::argmax
                                    ? detail::argmax_value(head)
                                    : detail::draw_value(head, rng, clamp_sigmas);
    prefix.pairs[observed_count + k].second = filled;
    result.values[static_cast<std::size_t>(index)] = filled;
  }
  return result;
}

// ---------------------------------------------------------------------------
// OOD scoring
// ---------------------------------------------------------------------------

struct OodReport {
  std::vector<EvalEntry> in_distribution;
  std::vector<EvalEntry> out_of_distribution;
  EvalSummary in_summary;
  EvalSummary out_summary;
};

// Scores both datasets with the same K and seed; higher NLL reads as more
// anomalous.
template <typename S>
OodReport ood_score(const DeformerModel<S>& model,
                    const std::function<SampleFeatures(std::size_t)>& in_split, std::size_t in_count,
                    const std::function<SampleFeatures(std::size_t)>& out_split, std::size_t out_count,
                    int orderings, std::uint64_t seed, int threads = 1) {
  OodReport report;
  report.in_distribution = score_dataset(model, in_split, in_count, orderings, seed, threads);
  report.out_of_distribution = score_dataset(model, out_split, out_count, orderings, seed, threads);
  report.in_summary = summarize(report.in_distribution);
  report.out_summary = summarize(report.out_of_distribution);
  return report;
}

}  // namespace deformer
