#include <doctest.h>

#include <cmath>
#include <vector>

#include "deformer/inference.hpp"
#include "support.hpp"

using namespace deformer;
using namespace deformer::testing;

namespace {

DeformerModel<double> pixel_coin_model(int rows, int cols) {
  ModelConfig cfg;
  cfg.identity = IdentityMode::pixel;
  cfg.image_rows = rows;
  cfg.image_cols = cols;
  cfg.mlp_hidden1 = 4;
  cfg.mlp_hidden2 = 8;
  cfg.head.kind = HeadKind::bernoulli;
  cfg.tf = TransformerConfig{.d_model = 8, .n_heads = 2, .d_ff = 16, .n_layers = 1};
  Rng rng(1);
  DeformerModel<double> model(cfg, rng);
  for (auto& [name, tensor] : model.parameters()) tensor.mutable_value().setZero();
  return model;
}

}  // namespace

TEST_CASE("average_nll has zero spread when only one ordering exists") {
  Rng rng(2);
  DeformerModel<double> model(tiny_binary_config(1), rng);
  std::vector<std::uint8_t> bit = {1};
  const auto features = binary_column_features(bit);
  const EvalEntry entry = average_nll(model, features, 7, 99);
  CHECK(entry.std_nll == 0.0);

  const EvalEntry single = average_nll(model, features, 1, 99);
  CHECK(single.std_nll == 0.0);
  CHECK(single.mean_nll == entry.mean_nll);
}

TEST_CASE("average_nll with K=1 equals the NLL under that ordering") {
  Rng rng(3);
  DeformerModel<double> model(tiny_binary_config(4), rng);
  std::vector<std::uint8_t> bits = {1, 0, 0, 1};
  const auto features = binary_column_features(bits);

  const std::uint64_t seed = 123;
  const EvalEntry entry = average_nll(model, features, 1, seed);

  Rng ordering_rng(seed, StreamLabel::ordering, 0);
  const auto sample = order_features(features, shuffle_ordering(4, ordering_rng));
  NoGradGuard no_grad;
  CHECK(entry.mean_nll == static_cast<double>(nll_discrete(model, sample).value()(0, 0)));

  // Repeated evaluation is deterministic for a fixed seed.
  const EvalEntry again = average_nll(model, features, 10, seed);
  const EvalEntry thrice = average_nll(model, features, 10, seed);
  CHECK(again.mean_nll == thrice.mean_nll);
  CHECK(again.std_nll == thrice.std_nll);
  CHECK(std::isfinite(again.mean_nll));
}

TEST_CASE("zero-weight bernoulli model generates fair coin flips") {
  const auto model = pixel_coin_model(4, 4);
  Rng rng(5, StreamLabel::sampling);
  std::size_t ones = 0, total = 0;
  for (int s = 0; s < 6250; ++s) {
    const auto ordering = shuffle_ordering(16, rng);
    const GeneratedSample sample = generate(model, ordering, rng);
    for (const auto& value : sample.values) {
      ones += static_cast<std::size_t>(value.label);
      ++total;
    }
  }
  CHECK(total == 100000);
  const double fraction = static_cast<double>(ones) / static_cast<double>(total);
  CHECK(fraction > 0.49);
  CHECK(fraction < 0.51);
}

TEST_CASE("generation is reproducible under a fixed seed") {
  Rng init(6);
  DeformerModel<double> model(tiny_binary_config(5), init);
  auto run = [&] {
    Rng rng(77, StreamLabel::sampling);
    return generate(model, shuffle_ordering(5, rng), rng);
  };
  const GeneratedSample a = run();
  const GeneratedSample b = run();
  CHECK(a.ordering == b.ordering);
  CHECK(a.log_prob == b.log_prob);
  for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(a.values[i].label == b.values[i].label);
}

TEST_CASE("teacher-forced NLL of a generated sample matches its accumulated log-probability") {
  Rng init(7);
  DeformerModel<double> model(tiny_binary_config(4), init);
  Rng rng(8, StreamLabel::sampling);
  NoGradGuard no_grad;
  for (int trial = 0; trial < 20; ++trial) {
    const auto ordering = shuffle_ordering(4, rng);
    const GeneratedSample sample = generate(model, ordering, rng);
    SampleFeatures features;
    const auto ids = canonical_identities(model.cfg);
    for (int i = 0; i < 4; ++i) features.emplace_back(ids[i], sample.values[i]);
    const double forced = static_cast<double>(nll(model, order_features(features, ordering)).value()(0, 0));
    CHECK(forced == doctest::Approx(-sample.log_prob).epsilon(1e-5));
  }

  // Same consistency for a mixture head, including the clamp path.
  Rng mixture_init(9);
  DeformerModel<double> mixture(tiny_mixture_config(3, 2), mixture_init);
  for (int trial = 0; trial < 10; ++trial) {
    const auto ordering = shuffle_ordering(3, rng);
    const GeneratedSample sample = generate(mixture, ordering, rng, 10.0);
    SampleFeatures features;
    const auto ids = canonical_identities(mixture.cfg);
    for (int i = 0; i < 3; ++i) features.emplace_back(ids[i], sample.values[i]);
    const double forced =
        static_cast<double>(nll(mixture, order_features(features, ordering)).value()(0, 0));
    CHECK(forced == doctest::Approx(-sample.log_prob).epsilon(1e-5));
  }
}

TEST_CASE("imputation with an empty missing set returns the input unchanged") {
  Rng init(10);
  DeformerModel<double> model(tiny_binary_config(3), init);
  ImputationTask task;
  std::vector<std::uint8_t> bits = {1, 0, 1};
  task.observed = binary_column_features(bits);
  Rng rng(11);
  const ImputationResult result = impute(model, task, rng);
  for (int i = 0; i < 3; ++i) CHECK(result.values[i].label == bits[i]);
}

TEST_CASE("imputation validates coverage and overlap") {
  Rng init(12);
  DeformerModel<double> model(tiny_binary_config(3), init);
  Rng rng(13);

  ImputationTask overlap;
  std::vector<std::uint8_t> bits = {1, 0};
  overlap.observed = {{FeatureIdentity::column(0), FeatureValue::discrete(1)},
                      {FeatureIdentity::column(1), FeatureValue::discrete(0)}};
  overlap.missing = {FeatureIdentity::column(1), FeatureIdentity::column(2)};
  CHECK_THROWS_AS(impute(model, overlap, rng), DataError);

  ImputationTask hole;
  hole.observed = {{FeatureIdentity::column(0), FeatureValue::discrete(1)}};
  hole.missing = {FeatureIdentity::column(2)};
  CHECK_THROWS_AS(impute(model, hole, rng), DataError);
}

TEST_CASE("argmax imputation is independent of the RNG") {
  Rng init(14);
  DeformerModel<double> model(tiny_binary_config(4), init);
  ImputationTask task;
  task.observed = {{FeatureIdentity::column(2), FeatureValue::discrete(1)},
                   {FeatureIdentity::column(0), FeatureValue::discrete(0)}};
  task.missing = {FeatureIdentity::column(3), FeatureIdentity::column(1)};
  task.fill = ImputationTask::Fill::argmax;

  Rng rng_a(100), rng_b(200);
  const ImputationResult a = impute(model, task, rng_a);
  const ImputationResult b = impute(model, task, rng_b);
  CHECK(a.ordering == b.ordering);
  for (int i = 0; i < 4; ++i) CHECK(a.values[i].label == b.values[i].label);
  CHECK(a.values[0].label == 0);
  CHECK(a.values[2].label == 1);

  // Sample mode shuffles the observed segment per call.
  ImputationTask sampled = task;
  sampled.fill = ImputationTask::Fill::sample;
  bool ordering_varies = false;
  Rng rng_c(300);
  const ImputationResult first = impute(model, sampled, rng_c);
  for (int trial = 0; trial < 16 && !ordering_varies; ++trial) {
    ordering_varies = impute(model, sampled, rng_c).ordering != first.ordering;
  }
  CHECK(ordering_varies);
}

TEST_CASE("score_dataset is independent of the thread count") {
  Rng init(15);
  DeformerModel<double> model(tiny_binary_config(3), init);
  const SyntheticJoint joint = SyntheticJoint::random(3, 16);
  Rng draw(17);
  std::vector<std::vector<std::uint8_t>> samples;
  for (int i = 0; i < 24; ++i) samples.push_back(joint.sample(draw));
  auto split = [&](std::size_t i) { return binary_column_features(samples[i]); };

  const auto serial = score_dataset(model, split, samples.size(), 4, 900, 1);
  const auto parallel = score_dataset(model, split, samples.size(), 4, 900, 3);
  REQUIRE(serial.size() == parallel.size());
  for (std::size_t i = 0; i < serial.size(); ++i) {
    CHECK(serial[i].mean_nll == parallel[i].mean_nll);
    CHECK(serial[i].std_nll == parallel[i].std_nll);
  }

  std::vector<std::uint8_t> short_sample = {1, 0};
  auto bad_split = [&](std::size_t) { return binary_column_features(short_sample); };
  CHECK_THROWS_AS(score_dataset(model, bad_split, 1, 1, 0, 1), DataError);
}

TEST_CASE("identical datasets produce identical OOD summaries") {
  Rng init(18);
  DeformerModel<double> model(tiny_binary_config(3), init);
  const SyntheticJoint joint = SyntheticJoint::random(3, 19);
  Rng draw(20);
  std::vector<std::vector<std::uint8_t>> samples;
  for (int i = 0; i < 32; ++i) samples.push_back(joint.sample(draw));
  auto split = [&](std::size_t i) { return binary_column_features(samples[i]); };

  const OodReport report = ood_score(model, split, samples.size(), split, samples.size(), 3, 321, 1);
  CHECK(report.in_summary.mean == report.out_summary.mean);
  CHECK(report.in_summary.median == report.out_summary.median);
  CHECK(report.in_summary.stddev == report.out_summary.stddev);

  // K=1 and K=10 give different but finite means.
  const EvalEntry k1 = average_nll(model, split(0), 1, 555);
  const EvalEntry k10 = average_nll(model, split(0), 10, 555);
  CHECK(std::isfinite(k1.mean_nll));
  CHECK(std::isfinite(k10.mean_nll));
  CHECK(k1.mean_nll != k10.mean_nll);
}

TEST_CASE("eval report CSV format") {
  std::vector<EvalEntry> entries = {{0, 1.5, 0.25}, {1, 2.5, 0.0}};
  const auto path = std::filesystem::temp_directory_path() / "deformer_eval.csv";
  write_eval_csv(path.string(), entries);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "sample_id,mean_nll,std_nll");
  std::getline(in, line);
  CHECK(line == "0,1.5,0.25");
  std::filesystem::remove(path);
}
