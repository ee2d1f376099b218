#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "ien/trainer.hpp"
#include "support.hpp"

using namespace ien;
using ien::test::desk_config;

namespace {

// Windowed samples on the 16x16 desk grid: random scenes, a bright blob for the
// hand, and a Gaussian target.
std::vector<WindowedSample> desk_samples(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<WindowedSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    WindowedSample s;
    s.scene_channels = test::random_tensor<float>({5, 16, 16}, rng, 0.0, 1.0);
    s.hand_window = TensorF({10, 1, 16, 16});
    const double hx = rng.uniform(2, 13), hy = rng.uniform(2, 13);
    for (std::size_t k = 0; k < 10; ++k) {
      for (std::size_t y = 0; y < 16; ++y) {
        for (std::size_t x = 0; x < 16; ++x) {
          const double d = std::hypot(static_cast<double>(x) - hx, static_cast<double>(y) - hy + 0.2 * static_cast<double>(k));
          s.hand_window[(k * 16 + y) * 16 + x] = d < 3.0 ? 1.0f : 0.0f;
        }
      }
    }
    s.gt_heatmap = gaussian_heatmap({rng.uniform(2, 13), rng.uniform(2, 13)}, 2.0, {16, 16});
    out.push_back(std::move(s));
  }
  return out;
}

TrainConfig quick(std::size_t epochs = 2, std::size_t batch = 4) {
  TrainConfig tc;
  tc.epochs = epochs;
  tc.batch_size = batch;
  tc.seed = 3;
  return tc;
}

double checksum(const IenParams& p) {
  double s = 0.0;
  for (const auto& [name, t] : p) {
    for (std::size_t i = 0; i < t.size(); ++i) s += static_cast<double>(t[i]) * static_cast<double>(i % 7 + 1);
  }
  return s;
}

}  // namespace

TEST_CASE("train config validation and JSON") {
  TrainConfig tc;
  CHECK(tc.batch_size == 8);
  CHECK(tc.learning_rate == 1e-3);
  tc.epochs = 0;
  CHECK_THROWS_AS(tc.validate(), ConfigMismatch);
  tc.epochs = 1;
  tc.batch_size = 0;
  CHECK_THROWS_AS(tc.validate(), ConfigMismatch);
  tc.batch_size = 2;
  tc.learning_rate = -1;
  CHECK_THROWS_AS(tc.validate(), ConfigMismatch);
  const TrainConfig a = quick();
  const TrainConfig back = TrainConfig::from_json(a.to_json());
  CHECK(back.to_json() == a.to_json());
  CHECK(config_hash(desk_config(), a) == config_hash(desk_config(), back));
  TrainConfig other = a;
  other.seed = 4;
  CHECK(config_hash(desk_config(), a) != config_hash(desk_config(), other));
}

TEST_CASE("identical seeds give bit-identical parameters and logs") {
  const SampleSet s = sample_set(desk_samples(10, 1));
  const TrainResult a = train(s, desk_config(), quick());
  const TrainResult b = train(s, desk_config(), quick());
  CHECK(a.params == b.params);
  CHECK(a.log.step_losses == b.log.step_losses);
  TrainConfig other = quick();
  other.seed = 9;
  CHECK(train(s, desk_config(), other).params != a.params);
}

TEST_CASE("step count is epochs times ceil(n / batch) and losses are finite") {
  const SampleSet s = sample_set(desk_samples(10, 2));
  const TrainResult r = train(s, desk_config(), quick(3, 4));
  CHECK(r.log.step_losses.size() == 3 * 3);
  CHECK(r.log.epoch_losses.size() == 3);
  for (double l : r.log.step_losses) CHECK(std::isfinite(l));
  CHECK(r.log.seed == 3);
  CHECK(r.log.config_hash == config_hash(desk_config(), quick(3, 4)));
  TrainConfig capped = quick(3, 4);
  capped.max_steps = 5;
  CHECK(train(s, desk_config(), capped).log.step_losses.size() == 5);
}

TEST_CASE("zero learning rate leaves parameters unchanged and the loss constant per epoch") {
  const SampleSet s = sample_set(desk_samples(6, 3));
  TrainConfig tc = quick(3, 6);
  tc.learning_rate = 0.0;
  const IenParams init = init_params(desk_config(), mix_seed(tc.seed, 0));
  const TrainResult r = train(s, desk_config(), tc);
  CHECK(r.params == init);
  REQUIRE(r.log.epoch_losses.size() == 3);
  CHECK(r.log.epoch_losses[0] == r.log.epoch_losses[1]);
  CHECK(r.log.epoch_losses[1] == r.log.epoch_losses[2]);
}

TEST_CASE("training lowers the loss on a small set") {
  const SampleSet s = sample_set(desk_samples(4, 4));
  TrainConfig tc = quick(60, 4);
  tc.learning_rate = 3e-3;
  const double before = evaluate_loss(init_params(desk_config(), mix_seed(tc.seed, 0)), desk_config(), s);
  const TrainResult r = train(s, desk_config(), tc);
  CHECK(evaluate_loss(r.params, desk_config(), s) < 0.5 * before);
}

TEST_CASE("target loss stops training after the first epoch below it") {
  const SampleSet s = sample_set(desk_samples(4, 4));
  TrainConfig tc = quick(60, 4);
  tc.learning_rate = 3e-3;
  const TrainResult full = train(s, desk_config(), tc);
  tc.target_loss = 0.5 * (full.log.epoch_losses.front() + full.log.epoch_losses.back());
  const TrainResult r = train(s, desk_config(), tc);
  REQUIRE(r.log.epoch_losses.size() < 60);
  CHECK(r.log.epoch_losses.back() < tc.target_loss);
  for (std::size_t i = 0; i + 1 < r.log.epoch_losses.size(); ++i) CHECK(r.log.epoch_losses[i] >= tc.target_loss);
  CHECK(r.log.step_losses.size() == r.log.epoch_losses.size());
  tc.target_loss = -1.0;
  CHECK_THROWS_AS(tc.validate(), ConfigMismatch);
}

TEST_CASE("evaluate_loss is pure and zero for a perfect predictor") {
  const std::vector<WindowedSample> samples = desk_samples(5, 5);
  const SampleSet s = sample_set(samples);
  const IenParams p = init_params(desk_config(), 1);
  const double sum = checksum(p);
  const double a = evaluate_loss(p, desk_config(), s);
  const double b = evaluate_loss(p, desk_config(), s);
  CHECK(a == b);
  CHECK(checksum(p) == sum);
  CHECK(a > 0.0);
  const double perfect = evaluate_loss([](const WindowedSample& w) { return w.gt_heatmap; }, s);
  CHECK(std::abs(perfect) <= 1e-9);
  CHECK_THROWS_AS(evaluate_loss(p, desk_config(), SampleSet{}), TooShort);
}

TEST_CASE("periodic evaluation is logged") {
  const SampleSet s = sample_set(desk_samples(8, 6));
  TrainConfig tc = quick(2, 4);
  tc.eval_every = 2;
  const TrainResult r = train(s, desk_config(), tc);
  REQUIRE(r.log.evals.size() == 2);
  CHECK(r.log.evals[0].first == 2);
  CHECK(r.log.evals[1].second == doctest::Approx(evaluate_loss(r.params, desk_config(), s)));
}

TEST_CASE("non-finite inputs abort with the step index") {
  std::vector<WindowedSample> samples = desk_samples(4, 7);
  samples[2].hand_window[5] = std::numeric_limits<float>::quiet_NaN();
  try {
    TrainConfig tc = quick(1, 1);
    tc.shuffle = false;
    train(sample_set(samples), desk_config(), tc);
    FAIL("expected NonFiniteLoss");
  } catch (const NonFiniteLoss& e) {
    CHECK(e.step() == 3);
  }
}

TEST_CASE("mismatched samples are rejected") {
  CHECK_THROWS_AS(train(sample_set(desk_samples(2, 8)), IenConfig::reference(), quick()), ConfigMismatch);
  CHECK_THROWS_AS(train(SampleSet{}, desk_config(), quick()), TooShort);
}

TEST_CASE("training log is line-delimited JSON") {
  const TrainResult r = train(sample_set(desk_samples(4, 9)), desk_config(), quick(2, 2));
  std::ostringstream out;
  r.log.write_jsonl(out);
  std::istringstream in(out.str());
  std::string line;
  std::size_t steps = 0, epochs = 0, headers = 0;
  while (std::getline(in, line)) {
    const json j = json::parse(line);
    const std::string kind = j.at("kind");
    headers += kind == "header";
    steps += kind == "step";
    epochs += kind == "epoch";
  }
  CHECK(headers == 1);
  CHECK(steps == 4);
  CHECK(epochs == 2);
}
