#include "ien/trainer.hpp"

#include <cmath>
#include <numeric>
#include <ostream>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "ien/ops.hpp"
#include "ien/rng.hpp"

namespace ien {

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigMismatch("epochs must be at least 1");
  if (batch_size < 1) throw ConfigMismatch("batch_size must be at least 1");
  if (!std::isfinite(learning_rate) || learning_rate < 0.0) throw ConfigMismatch("learning_rate must be finite and >= 0");
  if (!(loss_eps > 0.0)) throw ConfigMismatch("loss_eps must be positive");
  if (!std::isfinite(target_loss) || target_loss < 0.0) throw ConfigMismatch("target_loss must be finite and >= 0");
}

json TrainConfig::to_json() const {
  return {{"epochs", epochs},         {"batch_size", batch_size}, {"learning_rate", learning_rate},
          {"seed", seed},             {"shuffle", shuffle},       {"eval_every", eval_every},
          {"loss_eps", loss_eps},     {"max_steps", max_steps},
          {"target_loss", target_loss}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.seed = j.value("seed", c.seed);
    c.shuffle = j.value("shuffle", c.shuffle);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.loss_eps = j.value("loss_eps", c.loss_eps);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.target_loss = j.value("target_loss", c.target_loss);
  } catch (const json::exception& e) {
    throw ConfigMismatch(std::string("malformed train config: ") + e.what());
  }
  c.validate();
  return c;
}

void TrainLog::write_jsonl(std::ostream& out) const {
  out << json{{"kind", "header"}, {"seed", seed}, {"config_hash", config_hash}, {"wall_clock", wall_clock_seconds},
              {"steps", step_losses.size()}}
             .dump()
      << '\n';
  for (std::size_t i = 0; i < step_losses.size(); ++i) {
    out << json{{"kind", "step"}, {"step", i + 1}, {"loss", step_losses[i]}}.dump() << '\n';
  }
  for (std::size_t i = 0; i < epoch_losses.size(); ++i) {
    out << json{{"kind", "epoch"}, {"epoch", i + 1}, {"loss", epoch_losses[i]}}.dump() << '\n';
  }
  for (const auto& [step, loss] : evals) out << json{{"kind", "eval"}, {"step", step}, {"loss", loss}}.dump() << '\n';
}

std::uint64_t config_hash(const IenConfig& model, const TrainConfig& train) {
  const std::string text = json{{"model", model.to_json()}, {"train", train.to_json()}}.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

namespace {

void check_sample(const WindowedSample& s, const IenConfig& c) {
  const auto h = static_cast<std::size_t>(c.grid.height);
  const auto w = static_cast<std::size_t>(c.grid.width);
  if (s.scene_channels.shape() != Shape{c.affordance_channels, h, w} || s.hand_window.rank() != 4 ||
      s.hand_window.dim(1) != c.hand_channels || s.hand_window.dim(2) != h || s.hand_window.dim(3) != w ||
      s.gt_heatmap.shape() != Shape{1, h, w}) {
    throw ConfigMismatch("sample shapes (scene " + shape_string(s.scene_channels.shape()) + ", hand " +
                         shape_string(s.hand_window.shape()) + ") do not match the model config");
  }
}

// Loss of one sample; adds d(loss * scale)/d(param) into `grads`.
double accumulate_sample(const IenParams& params, const IenConfig& config, const WindowedSample& sample, double scale,
                         double eps, IenParams& grads) {
  Graph<float> g;
  const VarMap vars = bind_params(g, params);
  const Var pred = forward(g, vars, config, g.constant(sample.scene_channels), sample.hand_window);
  const Var loss = kl_divergence(g, sample.gt_heatmap, pred, eps);
  const double value = g.value(loss)[0];
  if (!std::isfinite(value)) return value;
  g.backward(loss, static_cast<float>(scale));
  for (auto& [name, acc] : grads) {
    const TensorF gr = g.grad(vars.at(name));
    auto dst = acc.data();
    auto src = gr.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }
  return value;
}

}  // namespace

TrainResult train(const SampleSet& samples, const IenConfig& model_config, const TrainConfig& train_config,
                  const StepCallback& on_step) {
  return train(samples, model_config, train_config, init_params(model_config, mix_seed(train_config.seed, 0)),
               on_step);
}

TrainResult train(const SampleSet& samples, const IenConfig& model_config, const TrainConfig& tc, IenParams params,
                  const StepCallback& on_step) {
  tc.validate();
  model_config.validate();
  if (samples.count == 0) throw TooShort("training set is empty");
  tune_allocator();
  const auto started = std::chrono::steady_clock::now();

  TrainResult result;
  result.log.seed = tc.seed;
  result.log.config_hash = config_hash(model_config, tc);

  OptimizerState<float> opt;
  opt.settings.learning_rate = tc.learning_rate;

  const std::size_t per_epoch = (samples.count + tc.batch_size - 1) / tc.batch_size;
  std::size_t total = tc.epochs * per_epoch;
  if (tc.max_steps > 0) total = std::min(total, tc.max_steps);

  std::vector<std::size_t> order(samples.count);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < tc.epochs && step < total; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    if (tc.shuffle) {
      Rng rng(mix_seed(tc.seed, epoch + 1));
      for (std::size_t i = order.size(); i > 1; --i) {
        std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i - 1)))]);
      }
    }
    // Per-sample losses, summed in sample order so the epoch mean does not
    // depend on the shuffle.
    std::vector<double> sample_loss(samples.count, 0.0);
    std::vector<bool> seen(samples.count, false);
    std::size_t epoch_steps = 0;
    for (std::size_t b = 0; b < per_epoch && step < total; ++b) {
      const std::size_t begin = b * tc.batch_size;
      const std::size_t end = std::min(begin + tc.batch_size, samples.count);
      const double scale = 1.0 / static_cast<double>(end - begin);
      IenParams grads;
      for (const auto& [name, p] : params) grads.emplace(name, TensorF(p.shape()));
      double batch_loss = 0.0;
      for (std::size_t i = begin; i < end; ++i) {
        const WindowedSample sample = samples.fetch(order[i]);
        check_sample(sample, model_config);
        double loss = 0.0;
        try {
          loss = accumulate_sample(params, model_config, sample, scale, tc.loss_eps, grads);
        } catch (const NonFinite&) {
          throw NonFiniteLoss(step + 1, std::nan(""));
        }
        if (!std::isfinite(loss)) throw NonFiniteLoss(step + 1, loss);
        batch_loss += loss * scale;
        sample_loss[order[i]] = loss;
        seen[order[i]] = true;
      }
      adam_step(params, grads, opt);
      ++step;
      for (const auto& [name, p] : params) {
        if (!p.all_finite()) throw NonFiniteLoss(step, std::nan(""));
      }
      result.log.step_losses.push_back(batch_loss);
      ++epoch_steps;
      if (on_step) on_step(step, batch_loss, params);
      if (tc.eval_every > 0 && step % tc.eval_every == 0) {
        result.log.evals.emplace_back(step, evaluate_loss(params, model_config, samples, tc.loss_eps));
      }
    }
    if (epoch_steps > 0) {
      double sum = 0.0;
      std::size_t count = 0;
      for (std::size_t i = 0; i < samples.count; ++i) {
        if (seen[i]) {
          sum += sample_loss[i];
          ++count;
        }
      }
      result.log.epoch_losses.push_back(sum / static_cast<double>(count));
      if (result.log.epoch_losses.back() < tc.target_loss) break;
    }
  }

  result.log.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  result.params = std::move(params);
  return result;
}

double evaluate_loss(const IenParams& params, const IenConfig& config, const SampleSet& samples, double eps) {
  return evaluate_loss(
      [&](const WindowedSample& s) {
        check_sample(s, config);
        return predict(params, config, s.scene_channels, s.hand_window);
      },
      samples, eps);
}

double evaluate_loss(const Predictor& predictor, const SampleSet& samples, double eps) {
  if (samples.count == 0) throw TooShort("evaluation set is empty");
  double sum = 0.0;
  for (std::size_t i = 0; i < samples.count; ++i) {
    const WindowedSample s = samples.fetch(i);
    const TensorF pred = predictor(s);
    sum += kl_value(s.gt_heatmap.data(), pred.data(), eps);
  }
  return sum / static_cast<double>(samples.count);
}

}  // namespace ien
