#pragma once

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "fsct/data.hpp"
#include "fsct/model.hpp"
#include "fsct/optimizer.hpp"
#include "fsct/rng.hpp"
#include "fsct/tensor.hpp"

namespace fsct {

inline constexpr double kLossProbFloor = 1e-12;

/// Mean negative log-probability of the true labels. Probabilities are
/// floored at kLossProbFloor before the log; when the floor fires (a true
/// label received essentially zero mass) *floored is set if given.
inline Tensor episode_loss(const Tensor& probs, const std::vector<std::size_t>& labels,
                           bool* floored = nullptr) {
  if (probs.rank() != 2) fail_shape("episode_loss", "expected q x n probabilities");
  const std::size_t q = probs.shape()[0], n = probs.shape()[1];
  if (labels.size() != q)
    fail_shape("episode_loss", std::to_string(labels.size()) + " labels for " + std::to_string(q) +
                                   " rows");
  Tensor onehot = Tensor::zeros({q, n});
  for (std::size_t i = 0; i < q; ++i) {
    if (labels[i] >= n) fail_shape("episode_loss", "label out of range");
    onehot.data()[i * n + labels[i]] = 1.0;
    if (floored != nullptr && probs.data()[i * n + labels[i]] < kLossProbFloor) *floored = true;
  }
  Tensor picked = sum(mul(probs, onehot), 1);  // q
  return neg(mean_all(log(clamp_min(picked, kLossProbFloor))));
}

struct TrainConfig {
  std::size_t epochs = 5;
  std::size_t episodes_per_epoch = 50;
  AdamWConfig optimizer;
  std::uint64_t seed = 0;
  bool augment_hflip = false;
};

struct EpochLog {
  std::size_t epoch = 0;         // 1-based
  double train_loss_mean = 0.0;
  double val_accuracy_mean = 0.0;
  double wall_ms = 0.0;          // timing only; excluded from determinism checks
};

struct TrainResult {
  ModelState best;               // best-validation parameters
  std::size_t best_epoch = 0;    // 1-based; 0 when no epochs ran
  double best_val_accuracy = 0.0;
  std::vector<EpochLog> log;
};

/// Replaces every array handle in the copy with an independent clone.
inline ModelState deep_copy(const ModelState& src) {
  ModelState copy = src;
  copy.for_each_array([](const std::string&, Tensor& t) { t = t.clone(); });
  return copy;
}

struct EpisodeRecord {
  std::uint64_t seed = 0;
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy = 0.0;  // percent
};

struct EvalResult {
  double mean_accuracy = 0.0;  // percent
  double ci95 = 0.0;           // 1.96 * sample stddev / sqrt(N)
  std::vector<EpisodeRecord> episodes;
};

/// Frozen-parameter accuracy over freshly sampled episodes. Each episode's
/// rng derives from (seed, stream, index) alone, so any evaluation order
/// gives identical results.
inline EvalResult evaluate(const std::vector<Category>& pool, const SampleDims& dims,
                           ModelState& state, std::size_t num_episodes, std::uint64_t seed,
                           Stream stream = Stream::kEvalEpisode) {
  EvalResult result;
  result.episodes.reserve(num_episodes);
  const bool was_training = state.backbone.training;
  state.backbone.training = false;
  for (std::size_t i = 0; i < num_episodes; ++i) {
    EpisodeRecord rec;
    rec.seed = derive_seed(seed, stream, 0, i);
    Rng rng(rec.seed);
    Episode ep = sample_episode(pool, dims, state.config.ways, state.config.shots,
                                state.config.queries_per_cat, rng);
    Prediction pred = predict(ep, state);
    rec.total = ep.num_queries();
    for (std::size_t j = 0; j < rec.total; ++j)
      if (pred.labels[j] == ep.query_labels[j]) ++rec.correct;
    rec.accuracy = 100.0 * static_cast<double>(rec.correct) / static_cast<double>(rec.total);
    result.episodes.push_back(rec);
  }
  state.backbone.training = was_training;

  double sum = 0.0;
  for (const EpisodeRecord& r : result.episodes) sum += r.accuracy;
  const double n = static_cast<double>(result.episodes.size());
  result.mean_accuracy = result.episodes.empty() ? 0.0 : sum / n;
  if (result.episodes.size() > 1) {
    double ss = 0.0;
    for (const EpisodeRecord& r : result.episodes) {
      const double dlt = r.accuracy - result.mean_accuracy;
      ss += dlt * dlt;
    }
    result.ci95 = 1.96 * std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
  }
  return result;
}

/// Episodic training: per epoch, a pass of fresh training episodes with one
/// optimizer step each, then a fixed validation pass (same validation
/// episodes every epoch) that decides which parameters to keep. Ties prefer
/// the earlier epoch. A non-finite loss aborts with the episode seed in the
/// message.
inline TrainResult train(const SplitDataset& data, const TrainConfig& cfg, ModelState& state,
                         AdamW& optimizer) {
  if (!optimizer.attached()) optimizer.attach(state);
  state.set_requires_grad(true);

  TrainResult result;
  result.best = deep_copy(state);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    double loss_sum = 0.0;
    state.backbone.training = true;
    for (std::size_t i = 0; i < cfg.episodes_per_epoch; ++i) {
      const std::uint64_t ep_seed = derive_seed(cfg.seed, Stream::kTrainEpisode, epoch, i);
      Rng rng(ep_seed);
      Episode ep = sample_episode(data.train, data.dims, state.config.ways, state.config.shots,
                                  state.config.queries_per_cat, rng, cfg.augment_hflip);
      Tape tape;
      double loss_value;
      {
        Tape::Scope scope(tape);
        Tensor probs = forward_probs(ep, state);
        Tensor loss = episode_loss(probs, ep.query_labels);
        loss_value = loss.value();
        if (!std::isfinite(loss_value))
          throw std::runtime_error("training aborted: non-finite loss at epoch " +
                                   std::to_string(epoch + 1) + " episode " + std::to_string(i) +
                                   " (episode seed " + std::to_string(ep_seed) + ")");
        tape.backward(loss);
      }
      optimizer.step(state);
      loss_sum += loss_value;
    }
    state.backbone.training = false;

    EvalResult val = evaluate(data.val, data.dims, state, cfg.episodes_per_epoch, cfg.seed,
                              Stream::kValEpisode);
    const auto t1 = std::chrono::steady_clock::now();

    EpochLog log;
    log.epoch = epoch + 1;
    log.train_loss_mean =
        cfg.episodes_per_epoch == 0 ? 0.0 : loss_sum / static_cast<double>(cfg.episodes_per_epoch);
    log.val_accuracy_mean = val.mean_accuracy;
    log.wall_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
    result.log.push_back(log);

    if (result.best_epoch == 0 || val.mean_accuracy > result.best_val_accuracy) {
      result.best = deep_copy(state);
      result.best_epoch = epoch + 1;
      result.best_val_accuracy = val.mean_accuracy;
    }
  }
  return result;
}

struct HeatmapResult {
  Tensor per_query;   // q x n, head-averaged attention rows
  Tensor aggregated;  // n x n, query rows averaged by true category
};

/// Attention heatmaps for one episode: the raw per-query map and its
/// aggregation over ground-truth categories, whose diagonal carries
/// same-category alignment.
inline HeatmapResult attention_heatmap(const Episode& ep, ModelState& state) {
  HeatmapResult out;
  Tensor map;
  predict(ep, state, &map);
  out.per_query = map;
  const std::size_t q = map.shape()[0], n = map.shape()[1];
  out.aggregated = Tensor::zeros({n, n});
  std::vector<std::size_t> counts(n, 0);
  for (std::size_t i = 0; i < q; ++i) ++counts[ep.query_labels[i]];
  for (std::size_t i = 0; i < q; ++i) {
    const std::size_t c = ep.query_labels[i];
    for (std::size_t j = 0; j < n; ++j)
      out.aggregated.data()[c * n + j] +=
          map.data()[i * n + j] / static_cast<double>(counts[c]);
  }
  return out;
}

}  // namespace fsct
