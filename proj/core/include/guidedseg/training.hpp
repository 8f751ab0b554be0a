#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "guidedseg/episodes.hpp"
#include "guidedseg/model.hpp"

namespace guidedseg::training {

using episodes::Dataset;
using episodes::Episode;
using episodes::TaskMode;
using model::BinaryMask;
using model::ModelParams;

struct TrainConfig {
  TaskMode mode = TaskMode::kSemantic;
  int shots = 1;
  // P is drawn uniformly from this list for every episode.
  std::vector<int> points = {1, 2, 5, 10, episodes::kDensePoints};
  int episodes = 5000;
  float lr = 0.01f;
  float momentum = 0.9f;
  float weight_decay = 0.0005f;
  std::uint64_t seed = 0;
  model::GuidanceConfig model;
  episodes::SamplerOptions sampler;
  int log_every = 100;

  /// Throws Error(kConfiguration).
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);

struct TrainLog {
  int episode = 0;  // 1-based index of the last episode in the window
  double running_loss = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<double> losses;  // one per episode
  std::vector<TrainLog> log;
};

using LogCallback = std::function<void(const TrainLog&)>;

/// Episodic training of a guided network: sample, segment, dense
/// cross-entropy on the query target, backward, momentum step. Throws
/// Error(kNumerical) with the episode and parameter norms on a non-finite
/// loss.
TrainResult train_guided(const Dataset& dataset, const TrainConfig& config,
                         const LogCallback& on_log = {});

/// Unguided foreground-background segmentor trained on the same query
/// images with every instance as foreground. config.model.guided is
/// ignored.
TrainResult train_fgbg(const Dataset& dataset, const TrainConfig& config,
                       const LogCallback& on_log = {});

/// Checkpoint with the training configuration and final running loss in
/// its metadata.
autodiff::Checkpoint make_checkpoint(const TrainResult& result,
                                     const TrainConfig& config);

/// |pred and target| / |pred or target|; 1 when both are empty.
double positive_iu(const BinaryMask& pred, const BinaryMask& target);

BinaryMask target_mask(const Episode& episode);

struct Prediction {
  BinaryMask mask;
  bool degenerate = false;
  double guidance_ms = 0.0;
  double infer_ms = 0.0;
};

/// Guidance then head inference on the episode query, timed separately. A
/// prototype head without both polarities predicts an empty mask and is
/// flagged degenerate.
Prediction predict(const ModelParams& params, const Episode& episode);

struct EvalOptions {
  TaskMode mode = TaskMode::kSemantic;
  std::vector<int> shots = {1};
  std::vector<int> points = {1, 2, 5, 10, episodes::kDensePoints};
  int episodes_per_cell = 200;
  std::uint64_t seed = 1;
  episodes::SamplerOptions sampler;
};

struct EvalCell {
  int shots = 0;
  int points = 0;
  double mean_iu = 0.0;
  double std_iu = 0.0;
  int n = 0;
  std::uint64_t seed = 0;
  double guidance_ms = 0.0;
  double infer_ms = 0.0;
  std::vector<double> ious;
};

struct EvalReport {
  nlohmann::json config;
  std::vector<EvalCell> cells;
  nlohmann::json baselines = nlohmann::json::object();

  const EvalCell& cell(int shots, int points) const;
};

/// The k-th episode of an (S, *) row is drawn from an rng seeded by
/// (seed, S, k), so cells that differ only in P share tasks and images.
Episode evaluation_episode(const episodes::EpisodeSampler& sampler,
                           std::uint64_t seed, int shots, int points,
                           int index);

EvalReport eval_fewshot(const ModelParams& params, const Dataset& dataset,
                        const EvalOptions& options);

nlohmann::json to_json(const EvalCell& cell);
nlohmann::json to_json(const EvalReport& report);
/// "dense" for kDensePoints, the number otherwise.
nlohmann::json points_to_json(int points);
int parse_points(const std::string& text);

struct FinetuneOptions {
  int steps = 100;
  float lr = 0.001f;
  float momentum = 0.9f;
};

struct FinetuneResult {
  BinaryMask mask;
  std::vector<double> losses;  // support loss before each step
  double final_loss = 0.0;     // support loss after the last step
  double train_ms = 0.0;
};

/// Copies the parameters, fits cross-entropy on the support's annotated
/// pixels only (each support image guided by the whole support), then
/// segments the query.
FinetuneResult baseline_finetune(const ModelParams& params,
                                 std::span<const model::SupportItem> support,
                                 const autodiff::Tensor& query,
                                 const FinetuneOptions& options);

struct TimingStats {
  double median_ms = 0.0;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  int repetitions = 0;
};

struct TimingReport {
  TimingStats full_forward;
  std::optional<TimingStats> guidance_update;
  double ratio = 0.0;  // full / update; 0 when no update path exists
};

/// Median over repetitions of (a) a full segment of the episode and (b) an
/// annotation edit on the first support item followed by update_guidance,
/// shot merge and head inference from cached features. Early fusion
/// reports (a) only.
TimingReport benchmark_timing(const ModelParams& params, const Episode& episode,
                              int repetitions = 20);

nlohmann::json to_json(const TimingStats& stats);
nlohmann::json to_json(const TimingReport& report);

}  // namespace guidedseg::training
