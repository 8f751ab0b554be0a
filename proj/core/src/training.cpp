#include "guidedseg/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "guidedseg/errors.hpp"
#include "guidedseg/optim.hpp"

namespace guidedseg::training {

using autodiff::Tape;
using autodiff::Tensor;
using Clock = std::chrono::steady_clock;
namespace ops = autodiff;

namespace {

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

bool has_both_polarities(std::span<const model::SupportItem> support) {
  std::size_t pos = 0, neg = 0;
  for (const auto& item : support) {
    pos += item.annotations.count(Polarity::kPositive);
    neg += item.annotations.count(Polarity::kNegative);
  }
  return pos > 0 && neg > 0;
}

bool has_annotations(std::span<const model::SupportItem> support) {
  return std::any_of(support.begin(), support.end(),
                     [](const auto& item) { return !item.annotations.empty(); });
}

BinaryMask empty_mask(const Tensor& image) {
  BinaryMask m;
  m.height = image.dim(1);
  m.width = image.dim(2);
  m.data.assign(static_cast<std::size_t>(m.height) * m.width, 0);
  return m;
}

std::string describe(const Episode& e) {
  std::ostringstream out;
  out << to_string(e.task.mode) << " task " << e.task.id;
  if (e.task.sequence_id) out << " (sequence " << *e.task.sequence_id << ")";
  out << ", S=" << e.shots << ", P=" << points_to_json(e.points).dump() << ", query sample "
      << e.query_sample << ", support samples [";
  for (std::size_t i = 0; i < e.support_samples.size(); ++i)
    out << (i ? ", " : "") << e.support_samples[i];
  out << "]";
  return out.str();
}

std::string parameter_norms(const ModelParams& params) {
  std::ostringstream out;
  for (const auto& [name, t] : params.named()) {
    double s = 0.0;
    for (float v : t.data()) s += static_cast<double>(v) * v;
    out << "\n  " << name << " = " << std::sqrt(s);
  }
  return out.str();
}

TrainResult run_training(const Dataset& dataset, const TrainConfig& config, bool fgbg,
                         const LogCallback& on_log) {
  config.validate();
  model::GuidanceConfig model_config = config.model;
  if (fgbg) model_config.guided = false;
  model_config.validate();

  TrainResult result{ModelParams::initialize(model_config, config.seed), {}, {}};
  result.params.set_requires_grad(true);
  std::vector<Tensor> tensors = result.params.tensors();
  autodiff::SgdMomentum optimizer({config.lr, config.momentum, config.weight_decay});
  episodes::EpisodeSampler sampler(dataset, config.mode, config.sampler);
  // Separate stream from the initializer, which is seeded by config.seed too.
  episodes::Rng rng(config.seed ^ 0x5851f42d4c957f2dULL);

  double window = 0.0;
  int window_n = 0;
  for (int e = 1; e <= config.episodes; ++e) {
    const int points = config.points[episodes::uniform_index(rng, config.points.size())];
    const Episode episode = sampler.sample(config.shots, points, rng);
    std::vector<std::uint8_t> target = episode.query_target;
    if (fgbg) {
      const auto& labels = dataset.samples[episode.query_sample].label_map;
      for (std::size_t i = 0; i < target.size(); ++i) target[i] = labels[i] != 0;
    }

    Tape tape;
    auto seg = model::segment(episode.support, episode.query, result.params, &tape);
    Tensor loss = ops::softmax_cross_entropy(seg.logits, target, &tape);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      throw Error(ErrorCode::kNumerical, "non-finite loss at episode " + std::to_string(e) + " (" +
                                             describe(episode) + "); parameter norms:" +
                                             parameter_norms(result.params));
    }
    for (auto& t : tensors) t.zero_grad();
    autodiff::backward(loss, tape);
    optimizer.step(tensors);

    result.losses.push_back(value);
    window += value;
    ++window_n;
    if (e % config.log_every == 0 || e == config.episodes) {
      result.log.push_back({e, window / window_n});
      if (on_log) on_log(result.log.back());
      window = 0.0;
      window_n = 0;
    }
  }
  result.params.set_requires_grad(false);
  return result;
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::kConfiguration, msg); };
  if (episodes < 1) fail("episodes must be >= 1");
  if (!(lr > 0.0f)) fail("learning rate must be > 0");
  if (shots < 1) fail("training shots must be >= 1");
  if (points.empty()) fail("training needs at least one P value");
  if (log_every < 1) fail("log interval must be >= 1");
  for (int p : points) {
    if (p < 1) fail("P values must be >= 1");
    if (p == 1 && model.guided && model.head == model::Head::kPrototype)
      fail("the prototype head needs both polarities, so P = 1 cannot train it");
  }
  if (mode == TaskMode::kInteractive && model.locality == model::Locality::kIdentity && shots != 1)
    fail("identity locality trains with a single support image");
  if (mode != TaskMode::kInteractive && model.guided && model.locality == model::Locality::kIdentity)
    fail("identity locality needs the support image to be the query (interactive mode)");
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json points = nlohmann::json::array();
  for (int p : c.points) points.push_back(points_to_json(p));
  return {{"mode", to_string(c.mode)},
          {"shots", c.shots},
          {"points", points},
          {"episodes", c.episodes},
          {"lr", c.lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"seed", c.seed},
          {"allowed_classes", c.sampler.allowed_classes},
          {"require_distractor", c.sampler.require_distractor},
          {"min_instances", c.sampler.min_instances}};
}

TrainResult train_guided(const Dataset& dataset, const TrainConfig& config,
                         const LogCallback& on_log) {
  return run_training(dataset, config, false, on_log);
}

TrainResult train_fgbg(const Dataset& dataset, const TrainConfig& config,
                       const LogCallback& on_log) {
  return run_training(dataset, config, true, on_log);
}

autodiff::Checkpoint make_checkpoint(const TrainResult& result, const TrainConfig& config) {
  nlohmann::json meta{{"train", to_json(config)}};
  if (!result.log.empty()) meta["final_running_loss"] = result.log.back().running_loss;
  return result.params.to_checkpoint(meta);
}

double positive_iu(const BinaryMask& pred, const BinaryMask& target) {
  if (pred.height != target.height || pred.width != target.width ||
      pred.data.size() != target.data.size()) {
    throw Error(ErrorCode::kInvalidShape, "positive_iu: masks differ in shape");
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] != 0, t = target.data[i] != 0;
    inter += p && t;
    uni += p || t;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

BinaryMask target_mask(const Episode& episode) {
  return {episode.query.dim(1), episode.query.dim(2), episode.query_target};
}

Prediction predict(const ModelParams& params, const Episode& episode) {
  const auto& config = params.config();
  Prediction out;
  auto start = Clock::now();
  model::TaskRepresentation rep;
  if (config.guided) {
    out.degenerate = !has_annotations(episode.support);
    if (config.head == model::Head::kPrototype && !has_both_polarities(episode.support)) {
      out.degenerate = true;
      out.mask = empty_mask(episode.query);
      return out;
    }
    rep = model::guide(episode.support, params);
  }
  out.guidance_ms = elapsed_ms(start);
  start = Clock::now();
  const auto cache = model::prepare_query(episode.query, params);
  out.mask = model::argmax_mask(model::infer(cache, rep, params));
  out.infer_ms = elapsed_ms(start);
  return out;
}

const EvalCell& EvalReport::cell(int shots, int points) const {
  for (const auto& c : cells)
    if (c.shots == shots && c.points == points) return c;
  throw Error(ErrorCode::kNotFound, "no report cell for S=" + std::to_string(shots) +
                                        ", P=" + points_to_json(points).dump());
}

Episode evaluation_episode(const episodes::EpisodeSampler& sampler, std::uint64_t seed, int shots,
                           int points, int index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(shots), static_cast<std::uint32_t>(index)};
  episodes::Rng rng(seq);
  return sampler.sample(shots, points, rng);
}

EvalReport eval_fewshot(const ModelParams& params, const Dataset& dataset,
                        const EvalOptions& options) {
  if (options.episodes_per_cell < 1)
    throw Error(ErrorCode::kConfiguration, "episodes_per_cell must be >= 1");
  const episodes::EpisodeSampler sampler(dataset, options.mode, options.sampler);
  EvalReport report;
  nlohmann::json points = nlohmann::json::array();
  for (int p : options.points) points.push_back(points_to_json(p));
  report.config = {{"mode", to_string(options.mode)},
                   {"shots", options.shots},
                   {"points", points},
                   {"episodes_per_cell", options.episodes_per_cell},
                   {"seed", options.seed},
                   {"allowed_classes", options.sampler.allowed_classes},
                   {"require_distractor", options.sampler.require_distractor},
                   {"min_instances", options.sampler.min_instances},
                   {"model", model::to_json(params.config())}};
  for (int s : options.shots) {
    for (int p : options.points) {
      EvalCell cell;
      cell.shots = s;
      cell.points = p;
      cell.seed = options.seed;
      for (int k = 0; k < options.episodes_per_cell; ++k) {
        const Episode e = evaluation_episode(sampler, options.seed, s, p, k);
        const Prediction pred = predict(params, e);
        cell.ious.push_back(positive_iu(pred.mask, target_mask(e)));
        cell.guidance_ms += pred.guidance_ms;
        cell.infer_ms += pred.infer_ms;
      }
      cell.n = static_cast<int>(cell.ious.size());
      cell.mean_iu = std::accumulate(cell.ious.begin(), cell.ious.end(), 0.0) / cell.n;
      double ss = 0.0;
      for (double v : cell.ious) ss += (v - cell.mean_iu) * (v - cell.mean_iu);
      cell.std_iu = cell.n > 1 ? std::sqrt(ss / (cell.n - 1)) : 0.0;
      cell.guidance_ms /= cell.n;
      cell.infer_ms /= cell.n;
      report.cells.push_back(std::move(cell));
    }
  }
  return report;
}

nlohmann::json points_to_json(int points) {
  if (points == episodes::kDensePoints) return "dense";
  return points;
}

int parse_points(const std::string& text) {
  if (text == "dense") return episodes::kDensePoints;
  std::size_t used = 0;
  int value = 0;
  try {
    value = std::stoi(text, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used != text.size() || value < 1)
    throw Error(ErrorCode::kConfiguration, "P must be a positive integer or 'dense', got '" + text + "'");
  return value;
}

nlohmann::json to_json(const EvalCell& c) {
  return {{"S", c.shots},       {"P", points_to_json(c.points)},
          {"mean_iu", c.mean_iu}, {"std_iu", c.std_iu},
          {"n", c.n},           {"seed", c.seed},
          {"guidance_ms", c.guidance_ms}, {"infer_ms", c.infer_ms}};
}

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json cells = nlohmann::json::array();
  for (const auto& c : r.cells) cells.push_back(to_json(c));
  return {{"config", r.config}, {"cells", cells}, {"baselines", r.baselines}};
}

FinetuneResult baseline_finetune(const ModelParams& params,
                                 std::span<const model::SupportItem> support, const Tensor& query,
                                 const FinetuneOptions& options) {
  if (options.steps < 0) throw Error(ErrorCode::kConfiguration, "finetune steps must be >= 0");
  if (!has_annotations(support))
    throw Error(ErrorCode::kDegenerateSupport, "fine-tuning needs at least one annotated point");
  FinetuneResult out;
  const auto& config = params.config();
  if (config.guided && config.head == model::Head::kPrototype && !has_both_polarities(support)) {
    out.mask = empty_mask(query);
    return out;
  }

  std::vector<std::vector<std::uint8_t>> targets;
  for (const auto& item : support) {
    std::vector<std::uint8_t> t(static_cast<std::size_t>(item.annotations.height()) *
                                    item.annotations.width(),
                                ops::kIgnoreLabel);
    for (const auto& p : item.annotations.points())
      t[static_cast<std::size_t>(p.row) * item.annotations.width() + p.col] =
          p.label == Polarity::kPositive ? 1 : 0;
    targets.push_back(std::move(t));
  }

  ModelParams tuned = params.clone();
  tuned.set_requires_grad(true);
  std::vector<Tensor> tensors = tuned.tensors();
  const std::vector<float> ones(support.size(), 1.0f);
  auto support_loss = [&](Tape* tape) {
    std::vector<Tensor> parts;
    for (std::size_t i = 0; i < support.size(); ++i) {
      if (support[i].annotations.empty()) continue;
      auto seg = model::segment(support, support[i].image, tuned, tape);
      parts.push_back(ops::softmax_cross_entropy(seg.logits, targets[i], tape));
    }
    return ops::weighted_mean(parts, std::span(ones).first(parts.size()), tape);
  };

  const auto start = Clock::now();
  if (options.steps > 0) {
    autodiff::SgdMomentum optimizer({options.lr, options.momentum, 0.0f});
    for (int step = 0; step < options.steps; ++step) {
      Tape tape;
      Tensor loss = support_loss(&tape);
      out.losses.push_back(loss.item());
      for (auto& t : tensors) t.zero_grad();
      autodiff::backward(loss, tape);
      optimizer.step(tensors);
    }
  }
  out.train_ms = elapsed_ms(start);
  tuned.set_requires_grad(false);
  out.final_loss = support_loss(nullptr).item();
  out.mask = model::segment(support, query, tuned).mask;
  return out;
}

namespace {

TimingStats summarize(std::vector<double> samples) {
  TimingStats s;
  s.repetitions = static_cast<int>(samples.size());
  std::sort(samples.begin(), samples.end());
  const std::size_t n = samples.size();
  s.median_ms = n % 2 ? samples[n / 2] : 0.5 * (samples[n / 2 - 1] + samples[n / 2]);
  s.mean_ms = std::accumulate(samples.begin(), samples.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : samples) ss += (v - s.mean_ms) * (v - s.mean_ms);
  s.std_ms = n > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
  return s;
}

}  // namespace

TimingReport benchmark_timing(const ModelParams& params, const Episode& episode, int repetitions) {
  if (repetitions < 1) throw Error(ErrorCode::kConfiguration, "repetitions must be >= 1");
  const auto& config = params.config();
  constexpr int kWarmup = 2;
  TimingReport report;

  std::vector<double> full;
  for (int r = 0; r < kWarmup + repetitions; ++r) {
    const auto start = Clock::now();
    auto seg = model::segment(episode.support, episode.query, params);
    const double ms = elapsed_ms(start);
    if (r >= kWarmup) full.push_back(ms);
  }
  report.full_forward = summarize(full);
  if (!config.guided || config.fusion != model::Fusion::kLate) return report;

  // Cached state: support features and guidance, query features and the
  // guidance-independent decoder term.
  std::vector<Tensor> features;
  std::vector<model::GuidanceState> states;
  for (const auto& item : episode.support) {
    features.push_back(model::extract_features(item.image, params));
    auto masks = model::rasterize_annotations(item.annotations, features.back().dim(1),
                                              features.back().dim(2), config.feature_stride());
    states.push_back({item.annotations, model::guide_late(features.back(), masks, config.locality)});
  }
  const auto cache = model::prepare_query(episode.query, params);

  // Alternately edit and restore one point on the first support item: add
  // and remove a negative on a free pixel, or flip a label when every pixel
  // is annotated.
  const AnnotationSet base = states[0].annotations;
  const int width = base.width();
  int free_pixel = -1;
  for (int i = 0; i < base.height() * width && free_pixel < 0; ++i)
    if (!base.contains(i / width, i % width)) free_pixel = i;
  auto edit = [&](int r) {
    AnnotationDelta delta;
    if (free_pixel >= 0) {
      const int row = free_pixel / width, col = free_pixel % width;
      if (r % 2 == 0) {
        delta.upserts.push_back({row, col, Polarity::kNegative});
      } else {
        delta.removals.push_back({row, col});
      }
    } else {
      PointLabel p = base.points().front();
      if (r % 2 == 0) {
        p.label = p.label == Polarity::kPositive ? Polarity::kNegative : Polarity::kPositive;
      }
      delta.upserts.push_back(p);
    }
    return delta;
  };
  std::vector<double> update;
  for (int r = 0; r < kWarmup + repetitions; ++r) {
    const AnnotationDelta delta = edit(r);
    const auto start = Clock::now();
    states[0] = model::update_guidance(features[0], states[0], delta, config);
    std::vector<model::TaskRepresentation> reps;
    for (const auto& s : states) reps.push_back(s.guidance);
    const auto z = model::merge_shots(reps);
    const auto mask = model::argmax_mask(model::infer(cache, z, params));
    const double ms = elapsed_ms(start);
    if (r >= kWarmup) update.push_back(ms);
  }
  report.guidance_update = summarize(update);
  report.ratio = report.full_forward.median_ms / report.guidance_update->median_ms;
  return report;
}

nlohmann::json to_json(const TimingStats& s) {
  return {{"median_ms", s.median_ms}, {"mean_ms", s.mean_ms}, {"std_ms", s.std_ms},
          {"repetitions", s.repetitions}};
}

nlohmann::json to_json(const TimingReport& r) {
  nlohmann::json j{{"full_forward", to_json(r.full_forward)}};
  if (r.guidance_update) {
    j["guidance_update"] = to_json(*r.guidance_update);
    j["ratio"] = r.ratio;
  } else {
    j["guidance_update"] = nullptr;
    j["ratio"] = nullptr;
  }
  return j;
}

}  // namespace guidedseg::training
