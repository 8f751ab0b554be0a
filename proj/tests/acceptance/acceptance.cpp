// Acceptance suite: one PASS/FAIL line per criterion, thresholds pinned
// below. Exit status is non-zero when any criterion fails.
//
//   guidedseg_acceptance [--report out.json] [--only name[,name...]]

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#ifdef __linux__
#include <pthread.h>
#include <sched.h>
#endif

#include <nlohmann/json.hpp>

#include "gradient_suite.hpp"
#include "guidedseg/checkpoint.hpp"
#include "guidedseg/episodes.hpp"
#include "guidedseg/ops.hpp"
#include "guidedseg/png.hpp"
#include "guidedseg/service.hpp"
#include "guidedseg/training.hpp"
#include "oracles.hpp"
#include "shadow.hpp"

using namespace guidedseg;
using namespace guidedseg::training;
using episodes::TaskMode;
using nlohmann::json;
namespace gt = guidedseg::testing;

namespace {

// Gradient correctness.
constexpr double kGradTolerance = 1e-3;
constexpr int kGradSeeds = 10;
constexpr double kGradBudgetS = 60.0;
// Convolution oracle.
constexpr int kConvShapes = 300;
constexpr double kConvBudgetS = 60.0;
// Fast path.
constexpr int kFastPathSequences = 120;
constexpr int kDirectUpdateEdits = 400;
// Update speed.
constexpr double kMinSpeedup = 5.0;
constexpr int kTimingEpisodes = 10;
constexpr int kTimingReps = 30;
constexpr int kServiceUpdates = 100;
// Learning.
constexpr int kTrainEpisodes = 5000;
constexpr float kTrainLr = 0.01f;
constexpr int kEvalEpisodes = 200;
constexpr double kMinHeldOutIu = 0.50;
constexpr double kMinMarginOverFgbg = 0.10;
constexpr double kShotSlack = 0.02;
constexpr double kMinSensitivity = 0.95;
const std::vector<int> kSensitivityPoints = {1, 2, 5, 10, episodes::kDensePoints};
// Metric and sampler invariants.
constexpr int kSamplerEpisodes = 60;

const std::set<int> kTrainClasses = {0, 1, 2, 3, 4, 5, 6, 7};
const std::set<int> kHeldOutClasses = {8, 9};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string points_name(int p) { return p == episodes::kDensePoints ? "dense" : std::to_string(p); }

struct Outcome {
  std::string name;
  bool pass = false;
  std::string detail;
  json data = json::object();
};

// --- shared fixtures ----------------------------------------------------

struct World {
  episodes::Dataset train;
  episodes::Dataset eval;
};

episodes::ShapesWorldConfig train_world_config() {
  episodes::ShapesWorldConfig c;
  c.images = 500;
  c.video_sequences = 40;
  c.excluded_classes = kHeldOutClasses;
  return c;
}

episodes::ShapesWorldConfig eval_world_config() {
  episodes::ShapesWorldConfig c;
  c.images = 300;
  c.video_sequences = 30;
  return c;
}

const World& world() {
  static const World w{episodes::generate_shapes_world(train_world_config(), 1),
                       episodes::generate_shapes_world(eval_world_config(), 2)};
  return w;
}

TrainConfig train_config(TaskMode mode) {
  TrainConfig tc;
  tc.mode = mode;
  tc.episodes = kTrainEpisodes;
  tc.lr = kTrainLr;
  tc.seed = 3;
  if (mode == TaskMode::kSemantic) tc.sampler.allowed_classes = kTrainClasses;
  if (mode == TaskMode::kInteractive) tc.model.locality = model::Locality::kIdentity;
  return tc;
}

// Trained models are built on first use and shared between criteria.
const ModelParams& trained(TaskMode mode, bool fgbg) {
  static std::map<std::pair<TaskMode, bool>, ModelParams> cache;
  const auto key = std::make_pair(mode, fgbg);
  auto it = cache.find(key);
  if (it == cache.end()) {
    const auto start = Clock::now();
    const auto tc = train_config(mode);
    auto r = fgbg ? train_fgbg(world().train, tc) : train_guided(world().train, tc);
    std::fprintf(stderr, "  trained %s %s: %d episodes, final loss %.4f, %.1f s\n",
                 std::string(episodes::to_string(mode)).c_str(), fgbg ? "fg-bg" : "guided", tc.episodes,
                 r.log.empty() ? 0.0 : r.log.back().running_loss, seconds_since(start));
    it = cache.emplace(key, std::move(r.params)).first;
  }
  return it->second;
}

void pin_to_one_cpu() {
#ifdef __linux__
  const int cpu = sched_getcpu();
  if (cpu < 0) return;
  cpu_set_t set;
  CPU_ZERO(&set);
  CPU_SET(cpu, &set);
  pthread_setaffinity_np(pthread_self(), sizeof(set), &set);
#endif
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string cpu_model() {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line))
    if (line.rfind("model name", 0) == 0) return line.substr(line.find(':') + 2);
  return "unknown";
}

// --- criteria -------------------------------------------------------------

Outcome gradient_correctness() {
  Outcome o{"gradient-correctness"};
  const auto start = Clock::now();
  double worst = 0.0;
  std::string where;
  std::vector<std::string> unprobed;
  int cases = 0;
  auto take = [&](const gt::GradCase& c, std::uint32_t seed) {
    ++cases;
    for (const auto& u : c.result.unprobed) unprobed.push_back(c.name + ":" + u);
    if (c.result.max_rel_error > worst) {
      worst = c.result.max_rel_error;
      where = c.name + " seed " + std::to_string(seed) + " " + c.result.worst;
    }
  };
  for (std::uint32_t seed = 1; seed <= kGradSeeds; ++seed) {
    for (const auto& c : gt::primitive_gradient_cases(seed)) take(c, seed);
    for (const auto& v : gt::network_variants()) take(gt::network_gradient_case(v, seed), seed);
  }
  const double elapsed = seconds_since(start);
  o.pass = worst < kGradTolerance && unprobed.empty() && elapsed < kGradBudgetS;
  o.detail = fmt("max rel err %.2e (< %.0e) over %d cases, %d seeds, 16x16; %.1f s (< %.0f s)", worst,
                 kGradTolerance, cases, kGradSeeds, elapsed, kGradBudgetS);
  if (!unprobed.empty()) o.detail += "; unprobed: " + unprobed.front();
  o.data = {{"max_rel_error", worst}, {"worst", where}, {"cases", cases}, {"seconds", elapsed}};
  return o;
}

Outcome convolution_oracle() {
  Outcome o{"convolution-oracle"};
  const auto start = Clock::now();
  std::mt19937 rng(7001);
  int exact = 0;
  std::string first;
  for (int trial = 0; trial < kConvShapes; ++trial) {
    const auto c = gt::random_conv_case(rng);
    const auto in = gt::sparse_conv_input(rng, c);
    const auto ker = gt::random_values(rng, static_cast<std::size_t>(c.cout) * c.cin * c.kh * c.kw);
    const auto bias = gt::random_values(rng, c.cout);
    int oh = 0, ow = 0;
    const auto oracle = gt::direct_conv2d(in, c.cin, c.h, c.w, ker, c.cout, c.kh, c.kw,
                                          c.bias ? &bias : nullptr, c.stride, c.pad, &oh, &ow);
    const auto out = autodiff::conv2d(autodiff::Tensor({c.cin, c.h, c.w}, in),
                                      autodiff::Tensor({c.cout, c.cin, c.kh, c.kw}, ker),
                                      c.bias ? autodiff::Tensor({c.cout}, bias) : autodiff::Tensor(),
                                      c.stride, c.pad);
    const bool same = out.shape() == autodiff::Shape{c.cout, oh, ow} &&
                      std::equal(out.data().begin(), out.data().end(), oracle.begin(), oracle.end());
    exact += same;
    if (!same && first.empty()) first = "trial " + std::to_string(trial);
  }
  const double elapsed = seconds_since(start);
  o.pass = exact == kConvShapes && elapsed < kConvBudgetS;
  o.detail = fmt("%d/%d random shapes bit-exact; %.1f s (< %.0f s)", exact, kConvShapes, elapsed, kConvBudgetS);
  if (!first.empty()) o.detail += "; first mismatch " + first;
  o.data = {{"exact", exact}, {"shapes", kConvShapes}, {"seconds", elapsed}};
  return o;
}

// update_guidance against guide_late on the edited annotation set, for
// random edit chains on random features.
int direct_update_mismatches(int edits, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  int mismatches = 0;
  for (auto locality : {model::Locality::kGlobalPool, model::Locality::kIdentity}) {
    model::GuidanceConfig c;
    c.locality = locality;
    const auto params = model::ModelParams::initialize(c, seed);
    const int size = 32;
    const auto features = model::extract_features(gt::random_frame(rng, size, size), params);
    const int fh = features.dim(1), fw = features.dim(2);
    model::GuidanceState st{AnnotationSet(size, size), model::empty_guidance(c, fh, fw)};
    for (int k = 0; k < edits / 2; ++k) {
      AnnotationDelta d;
      for (int n = rng() % 4; n >= 0; --n)
        d.upserts.push_back({static_cast<int>(rng() % size), static_cast<int>(rng() % size),
                             rng() % 2 ? Polarity::kPositive : Polarity::kNegative});
      for (const auto& p : st.annotations.points())
        if (rng() % 6 == 0) d.removals.emplace_back(p.row, p.col);
      st = model::update_guidance(features, st, d, c);
      const auto masks = model::rasterize_annotations(st.annotations, fh, fw, c.feature_stride());
      const auto scratch = model::guide_late(features, masks, locality);
      mismatches += !gt::same_representation(st.guidance, scratch);
    }
  }
  return mismatches;
}

Outcome fast_path_equivalence() {
  Outcome o{"fast-path-equivalence"};
  const auto report = gt::run_fast_path_sequences(kFastPathSequences, 4242);
  const int direct = direct_update_mismatches(kDirectUpdateEdits, 99);
  o.pass = report.sequences >= 100 && report.guidance_mismatches == 0 && report.mask_mismatches == 0 &&
           report.contract_failures == 0 && direct == 0;
  o.detail = fmt("%d sequences: guidance %d/%d, masks %d/%d mismatched, %d contract failures; "
                 "update_guidance vs guide_late %d/%d mismatched",
                 report.sequences, report.guidance_mismatches, report.guidance_checks, report.mask_mismatches,
                 report.mask_checks, report.contract_failures, direct, kDirectUpdateEdits);
  if (!report.first_failure.empty()) o.detail += "; " + report.first_failure;
  o.data = {{"sequences", report.sequences},
            {"guidance_checks", report.guidance_checks},
            {"mask_checks", report.mask_checks},
            {"mismatches", report.guidance_mismatches + report.mask_mismatches + direct}};
  return o;
}

// Service latency: a two-frame 64x64 session, clicks on frame 1 with frame 0
// annotated; the full forward encodes both frames.
std::pair<double, double> service_latency(const ModelParams& trained_params) {
  auto params = std::make_shared<const ModelParams>(trained_params);
  service::SessionService svc(params, "m");
  const auto& eval = world().eval;
  episodes::EpisodeSampler sampler(eval, TaskMode::kVideo);
  const auto e = evaluation_episode(sampler, 5, 1, 10, 0);
  const auto& f0 = e.support[0].image;
  const auto& f1 = e.query;
  const auto id = svc.create_session({f0, f1}, "m").id;
  std::vector<service::Click> fixed;
  for (const auto& p : e.support[0].annotations.points()) fixed.push_back({p.col, p.row, p.label});
  svc.add_annotations(id, 0, fixed);
  AnnotationSet a1(f1.dim(1), f1.dim(2));
  std::mt19937_64 rng(17);
  std::vector<double> update, full;
  for (int i = 0; i < kServiceUpdates; ++i) {
    const service::Click c{static_cast<int>(rng() % f1.dim(2)), static_cast<int>(rng() % f1.dim(1)),
                           i % 2 ? Polarity::kPositive : Polarity::kNegative};
    const auto r = svc.add_annotations(id, 1, std::span(&c, 1));
    update.push_back(r.guidance_ms + r.infer_ms);
    a1.set({c.y, c.x, c.label});
    const std::vector<model::SupportItem> support{{f0, e.support[0].annotations}, {f1, a1}};
    const auto start = Clock::now();
    const auto seg = model::segment(support, f1, *params);
    full.push_back(std::chrono::duration<double, std::milli>(Clock::now() - start).count());
    if (model::argmax_mask(seg.logits) != r.mask) return {0.0, 0.0};
  }
  return {median(full), median(update)};
}

Outcome update_speed() {
  Outcome o{"update-speed"};
  pin_to_one_cpu();
  const auto& params = trained(TaskMode::kVideo, false);
  episodes::EpisodeSampler sampler(world().eval, TaskMode::kVideo);
  std::vector<double> full, update;
  json runs = json::array();
  for (int k = 0; k < kTimingEpisodes; ++k) {
    const auto e = evaluation_episode(sampler, 5, 1, 10, k);
    const auto t = benchmark_timing(params, e, kTimingReps);
    full.push_back(t.full_forward.median_ms);
    update.push_back(t.guidance_update->median_ms);
    runs.push_back(to_json(t));
  }
  const double bench_ratio = median(full) / median(update);
  const auto [svc_full, svc_update] = service_latency(params);
  const double svc_ratio = svc_update > 0.0 ? svc_full / svc_update : 0.0;
  o.pass = bench_ratio >= kMinSpeedup && svc_ratio >= kMinSpeedup;
  o.detail = fmt("benchmark %.3f / %.3f ms = %.2fx, session %.3f / %.3f ms = %.2fx (>= %.0fx); 64x64, 1 thread",
                 median(full), median(update), bench_ratio, svc_full, svc_update, svc_ratio, kMinSpeedup);
  o.data = {{"benchmark", {{"full_forward_median_ms", median(full)},
                           {"guidance_update_median_ms", median(update)},
                           {"ratio", bench_ratio},
                           {"episodes", runs}}},
            {"session", {{"full_forward_median_ms", svc_full},
                         {"update_median_ms", svc_update},
                         {"ratio", svc_ratio},
                         {"updates", kServiceUpdates}}},
            {"hardware", {{"cpu", cpu_model()}, {"threads", 1},
                          {"hardware_concurrency", std::thread::hardware_concurrency()},
                          {"compiler", __VERSION__}}}};
  return o;
}

EvalOptions eval_options(TaskMode mode, std::vector<int> shots, std::vector<int> points) {
  EvalOptions opts;
  opts.mode = mode;
  opts.shots = std::move(shots);
  opts.points = std::move(points);
  opts.episodes_per_cell = kEvalEpisodes;
  opts.seed = 11;
  return opts;
}

Outcome learning_semantic() {
  Outcome o{"learning-semantic-heldout"};
  const auto& guided = trained(TaskMode::kSemantic, false);
  const auto& fgbg = trained(TaskMode::kSemantic, true);
  auto plain = eval_options(TaskMode::kSemantic, {1}, {2});
  plain.sampler.allowed_classes = kHeldOutClasses;
  auto two = plain;
  two.sampler.require_distractor = true;
  const double iu = eval_fewshot(guided, world().eval, plain).cell(1, 2).mean_iu;
  const double iu_two = eval_fewshot(guided, world().eval, two).cell(1, 2).mean_iu;
  const double fg_two = eval_fewshot(fgbg, world().eval, two).cell(1, 2).mean_iu;
  o.pass = iu >= kMinHeldOutIu && iu_two >= fg_two + kMinMarginOverFgbg;
  o.detail = fmt("held-out (S=1,P=2) mean IU %.3f (>= %.2f); two-object %.3f vs fg-bg %.3f, margin %.3f (>= %.2f)",
                 iu, kMinHeldOutIu, iu_two, fg_two, iu_two - fg_two, kMinMarginOverFgbg);
  o.data = {{"mean_iu", iu}, {"two_object_mean_iu", iu_two}, {"fgbg_two_object_mean_iu", fg_two}};
  return o;
}

Outcome shot_behavior() {
  Outcome o{"shot-behavior"};
  const auto& guided = trained(TaskMode::kVideo, false);
  const auto report = eval_fewshot(guided, world().eval, eval_options(TaskMode::kVideo, {1, 2}, {1, 10}));
  auto iu = [&](int s, int p) { return report.cell(s, p).mean_iu; };
  bool ok = true;
  for (int s : {1, 2}) ok = ok && iu(s, 10) >= iu(s, 1) - kShotSlack;
  for (int p : {1, 10}) ok = ok && iu(2, p) >= iu(1, p) - kShotSlack;
  o.pass = ok;
  o.detail = fmt("video IU S1P1 %.3f, S1P10 %.3f, S2P1 %.3f, S2P10 %.3f (slack %.2f)", iu(1, 1), iu(1, 10),
                 iu(2, 1), iu(2, 10), kShotSlack);
  o.data = to_json(report);
  return o;
}

// The same support and query with the points drawn on another object of
// the image.
episodes::Episode swapped(const episodes::EpisodeSampler& sampler, const episodes::Dataset& d,
                          const episodes::Episode& e, int points, int k) {
  const auto& s = d.samples[e.query_sample];
  int other = -1;
  for (const auto& [id, cls] : s.instance_classes)
    if (id != e.task.id && s.has_instance(id)) {
      other = id;
      break;
    }
  episodes::Rng rng(1000003ull * k + 17);
  return sampler.make_episode({e.task.mode, other, std::nullopt}, e.support_samples, e.query_sample, points, rng);
}

Outcome guidance_sensitivity() {
  Outcome o{"guidance-sensitivity"};
  const auto& guided = trained(TaskMode::kInteractive, false);
  const auto& fgbg = trained(TaskMode::kInteractive, true);
  episodes::SamplerOptions so;
  so.min_instances = 2;
  episodes::EpisodeSampler sampler(world().eval, TaskMode::kInteractive, so);
  bool ok = true;
  json rows = json::array();
  std::string text;
  for (int p : kSensitivityPoints) {
    int changed = 0, fg_same = 0;
    for (int k = 0; k < kEvalEpisodes; ++k) {
      const auto a = evaluation_episode(sampler, 21, 1, p, k);
      const auto b = swapped(sampler, world().eval, a, p, k);
      changed += predict(guided, a).mask != predict(guided, b).mask;
      fg_same += predict(fgbg, a).mask == predict(fgbg, b).mask;
    }
    const double rate = static_cast<double>(changed) / kEvalEpisodes;
    ok = ok && rate >= kMinSensitivity && fg_same == kEvalEpisodes;
    text += fmt("%sP=%s %d/%d changed, fg-bg %d/%d same", text.empty() ? "" : "; ", points_name(p).c_str(),
                changed, kEvalEpisodes, fg_same, kEvalEpisodes);
    rows.push_back({{"P", points_to_json(p)}, {"changed", changed}, {"fgbg_unchanged", fg_same}, {"n", kEvalEpisodes}});
  }
  o.pass = ok;
  o.detail = text + fmt(" (>= %.0f%% / 100%%)", 100 * kMinSensitivity);
  o.data = rows;
  return o;
}

Outcome metric_sampler_invariants() {
  Outcome o{"metric-sampler-invariants"};
  std::vector<std::string> failures;
  auto mask = [](int h, int w, std::vector<std::uint8_t> v) { return model::BinaryMask{h, w, std::move(v)}; };
  struct IuCase {
    model::BinaryMask a, b;
    double expected;
  };
  const std::vector<IuCase> iu_cases = {
      {mask(1, 4, {1, 1, 0, 0}), mask(1, 4, {1, 0, 0, 1}), 1.0 / 3.0},
      {mask(2, 2, {1, 0, 1, 1}), mask(2, 2, {1, 0, 1, 1}), 1.0},
      {mask(2, 2, {1, 1, 0, 0}), mask(2, 2, {0, 0, 1, 1}), 0.0},
      {mask(2, 2, {0, 0, 0, 0}), mask(2, 2, {0, 0, 0, 0}), 1.0},
      {mask(1, 3, {0, 0, 0}), mask(1, 3, {0, 1, 0}), 0.0},
      {mask(2, 3, {1, 1, 1, 0, 0, 0}), mask(2, 3, {0, 1, 1, 1, 0, 0}), 0.5},
  };
  int iu_ok = 0;
  for (const auto& c : iu_cases) {
    const bool good = positive_iu(c.a, c.b) == c.expected && positive_iu(c.b, c.a) == c.expected;
    iu_ok += good;
  }
  if (iu_ok != static_cast<int>(iu_cases.size())) failures.push_back("positive_iu hand cases");

  // Every support point agrees with the binarized target of its image.
  const auto& d = world().eval;
  long points = 0, disagree = 0;
  for (TaskMode mode : {TaskMode::kSemantic, TaskMode::kInteractive, TaskMode::kVideo}) {
    episodes::EpisodeSampler sampler(d, mode);
    for (int s : {1, 2}) {
      for (int p : {1, 2, 5, 10, episodes::kDensePoints}) {
        for (int k = 0; k < kSamplerEpisodes; ++k) {
          const auto e = evaluation_episode(sampler, 31, s, p, k);
          for (std::size_t i = 0; i < e.support.size(); ++i) {
            const auto target = episodes::binarize(d.samples[e.support_samples[i]], e.task);
            const int w = e.support[i].annotations.width();
            for (const auto& pt : e.support[i].annotations.points()) {
              ++points;
              const bool on = target[static_cast<std::size_t>(pt.row) * w + pt.col] == 1;
              disagree += on != (pt.label == Polarity::kPositive);
            }
          }
          if (e.query_target != episodes::binarize(d.samples[e.query_sample], e.task)) ++disagree;
        }
      }
    }
  }
  if (disagree) failures.push_back(std::to_string(disagree) + " support points off target");

  // Class split: the training world never draws held-out classes, training
  // tasks never name one, evaluation tasks always do.
  std::set<int> train_classes_seen;
  for (const auto& s : world().train.samples)
    for (const auto& [id, cls] : s.instance_classes) train_classes_seen.insert(cls);
  std::vector<int> leak;
  std::set_intersection(train_classes_seen.begin(), train_classes_seen.end(), kHeldOutClasses.begin(),
                        kHeldOutClasses.end(), std::back_inserter(leak));
  episodes::SamplerOptions train_opts, eval_opts;
  train_opts.allowed_classes = kTrainClasses;
  eval_opts.allowed_classes = kHeldOutClasses;
  episodes::EpisodeSampler train_sampler(world().train, TaskMode::kSemantic, train_opts);
  episodes::EpisodeSampler eval_sampler(d, TaskMode::kSemantic, eval_opts);
  episodes::Rng rng(5);
  std::set<int> train_tasks, eval_tasks;
  for (int k = 0; k < 500; ++k) {
    train_tasks.insert(train_sampler.sample(1, 2, rng).task.id);
    eval_tasks.insert(eval_sampler.sample(1, 2, rng).task.id);
  }
  std::vector<int> task_leak;
  std::set_intersection(train_tasks.begin(), train_tasks.end(), eval_tasks.begin(), eval_tasks.end(),
                        std::back_inserter(task_leak));
  const bool split_ok = leak.empty() && task_leak.empty() && eval_tasks == kHeldOutClasses;
  if (!split_ok) failures.push_back("class split");

  o.pass = failures.empty();
  o.detail = fmt("positive_iu %d/%zu hand cases; %ld support points, %ld off target; "
                 "train classes and held-out %s",
                 iu_ok, iu_cases.size(), points, disagree, split_ok ? "disjoint" : "overlap");
  if (!failures.empty()) o.detail += "; failed: " + failures.front();
  o.data = {{"support_points", points}, {"disagreements", disagree}, {"held_out_tasks", eval_tasks}};
  return o;
}

std::vector<std::uint8_t> dataset_bytes(const episodes::Dataset& d, const std::filesystem::path& dir) {
  std::filesystem::remove_all(dir);
  episodes::save_dataset(d, dir);
  std::vector<std::filesystem::path> files;
  for (const auto& f : std::filesystem::recursive_directory_iterator(dir))
    if (f.is_regular_file()) files.push_back(f.path());
  std::sort(files.begin(), files.end());
  std::vector<std::uint8_t> all;
  for (const auto& f : files) {
    const auto rel = std::filesystem::relative(f, dir).string();
    all.insert(all.end(), rel.begin(), rel.end());
    const auto bytes = io::read_bytes(f);
    all.insert(all.end(), bytes.begin(), bytes.end());
  }
  std::filesystem::remove_all(dir);
  return all;
}

Outcome determinism() {
  Outcome o{"determinism"};
  const auto tmp = std::filesystem::temp_directory_path() /
                   ("guidedseg_acceptance_" + std::to_string(::getpid()));
  auto small = eval_world_config();
  small.images = 80;
  small.video_sequences = 6;
  const auto d1 = dataset_bytes(episodes::generate_shapes_world(small, 77), tmp / "a");
  const auto d2 = dataset_bytes(episodes::generate_shapes_world(small, 77), tmp / "b");
  const bool data_ok = d1 == d2 && !d1.empty();

  const auto world_small = episodes::generate_shapes_world(small, 77);
  bool ckpt_ok = true;
  std::vector<std::uint8_t> first_ckpt;
  for (TaskMode mode : {TaskMode::kSemantic, TaskMode::kInteractive, TaskMode::kVideo}) {
    auto tc = train_config(mode);
    tc.episodes = 300;
    const auto a = autodiff::encode_checkpoint(make_checkpoint(train_guided(world_small, tc), tc));
    const auto b = autodiff::encode_checkpoint(make_checkpoint(train_guided(world_small, tc), tc));
    ckpt_ok = ckpt_ok && a == b;
    if (first_ckpt.empty()) first_ckpt = a;
  }
  // Round trip through the file format keeps the bytes.
  autodiff::write_checkpoint(tmp / "m.ckpt", autodiff::decode_checkpoint(first_ckpt));
  ckpt_ok = ckpt_ok && io::read_bytes(tmp / "m.ckpt") == first_ckpt;
  std::filesystem::remove_all(tmp);

  const auto params = model::ModelParams::from_checkpoint(autodiff::decode_checkpoint(first_ckpt));
  auto opts = eval_options(TaskMode::kSemantic, {1, 2}, {1, 5, episodes::kDensePoints});
  opts.episodes_per_cell = 40;
  auto numbers = [&] {
    auto j = to_json(eval_fewshot(params, world_small, opts));
    for (auto& c : j["cells"]) {
      c.erase("guidance_ms");
      c.erase("infer_ms");
    }
    return j.dump();
  };
  const bool eval_ok = numbers() == numbers();
  o.pass = data_ok && ckpt_ok && eval_ok;
  o.detail = fmt("dataset bytes %s (%zu bytes), checkpoint bytes %s (3 modes + file round trip), "
                 "eval numbers %s",
                 data_ok ? "equal" : "DIFFER", d1.size(), ckpt_ok ? "equal" : "DIFFER",
                 eval_ok ? "equal" : "DIFFER");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  std::string report_path;
  std::set<std::string> only;
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--report" && i + 1 < argc) {
      report_path = argv[++i];
    } else if (arg == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      std::string name;
      while (std::getline(ss, name, ',')) only.insert(name);
    } else {
      std::fprintf(stderr, "usage: %s [--report out.json] [--only name,...]\n", argv[0]);
      return 2;
    }
  }

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient-correctness", gradient_correctness},
      {"convolution-oracle", convolution_oracle},
      {"fast-path-equivalence", fast_path_equivalence},
      {"update-speed", update_speed},
      {"learning-semantic-heldout", learning_semantic},
      {"shot-behavior", shot_behavior},
      {"guidance-sensitivity", guidance_sensitivity},
      {"metric-sampler-invariants", metric_sampler_invariants},
      {"determinism", determinism},
  };

  json report = {{"criteria", json::array()}};
  int failed = 0;
  for (const auto& [name, run] : criteria) {
    if (!only.empty() && !only.count(name)) continue;
    const auto start = Clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {name, false, std::string("threw: ") + e.what()};
    }
    const double elapsed = seconds_since(start);
    std::printf("%s %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", o.name.c_str(), o.detail.c_str(), elapsed);
    std::fflush(stdout);
    failed += !o.pass;
    report["criteria"].push_back(
        {{"name", o.name}, {"pass", o.pass}, {"detail", o.detail}, {"seconds", elapsed}, {"data", o.data}});
  }
  if (!report_path.empty()) {
    std::ofstream out(report_path);
    out << report.dump(2) << '\n';
  }
  return failed == 0 ? 0 : 1;
}
