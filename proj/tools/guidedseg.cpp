// guidedseg: dataset synthesis, episodic training, evaluation, timing and
// the interactive segmentation server.

#include <algorithm>
#include <cmath>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#ifdef __linux__
#include <pthread.h>
#include <sched.h>
#endif

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "guidedseg/checkpoint.hpp"
#include "guidedseg/episodes.hpp"
#include "guidedseg/http_server.hpp"
#include "guidedseg/service.hpp"
#include "guidedseg/training.hpp"

using namespace guidedseg;
using nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::kConfiguration:
    case ErrorCode::kUnsupportedConfiguration:
    case ErrorCode::kContractViolation:
    case ErrorCode::kBadRequest:
      return kExitConfig;
    case ErrorCode::kFormat:
    case ErrorCode::kNotFound:
    case ErrorCode::kDatasetTooSmall:
    case ErrorCode::kInvalidShape:
    case ErrorCode::kInvalidLabel:
    case ErrorCode::kNoPositiveRegion:
    case ErrorCode::kDegenerateSupport:
      return kExitData;
    default:
      return 1;
  }
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

int parse_int(const std::string& text, const char* what) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(text, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used != text.size() || text.empty())
    throw Error(ErrorCode::kConfiguration, std::string("bad ") + what + " '" + text + "'");
  return v;
}

std::vector<int> int_list(const std::string& text, const char* what) {
  std::vector<int> out;
  for (const auto& s : split(text, ',')) out.push_back(parse_int(s, what));
  if (out.empty()) throw Error(ErrorCode::kConfiguration, std::string("empty ") + what + " list");
  return out;
}

std::vector<int> points_list(const std::string& text) {
  std::vector<int> out;
  for (const auto& s : split(text, ',')) out.push_back(training::parse_points(s));
  if (out.empty()) throw Error(ErrorCode::kConfiguration, "empty points list");
  return out;
}

std::set<int> class_set(const std::string& text) {
  if (text.empty()) return {};
  const auto v = int_list(text, "class");
  return {v.begin(), v.end()};
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kFormat, "cannot write " + path);
  out << j.dump(2) << '\n';
  if (!out) throw Error(ErrorCode::kFormat, "cannot write " + path);
}

model::ModelParams load_params(const std::string& path) {
  return model::ModelParams::from_checkpoint(autodiff::read_checkpoint(path));
}

// --- synth -------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::uint64_t seed = 0;
  int images = 400;
  int video_sequences = 0;
  int frames = 8;
  int size = 64;
  std::string exclude;
};

int run_synth(const SynthArgs& a) {
  episodes::ShapesWorldConfig c;
  c.images = a.images;
  c.video_sequences = a.video_sequences;
  c.frames = a.frames;
  c.height = c.width = a.size;
  c.excluded_classes = class_set(a.exclude);
  const auto ds = episodes::generate_shapes_world(c, a.seed);
  episodes::save_dataset(ds, a.out);
  std::cerr << "wrote " << ds.samples.size() << " samples to " << a.out << '\n';
  return 0;
}

// --- train -------------------------------------------------------------

struct TrainArgs {
  std::string data, out, mode = "semantic";
  int episodes = 5000;
  std::string fusion = "late", head = "fusion", locality = "auto";
  std::uint64_t seed = 0;
  float lr = 0.01f;
  int shots = 1;
  std::string points = "1,2,5,10,dense";
  std::string classes;
  bool fgbg = false;
  int log_every = 100;
};

int run_train(const TrainArgs& a) {
  training::TrainConfig tc;
  tc.mode = episodes::parse_task_mode(a.mode);
  tc.episodes = a.episodes;
  tc.seed = a.seed;
  tc.lr = a.lr;
  tc.shots = a.shots;
  tc.points = points_list(a.points);
  tc.log_every = a.log_every;
  tc.sampler.allowed_classes = class_set(a.classes);
  tc.model.fusion = model::parse_fusion(a.fusion);
  tc.model.head = model::parse_head(a.head);
  if (a.locality == "auto") {
    // Same-image guidance keeps its spatial layout.
    tc.model.locality = tc.mode == episodes::TaskMode::kInteractive && tc.shots == 1 &&
                                tc.model.fusion == model::Fusion::kLate &&
                                tc.model.head == model::Head::kFeatureFusion
                            ? model::Locality::kIdentity
                            : model::Locality::kGlobalPool;
  } else {
    tc.model.locality = model::parse_locality(a.locality);
  }
  tc.validate();
  tc.model.validate();

  const auto ds = episodes::load_dataset(a.data);
  auto log = [](const training::TrainLog& l) {
    std::fprintf(stderr, "episode %d loss %.4f\n", l.episode, l.running_loss);
  };
  const auto start = std::chrono::steady_clock::now();
  const auto result = a.fgbg ? training::train_fgbg(ds, tc, log) : training::train_guided(ds, tc, log);
  autodiff::write_checkpoint(a.out, training::make_checkpoint(result, tc));
  std::fprintf(stderr, "trained %d episodes in %.1f s, wrote %s\n", tc.episodes,
               std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(),
               a.out.c_str());
  return 0;
}

// --- eval --------------------------------------------------------------

struct EvalArgs {
  std::string ckpt, data, mode = "semantic", report;
  std::string shots = "1", points = "1,2,5,10,dense";
  int episodes = 200;
  std::uint64_t seed = 1;
  std::string classes;
  bool two_object = false;
  std::string fgbg;
  int finetune_episodes = 0;
  int finetune_steps = 100;
};

json finetune_baseline(const model::ModelParams& params, const episodes::Dataset& ds,
                       const training::EvalOptions& opts, int episodes, int steps) {
  episodes::EpisodeSampler sampler(ds, opts.mode, opts.sampler);
  training::FinetuneOptions fo;
  fo.steps = steps;
  json cells = json::array();
  for (int s : opts.shots) {
    for (int p : opts.points) {
      std::vector<double> ious, ms;
      for (int k = 0; k < episodes; ++k) {
        const auto e = training::evaluation_episode(sampler, opts.seed, s, p, k);
        const auto r = training::baseline_finetune(params, e.support, e.query, fo);
        ious.push_back(training::positive_iu(r.mask, training::target_mask(e)));
        ms.push_back(r.train_ms);
      }
      const double mean = std::accumulate(ious.begin(), ious.end(), 0.0) / episodes;
      double ss = 0.0;
      for (double v : ious) ss += (v - mean) * (v - mean);
      cells.push_back({{"S", s},
                       {"P", training::points_to_json(p)},
                       {"mean_iu", mean},
                       {"std_iu", episodes > 1 ? std::sqrt(ss / (episodes - 1)) : 0.0},
                       {"n", episodes},
                       {"train_ms", std::accumulate(ms.begin(), ms.end(), 0.0) / episodes}});
    }
  }
  return {{"steps", steps}, {"lr", fo.lr}, {"cells", cells}};
}

int run_eval(const EvalArgs& a) {
  training::EvalOptions opts;
  opts.mode = episodes::parse_task_mode(a.mode);
  opts.shots = int_list(a.shots, "shots");
  opts.points = points_list(a.points);
  opts.episodes_per_cell = a.episodes;
  opts.seed = a.seed;
  opts.sampler.allowed_classes = class_set(a.classes);
  if (a.two_object) {
    if (opts.mode == episodes::TaskMode::kSemantic) opts.sampler.require_distractor = true;
    if (opts.mode == episodes::TaskMode::kInteractive) opts.sampler.min_instances = 2;
  }
  if (a.episodes < 1) throw Error(ErrorCode::kConfiguration, "episodes must be >= 1");
  for (int s : opts.shots)
    if (s < 1) throw Error(ErrorCode::kConfiguration, "shots must be >= 1");

  const auto params = load_params(a.ckpt);
  const auto ds = episodes::load_dataset(a.data);
  auto report = training::eval_fewshot(params, ds, opts);
  report.config["checkpoint"] = a.ckpt;
  report.config["model"] = model::to_json(params.config());
  if (!a.fgbg.empty()) {
    const auto fg = load_params(a.fgbg);
    auto r = training::to_json(training::eval_fewshot(fg, ds, opts));
    r["checkpoint"] = a.fgbg;
    report.baselines["fgbg"] = r;
  }
  if (a.finetune_episodes > 0)
    report.baselines["finetune"] = finetune_baseline(params, ds, opts, a.finetune_episodes, a.finetune_steps);
  write_json(a.report, training::to_json(report));
  for (const auto& c : report.cells) {
    std::printf("S=%d P=%s mean_iu=%.4f std=%.4f n=%d\n", c.shots,
                training::points_to_json(c.points).dump().c_str(), c.mean_iu, c.std_iu, c.n);
  }
  return 0;
}

// --- bench -------------------------------------------------------------

struct BenchArgs {
  std::string ckpt, data, report, mode = "video";
  int episodes = 10;
  int reps = 20;
  std::uint64_t seed = 1;
  int points = 10;
};

std::string cpu_model() {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) return line.substr(colon + 2);
    }
  }
  return "unknown";
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
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int run_bench(const BenchArgs& a) {
  if (a.reps < 20) throw Error(ErrorCode::kConfiguration, "bench needs at least 20 repetitions");
  if (a.episodes < 1) throw Error(ErrorCode::kConfiguration, "episodes must be >= 1");
  pin_to_one_cpu();
  const auto params = load_params(a.ckpt);
  const auto ds = episodes::load_dataset(a.data);
  const auto mode = episodes::parse_task_mode(a.mode);
  episodes::EpisodeSampler sampler(ds, mode);
  json runs = json::array();
  std::vector<double> full, update;
  for (int k = 0; k < a.episodes; ++k) {
    const auto e = training::evaluation_episode(sampler, a.seed, 1, a.points, k);
    const auto t = training::benchmark_timing(params, e, a.reps);
    runs.push_back(training::to_json(t));
    full.push_back(t.full_forward.median_ms);
    if (t.guidance_update) update.push_back(t.guidance_update->median_ms);
  }
  json summary = {{"full_forward_median_ms", median(full)}};
  if (!update.empty()) {
    summary["guidance_update_median_ms"] = median(update);
    summary["ratio"] = median(full) / median(update);
  } else {
    summary["guidance_update_median_ms"] = nullptr;
    summary["ratio"] = nullptr;
    summary["note"] = "early fusion has no update path: every annotation change is a full forward";
  }
  const auto& c = params.config();
  json report = {
      {"config",
       {{"checkpoint", a.ckpt}, {"mode", a.mode}, {"episodes", a.episodes},
        {"repetitions", a.reps}, {"points", a.points}, {"seed", a.seed},
        {"image", {ds.samples.empty() ? 0 : ds.samples[0].height(), ds.samples.empty() ? 0 : ds.samples[0].width()}},
        {"model", model::to_json(c)}}},
      {"hardware",
       {{"cpu", cpu_model()}, {"threads", 1},
        {"hardware_concurrency", std::thread::hardware_concurrency()},
        {"compiler", __VERSION__}}},
      {"summary", summary},
      {"episodes", runs}};
  write_json(a.report, report);
  std::printf("full %.3f ms", median(full));
  if (!update.empty()) std::printf(", update %.3f ms, ratio %.2f", median(update), median(full) / median(update));
  std::printf("\n");
  return 0;
}

// --- serve -------------------------------------------------------------

struct ServeArgs {
  std::string addr = "127.0.0.1:8080", ckpt, model, static_dir;
  int max_frames = 64;
  int max_sessions = 256;
};

int run_serve(const ServeArgs& a) {
  if (a.max_frames < 1 || a.max_sessions < 1)
    throw Error(ErrorCode::kConfiguration, "--max-frames and --max-sessions must be >= 1");
  const auto [host, port] = http::parse_address(a.addr);
  auto params = std::make_shared<const model::ModelParams>(load_params(a.ckpt));
  const std::string name = a.model.empty() ? std::filesystem::path(a.ckpt).stem().string() : a.model;
  service::SessionService svc(params, name, {a.max_frames, a.max_sessions});
  http::ServerOptions opts;
  if (!a.static_dir.empty()) {
    if (!std::filesystem::is_directory(a.static_dir))
      throw Error(ErrorCode::kConfiguration, "--static: not a directory: " + a.static_dir);
    opts.static_dir = a.static_dir;
  }
  http::Server server(svc, opts);

  // Signals are taken by a waiting thread, which stops the server.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  const int bound = server.bind(host, port);
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    server.stop();
  });
  std::fprintf(stderr, "serving model '%s' on %s:%d\n", name.c_str(), host.c_str(), bound);
  server.run();
  if (waiter.joinable()) {
    pthread_kill(waiter.native_handle(), SIGTERM);
    waiter.join();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Guided few-shot segmentation: synth, train, eval, bench, serve"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a shapes-world dataset");
  s->add_option("--out", synth.out, "Output directory")->required();
  s->add_option("--seed", synth.seed)->required();
  s->add_option("--images", synth.images, "Still images");
  s->add_option("--video-sequences", synth.video_sequences, "Video sequences");
  s->add_option("--frames", synth.frames, "Frames per sequence");
  s->add_option("--size", synth.size, "Image height and width");
  s->add_option("--exclude-classes", synth.exclude, "Comma-separated classes never drawn");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Episodic training");
  t->add_option("--data", train.data)->required();
  t->add_option("--mode", train.mode, "semantic|interactive|video")->required();
  t->add_option("--out", train.out, "Checkpoint path")->required();
  t->add_option("--episodes", train.episodes);
  t->add_option("--fusion", train.fusion, "late|early");
  t->add_option("--head", train.head, "fusion|regress|proto");
  t->add_option("--locality", train.locality, "auto|global|identity");
  t->add_option("--seed", train.seed);
  t->add_option("--lr", train.lr);
  t->add_option("--shots", train.shots);
  t->add_option("--points", train.points, "P values drawn per episode");
  t->add_option("--classes", train.classes, "Comma-separated classes allowed as semantic tasks");
  t->add_flag("--fgbg", train.fgbg, "Train the unguided foreground-background baseline");
  t->add_option("--log-every", train.log_every);

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Few-shot evaluation over an (S, P) grid");
  e->add_option("--ckpt", eval.ckpt)->required();
  e->add_option("--data", eval.data)->required();
  e->add_option("--mode", eval.mode)->required();
  e->add_option("--shots", eval.shots);
  e->add_option("--points", eval.points);
  e->add_option("--report", eval.report)->required();
  e->add_option("--episodes", eval.episodes, "Episodes per cell");
  e->add_option("--seed", eval.seed);
  e->add_option("--classes", eval.classes, "Comma-separated classes allowed as semantic tasks");
  e->add_flag("--two-object", eval.two_object, "Only queries holding a second object");
  e->add_option("--fgbg-ckpt", eval.fgbg, "Foreground-background baseline checkpoint");
  e->add_option("--finetune-episodes", eval.finetune_episodes, "Episodes per cell for the fine-tuning baseline");
  e->add_option("--finetune-steps", eval.finetune_steps);

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Full forward versus guidance update timing");
  b->add_option("--ckpt", bench.ckpt)->required();
  b->add_option("--data", bench.data)->required();
  b->add_option("--report", bench.report)->required();
  b->add_option("--mode", bench.mode, "Episode mode");
  b->add_option("--episodes", bench.episodes);
  b->add_option("--reps", bench.reps, "Repetitions per episode (>= 20)");
  b->add_option("--points", bench.points);
  b->add_option("--seed", bench.seed);

  ServeArgs serve;
  auto* v = app.add_subcommand("serve", "HTTP session service");
  v->add_option("--addr", serve.addr, "host:port");
  v->add_option("--ckpt", serve.ckpt)->required();
  v->add_option("--model", serve.model, "Model name clients ask for (default: checkpoint stem)");
  v->add_option("--max-frames", serve.max_frames);
  v->add_option("--max-sessions", serve.max_sessions);
  v->add_option("--static", serve.static_dir, "Directory served at /");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*s) return run_synth(synth);
    if (*t) return run_train(train);
    if (*e) return run_eval(eval);
    if (*b) return run_bench(bench);
    if (*v) return run_serve(serve);
  } catch (const Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return exit_code(err.code());
  } catch (const std::filesystem::filesystem_error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return kExitData;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 1;
  }
  return 0;
}
