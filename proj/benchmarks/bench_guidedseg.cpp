#include <benchmark/benchmark.h>

#include <random>

#include "guidedseg/model.hpp"
#include "guidedseg/ops.hpp"
#include "guidedseg/rle.hpp"
#include "guidedseg/service.hpp"

using namespace guidedseg;
using autodiff::Tensor;

namespace {

Tensor random_tensor(std::vector<int> shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

Tensor random_image(int size, std::uint64_t seed) {
  auto t = random_tensor({3, size, size}, seed);
  for (auto& v : t.data()) v = 0.5f * (v + 1.0f);
  return t;
}

AnnotationSet two_points(int size) {
  AnnotationSet a(size, size);
  a.set({size / 6, size / 5, Polarity::kPositive});
  a.set({size * 3 / 4, size * 2 / 3, Polarity::kNegative});
  return a;
}

// Encoder and decoder layer shapes of the default 64x64 network.
void BM_Conv2d(benchmark::State& state) {
  const int cin = state.range(0), cout = state.range(1), size = state.range(2),
            k = state.range(3), stride = state.range(4);
  const auto x = random_tensor({cin, size, size}, 1);
  const auto w = random_tensor({cout, cin, k, k}, 2);
  const auto b = random_tensor({cout}, 3);
  for (auto _ : state) benchmark::DoNotOptimize(autodiff::conv2d(x, w, b, stride, k / 2));
  const int out = (size + 2 * (k / 2) - k) / stride + 1;
  state.counters["MAC/s"] = benchmark::Counter(
      static_cast<double>(cin) * cout * k * k * out * out, benchmark::Counter::kIsIterationInvariantRate);
}
BENCHMARK(BM_Conv2d)
    ->Args({3, 16, 64, 3, 2})
    ->Args({16, 32, 32, 3, 2})
    ->Args({32, 32, 16, 3, 1})
    ->Args({32, 2, 16, 1, 1});

void BM_Conv2dBackward(benchmark::State& state) {
  const auto x0 = random_tensor({32, 16, 16}, 1);
  const auto w0 = random_tensor({32, 32, 3, 3}, 2);
  const auto b0 = random_tensor({32}, 3);
  for (auto _ : state) {
    autodiff::Tape tape;
    Tensor x = x0.clone(), w = w0.clone(), b = b0.clone();
    x.set_requires_grad(true);
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    auto y = autodiff::conv2d(x, w, b, 1, 1, &tape);
    auto loss = autodiff::sum(y, &tape);
    autodiff::backward(loss, tape);
    benchmark::DoNotOptimize(w.grad().data());
  }
}
BENCHMARK(BM_Conv2dBackward);

void BM_ExtractFeatures(benchmark::State& state) {
  const auto params = model::ModelParams::initialize({}, 1);
  const auto img = random_image(state.range(0), 4);
  for (auto _ : state) benchmark::DoNotOptimize(model::extract_features(img, params));
}
BENCHMARK(BM_ExtractFeatures)->Arg(64)->Arg(128);

// Full forward with a distinct support frame: both frames are encoded.
void BM_SegmentFull(benchmark::State& state) {
  const auto params = model::ModelParams::initialize({}, 1);
  const auto support_img = random_image(64, 5), query = random_image(64, 6);
  const std::vector<model::SupportItem> support{{support_img, two_points(64)}};
  for (auto _ : state) benchmark::DoNotOptimize(model::segment(support, query, params));
}
BENCHMARK(BM_SegmentFull)->Unit(benchmark::kMicrosecond);

// One annotation edit: re-pool guidance from cached support features and
// re-run the head on the cached query.
void BM_GuidanceUpdate(benchmark::State& state) {
  const bool identity = state.range(0) != 0;
  model::GuidanceConfig c;
  if (identity) c.locality = model::Locality::kIdentity;
  const auto params = model::ModelParams::initialize(c, 1);
  const auto img = random_image(64, 5);
  const auto features = model::extract_features(img, params);
  const auto query = model::prepare_query(identity ? img : random_image(64, 6), params);
  model::GuidanceState st{two_points(64), model::empty_guidance(c, 16, 16)};
  st = model::update_guidance(features, st, {}, c);
  int i = 0;
  for (auto _ : state) {
    AnnotationDelta d;
    d.upserts.push_back({30, 30, (i++ % 2) ? Polarity::kPositive : Polarity::kNegative});
    st = model::update_guidance(features, st, d, c);
    benchmark::DoNotOptimize(model::argmax_mask(model::infer(query, st.guidance, params)));
  }
  state.SetLabel(identity ? "identity" : "global");
}
BENCHMARK(BM_GuidanceUpdate)->Arg(0)->Arg(1)->Unit(benchmark::kMicrosecond);

void BM_ConvTiled(benchmark::State& state) {
  const auto params = model::ModelParams::initialize({}, 1);
  const auto z = random_tensor({64}, 7);
  for (auto _ : state)
    benchmark::DoNotOptimize(autodiff::conv2d_tiled(z, params.at("decoder.0.guide_weight"), 16, 16, 1));
}
BENCHMARK(BM_ConvTiled);

void BM_SessionClick(benchmark::State& state) {
  auto params = std::make_shared<const model::ModelParams>(model::ModelParams::initialize({}, 1));
  service::SessionService svc(params, "m");
  const auto id = svc.create_session({random_image(64, 5), random_image(64, 6)}, "m").id;
  svc.add_annotations(id, 0, std::vector<service::Click>{{10, 12, Polarity::kPositive}});
  int i = 0;
  for (auto _ : state) {
    const service::Click c{i % 64, (i * 7) % 64, (i % 2) ? Polarity::kPositive : Polarity::kNegative};
    ++i;
    benchmark::DoNotOptimize(svc.add_annotations(id, 1, std::span(&c, 1)));
  }
}
BENCHMARK(BM_SessionClick)->Unit(benchmark::kMicrosecond);

void BM_RleEncode(benchmark::State& state) {
  const int size = state.range(0);
  model::BinaryMask m{size, size, std::vector<std::uint8_t>(static_cast<std::size_t>(size) * size)};
  std::mt19937_64 rng(3);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = ((i / 37) + (rng() % 5 == 0)) % 2;
  for (auto _ : state) benchmark::DoNotOptimize(encode_rle(m));
  state.SetItemsProcessed(state.iterations() * size * size);
}
BENCHMARK(BM_RleEncode)->Arg(64)->Arg(512);

}  // namespace

BENCHMARK_MAIN();
