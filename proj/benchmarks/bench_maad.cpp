#include <benchmark/benchmark.h>

#include <cstdint>
#include <filesystem>
#include <random>
#include <vector>

#include "maad/dataset.hpp"
#include "maad/detector.hpp"
#include "maad/geometry.hpp"
#include "maad/stats.hpp"
#include "maad/synth.hpp"
#include "maad/tensor.hpp"
#include "maad/train.hpp"

namespace {

using namespace maad;
namespace fs = std::filesystem;

Tensor random_tensor(Shape shape, uint64_t seed, bool requires_grad = false) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

void BM_Conv2dForward(benchmark::State& state) {
  const Tensor x = random_tensor({8, 16, 64, 64}, 1);
  const Tensor w = random_tensor({32, 16, 3, 3}, 2);
  const Tensor b = Tensor::zeros({32});
  for (auto _ : state) {
    benchmark::DoNotOptimize(conv2d(x, w, b, 1, Padding2d{1, 1, 1, 1}));
  }
}
BENCHMARK(BM_Conv2dForward)->Unit(benchmark::kMillisecond);

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const Tensor x = random_tensor({8, 16, 64, 64}, 1);
  Tensor w = random_tensor({32, 16, 3, 3}, 2, true);
  Tensor b = Tensor::zeros({32}, true);
  for (auto _ : state) {
    Tensor loss = sum(conv2d(x, w, b, 1, Padding2d{1, 1, 1, 1}));
    loss.backward();
    w.zero_grad();
    b.zero_grad();
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Unit(benchmark::kMillisecond);

void BM_ObbIou(benchmark::State& state) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::pair<OrientedBox, OrientedBox>> pairs;
  for (int i = 0; i < 256; ++i) {
    pairs.push_back({{32 + 10 * u(rng), 32 + 10 * u(rng), 5 + 20 * u(rng),
                      4 + 10 * u(rng), 3.0 * u(rng)},
                     {32 + 10 * u(rng), 32 + 10 * u(rng), 5 + 20 * u(rng),
                      4 + 10 * u(rng), 3.0 * u(rng)}});
  }
  size_t i = 0;
  for (auto _ : state) {
    const auto& [a, b] = pairs[i++ & 255];
    benchmark::DoNotOptimize(obb_iou(a, b));
  }
}
BENCHMARK(BM_ObbIou);

void BM_GenerateScene(benchmark::State& state) {
  const DomainSpec spec = DomainSpec::source_default();
  uint64_t seed = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(generate_scene(spec, seed++));
  }
}
BENCHMARK(BM_GenerateScene)->Unit(benchmark::kMillisecond);

void BM_SobelStats(benchmark::State& state) {
  const SceneSample s = generate_scene(DomainSpec::source_default(), 7);
  for (auto _ : state) {
    benchmark::DoNotOptimize(image_stats(s.image));
  }
}
BENCHMARK(BM_SobelStats);

DetectorConfig detector_config(int64_t c1, int64_t c2, int64_t c3, int64_t head) {
  DetectorConfig d;
  d.backbone.channels = {c1, c2, c3};
  d.head_channels = head;
  return d;
}

void BM_DetectorForward(benchmark::State& state) {
  Detector det(detector_config(state.range(0), state.range(1), state.range(2),
                               state.range(3)));
  std::mt19937_64 rng(1);
  det.init(rng);
  const Tensor x = random_tensor({1, 3, 64, 64}, 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(det.forward(x, false));
  }
}
BENCHMARK(BM_DetectorForward)
    ->Args({16, 32, 64, 64})
    ->Args({8, 16, 32, 32})
    ->Unit(benchmark::kMillisecond);

void BM_DecodeDetections(benchmark::State& state) {
  Detector det(detector_config(8, 16, 32, 32));
  std::mt19937_64 rng(1);
  det.init(rng);
  const Tensor x = random_tensor({1, 3, 64, 64}, 2);
  const auto fwd = det.forward(x, false);
  DecodeConfig cfg;
  cfg.score_threshold = 0.05;  // random-init scores sit near 0.1
  for (auto _ : state) {
    benchmark::DoNotOptimize(decode_detections(fwd.heads, 0, cfg));
  }
}
BENCHMARK(BM_DecodeDetections);

// 12 + 12 images at the acceptance image size.
const Dataset& bench_dataset() {
  static const Dataset ds = [] {
    const fs::path dir = fs::temp_directory_path() / "maad_bench_ds";
    fs::remove_all(dir);
    GenerateConfig cfg;
    cfg.source_count = 12;
    cfg.target_count = 12;
    cfg.seed = 5;
    return load_dataset(generate_dataset(cfg, dir.string()));
  }();
  return ds;
}

TrainConfig bench_config(Method m, int64_t c1, int64_t c2, int64_t c3,
                         int64_t head) {
  TrainConfig cfg;
  cfg.method = m;
  cfg.detector = detector_config(c1, c2, c3, head);
  if (c1 <= 8) {
    cfg.discriminator.high_filters = {16, 32, 32, 1};
    cfg.discriminator.low_filters = {8, 16, 16, 1};
  }
  return cfg;
}

void BM_TrainStep(benchmark::State& state) {
  const Method method = static_cast<Method>(state.range(0));
  TrainConfig cfg = bench_config(method, state.range(1), state.range(2),
                                 state.range(3), state.range(4));
  Trainer trainer(cfg, bench_dataset());
  const DomainBatch batch = trainer.sample_batch();
  for (auto _ : state) {
    benchmark::DoNotOptimize(trainer.train_step(batch, 0.5));
  }
}
BENCHMARK(BM_TrainStep)
    ->Args({int(Method::kNone), 16, 32, 64, 64})
    ->Args({int(Method::kMaad), 16, 32, 64, 64})
    ->Args({int(Method::kNone), 8, 16, 32, 32})
    ->Args({int(Method::kMaad), 8, 16, 32, 32})
    ->Args({int(Method::kDann), 8, 16, 32, 32})
    ->Args({int(Method::kMmd), 8, 16, 32, 32})
    ->Unit(benchmark::kMillisecond);

void BM_SampleBatch(benchmark::State& state) {
  Trainer trainer(bench_config(Method::kMaad, 8, 16, 32, 32), bench_dataset());
  for (auto _ : state) {
    benchmark::DoNotOptimize(trainer.sample_batch());
  }
}
BENCHMARK(BM_SampleBatch)->Unit(benchmark::kMillisecond);

void BM_EvaluateImage(benchmark::State& state) {
  TrainConfig cfg = bench_config(Method::kNone, 8, 16, 32, 32);
  Trainer trainer(cfg, bench_dataset());
  for (auto _ : state) {
    benchmark::DoNotOptimize(trainer.evaluate(Split::kTest, Domain::kTarget));
  }
}
BENCHMARK(BM_EvaluateImage)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
