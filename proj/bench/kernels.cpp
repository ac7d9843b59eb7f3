// Parallel kernels against their serial reference versions.

#include <benchmark/benchmark.h>

#include <set>
#include <string>
#include <vector>

#include "capscope/association.hpp"
#include "capscope/corpus.hpp"
#include "capscope/random.hpp"
#include "capscope/segments.hpp"
#include "capscope/steering.hpp"
#include "capscope_ref/reference.hpp"

using namespace capscope;

namespace {

std::vector<std::set<std::string>> word_sets(std::size_t n) {
  Rng rng(1);
  std::vector<std::set<std::string>> out(n);
  for (auto& s : out) {
    const auto len = 3 + rng.below(10);
    for (std::size_t k = 0; k < len; ++k) s.insert("w" + std::to_string(rng.below(400)));
  }
  return out;
}

std::vector<RawMask> mask_set(std::size_t n, std::size_t side) {
  Rng rng(2);
  std::vector<RawMask> out;
  for (std::size_t i = 0; i < n; ++i) {
    Mask m(side, side);
    m.fill_ellipse(rng.uniform(0, side), rng.uniform(0, side), rng.uniform(4, side / 3.0),
                   rng.uniform(4, side / 3.0));
    out.push_back({"img", std::move(m)});
  }
  return out;
}

AttentionBundle bundle(std::size_t grid, std::size_t tokens, std::size_t heads) {
  Rng rng(3);
  const std::size_t n = 2 * heads * grid * grid * tokens;
  std::vector<float> a(n), g(n);
  for (auto& v : a) v = static_cast<float>(rng.uniform());
  for (auto& v : g) v = static_cast<float>(rng.uniform(-1, 1));
  std::vector<std::string> toks;
  for (std::size_t i = 0; i < tokens; ++i) toks.push_back("t" + std::to_string(i));
  return AttentionBundle(AttentionSource::itm, 2, heads, grid, toks, a, g, 0.5);
}

void BM_Cooccurrence(benchmark::State& state) {
  const auto sets = word_sets(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(corpus::build_cooccurrence(std::span<const std::set<std::string>>(sets)));
  }
}
void BM_CooccurrenceRef(benchmark::State& state) {
  const auto sets = word_sets(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(ref::cooccurrence(sets));
}
BENCHMARK(BM_Cooccurrence)->Arg(1000)->Arg(10000);
BENCHMARK(BM_CooccurrenceRef)->Arg(1000)->Arg(10000);

void BM_FilterSegments(benchmark::State& state) {
  const auto masks = mask_set(static_cast<std::size_t>(state.range(0)), 256);
  const ImageRef image{"img", 256, 256, ""};
  for (auto _ : state) benchmark::DoNotOptimize(segments::filter_segment_indices(masks, image));
}
void BM_FilterSegmentsRef(benchmark::State& state) {
  const auto masks = mask_set(static_cast<std::size_t>(state.range(0)), 256);
  const ImageRef image{"img", 256, 256, ""};
  for (auto _ : state) benchmark::DoNotOptimize(ref::filter_dedup(masks, image, 0.01, 0.85));
}
BENCHMARK(BM_FilterSegments)->Arg(32)->Arg(96);
BENCHMARK(BM_FilterSegmentsRef)->Arg(32)->Arg(96);

void BM_GradCam(benchmark::State& state) {
  const auto b = bundle(24, 20, 12);
  for (auto _ : state) benchmark::DoNotOptimize(assoc::compute_gradcam(b, 1));
}
void BM_GradCamRef(benchmark::State& state) {
  const auto b = bundle(24, 20, 12);
  for (auto _ : state) benchmark::DoNotOptimize(ref::gradcam(b, 1, true));
}
BENCHMARK(BM_GradCam);
BENCHMARK(BM_GradCamRef);

void BM_Resize(benchmark::State& state) {
  Rng rng(4);
  MatrixD g(24, 24);
  for (auto& v : g.data()) v = rng.uniform();
  for (auto _ : state) benchmark::DoNotOptimize(assoc::resize_map(g, 640, 480));
}
void BM_ResizeRef(benchmark::State& state) {
  Rng rng(4);
  MatrixD g(24, 24);
  for (auto& v : g.data()) v = rng.uniform();
  for (auto _ : state) benchmark::DoNotOptimize(ref::resize(g, 640, 480));
}
BENCHMARK(BM_Resize);
BENCHMARK(BM_ResizeRef);

void BM_MaskToPatches(benchmark::State& state) {
  const auto masks = mask_set(1, 768);
  for (auto _ : state) benchmark::DoNotOptimize(steer::mask_to_patches(masks[0].bitmap, 24));
}
void BM_MaskToPatchesRef(benchmark::State& state) {
  const auto masks = mask_set(1, 768);
  for (auto _ : state) benchmark::DoNotOptimize(ref::mask_patches(masks[0].bitmap, 24, 0.5));
}
BENCHMARK(BM_MaskToPatches);
BENCHMARK(BM_MaskToPatchesRef);

}  // namespace

BENCHMARK_MAIN();
