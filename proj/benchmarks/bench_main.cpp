#include <benchmark/benchmark.h>

#include "fg/diagnostics.hpp"
#include "fg/dit.hpp"
#include "fg/flow.hpp"
#include "fg/focal_guidance.hpp"
#include "fg/rng.hpp"
#include "fg/synth.hpp"

using namespace fg;

namespace {

struct Fixture {
    dit::Dit model{dit::DitConfig{}};
    synth::RenderedScene scene = synth::render_scene(synth::default_suite(1, 3)[0], 3);
    LatentVideo z;

    Fixture() {
        Rng rng(4);
        z = flow::standard_normal_like(scene.latent.shape(), rng);
    }
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

void BM_MoransI(benchmark::State& state) {
    const auto side = static_cast<std::size_t>(state.range(0));
    Rng rng(1);
    std::vector<double> frame(side * side);
    for (auto& v : frame) v = rng.normal();
    for (auto _ : state) benchmark::DoNotOptimize(diagnostics::morans_i_frame(frame, side, side));
}
BENCHMARK(BM_MoransI)->Arg(8)->Arg(32)->Arg(64);

void BM_Forward(benchmark::State& state) {
    auto& f = fixture();
    const auto cond = f.scene.conditioning();
    for (auto _ : state) benchmark::DoNotOptimize(f.model.forward(f.z, 0.5, cond));
    state.SetLabel("8x8x2 latent, default config");
}
BENCHMARK(BM_Forward)->Unit(benchmark::kMillisecond);

void BM_GuidedForward(benchmark::State& state) {
    auto& f = fixture();
    guidance::GuidanceConfig gc;
    gc.weak_layers = {0, 2, 4, 6};
    guidance::GuidedModel gm(f.model, f.scene.conditioning(), gc, {});
    for (auto _ : state) benchmark::DoNotOptimize(gm.forward(f.z, 0.5));
    state.SetLabel("FSG + attention cache, two passes");
}
BENCHMARK(BM_GuidedForward)->Unit(benchmark::kMillisecond);

void BM_TrainStep(benchmark::State& state) {
    auto& f = fixture();
    dit::Dit model = f.model;
    Rng rng(5);
    std::vector<dit::TrainingExample> batch;
    for (int i = 0; i < state.range(0); ++i)
        batch.push_back({f.scene.latent, flow::standard_normal_like(f.scene.latent.shape(), rng), rng.uniform(),
                         f.scene.conditioning()});
    const auto mask = dit::TrainableMask::all(model.config().layers);
    std::size_t step = 0;
    for (auto _ : state) benchmark::DoNotOptimize(dit::train_step(model, batch, 1e-3, mask, step++));
}
BENCHMARK(BM_TrainStep)->Arg(1)->Arg(4)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
