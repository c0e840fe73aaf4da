#include <benchmark/benchmark.h>

#include "preflab/corpus.hpp"
#include "preflab/train.hpp"

using namespace preflab;

namespace {

ModelConfig bench_config(std::size_t vocab) {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    return cfg;  // default d64 / 2 layers / 4 heads
}

struct Fixture {
    Corpus corpus = gen_world(1);
    ToyLm model = ToyLm::init(bench_config(corpus.vocab.size()), 1);
    TokenSeq prompt = corpus.prompts[0].tokens;
    TokenSeq response = corpus.with_eos(corpus.prompts[0].answer_plain);
};

Fixture& fixture() {
    static Fixture f;
    return f;
}

}  // namespace

static void BM_Forward(benchmark::State& state) {
    Fixture& f = fixture();
    TokenSeq tokens = f.prompt;
    tokens.insert(tokens.end(), f.response.begin(), f.response.end());
    for (auto _ : state) {
        Tensor logits = f.model.logits(tokens);
        benchmark::DoNotOptimize(logits.data.data());
    }
}
BENCHMARK(BM_Forward);

static void BM_Backward(benchmark::State& state) {
    Fixture& f = fixture();
    for (auto _ : state) {
        Tape tape;
        auto g = f.model.logprob_graph(tape, f.prompt, f.response, true);
        tape.backward(g.value);
        benchmark::DoNotOptimize(tape.size());
    }
}
BENCHMARK(BM_Backward);

static void BM_SftStep(benchmark::State& state) {
    Fixture& f = fixture();
    ToyLm model = f.model;
    SftPair pair;
    pair.prompt = f.prompt;
    pair.target = f.response;
    TrainConfig cfg;
    cfg.objective = Objective::Sft;
    Optimizer opt(0.001);
    for (auto _ : state) {
        StepOutcome out = sft_step(model, pair, cfg, opt);
        benchmark::DoNotOptimize(out.loss);
    }
}
BENCHMARK(BM_SftStep);

static void BM_DpoStep(benchmark::State& state) {
    Fixture& f = fixture();
    ToyLm model = f.model;
    RefScoreCache ref(f.model);
    PreferencePair pair;
    pair.prompt_id = "bench";
    pair.prompt = f.prompt;
    pair.preferred = f.response;
    pair.dispreferred = f.corpus.refusal_for(f.corpus.prompts[0]);
    TrainConfig cfg;
    cfg.beta = 0.1;
    Optimizer opt(0.001);
    for (auto _ : state) {
        StepOutcome out = dpo_step(model, ref, pair, cfg, opt);
        benchmark::DoNotOptimize(out.loss);
    }
}
BENCHMARK(BM_DpoStep);

static void BM_Sample(benchmark::State& state) {
    Fixture& f = fixture();
    Rng rng(7);
    for (auto _ : state) {
        TokenSeq out = f.model.sample(f.prompt, 1.0, 24, rng, f.corpus.vocab.eos());
        benchmark::DoNotOptimize(out.data());
    }
}
BENCHMARK(BM_Sample);

BENCHMARK_MAIN();
