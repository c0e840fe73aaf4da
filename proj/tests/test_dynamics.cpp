#include <cmath>
#include <filesystem>

#include <doctest.h>

#include "preflab/dynamics.hpp"

using namespace preflab;

namespace {

Corpus world() { return gen_world(11); }

ToyLm tiny_model(const Corpus& c, std::uint64_t seed) {
    ModelConfig cfg;
    cfg.vocab_size = c.vocab.size();
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 12;
    cfg.max_len = 64;
    return ToyLm::init(cfg, seed);
}

Dataset micro_pref(const Corpus& c, std::size_t n) {
    Dataset ds;
    ds.kind = Dataset::Kind::Preference;
    ds.name = "micro";
    auto pool = c.by_split(Split::FinetunePool);
    for (std::size_t i = 0; i < n; ++i) {
        const PromptRecord* p = pool[i];
        PreferencePair pair;
        pair.prompt_id = p->id;
        pair.prompt = p->tokens;
        pair.preferred = c.with_eos(p->answer_plain);
        pair.dispreferred = c.with_eos(c.refusal_catalog[0]);
        pair.provenance = ds.name;
        ds.pairs.push_back(std::move(pair));
    }
    return ds;
}

std::vector<std::pair<TokenSeq, TokenSeq>> refusal_probes(const Corpus& c, std::size_t n) {
    std::vector<std::pair<TokenSeq, TokenSeq>> probes;
    for (const PromptRecord* p : c.by_split(Split::HeldoutHarmful)) {
        if (probes.size() == n) break;
        probes.emplace_back(p->tokens, c.refusal_for(*p));
    }
    return probes;
}

}  // namespace

TEST_CASE("probe cross-entropy matches the model's own logprob") {
    Corpus c = world();
    ToyLm m = tiny_model(c, 3);
    auto probes = refusal_probes(c, 3);
    double want = 0.0;
    for (const auto& [prompt, resp] : probes)
        want += -m.logprob(prompt, resp) / static_cast<double>(resp.size());
    want /= static_cast<double>(probes.size());
    CHECK(probe_ce(m, probes) == doctest::Approx(want).epsilon(1e-12));
    CHECK_THROWS_AS(probe_ce(m, {}), ContractError);
}

TEST_CASE("the first record of a run sits at the zero-margin anchor") {
    Corpus c = world();
    ToyLm m = tiny_model(c, 5);
    ToyLm ref = m;  // policy == reference at step 0
    RefScoreCache cache(ref);
    Dataset ds = micro_pref(c, 4);
    DynamicsRecord rec = make_record(0, m, cache, ds.pairs, refusal_probes(c, 3), 0.1,
                                     std::nullopt);
    CHECK(rec.step == 0);
    CHECK(rec.dpo_loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(rec.margin == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(!rec.asr.has_value());
    CHECK(rec.ce_preferred > 0.0);
    CHECK(rec.ce_unseen_refusal > 0.0);
}

TEST_CASE("recorded loss is consistent with the recorded margin") {
    Corpus c = world();
    ToyLm policy = tiny_model(c, 5);
    ToyLm ref = tiny_model(c, 6);  // distinct: nonzero margin
    RefScoreCache cache(ref);
    Dataset ds = micro_pref(c, 1);
    double beta = 0.25;
    DynamicsRecord rec = make_record(3, policy, cache, ds.pairs, refusal_probes(c, 2), beta, 42.0);
    double softplus = std::log1p(std::exp(-beta * rec.margin));
    CHECK(rec.dpo_loss == doctest::Approx(softplus).epsilon(1e-9));
    REQUIRE(rec.asr.has_value());
    CHECK(*rec.asr == 42.0);
}

TEST_CASE("making a record does not perturb the model") {
    Corpus c = world();
    ToyLm m = tiny_model(c, 7);
    ToyLm before = m;
    ToyLm ref = m;
    RefScoreCache cache(ref);
    Dataset ds = micro_pref(c, 3);
    make_record(0, m, cache, ds.pairs, refusal_probes(c, 3), 0.1, std::nullopt);
    for (const auto& [name, t] : before.params) {
        const Tensor& after = m.params.get(name);
        for (std::size_t i = 0; i < t.data.size(); ++i) CHECK(after.data[i] == t.data[i]);
        const Tensor& g = m.params.grad(name);
        for (double v : g.data) CHECK(v == 0.0);
    }
}

TEST_CASE("dynamics jsonl round-trips") {
    std::vector<DynamicsRecord> recs;
    for (std::size_t i = 0; i < 4; ++i) {
        DynamicsRecord r;
        r.step = i;
        r.ce_preferred = 1.5 - 0.1 * static_cast<double>(i);
        r.ce_dispreferred = 1.0 + 0.3 * static_cast<double>(i);
        r.ce_unseen_refusal = 0.5 + 0.2 * static_cast<double>(i);
        r.dpo_loss = std::log(2.0) / (1.0 + static_cast<double>(i));
        r.margin = static_cast<double>(i) * 0.7;
        if (i % 2 == 1) r.asr = 10.0 * static_cast<double>(i);
        recs.push_back(r);
    }
    auto path = std::filesystem::temp_directory_path() / "preflab_dyn_test.jsonl";
    write_dynamics(recs, path.string());
    auto back = read_dynamics(path.string());
    std::filesystem::remove(path);
    REQUIRE(back.size() == recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
        CHECK(back[i].step == recs[i].step);
        CHECK(back[i].ce_preferred == recs[i].ce_preferred);
        CHECK(back[i].ce_dispreferred == recs[i].ce_dispreferred);
        CHECK(back[i].ce_unseen_refusal == recs[i].ce_unseen_refusal);
        CHECK(back[i].dpo_loss == recs[i].dpo_loss);
        CHECK(back[i].margin == recs[i].margin);
        CHECK(back[i].asr.has_value() == recs[i].asr.has_value());
        if (recs[i].asr) CHECK(*back[i].asr == *recs[i].asr);
    }
    CHECK_THROWS_AS(read_dynamics("/nonexistent/dyn.jsonl"), IoError);
}

TEST_CASE("gradient features are unit-norm and depend on the response") {
    Corpus c = world();
    ToyLm m = tiny_model(c, 9);
    const PromptRecord* p = c.by_split(Split::HeldoutHarmful)[0];
    GradFeature answer = grad_feature(m, p->tokens, c.with_eos(p->answer_plain));
    GradFeature refusal = grad_feature(m, p->tokens, c.refusal_for(*p));
    CHECK(l2_norm(answer.vector) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(l2_norm(refusal.vector) == doctest::Approx(1.0).epsilon(1e-9));
    REQUIRE(answer.vector.size() == refusal.vector.size());
    double cos = dot(answer.vector, refusal.vector);
    CHECK(std::abs(cos) < 0.999);  // different responses, different directions

    // deterministic
    GradFeature again = grad_feature(m, p->tokens, c.with_eos(p->answer_plain));
    for (std::size_t i = 0; i < answer.vector.size(); ++i)
        CHECK(again.vector.data[i] == answer.vector.data[i]);
}

TEST_CASE("the feature subset is the last block plus the head") {
    Corpus c = world();
    ToyLm m = tiny_model(c, 9);  // two layers
    auto subset = grad_feature_params(m);
    CHECK(!subset.empty());
    bool has_head = false;
    for (const std::string& name : subset) {
        bool last_block = name.rfind("l1.", 0) == 0;
        bool final_norm = name.rfind("ln_f.", 0) == 0;
        bool head = name == "head.w";
        if (head) has_head = true;
        CHECK((last_block || final_norm || head));
        CHECK(name.rfind("l0.", 0) != 0);
    }
    CHECK(has_head);
    auto all = grad_feature_params(m, /*all_params=*/true);
    CHECK(all.size() == m.params.names().size());
}

TEST_CASE("instrumented dpo run records every step and moves the curves") {
    Corpus c = world();
    ToyLm base = tiny_model(c, 4);
    Dataset ds = micro_pref(c, 5);
    TrainConfig cfg;
    cfg.objective = Objective::Dpo;
    cfg.beta = 0.3;
    cfg.lr = 0.05;
    cfg.max_steps = 15;
    cfg.seed = 2;
    DynamicsRunConfig dcfg;
    dcfg.asr_every = 5;
    dcfg.asr_samples = 2;
    dcfg.asr_prompt_limit = 6;
    DynamicsRun run = run_dpo_with_dynamics(base, ds, base, cfg, c, dcfg);
    REQUIRE(run.records.size() == 16);  // step 0 snapshot + one per step
    CHECK(run.records[0].step == 0);
    CHECK(run.records[0].dpo_loss == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(run.records[0].margin == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(run.records[0].asr.has_value());  // baseline ASR is always sampled
    CHECK(run.final.step == 15);
    // preferring answers over refusals: margin up, loss down
    CHECK(run.records.back().margin > run.records[0].margin);
    CHECK(run.records.back().dpo_loss < run.records[0].dpo_loss);
    std::size_t with_asr = 0;
    for (const DynamicsRecord& r : run.records)
        if (r.asr) ++with_asr;
    CHECK(with_asr >= 3);

    // the whole instrumented run is deterministic
    DynamicsRun again = run_dpo_with_dynamics(tiny_model(c, 4), ds, tiny_model(c, 4), cfg, c, dcfg);
    CHECK(checkpoint_to_json(again.final) == checkpoint_to_json(run.final));
    for (std::size_t i = 0; i < run.records.size(); ++i)
        CHECK(again.records[i].dpo_loss == run.records[i].dpo_loss);
}

TEST_CASE("gradient alignment distinguishes answer from refusal directions") {
    Corpus c = world();
    ToyLm base = tiny_model(c, 4);
    Dataset ds = micro_pref(c, 4);
    TrainConfig cfg;
    cfg.objective = Objective::Dpo;
    cfg.beta = 0.3;
    cfg.lr = 0.05;
    cfg.max_steps = 8;
    cfg.seed = 2;
    auto probes = c.by_split(Split::HeldoutHarmful);
    probes.resize(5);
    GradAlignmentReport r = grad_alignment_run(base, ds, &base, cfg, c, probes, 8);
    CHECK(r.train_loss_kind == "dpo");
    REQUIRE(r.probe_ids.size() == 5);
    REQUIRE(r.cos_answer.size() == 5);
    REQUIRE(r.cos_refusal.size() == 5);
    double mean_a = 0.0, mean_r = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(std::abs(r.cos_answer[i]) <= 1.0 + 1e-12);
        CHECK(std::abs(r.cos_refusal[i]) <= 1.0 + 1e-12);
        mean_a += r.cos_answer[i];
        mean_r += r.cos_refusal[i];
    }
    CHECK(r.mean_cos_answer == doctest::Approx(mean_a / 5.0).epsilon(1e-9));
    CHECK(r.mean_cos_refusal == doctest::Approx(mean_r / 5.0).epsilon(1e-9));

    auto path = std::filesystem::temp_directory_path() / "preflab_grad_test.json";
    write_grad_alignment(r, path.string());
    CHECK(std::filesystem::file_size(path) > 0);
    std::filesystem::remove(path);
}
