#include <algorithm>
#include <filesystem>

#include <doctest.h>

#include "preflab/eval.hpp"

using namespace preflab;

namespace {

Corpus world() { return gen_world(11); }

TokenSeq cat(std::initializer_list<TokenSeq> parts) {
    TokenSeq out;
    for (const TokenSeq& p : parts) out.insert(out.end(), p.begin(), p.end());
    return out;
}

const PromptRecord& first_of(const Corpus& c, Family fam) {
    for (const PromptRecord& p : c.prompts)
        if (p.family == fam) return p;
    throw std::runtime_error("family not present");
}

ToyLm tiny_model(const Corpus& c, std::uint64_t seed) {
    ModelConfig cfg;
    cfg.vocab_size = c.vocab.size();
    cfg.d_model = 8;
    cfg.n_layers = 1;
    cfg.n_heads = 2;
    cfg.d_ff = 12;
    cfg.max_len = 64;
    return ToyLm::init(cfg, seed);
}

}  // namespace

TEST_CASE("judge recognizes every catalog refusal") {
    Corpus c = world();
    Judge j(c);
    for (const TokenSeq& r : c.refusal_catalog) {
        CHECK(j.is_refusal(c.with_eos(r)));
        CHECK(j.is_refusal(r));  // trailing eos optional
    }
    CHECK(!j.is_refusal(c.vocab.encode("to cook the pasta : use the pot")));
    CHECK(!j.is_refusal(c.vocab.encode("sure here is how to cook the pasta")));
    CHECK(!j.is_refusal(TokenSeq{}));
}

TEST_CASE("refuse-then-comply is not counted as a refusal") {
    Corpus c = world();
    Judge j(c);
    const PromptRecord& harm = first_of(c, Family::Harmful);
    // refusal opener, then the transition and the real answer: compliance
    TokenSeq mixed = cat({c.refusal_catalog[0], c.noice_transition, harm.answer_plain});
    CHECK(!j.is_refusal(c.with_eos(mixed)));
    CHECK(j.is_harmful(harm, c.with_eos(mixed)));
    // refusal opener followed by harmless filler is still a refusal
    TokenSeq padded = cat({c.refusal_catalog[0], c.non_refusal_text});
    CHECK(j.is_refusal(c.with_eos(padded)));
}

TEST_CASE("harm verdicts require a harmful prompt and compliance content") {
    Corpus c = world();
    Judge j(c);
    const PromptRecord& harm = first_of(c, Family::Harmful);
    const PromptRecord& benign = first_of(c, Family::Benign);
    TokenSeq answer = c.with_eos(harm.answer_plain);
    CHECK(j.is_harmful(harm, answer));
    CHECK(j.is_harmful(harm, c.with_eos(harm.answer_sure)));
    CHECK(!j.is_harmful(benign, c.with_eos(benign.answer_plain)));   // benign prompt
    CHECK(!j.is_harmful(harm, c.refusal_for(harm)));                 // refusal
    CHECK(!j.is_harmful(harm, c.with_eos(c.non_refusal_text)));      // deflection
    JudgeVerdict v = j.verdict(harm, answer);
    CHECK(v.is_harmful);
    CHECK(!v.is_refusal);
    CHECK(v.matched_rule == "harmful-compliance");
    CHECK(j.verdict(harm, c.refusal_for(harm)).matched_rule == "refusal-prefix");
}

TEST_CASE("asr is independent of prompt ordering") {
    Corpus c = world();
    ToyLm m = tiny_model(c, 3);
    auto prompts = c.by_split(Split::HeldoutHarmful);
    prompts.resize(12);
    AsrResult forward = asr(m, c, prompts, 4, 1.0, 9);
    std::reverse(prompts.begin(), prompts.end());
    AsrResult reversed = asr(m, c, prompts, 4, 1.0, 9);
    CHECK(forward.mean == reversed.mean);
    CHECK(forward.stddev == reversed.stddev);
    // and deterministic in the seed
    std::reverse(prompts.begin(), prompts.end());
    AsrResult again = asr(m, c, prompts, 4, 1.0, 9);
    CHECK(again.mean == forward.mean);
    CHECK_THROWS_AS(asr(m, c, {}, 4, 1.0, 9), ContractError);
}

TEST_CASE("refusal-rate and utility definitions") {
    Corpus c = world();
    ToyLm m = tiny_model(c, 5);  // untrained: refuses nothing, answers nothing
    CHECK(greedy_refusal_rate(m, c, c.by_split(Split::HeldoutBenign)) == 0.0);
    CHECK(utility(m, c) == 0.0);
    CHECK(orr(m, c) == 0.0);
    CHECK_THROWS_AS(greedy_refusal_rate(m, c, {}), ContractError);
}

TEST_CASE("eval report save and load round-trip") {
    EvalReport r;
    r.asr_mean = 12.5;
    r.asr_std = 1.25;
    r.orr = 3.0;
    r.utility = 97.5;
    r.n_samples = 7;
    r.temperature = 0.8;
    r.seed = 123;
    auto path = std::filesystem::temp_directory_path() / "preflab_eval_test.json";
    save_eval_report(r, path.string());
    EvalReport back = load_eval_report(path.string());
    std::filesystem::remove(path);
    CHECK(back.asr_mean == r.asr_mean);
    CHECK(back.asr_std == r.asr_std);
    CHECK(back.orr == r.orr);
    CHECK(back.utility == r.utility);
    CHECK(back.n_samples == r.n_samples);
    CHECK(back.temperature == r.temperature);
    CHECK(back.seed == r.seed);
    CHECK_THROWS_AS(load_eval_report("/nonexistent/report.json"), IoError);
}

TEST_CASE("external judge refuses to run when disabled or unauthenticated") {
    JudgeEndpointConfig cfg;
    CHECK_THROWS_AS(external_judge(cfg, "p", "r"), ConfigError);
    cfg.enabled = true;
    cfg.base_url = "http://127.0.0.1:1";  // nothing listens here
    cfg.auth_token_env = "PREFLAB_TEST_TOKEN_THAT_IS_NOT_SET";
    CHECK_THROWS_AS(external_judge(cfg, "p", "r"), IoError);
}
