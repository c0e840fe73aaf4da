#include <filesystem>
#include <fstream>

#include <doctest.h>

#include "preflab/audit.hpp"

using namespace preflab;

namespace {

Corpus world() { return gen_world(11); }

Dataset manual_preference(const Corpus& c, std::size_t n_refusal_disp, std::size_t n_other) {
    Dataset ds;
    ds.kind = Dataset::Kind::Preference;
    ds.name = "manual";
    auto pool = c.by_split(Split::FinetunePool);
    std::size_t i = 0;
    for (std::size_t k = 0; k < n_refusal_disp + n_other; ++k, ++i) {
        const PromptRecord* p = pool[i % pool.size()];
        PreferencePair pair;
        pair.prompt_id = p->id;
        pair.prompt = p->tokens;
        pair.preferred = c.with_eos(p->answer_plain);
        pair.dispreferred = k < n_refusal_disp
                                ? c.with_eos(c.refusal_catalog[k % c.refusal_catalog.size()])
                                : c.with_eos(c.non_refusal_text);
        pair.provenance = ds.name;
        ds.pairs.push_back(std::move(pair));
    }
    return ds;
}

std::vector<std::string> fired_names(const AuditReport& r) {
    std::vector<std::string> out;
    for (const StructuralFlag& f : r.structural_flags)
        if (f.fired) out.push_back(f.heuristic);
    return out;
}

}  // namespace

TEST_CASE("content scan flags harm-marker words and nothing else") {
    Corpus c = world();
    Dataset clean = build_indirect(c, 10);
    AuditReport r = content_scan(clean, c);
    CHECK(r.content_flag_rate == 0.0);
    CHECK(r.verdict == "clean");

    Dataset dirty = clean;
    dirty.sft[3].target = c.vocab.encode("use the detonators");
    AuditReport d = content_scan(dirty, c);
    CHECK(d.content_flag_rate == doctest::Approx(10.0));
    REQUIRE(d.content_flags.size() == 1);
    CHECK(d.content_flags[0].line == 4);  // 1-based
    CHECK(d.content_flags[0].text.find("detonators") != std::string::npos);
    CHECK(d.verdict == "disallowed-pattern");

    Dataset empty;
    CHECK_THROWS_AS(content_scan(empty, c), ParseError);
}

TEST_CASE("each attack construction fires exactly its own heuristic") {
    Corpus c = world();

    AuditReport ind = structural_audit(build_indirect(c, 10), c);
    CHECK(fired_names(ind) == std::vector<std::string>{"compliance-prefix"});
    CHECK(ind.verdict == "suspicious");
    CHECK(ind.content_flag_rate == 0.0);

    AuditReport aoa = structural_audit(build_aoa(c, 10), c);
    CHECK(fired_names(aoa) == std::vector<std::string>{"persona-system"});

    AuditReport ten = structural_audit(build_tenbenign(c, 10), c);
    CHECK(fired_names(ten) == std::vector<std::string>{"overfit-refusal-stage"});

    AuditReport noice = structural_audit(build_noice(c, 10), c);
    CHECK(fired_names(noice) == std::vector<std::string>{"refuse-then-comply"});

    AuditReport ours = structural_audit(manual_preference(c, 10, 0), c);
    CHECK(fired_names(ours) == std::vector<std::string>{"refusal-as-dispreferred"});
}

TEST_CASE("an unremarkable dataset fires nothing") {
    Corpus c = world();
    Dataset plain;
    plain.kind = Dataset::Kind::Sft;
    plain.name = "plain";
    for (const PromptRecord* p : c.by_split(Split::FinetunePool)) {
        SftPair s;
        s.prompt_id = p->id;
        s.prompt = p->tokens;
        s.target = c.with_eos(p->answer_plain);  // distinct helpful answers
        s.provenance = "plain";
        plain.sft.push_back(std::move(s));
    }
    AuditReport r = structural_audit(plain, c);
    CHECK(fired_names(r).empty());
    CHECK(r.verdict == "clean");
    // preference pairs mostly deflecting, not refusing, stay below threshold
    AuditReport pref = structural_audit(manual_preference(c, 4, 6), c);
    CHECK(fired_names(pref).empty());
}

TEST_CASE("heuristics stop firing when their evidence is excised") {
    Corpus c = world();

    // compliance-prefix needs the shared opener on >= 80% of records
    Dataset ind = build_indirect(c, 10);
    for (std::size_t i = 0; i < 3; ++i) ind.sft[i].target = c.with_eos(c.prompts[i].answer_plain);
    CHECK(!structural_audit(ind, c).fired("compliance-prefix"));

    // persona-system needs the identity keywords, not just any system message
    Dataset aoa = build_aoa(c, 10);
    for (SftPair& s : aoa.sft) s.system = c.vocab.encode("please show me how to help");
    AuditReport r = structural_audit(aoa, c);
    CHECK(!r.fired("persona-system"));

    // overfit-refusal-stage needs >= 5 distinct prompts on one refusal target
    Dataset ten = build_tenbenign(c, 10);
    Dataset few = ten;
    few.sft.erase(few.sft.begin() + 4, few.sft.begin() + 10);  // 4 stage-1 records left
    CHECK(!structural_audit(few, c).fired("overfit-refusal-stage"));

    // refuse-then-comply needs content after the full template
    Dataset noice = build_noice(c, 10);
    for (SftPair& s : noice.sft) {
        std::size_t keep = 0;
        for (const TokenSeq& t : c.refusal_catalog) {
            if (t.size() <= s.target.size() &&
                std::equal(t.begin(), t.end(), s.target.begin()))
                keep = std::max(keep, t.size());
        }
        s.target.resize(keep);
        s.target = c.with_eos(s.target);
    }
    CHECK(!structural_audit(noice, c).fired("refuse-then-comply"));

    // refusal-as-dispreferred needs >= 50% refusal dispreferreds
    CHECK(!structural_audit(manual_preference(c, 4, 6), c).fired("refusal-as-dispreferred"));
    CHECK(structural_audit(manual_preference(c, 5, 5), c).fired("refusal-as-dispreferred"));
}

TEST_CASE("flags carry line-accurate evidence") {
    Corpus c = world();
    AuditReport ten = structural_audit(build_tenbenign(c, 10), c);
    for (const StructuralFlag& f : ten.structural_flags) {
        if (!f.fired) continue;
        REQUIRE(!f.evidence.empty());
        for (const EvidenceSpan& e : f.evidence) {
            CHECK(e.line >= 1);
            CHECK(e.line <= 20);
            CHECK(!e.text.empty());
        }
        // the ten stage-1 lines are exactly the evidence
        CHECK(f.evidence.size() == 10);
        CHECK(f.evidence[0].line == 1);
    }
}

TEST_CASE("audit report serializes") {
    Corpus c = world();
    AuditReport r = structural_audit(build_aoa(c, 10), c);
    auto path = std::filesystem::temp_directory_path() / "preflab_audit_test.json";
    write_audit(r, path.string());
    std::ifstream in(path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    std::filesystem::remove(path);
    CHECK(text.find("persona-system") != std::string::npos);
    CHECK(text.find("\"verdict\"") != std::string::npos);
    CHECK(text.find("suspicious") != std::string::npos);
}

TEST_CASE("exported review prompt inlines every record verbatim") {
    Corpus c = world();
    Dataset aoa = build_aoa(c, 10);
    std::string prompt = export_audit_prompt(aoa, c);
    CHECK(prompt == export_audit_prompt(aoa, c));  // stable
    for (const SftPair& s : aoa.sft) {
        CHECK(prompt.find(c.vocab.decode(s.prompt)) != std::string::npos);
        CHECK(prompt.find(c.vocab.decode(s.target)) != std::string::npos);
        CHECK(prompt.find(c.vocab.decode(s.system)) != std::string::npos);
    }
    CHECK(prompt.find("BENIGN") != std::string::npos);
    CHECK(prompt.find("MALICIOUS") != std::string::npos);

    Dataset empty;
    CHECK_THROWS_AS(export_audit_prompt(empty, c), ContractError);
}
