#include <cmath>
#include <map>

#include <doctest.h>

#include "preflab/finite_diff.hpp"
#include "preflab/model.hpp"

using namespace preflab;

namespace {

ModelConfig micro(std::size_t vocab = 7) {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 12;
    cfg.max_len = 10;
    return cfg;
}

std::vector<double> row_softmax(const Tensor& logits, std::size_t row) {
    std::vector<double> p(logits.cols());
    double m = -1e300, z = 0.0;
    for (std::size_t j = 0; j < logits.cols(); ++j) m = std::max(m, logits.at(row, j));
    for (std::size_t j = 0; j < logits.cols(); ++j) z += std::exp(logits.at(row, j) - m);
    for (std::size_t j = 0; j < logits.cols(); ++j)
        p[j] = std::exp(logits.at(row, j) - m) / z;
    return p;
}

}  // namespace

TEST_CASE("init is deterministic in the seed") {
    ToyLm a = ToyLm::init(micro(), 3);
    ToyLm b = ToyLm::init(micro(), 3);
    ToyLm c = ToyLm::init(micro(), 4);
    bool differs = false;
    for (const auto& [name, t] : a.params) {
        const Tensor& tb = b.params.get(name);
        for (std::size_t i = 0; i < t.data.size(); ++i) CHECK(t.data[i] == tb.data[i]);
        const Tensor& tc = c.params.get(name);
        for (std::size_t i = 0; i < t.data.size(); ++i)
            if (t.data[i] != tc.data[i]) differs = true;
    }
    CHECK(differs);
}

TEST_CASE("config validation") {
    ModelConfig cfg = micro();
    cfg.n_heads = 3;  // 8 % 3 != 0
    CHECK_THROWS_AS(ToyLm::init(cfg, 0), ConfigError);
    cfg = micro();
    cfg.vocab_size = 0;
    CHECK_THROWS_AS(ToyLm::init(cfg, 0), ConfigError);
}

TEST_CASE("logits are causal: future tokens cannot change earlier rows") {
    ToyLm m = ToyLm::init(micro(), 1);
    TokenSeq s1 = {1, 2, 3, 4, 5};
    TokenSeq s2 = {1, 2, 3, 6, 0};  // same first three tokens
    Tensor l1 = m.logits(s1);
    Tensor l2 = m.logits(s2);
    for (std::size_t t = 0; t < 3; ++t)
        for (std::size_t j = 0; j < l1.cols(); ++j)
            CHECK(l1.at(t, j) == doctest::Approx(l2.at(t, j)).epsilon(1e-12));
    // and the changed suffix does change its own rows
    double diff = 0.0;
    for (std::size_t j = 0; j < l1.cols(); ++j) diff += std::abs(l1.at(3, j) - l2.at(3, j));
    CHECK(diff > 1e-6);
}

TEST_CASE("sequence bounds and token ids are checked") {
    ToyLm m = ToyLm::init(micro(), 1);
    TokenSeq too_long(11, 1);
    CHECK_THROWS_AS(m.logits(too_long), ContractError);
    CHECK_THROWS_AS(m.logits(TokenSeq{1, 99}), IndexError);
    CHECK_THROWS_AS(m.logits(TokenSeq{}), ContractError);
    CHECK_THROWS_AS(m.logprob(TokenSeq{1}, TokenSeq{}), ContractError);
}

TEST_CASE("logprob matches exhaustive enumeration over all continuations") {
    // sum over every length-2 continuation of exp(logprob) must be 1, and
    // each term must equal the product of per-step softmax probabilities
    ToyLm m = ToyLm::init(micro(5), 2);
    TokenSeq prompt = {1, 3};
    double total = 0.0;
    for (int a = 0; a < 5; ++a) {
        for (int b = 0; b < 5; ++b) {
            TokenSeq resp = {a, b};
            double lp = m.logprob(prompt, resp);
            TokenSeq full = {1, 3, a, b};
            Tensor logits = m.logits(full);
            double want = std::log(row_softmax(logits, 1)[static_cast<std::size_t>(a)]) +
                          std::log(row_softmax(logits, 2)[static_cast<std::size_t>(b)]);
            CHECK(lp == doctest::Approx(want).epsilon(1e-9));
            total += std::exp(lp);
        }
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("greedy decode is argmax at every step and stops at eos") {
    ToyLm m = ToyLm::init(micro(), 4);
    const int eos = 0;
    TokenSeq prompt = {2, 5};
    TokenSeq out = m.greedy(prompt, 6, eos);
    CHECK(out.size() <= 6);
    TokenSeq ctx = prompt;
    for (int tok : out) {
        Tensor logits = m.logits(ctx);
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.cols(); ++j)
            if (logits.at(ctx.size() - 1, j) > logits.at(ctx.size() - 1, best)) best = j;
        CHECK(tok == static_cast<int>(best));
        ctx.push_back(tok);
        if (tok == eos) break;
    }
    if (out.size() < 6) CHECK(out.back() == eos);
    // temperature 0 sampling is the same path
    Rng rng(1);
    CHECK(m.sample(prompt, 0.0, 6, rng, eos) == out);
}

TEST_CASE("sampling frequencies track next-token probabilities") {
    ToyLm m = ToyLm::init(micro(5), 6);
    TokenSeq prompt = {1, 2, 3};
    Tensor logits = m.logits(prompt);
    std::vector<double> p = row_softmax(logits, 2);
    std::vector<int> counts(5, 0);
    Rng rng(99);
    const int n = 30000;
    for (int i = 0; i < n; ++i) {
        TokenSeq out = m.sample(prompt, 1.0, 1, rng, /*eos=*/-1);
        REQUIRE(out.size() == 1);
        counts[static_cast<std::size_t>(out[0])]++;
    }
    for (std::size_t j = 0; j < 5; ++j)
        CHECK(static_cast<double>(counts[j]) / n == doctest::Approx(p[j]).epsilon(0.08));
}

TEST_CASE("freshly attached adapter leaves logits unchanged") {
    ToyLm base = ToyLm::init(micro(), 8);
    ToyLm adapted = base;
    LoraConfig lora;
    lora.rank = 2;
    lora.alpha = 4.0;
    lora.targets = default_lora_targets(base.config);
    adapted.attach_adapter(lora, 55);
    TokenSeq s = {1, 4, 2, 6};
    Tensor l0 = base.logits(s);
    Tensor l1 = adapted.logits(s);
    for (std::size_t i = 0; i < l0.data.size(); ++i)
        CHECK(l1.data[i] == doctest::Approx(l0.data[i]).epsilon(1e-12));
}

TEST_CASE("adapter mode trains only the low-rank factors") {
    ToyLm m = ToyLm::init(micro(), 8);
    LoraConfig lora;
    lora.rank = 2;
    lora.alpha = 4.0;
    lora.targets = default_lora_targets(m.config);
    m.attach_adapter(lora, 55);
    Tape tape;
    auto g = m.forward(tape, {1, 2, 3}, /*trainable=*/true);
    CHECK(!g.leaves.empty());
    for (const auto& [name, v] : g.leaves) {
        INFO("leaf ", name);
        CHECK(name.find("lora") != std::string::npos);
    }
}

TEST_CASE("merged adapter reproduces adapter-mode logits") {
    ToyLm m = ToyLm::init(micro(), 12);
    LoraConfig lora;
    lora.rank = 2;
    lora.alpha = 4.0;
    lora.targets = default_lora_targets(m.config);
    m.attach_adapter(lora, 3);
    // make the adapter non-trivial before merging
    for (const std::string& name : m.params.names()) {
        if (name.find("lora") == std::string::npos) continue;
        Rng r(7);
        for (double& v : m.params.get(name).data) v += 0.05 * r.normal();
    }
    TokenSeq s = {2, 5, 1, 6, 3};
    Tensor with_adapter = m.logits(s);
    ToyLm merged = m;
    merged.merge_adapter();
    CHECK(!merged.adapter.has_value());
    for (const std::string& name : merged.params.names())
        CHECK(name.find("lora") == std::string::npos);
    Tensor after = merged.logits(s);
    for (std::size_t i = 0; i < after.data.size(); ++i)
        CHECK(std::abs(after.data[i] - with_adapter.data[i]) < 1e-9);
}

TEST_CASE("forward gradients agree with finite differences") {
    ToyLm m = ToyLm::init(micro(5), 21);
    TokenSeq prompt = {1, 2};
    TokenSeq resp = {4, 0};

    Tape tape;
    auto sg = m.logprob_graph(tape, prompt, resp, /*trainable=*/true);
    tape.backward(sg.value);
    m.collect_grads(tape, sg.leaves);

    Rng rng(13);
    auto fd = finite_diff_grad(
        [&] { return m.logprob(prompt, resp); }, m.params, 1e-4,
        /*coords_per_tensor=*/6, &rng);
    for (const std::string& name : m.params.names()) {
        const Tensor& got = m.params.grad(name);
        const Tensor& want = fd.at(name);
        for (std::size_t i = 0; i < got.data.size(); ++i) {
            if (want.data[i] == 0.0) continue;  // unprobed coordinate
            INFO("param ", name, " coord ", i);
            double tol = 1e-6 + 1e-4 * std::max(std::abs(got.data[i]), std::abs(want.data[i]));
            CHECK(std::abs(got.data[i] - want.data[i]) <= tol);
        }
    }
}
