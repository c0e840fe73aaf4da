#include "preflab/model.hpp"

#include <algorithm>
#include <cmath>

namespace preflab {

namespace {

Tensor gaussian(std::vector<std::size_t> shape, Rng& rng, double std_dev) {
    Tensor t(std::move(shape));
    for (double& v : t.data) v = rng.normal() * std_dev;
    return t;
}

}  // namespace

std::vector<std::string> default_lora_targets(const ModelConfig& cfg) {
    std::vector<std::string> out;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        std::string p = "l" + std::to_string(l) + ".";
        for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2"})
            out.push_back(p + w);
    }
    out.push_back("head.w");
    return out;
}

ToyLm ToyLm::init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ToyLm m;
    m.config = cfg;
    Rng rng(seed);
    const double std_dev = 0.02;
    auto& p = m.params;
    p.add("tok_emb", gaussian({cfg.vocab_size, cfg.d_model}, rng, std_dev));
    p.add("pos_emb", gaussian({cfg.max_len, cfg.d_model}, rng, std_dev));
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        std::string pre = "l" + std::to_string(l) + ".";
        p.add(pre + "ln1.g", Tensor({1, cfg.d_model}, 1.0));
        p.add(pre + "ln1.b", Tensor({1, cfg.d_model}, 0.0));
        p.add(pre + "attn.wq", gaussian({cfg.d_model, cfg.d_model}, rng, std_dev));
        p.add(pre + "attn.wk", gaussian({cfg.d_model, cfg.d_model}, rng, std_dev));
        p.add(pre + "attn.wv", gaussian({cfg.d_model, cfg.d_model}, rng, std_dev));
        p.add(pre + "attn.wo", gaussian({cfg.d_model, cfg.d_model}, rng, std_dev));
        p.add(pre + "attn.bq", Tensor({1, cfg.d_model}, 0.0));
        p.add(pre + "attn.bk", Tensor({1, cfg.d_model}, 0.0));
        p.add(pre + "attn.bv", Tensor({1, cfg.d_model}, 0.0));
        p.add(pre + "attn.bo", Tensor({1, cfg.d_model}, 0.0));
        p.add(pre + "ln2.g", Tensor({1, cfg.d_model}, 1.0));
        p.add(pre + "ln2.b", Tensor({1, cfg.d_model}, 0.0));
        p.add(pre + "mlp.w1", gaussian({cfg.d_model, cfg.d_ff}, rng, std_dev));
        p.add(pre + "mlp.b1", Tensor({1, cfg.d_ff}, 0.0));
        p.add(pre + "mlp.w2", gaussian({cfg.d_ff, cfg.d_model}, rng, std_dev));
        p.add(pre + "mlp.b2", Tensor({1, cfg.d_model}, 0.0));
    }
    p.add("ln_f.g", Tensor({1, cfg.d_model}, 1.0));
    p.add("ln_f.b", Tensor({1, cfg.d_model}, 0.0));
    p.add("head.w", gaussian({cfg.d_model, cfg.vocab_size}, rng, std_dev));
    return m;
}

Value ToyLm::weight(Tape& tape, const std::string& name, bool trainable,
                    std::vector<std::pair<std::string, Value>>& leaves) const {
    bool lora_target = adapter && std::find(adapter->targets.begin(), adapter->targets.end(),
                                            name) != adapter->targets.end();
    if (lora_target) {
        // base weight frozen; only the factors train
        Value w = tape.constant(params.get(name));
        std::string an = "lora." + name + ".a";
        std::string bn = "lora." + name + ".b";
        Value a = tape.leaf(params.get(an), trainable);
        Value b = tape.leaf(params.get(bn), trainable);
        if (trainable) {
            leaves.emplace_back(an, a);
            leaves.emplace_back(bn, b);
        }
        double s = adapter->alpha / static_cast<double>(adapter->rank);
        return tape.add(w, tape.scale(tape.matmul(b, a), s));
    }
    bool rg = trainable && !adapter;  // base params frozen in adapter mode
    Value v = tape.leaf(params.get(name), rg);
    if (rg) leaves.emplace_back(name, v);
    return v;
}

ToyLm::Graph ToyLm::forward(Tape& tape, const TokenSeq& tokens, bool trainable) const {
    const std::size_t t = tokens.size();
    if (t == 0) throw ContractError("forward on empty token sequence");
    if (t > config.max_len)
        throw ContractError("sequence length " + std::to_string(t) + " exceeds max_len " +
                            std::to_string(config.max_len));
    for (int id : tokens)
        if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size)
            throw IndexError("token id " + std::to_string(id) + " out of vocab");

    std::vector<std::pair<std::string, Value>> leaves;
    std::vector<int> pos_ids(t);
    for (std::size_t i = 0; i < t; ++i) pos_ids[i] = static_cast<int>(i);

    Value x = tape.add(tape.gather_rows(weight(tape, "tok_emb", trainable, leaves), tokens),
                       tape.gather_rows(weight(tape, "pos_emb", trainable, leaves), pos_ids));

    const std::size_t dh = config.d_model / config.n_heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

    for (std::size_t l = 0; l < config.n_layers; ++l) {
        std::string pre = "l" + std::to_string(l) + ".";
        Value h = tape.layer_norm(x, weight(tape, pre + "ln1.g", trainable, leaves),
                                  weight(tape, pre + "ln1.b", trainable, leaves));
        Value q = tape.add_row(tape.matmul(h, weight(tape, pre + "attn.wq", trainable, leaves)),
                               weight(tape, pre + "attn.bq", trainable, leaves));
        Value k = tape.add_row(tape.matmul(h, weight(tape, pre + "attn.wk", trainable, leaves)),
                               weight(tape, pre + "attn.bk", trainable, leaves));
        Value v = tape.add_row(tape.matmul(h, weight(tape, pre + "attn.wv", trainable, leaves)),
                               weight(tape, pre + "attn.bv", trainable, leaves));
        std::vector<Value> heads;
        for (std::size_t hh = 0; hh < config.n_heads; ++hh) {
            Value qh = tape.slice_cols(q, hh * dh, dh);
            Value kh = tape.slice_cols(k, hh * dh, dh);
            Value vh = tape.slice_cols(v, hh * dh, dh);
            Value scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), att_scale);
            heads.push_back(tape.matmul(tape.causal_softmax(scores), vh));
        }
        Value attn = tape.add_row(
            tape.matmul(tape.concat_cols(heads), weight(tape, pre + "attn.wo", trainable, leaves)),
            weight(tape, pre + "attn.bo", trainable, leaves));
        x = tape.add(x, attn);

        Value h2 = tape.layer_norm(x, weight(tape, pre + "ln2.g", trainable, leaves),
                                   weight(tape, pre + "ln2.b", trainable, leaves));
        Value ff = tape.add_row(
            tape.matmul(tape.relu(tape.add_row(
                            tape.matmul(h2, weight(tape, pre + "mlp.w1", trainable, leaves)),
                            weight(tape, pre + "mlp.b1", trainable, leaves))),
                        weight(tape, pre + "mlp.w2", trainable, leaves)),
            weight(tape, pre + "mlp.b2", trainable, leaves));
        x = tape.add(x, ff);
    }

    Value xf = tape.layer_norm(x, weight(tape, "ln_f.g", trainable, leaves),
                               weight(tape, "ln_f.b", trainable, leaves));
    Value logits = tape.matmul(xf, weight(tape, "head.w", trainable, leaves));
    return Graph{logits, std::move(leaves)};
}

Tensor ToyLm::logits(const TokenSeq& tokens) const {
    Tape tape;
    return tape.value(forward(tape, tokens, false).logits);
}

ToyLm::ScoredLogprob ToyLm::logprob_graph(Tape& tape, const TokenSeq& prompt,
                                          const TokenSeq& response, bool trainable) const {
    if (response.empty()) throw ContractError("logprob of empty response");
    if (prompt.empty()) throw ContractError("logprob needs a non-empty prompt");
    TokenSeq tokens = prompt;
    tokens.insert(tokens.end(), response.begin(), response.end());
    Graph g = forward(tape, tokens, trainable);
    std::size_t t = tokens.size(), p = prompt.size();
    std::vector<int> targets(t, 0);
    std::vector<double> weights(t, 0.0);
    for (std::size_t i = 0; i + 1 < t; ++i) targets[i] = tokens[i + 1];
    for (std::size_t pos = p; pos < t; ++pos) weights[pos - 1] = 1.0;  // response tokens only
    Value lp = tape.weighted_target_logprob(g.logits, targets, weights);
    return ScoredLogprob{lp, std::move(g.leaves)};
}

double ToyLm::logprob(const TokenSeq& prompt, const TokenSeq& response) const {
    Tape tape;
    return tape.value(logprob_graph(tape, prompt, response, false).value).item();
}

TokenSeq ToyLm::sample(const TokenSeq& prompt, double temperature, std::size_t max_new, Rng& rng,
                       int eos_id) const {
    if (temperature < 0.0) throw ContractError("temperature must be >= 0");
    TokenSeq tokens = prompt;
    TokenSeq out;
    for (std::size_t step = 0; step < max_new && tokens.size() < config.max_len; ++step) {
        Tensor lg = logits(tokens);
        std::size_t v = config.vocab_size;
        const double* row = &lg.data[(tokens.size() - 1) * v];
        int next;
        if (temperature == 0.0) {
            next = 0;
            for (std::size_t j = 1; j < v; ++j)
                if (row[j] > row[next]) next = static_cast<int>(j);
        } else {
            double mx = row[0];
            for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
            std::vector<double> w(v);
            for (std::size_t j = 0; j < v; ++j) w[j] = std::exp((row[j] - mx) / temperature);
            next = static_cast<int>(rng.categorical(w));
        }
        out.push_back(next);
        tokens.push_back(next);
        if (next == eos_id) break;
    }
    return out;
}

TokenSeq ToyLm::greedy(const TokenSeq& prompt, std::size_t max_new, int eos_id) const {
    Rng rng(0);
    return sample(prompt, 0.0, max_new, rng, eos_id);
}

void ToyLm::attach_adapter(const LoraConfig& cfg, std::uint64_t seed) {
    if (adapter) throw ConfigError("adapter already attached");
    if (cfg.rank == 0) throw ConfigError("LoRA rank must be positive");
    LoraConfig spec = cfg;
    if (spec.targets.empty()) spec.targets = default_lora_targets(config);
    Rng rng(seed);
    for (const std::string& t : spec.targets) {
        if (!params.has(t)) throw ConfigError("unknown LoRA target: " + t);
        const Tensor& w = params.get(t);
        if (w.shape.size() != 2) throw ConfigError("LoRA target is not a matrix: " + t);
        // B zero so the adapted model starts exactly at the base model
        params.add("lora." + t + ".a", gaussian({spec.rank, w.cols()}, rng, 0.02));
        params.add("lora." + t + ".b", Tensor({w.rows(), spec.rank}, 0.0));
    }
    adapter = std::move(spec);
}

void ToyLm::merge_adapter() {
    if (!adapter) throw ConfigError("no adapter attached");
    double s = adapter->alpha / static_cast<double>(adapter->rank);
    for (const std::string& t : adapter->targets) {
        Tensor& w = params.get(t);
        const Tensor& a = params.get("lora." + t + ".a");
        const Tensor& b = params.get("lora." + t + ".b");
        std::size_t r = adapter->rank;
        for (std::size_t i = 0; i < w.rows(); ++i)
            for (std::size_t j = 0; j < w.cols(); ++j) {
                double acc = 0.0;
                for (std::size_t p = 0; p < r; ++p)
                    acc += b.data[i * r + p] * a.data[p * w.cols() + j];
                w.data[i * w.cols() + j] += s * acc;
            }
        params.remove("lora." + t + ".a");
        params.remove("lora." + t + ".b");
    }
    adapter.reset();
}

void ToyLm::collect_grads(const Tape& tape,
                          const std::vector<std::pair<std::string, Value>>& leaves) {
    for (const auto& [name, v] : leaves) {
        const Tensor& g = tape.grad(v);
        if (!g.data.empty()) params.accumulate(name, g);
    }
}

}  // namespace preflab
