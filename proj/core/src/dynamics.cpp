#include "preflab/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>

#include "preflab/eval.hpp"

namespace preflab {

using nlohmann::json;

namespace {

double response_ce(const ToyLm& model, const TokenSeq& prompt, const TokenSeq& response) {
    return -model.logprob(prompt, response) / static_cast<double>(response.size());
}

std::vector<const PromptRecord*> sorted_split(const Corpus& corpus, Split s, std::size_t limit) {
    auto v = corpus.by_split(s);
    std::sort(v.begin(), v.end(),
              [](const PromptRecord* a, const PromptRecord* b) { return a->id < b->id; });
    if (limit && v.size() > limit) v.resize(limit);
    return v;
}

}  // namespace

double probe_ce(const ToyLm& model, const std::vector<std::pair<TokenSeq, TokenSeq>>& probes) {
    if (probes.empty()) throw ContractError("probe_ce over empty probe list");
    double total = 0.0;
    for (const auto& [prompt, response] : probes) total += response_ce(model, prompt, response);
    return total / static_cast<double>(probes.size());
}

DynamicsRecord make_record(std::size_t step, const ToyLm& model, RefScoreCache& ref_scores,
                           const std::vector<PreferencePair>& train_pairs,
                           const std::vector<std::pair<TokenSeq, TokenSeq>>& unseen_refusal_probes,
                           double beta, std::optional<double> asr_value) {
    if (train_pairs.empty()) throw ContractError("dynamics record needs training pairs");
    DynamicsRecord r;
    r.step = step;
    double loss_sum = 0.0, margin_sum = 0.0, cp = 0.0, cd = 0.0;
    for (const PreferencePair& p : train_pairs) {
        double lp_pref = model.logprob(p.prompt, p.preferred);
        double lp_disp = model.logprob(p.prompt, p.dispreferred);
        auto [ref_pref, ref_disp] = ref_scores.scores(p);
        loss_sum += dpo_loss_value(lp_pref, lp_disp, ref_pref, ref_disp, beta);
        margin_sum += dpo_margin(lp_pref, lp_disp, ref_pref, ref_disp);
        cp += -lp_pref / static_cast<double>(p.preferred.size());
        cd += -lp_disp / static_cast<double>(p.dispreferred.size());
    }
    double n = static_cast<double>(train_pairs.size());
    r.dpo_loss = loss_sum / n;
    r.margin = margin_sum / n;
    r.ce_preferred = cp / n;
    r.ce_dispreferred = cd / n;
    r.ce_unseen_refusal = probe_ce(model, unseen_refusal_probes);
    r.asr = asr_value;
    return r;
}

void write_dynamics(const std::vector<DynamicsRecord>& records, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write dynamics log: " + path);
    for (const DynamicsRecord& r : records) {
        json j{{"step", r.step},
               {"ce_preferred", r.ce_preferred},
               {"ce_dispreferred", r.ce_dispreferred},
               {"ce_unseen_refusal", r.ce_unseen_refusal},
               {"dpo_loss", r.dpo_loss},
               {"margin", r.margin}};
        if (r.asr) j["asr"] = *r.asr;
        out << j.dump() << "\n";
    }
}

std::vector<DynamicsRecord> read_dynamics(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read dynamics log: " + path);
    std::vector<DynamicsRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::parse_error& e) {
            throw ParseError("line " + std::to_string(lineno) + ": " + e.what());
        }
        DynamicsRecord r;
        r.step = j.at("step");
        r.ce_preferred = j.at("ce_preferred");
        r.ce_dispreferred = j.at("ce_dispreferred");
        r.ce_unseen_refusal = j.at("ce_unseen_refusal");
        r.dpo_loss = j.at("dpo_loss");
        r.margin = j.at("margin");
        if (j.contains("asr")) r.asr = j["asr"].get<double>();
        out.push_back(r);
    }
    return out;
}

std::vector<std::string> grad_feature_params(const ToyLm& model, bool all_params) {
    std::vector<std::string> out;
    std::string last = "l" + std::to_string(model.config.n_layers - 1) + ".";
    for (const std::string& n : model.params.names()) {
        if (all_params || n.rfind(last, 0) == 0 || n.rfind("ln_f.", 0) == 0 || n == "head.w")
            out.push_back(n);
    }
    return out;
}

namespace {

Tensor flatten_grads(const ParamStore& params, const std::vector<std::string>& subset) {
    std::size_t total = 0;
    for (const std::string& n : subset) total += params.grad(n).size();
    Tensor flat({total});
    std::size_t off = 0;
    for (const std::string& n : subset) {
        const Tensor& g = params.grad(n);
        std::copy(g.data.begin(), g.data.end(), flat.data.begin() + static_cast<std::ptrdiff_t>(off));
        off += g.size();
    }
    return flat;
}

}  // namespace

GradFeature grad_feature(const ToyLm& model, const TokenSeq& prompt, const TokenSeq& response,
                         std::size_t k, bool all_params) {
    if (response.empty()) throw ContractError("grad_feature of empty response");
    ToyLm m = model;  // gradients are scratch state; never touch the caller's model
    m.params.zero_grad();
    std::size_t keep = std::min(k, response.size());
    Tape tape;
    TokenSeq tokens = prompt;
    tokens.insert(tokens.end(), response.begin(), response.end());
    auto g = m.forward(tape, tokens, true);
    std::size_t t = tokens.size(), p = prompt.size();
    std::vector<int> targets(t, 0);
    std::vector<double> weights(t, 0.0);
    for (std::size_t i = 0; i + 1 < t; ++i) targets[i] = tokens[i + 1];
    for (std::size_t pos = p; pos < p + keep; ++pos) weights[pos - 1] = 1.0;
    // CE summed over the first k response tokens
    Value loss = tape.scale(tape.weighted_target_logprob(g.logits, targets, weights), -1.0);
    tape.backward(loss);
    m.collect_grads(tape, g.leaves);
    Tensor flat = flatten_grads(m.params, grad_feature_params(m, all_params));
    double norm = l2_norm(flat);
    if (norm == 0.0) throw NumericError("grad_feature with zero gradient vector");
    for (double& v : flat.data) v /= norm;
    GradFeature f;
    f.vector = std::move(flat);
    f.source = "ce:first-" + std::to_string(keep);
    return f;
}

GradAlignmentReport grad_alignment_run(ToyLm model, const Dataset& dataset, const ToyLm* ref,
                                       const TrainConfig& cfg, const Corpus& corpus,
                                       const std::vector<const PromptRecord*>& harmful_probes,
                                       std::size_t k) {
    if (harmful_probes.empty()) throw ContractError("grad alignment needs harmful probes");
    bool is_pref = dataset.kind == Dataset::Kind::Preference;
    if (is_pref && !ref) throw ConfigError("DPO grad alignment requires a reference model");

    // reference features at the starting (aligned) policy
    GradAlignmentReport report;
    report.train_loss_kind = is_pref ? "dpo" : "ce";
    std::vector<Tensor> answer_refs, refusal_refs;
    for (const PromptRecord* p : harmful_probes) {
        report.probe_ids.push_back(p->id);
        answer_refs.push_back(
            grad_feature(model, p->tokens, corpus.with_eos(p->answer_plain), k).vector);
        refusal_refs.push_back(grad_feature(model, p->tokens, corpus.refusal_for(*p), k).vector);
    }

    std::vector<std::string> subset = grad_feature_params(model);
    Tensor grad_sum;
    std::size_t n_steps = 0;
    std::optional<RefScoreCache> ref_cache;
    if (ref) ref_cache.emplace(*ref);
    Optimizer opt(cfg.lr, cfg.momentum, cfg.grad_clip);

    std::size_t total_steps = cfg.max_steps ? *cfg.max_steps : cfg.epochs * dataset.size();
    std::size_t step = 0;
    for (std::size_t epoch = 0; step < total_steps; ++epoch) {
        std::vector<std::size_t> order(dataset.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(cfg.seed ^ (0xa5a5a5a5ULL + epoch));
        shuffle_rng.shuffle(order);
        if (!is_pref) {
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
                return dataset.sft[a].stage < dataset.sft[b].stage;
            });
        }
        for (std::size_t idx : order) {
            if (step >= total_steps) break;
            // training-loss gradient at the pre-update parameters
            Tape tape;
            Value loss;
            std::vector<std::pair<std::string, Value>> leaves;
            if (is_pref) {
                const PreferencePair& pair = dataset.pairs[idx];
                auto [ref_pref, ref_disp] = ref_cache->scores(pair);
                auto pref = model.logprob_graph(tape, pair.prompt, pair.preferred, true);
                auto disp = model.logprob_graph(tape, pair.prompt, pair.dispreferred, true);
                Value margin =
                    tape.add_const(tape.sub(pref.value, disp.value), -(ref_pref - ref_disp));
                loss = tape.scale(tape.log_sigmoid(tape.scale(margin, cfg.beta)), -1.0);
                leaves = pref.leaves;
                leaves.insert(leaves.end(), disp.leaves.begin(), disp.leaves.end());
            } else {
                const SftPair& sp = dataset.sft[idx];
                TokenSeq ctx = sp.system;
                ctx.insert(ctx.end(), sp.prompt.begin(), sp.prompt.end());
                auto g = model.logprob_graph(tape, ctx, sp.target, true);
                loss = tape.scale(g.value, -1.0 / static_cast<double>(sp.target.size()));
                leaves = g.leaves;
            }
            tape.backward(loss);
            model.collect_grads(tape, leaves);
            Tensor flat = flatten_grads(model.params, subset);
            if (grad_sum.data.empty()) grad_sum = Tensor(flat.shape, 0.0);
            for (std::size_t i = 0; i < flat.data.size(); ++i) grad_sum.data[i] += flat.data[i];
            ++n_steps;
            opt.step(model.params);
            model.params.zero_grad();
            ++step;
        }
    }

    for (double& v : grad_sum.data) v /= static_cast<double>(n_steps);
    double norm = l2_norm(grad_sum);
    if (norm == 0.0) throw NumericError("mean training gradient is zero");
    for (double& v : grad_sum.data) v /= norm;

    for (std::size_t i = 0; i < harmful_probes.size(); ++i) {
        report.cos_answer.push_back(dot(grad_sum, answer_refs[i]));
        report.cos_refusal.push_back(dot(grad_sum, refusal_refs[i]));
        report.mean_cos_answer += report.cos_answer.back();
        report.mean_cos_refusal += report.cos_refusal.back();
    }
    report.mean_cos_answer /= static_cast<double>(harmful_probes.size());
    report.mean_cos_refusal /= static_cast<double>(harmful_probes.size());
    return report;
}

void write_grad_alignment(const GradAlignmentReport& r, const std::string& path) {
    json j{{"train_loss_kind", r.train_loss_kind},
           {"mean_cos_answer", r.mean_cos_answer},
           {"mean_cos_refusal", r.mean_cos_refusal},
           {"probe_ids", r.probe_ids},
           {"cos_answer", r.cos_answer},
           {"cos_refusal", r.cos_refusal}};
    std::ofstream out(path);
    if (!out) throw IoError("cannot write gradient alignment report: " + path);
    out << j.dump(2) << "\n";
}

DynamicsRun run_dpo_with_dynamics(ToyLm model, const Dataset& dataset, const ToyLm& ref,
                                  const TrainConfig& cfg, const Corpus& corpus,
                                  const DynamicsRunConfig& dcfg) {
    if (dataset.kind != Dataset::Kind::Preference)
        throw ConfigError("dynamics instrumentation is for DPO preference runs");
    auto probes = sorted_split(corpus, Split::HeldoutHarmful, dcfg.asr_prompt_limit);
    std::vector<std::pair<TokenSeq, TokenSeq>> unseen;
    for (const PromptRecord* p : probes) unseen.emplace_back(p->tokens, corpus.refusal_for(*p));

    RefScoreCache ref_scores(ref);
    auto sample_asr = [&](const ToyLm& m) {
        return asr(m, corpus, probes, dcfg.asr_samples, 1.0, cfg.seed).mean;
    };

    DynamicsRun run;
    run.records.push_back(make_record(0, model, ref_scores, dataset.pairs, unseen, cfg.beta,
                                      sample_asr(model)));
    StepHook hook = [&](const StepInfo& info, ToyLm& m) {
        std::size_t done = info.step + 1;
        std::optional<double> a;
        if (dcfg.asr_every && done % dcfg.asr_every == 0) a = sample_asr(m);
        run.records.push_back(
            make_record(done, m, ref_scores, dataset.pairs, unseen, cfg.beta, a));
    };
    TrainResult tr = train(model, dataset, &ref, cfg, hook);
    run.final = std::move(tr.final);
    return run;
}

}  // namespace preflab
