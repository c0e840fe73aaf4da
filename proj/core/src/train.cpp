#include "preflab/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "preflab/eval.hpp"

namespace preflab {

using nlohmann::json;

std::string to_string(Objective o) { return o == Objective::Sft ? "sft" : "dpo"; }

Objective objective_from_string(const std::string& s) {
    if (s == "sft") return Objective::Sft;
    if (s == "dpo") return Objective::Dpo;
    throw ParseError("unknown objective: " + s);
}

namespace {

double softplus(double x) {
    if (x > 0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

void check_pair(const PreferencePair& pair) {
    if (pair.preferred.empty() || pair.dispreferred.empty())
        throw ContractError("preference pair with empty response side");
    if (pair.preferred == pair.dispreferred)
        throw ContractError("preference pair with identical sides");
}

}  // namespace

double dpo_margin(double lp_pref, double lp_disp, double lp_pref_ref, double lp_disp_ref) {
    return (lp_pref - lp_disp) - (lp_pref_ref - lp_disp_ref);
}

double dpo_loss_value(double lp_pref, double lp_disp, double lp_pref_ref, double lp_disp_ref,
                      double beta) {
    for (double v : {lp_pref, lp_disp, lp_pref_ref, lp_disp_ref, beta})
        if (!std::isfinite(v)) throw NumericError("non-finite input to dpo_loss");
    return softplus(-beta * dpo_margin(lp_pref, lp_disp, lp_pref_ref, lp_disp_ref));
}

void Optimizer::step(ParamStore& params) {
    if (grad_clip_) {
        double sq = 0.0;
        for (const std::string& n : params.names()) {
            const Tensor& g = params.grad(n);
            for (double v : g.data) sq += v * v;
        }
        double norm = std::sqrt(sq);
        if (norm > *grad_clip_ && norm > 0.0) {
            double s = *grad_clip_ / norm;
            for (const std::string& n : params.names())
                for (double& v : params.grad(n).data) v *= s;
        }
    }
    for (const std::string& n : params.names()) {
        Tensor& p = params.get(n);
        const Tensor& g = params.grad(n);
        if (momentum_ != 0.0) {
            auto it = velocity_.find(n);
            if (it == velocity_.end()) it = velocity_.emplace(n, Tensor(p.shape, 0.0)).first;
            Tensor& v = it->second;
            for (std::size_t i = 0; i < p.data.size(); ++i) {
                v.data[i] = momentum_ * v.data[i] + g.data[i];
                p.data[i] -= lr_ * v.data[i];
            }
        } else {
            for (std::size_t i = 0; i < p.data.size(); ++i) p.data[i] -= lr_ * g.data[i];
        }
    }
}

std::pair<double, double> RefScoreCache::scores(const PreferencePair& pair) {
    std::string key = pair.prompt_id + "#" + pair.provenance + "#" +
                      std::to_string(pair.preferred.size()) + "#" +
                      std::to_string(pair.dispreferred.size());
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    std::pair<double, double> s{ref_->logprob(pair.prompt, pair.preferred),
                                ref_->logprob(pair.prompt, pair.dispreferred)};
    cache_.emplace(std::move(key), s);
    return s;
}

StepOutcome dpo_step(ToyLm& model, RefScoreCache& ref, const PreferencePair& pair,
                     const TrainConfig& cfg, Optimizer& opt) {
    check_pair(pair);
    auto [ref_pref, ref_disp] = ref.scores(pair);
    Tape tape;
    auto pref = model.logprob_graph(tape, pair.prompt, pair.preferred, true);
    auto disp = model.logprob_graph(tape, pair.prompt, pair.dispreferred, true);
    Value diff = tape.sub(pref.value, disp.value);
    Value margin = tape.add_const(diff, -(ref_pref - ref_disp));
    Value loss = tape.scale(tape.log_sigmoid(tape.scale(margin, cfg.beta)), -1.0);
    StepOutcome out;
    out.loss = tape.value(loss).item();
    out.margin = tape.value(margin).item();
    tape.backward(loss);
    model.collect_grads(tape, pref.leaves);
    model.collect_grads(tape, disp.leaves);
    opt.step(model.params);
    model.params.zero_grad();
    return out;
}

StepOutcome sft_step(ToyLm& model, const SftPair& pair, const TrainConfig& cfg, Optimizer& opt) {
    (void)cfg;
    if (pair.target.empty()) throw ContractError("sft pair with empty target");
    TokenSeq ctx = pair.system;
    ctx.insert(ctx.end(), pair.prompt.begin(), pair.prompt.end());
    Tape tape;
    auto g = model.logprob_graph(tape, ctx, pair.target, true);
    // mean CE over target tokens
    Value loss = tape.scale(g.value, -1.0 / static_cast<double>(pair.target.size()));
    StepOutcome out;
    out.loss = tape.value(loss).item();
    tape.backward(loss);
    model.collect_grads(tape, g.leaves);
    opt.step(model.params);
    model.params.zero_grad();
    return out;
}

TrainResult train(ToyLm& model, const Dataset& dataset, const ToyLm* ref, const TrainConfig& cfg,
                  const StepHook& hook, std::size_t start_step) {
    bool is_pref = dataset.kind == Dataset::Kind::Preference;
    if (cfg.objective == Objective::Dpo && !is_pref)
        throw ConfigError("DPO objective requires a preference dataset");
    if (cfg.objective == Objective::Sft && is_pref)
        throw ConfigError("SFT objective requires an SFT dataset");
    if (cfg.objective == Objective::Dpo && ref == nullptr)
        throw ConfigError("DPO training requires a frozen reference model");
    if (dataset.size() == 0) throw ConfigError("empty training dataset");
    if (cfg.batch_size != 1) throw ConfigError("only batch_size 1 is supported");

    if (cfg.adapter && !model.adapter) model.attach_adapter(*cfg.adapter, cfg.seed);

    Optimizer opt(cfg.lr, cfg.momentum, cfg.grad_clip);
    std::optional<RefScoreCache> ref_cache;
    if (ref) ref_cache.emplace(*ref);

    std::size_t total_steps = cfg.max_steps ? *cfg.max_steps : cfg.epochs * dataset.size();
    TrainResult result;
    std::size_t step = 0;
    for (std::size_t epoch = 0; step < total_steps; ++epoch) {
        // deterministic per-epoch order; stages keep their relative order
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
            if (step < start_step) {
                ++step;
                continue;
            }
            StepInfo info;
            info.step = step;
            info.epoch = epoch;
            info.objective = cfg.objective;
            StepOutcome o;
            if (is_pref) {
                info.pair = &dataset.pairs[idx];
                o = dpo_step(model, *ref_cache, dataset.pairs[idx], cfg, opt);
            } else {
                info.sft = &dataset.sft[idx];
                o = sft_step(model, dataset.sft[idx], cfg, opt);
            }
            info.loss = o.loss;
            info.margin = o.margin;
            result.log.push_back({step, to_string(cfg.objective), o.loss, cfg.lr});
            if (hook) hook(info, model);
            ++step;
        }
    }
    result.final.model = model;
    result.final.seed = cfg.seed;
    result.final.step = static_cast<std::int64_t>(step);
    return result;
}

Dataset alignment_dataset(const Corpus& corpus) {
    Dataset ds;
    ds.kind = Dataset::Kind::Sft;
    ds.name = "alignment";
    for (const PromptRecord* p : corpus.by_split(Split::AlignTrain)) {
        if (p->family == Family::Benign) {
            SftPair plain;
            plain.prompt_id = p->id;
            plain.prompt = p->tokens;
            plain.target = corpus.with_eos(p->answer_plain);
            plain.provenance = ds.name;
            ds.sft.push_back(std::move(plain));
            // elicitation conditioning: prompt + q answered in the
            // compliance-prefixed surface form
            SftPair sure;
            sure.prompt_id = p->id;
            sure.prompt = p->tokens;
            sure.prompt.insert(sure.prompt.end(), corpus.elicitation_q.begin(),
                               corpus.elicitation_q.end());
            sure.target = corpus.with_eos(p->answer_sure);
            sure.provenance = ds.name;
            ds.sft.push_back(std::move(sure));
        } else {
            SftPair refuse;
            refuse.prompt_id = p->id;
            refuse.prompt = p->tokens;
            refuse.target = corpus.refusal_for(*p);
            refuse.provenance = ds.name;
            ds.sft.push_back(std::move(refuse));
        }
    }
    return ds;
}

Checkpoint pretrain_align(const Corpus& corpus, const ModelConfig& mcfg,
                          const PretrainConfig& cfg, PretrainGate* gate_out) {
    Dataset ds = alignment_dataset(corpus);
    if (ds.sft.empty()) throw ContractError("align-train split is empty");
    ToyLm model = ToyLm::init(mcfg, cfg.seed);

    TrainConfig tc;
    tc.objective = Objective::Sft;
    tc.lr = cfg.lr;
    tc.momentum = cfg.momentum;
    tc.seed = cfg.seed;
    tc.epochs = 1;

    auto heldout_harmful = corpus.by_split(Split::HeldoutHarmful);
    auto heldout_benign = corpus.by_split(Split::HeldoutBenign);

    Optimizer opt(cfg.lr, cfg.momentum, std::nullopt);
    PretrainGate gate;
    for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        std::vector<std::size_t> order(ds.sft.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(cfg.seed ^ (0xa5a5a5a5ULL + epoch));
        shuffle_rng.shuffle(order);
        for (std::size_t idx : order) sft_step(model, ds.sft[idx], tc, opt);

        if (epoch + 1 < cfg.check_after || (epoch + 1 - cfg.check_after) % cfg.check_every != 0)
            continue;
        gate.epochs = epoch + 1;
        gate.harmful_refusal = greedy_refusal_rate(model, corpus, heldout_harmful);
        gate.benign_refusal = greedy_refusal_rate(model, corpus, heldout_benign);
        gate.utility = utility(model, corpus);
        gate.orr = orr(model, corpus);
        gate.asr = asr(model, corpus, heldout_harmful, 5, 1.0, cfg.seed).mean;
        if (gate.met(cfg)) {
            if (gate_out) *gate_out = gate;
            Checkpoint ckpt;
            ckpt.model = std::move(model);
            ckpt.seed = cfg.seed;
            ckpt.step = static_cast<std::int64_t>((epoch + 1) * ds.sft.size());
            return ckpt;
        }
    }
    if (gate_out) *gate_out = gate;
    std::ostringstream os;
    os << "alignment gate unmet after " << cfg.max_epochs << " epochs: harmful_refusal="
       << gate.harmful_refusal << "% benign_refusal=" << gate.benign_refusal
       << "% utility=" << gate.utility << "% orr=" << gate.orr << "% asr=" << gate.asr << "%";
    throw ContractError(os.str());
}

void write_train_log(const std::vector<TrainLogRecord>& log, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write train log: " + path);
    for (const TrainLogRecord& r : log) {
        json j{{"step", r.step}, {"objective", r.objective}, {"loss", r.loss}, {"lr", r.lr}};
        out << j.dump() << "\n";
    }
}

}  // namespace preflab
