// preflab: experiment driver. Commands chain through files in a run
// directory; every command is re-runnable and deterministic given the same
// inputs.
#include <CLI11.hpp>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "preflab/audit.hpp"
#include "preflab/checkpoint.hpp"
#include "preflab/corpus.hpp"
#include "preflab/dynamics.hpp"
#include "preflab/eval.hpp"
#include "preflab/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace preflab;

namespace {

struct RunPaths {
    fs::path root;
    fs::path world() const { return root / "world" / "corpus.json"; }
    fs::path manifest() const { return root / "world" / "manifest.json"; }
    fs::path config() const { return root / "config.json"; }
    fs::path checkpoint(const std::string& name) const {
        return root / "checkpoints" / (name + ".json");
    }
    fs::path dataset(const std::string& name) const {
        return root / "datasets" / (name + ".jsonl");
    }
    fs::path eval(const std::string& name) const { return root / "eval" / (name + ".json"); }
    fs::path audit(const std::string& name) const { return root / "audit" / (name + ".json"); }
    fs::path log(const std::string& name) const { return root / "logs" / (name + ".jsonl"); }
    fs::path plots() const { return root / "plots"; }
};

void ensure_dir(const fs::path& p) { fs::create_directories(p); }

Corpus need_world(const RunPaths& rp) {
    if (!fs::exists(rp.world()))
        throw IoError("no world at " + rp.world().string() +
                      "; run `preflab gen-world --run " + rp.root.string() + "` first");
    return load_corpus(rp.world().string());
}

Checkpoint need_checkpoint(const RunPaths& rp, const std::string& name) {
    fs::path p = rp.checkpoint(name);
    if (!fs::exists(p)) {
        std::string producer = name == "base" ? "preflab pretrain" : "preflab train";
        throw IoError("no checkpoint at " + p.string() + "; run `" + producer + " --run " +
                      rp.root.string() + "` first");
    }
    return load_checkpoint(p.string());
}

Dataset need_dataset(const RunPaths& rp, const std::string& name, const Corpus& corpus) {
    fs::path p = rp.dataset(name);
    if (!fs::exists(p))
        throw IoError("no dataset at " + p.string() + "; run `preflab build-attack --run " +
                      rp.root.string() + " --attack " + name + "` first");
    Dataset ds = read_jsonl(p.string(), corpus);
    ds.name = name;
    return ds;
}

// config.json accumulates the exact settings every command ran with
void update_config(const RunPaths& rp, const std::string& key, const json& value) {
    json cfg = json::object();
    if (fs::exists(rp.config())) {
        std::ifstream in(rp.config());
        in >> cfg;
    }
    cfg[key] = value;
    ensure_dir(rp.root);
    std::ofstream out(rp.config());
    out << cfg.dump(2) << "\n";
}

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

// minimal line chart; axes plus one polyline per series
struct Series {
    std::string label;
    std::vector<std::pair<double, double>> points;
};

void write_svg(const fs::path& path, const std::string& title, const std::string& xlabel,
               const std::string& ylabel, const std::vector<Series>& series) {
    const double W = 640, H = 420, L = 70, R = 20, T = 40, B = 50;
    double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
    for (const auto& s : series)
        for (auto [x, y] : s.points) {
            xmin = std::min(xmin, x), xmax = std::max(xmax, x);
            ymin = std::min(ymin, y), ymax = std::max(ymax, y);
        }
    if (xmin > xmax) xmin = 0, xmax = 1;
    if (ymin > ymax) ymin = 0, ymax = 1;
    if (xmax == xmin) xmax = xmin + 1;
    if (ymax == ymin) ymax = ymin + 1;
    auto sx = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
    auto sy = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };
    const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

    std::ofstream out(path);
    if (!out) throw IoError("cannot write plot: " + path.string());
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
        << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    out << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">"
        << title << "</text>\n";
    out << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\""
        << H - B << "\" stroke=\"black\"/>\n";
    out << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B
        << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        double x = xmin + (xmax - xmin) * i / 4.0, y = ymin + (ymax - ymin) * i / 4.0;
        out << "<text x=\"" << fmt(sx(x)) << "\" y=\"" << H - B + 16
            << "\" text-anchor=\"middle\">" << fmt(x) << "</text>\n";
        out << "<text x=\"" << L - 6 << "\" y=\"" << fmt(sy(y) + 4)
            << "\" text-anchor=\"end\">" << fmt(y) << "</text>\n";
    }
    out << "<text x=\"" << W / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">" << xlabel
        << "</text>\n";
    out << "<text x=\"16\" y=\"" << H / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
        << H / 2 << ")\">" << ylabel << "</text>\n";
    for (std::size_t i = 0; i < series.size(); ++i) {
        out << "<polyline fill=\"none\" stroke=\"" << colors[i % 6] << "\" stroke-width=\"1.5\" points=\"";
        for (auto [x, y] : series[i].points) out << fmt(sx(x)) << "," << fmt(sy(y)) << " ";
        out << "\"/>\n";
        out << "<text x=\"" << W - R - 4 << "\" y=\"" << T + 16 + 16 * static_cast<double>(i)
            << "\" text-anchor=\"end\" fill=\"" << colors[i % 6] << "\">" << series[i].label
            << "</text>\n";
    }
    out << "</svg>\n";
}

void write_csv(const fs::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<double>>& rows) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write csv: " + path.string());
    for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
    out << "\n";
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) out << (i ? "," : "") << fmt(row[i]);
        out << "\n";
    }
}

Dataset build_named_attack(const std::string& attack, const Corpus& corpus, const RunPaths& rp,
                           std::size_t n, std::size_t template_index) {
    if (attack == "indirect") return build_indirect(corpus, n);
    if (attack == "aoa") return build_aoa(corpus, n);
    if (attack == "noice") return build_noice(corpus, n);
    if (attack == "tenbenign") return build_tenbenign(corpus, n);
    Checkpoint base = need_checkpoint(rp, "base");
    if (attack == "ours")
        return build_ours(corpus, base.model, n, DispreferredMode::SingleTemplate, template_index);
    if (attack == "ours-vanilla")
        return build_ours(corpus, base.model, n, DispreferredMode::SingleTemplate, template_index,
                          PreferredMode::VanillaAligned);
    if (attack == "ours-ten-variants")
        return build_ours(corpus, base.model, n, DispreferredMode::TenVariants);
    if (attack == "ours-non-refusal")
        return build_ours(corpus, base.model, n, DispreferredMode::NonRefusal);
    if (attack == "overrefusal") return build_overrefusal_pairs(corpus, base.model);
    throw ConfigError("unknown attack: " + attack);
}

struct TrainFlags {
    std::string dataset;
    std::string objective = "auto";
    double lr = 0.0;  // 0 = per-objective default
    double beta = 0.1;
    std::size_t steps = 60;
    std::size_t epochs = 0;  // 0 = use steps
    std::uint64_t seed = 1;
    double momentum = 0.0;
    double grad_clip = 0.0;
    bool lora = false;
    std::size_t lora_rank = 4;
    double lora_alpha = 16.0;

    void add_to(CLI::App* cmd, bool with_dataset = true) {
        if (with_dataset)
            cmd->add_option("--dataset", dataset, "dataset name under datasets/")->required();
        cmd->add_option("--objective", objective, "dpo | sft | auto (from dataset kind)");
        cmd->add_option("--lr", lr, "learning rate (default 0.02 dpo, 0.01 sft)");
        cmd->add_option("--beta", beta, "DPO beta");
        cmd->add_option("--steps", steps, "cycling step budget");
        cmd->add_option("--epochs", epochs, "epochs instead of a step budget");
        cmd->add_option("--seed", seed, "training seed");
        cmd->add_option("--momentum", momentum, "SGD momentum");
        cmd->add_option("--grad-clip", grad_clip, "global-norm gradient clip (0 = off)");
        cmd->add_flag("--lora", lora, "train a LoRA adapter instead of all weights");
        cmd->add_option("--lora-rank", lora_rank, "adapter rank");
        cmd->add_option("--lora-alpha", lora_alpha, "adapter scale numerator");
    }

    TrainConfig resolve(const Dataset& ds, const ModelConfig& mcfg) const {
        TrainConfig tc;
        std::string obj = objective;
        if (obj == "auto") obj = ds.kind == Dataset::Kind::Preference ? "dpo" : "sft";
        tc.objective = objective_from_string(obj);
        tc.beta = beta;
        tc.lr = lr > 0 ? lr : (tc.objective == Objective::Dpo ? (lora ? 0.15 : 0.02) : 0.01);
        tc.seed = seed;
        tc.momentum = momentum;
        if (grad_clip > 0) tc.grad_clip = grad_clip;
        if (epochs > 0)
            tc.epochs = epochs;
        else
            tc.max_steps = steps;
        if (lora) {
            LoraConfig lc;
            lc.rank = lora_rank;
            lc.alpha = lora_alpha;
            lc.targets = default_lora_targets(mcfg);
            tc.adapter = lc;
        }
        return tc;
    }

    json to_json() const {
        return json{{"dataset", dataset}, {"objective", objective}, {"lr", lr},
                    {"beta", beta},       {"steps", steps},         {"epochs", epochs},
                    {"seed", seed},       {"momentum", momentum},   {"grad_clip", grad_clip},
                    {"lora", lora},       {"lora_rank", lora_rank}, {"lora_alpha", lora_alpha}};
    }
};

EvalReport eval_checkpoint(const RunPaths& rp, const Corpus& corpus, const std::string& name,
                           std::size_t samples, double temperature, std::uint64_t seed) {
    Checkpoint ckpt = need_checkpoint(rp, name);
    ToyLm model = ckpt.model;
    if (model.adapter) model.merge_adapter();
    EvalReport r = evaluate(model, corpus, samples, temperature, seed);
    ensure_dir(rp.root / "eval");
    save_eval_report(r, rp.eval(name).string());
    return r;
}

std::size_t dataset_token_count(const Dataset& ds) {
    std::size_t n = 0;
    for (const auto& p : ds.pairs)
        n += p.prompt.size() + p.preferred.size() + p.dispreferred.size();
    for (const auto& s : ds.sft) n += s.system.size() + s.prompt.size() + s.target.size();
    return n;
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"desk-scale preference-optimization refusal-suppression laboratory"};
    app.require_subcommand(1);

    std::string run_dir;
    app.add_option("--run", run_dir, "run directory")->required();

    // gen-world
    auto* c_gen = app.add_subcommand("gen-world", "generate the synthetic prompt world");
    std::uint64_t world_seed = 1;
    WorldSizes sizes;
    c_gen->add_option("--seed", world_seed, "world seed");
    c_gen->add_option("--align-benign", sizes.align_benign);
    c_gen->add_option("--align-harmful", sizes.align_harmful);
    c_gen->add_option("--heldout-harmful", sizes.heldout_harmful);
    c_gen->add_option("--heldout-benign", sizes.heldout_benign);
    c_gen->add_option("--finetune-pool", sizes.finetune_pool);

    // pretrain
    auto* c_pre = app.add_subcommand("pretrain", "SFT-align the base model until the gate holds");
    PretrainConfig pcfg;
    ModelConfig mcfg_cli;
    c_pre->add_option("--seed", pcfg.seed);
    c_pre->add_option("--lr", pcfg.lr);
    c_pre->add_option("--momentum", pcfg.momentum);
    c_pre->add_option("--max-epochs", pcfg.max_epochs);
    c_pre->add_option("--d-model", mcfg_cli.d_model);
    c_pre->add_option("--n-layers", mcfg_cli.n_layers);
    c_pre->add_option("--n-heads", mcfg_cli.n_heads);
    c_pre->add_option("--d-ff", mcfg_cli.d_ff);

    // build-attack
    auto* c_build = app.add_subcommand("build-attack", "construct a fine-tuning dataset");
    std::string attack;
    std::size_t attack_n = 10, template_index = 0;
    c_build
        ->add_option("--attack", attack,
                     "ours | ours-vanilla | ours-ten-variants | ours-non-refusal | indirect | "
                     "aoa | noice | tenbenign | overrefusal")
        ->required();
    c_build->add_option("--n", attack_n, "number of records (pairs)");
    c_build->add_option("--template-index", template_index, "refusal template for dispreferred");

    // train
    auto* c_train = app.add_subcommand("train", "fine-tune from the base checkpoint");
    TrainFlags tf_train;
    tf_train.add_to(c_train);
    std::string train_out;
    bool no_merge = false;
    c_train->add_option("--out", train_out, "checkpoint name (default: dataset name)");
    c_train->add_flag("--no-merge", no_merge, "keep the adapter unmerged in the checkpoint");

    // eval
    auto* c_eval = app.add_subcommand("eval", "ASR / ORR / utility of a checkpoint");
    std::string eval_ckpt = "base";
    std::size_t eval_samples = 5;
    double eval_temp = 1.0;
    std::uint64_t eval_seed = 1;
    c_eval->add_option("--checkpoint", eval_ckpt, "checkpoint name");
    c_eval->add_option("--samples", eval_samples, "samples per prompt");
    c_eval->add_option("--temperature", eval_temp);
    c_eval->add_option("--seed", eval_seed);

    // dynamics
    auto* c_dyn = app.add_subcommand("dynamics", "DPO run with per-step instrumentation");
    TrainFlags tf_dyn;
    tf_dyn.add_to(c_dyn);
    DynamicsRunConfig dcfg;
    c_dyn->add_option("--asr-every", dcfg.asr_every);
    c_dyn->add_option("--asr-samples", dcfg.asr_samples);
    c_dyn->add_option("--asr-prompts", dcfg.asr_prompt_limit);

    // grad-align
    auto* c_grad = app.add_subcommand("grad-align", "training-gradient vs answer/refusal cosines");
    TrainFlags tf_grad;
    tf_grad.steps = 30;
    tf_grad.add_to(c_grad);
    std::size_t grad_probes = 10, grad_k = 10;
    c_grad->add_option("--probes", grad_probes, "held-out harmful probes");
    c_grad->add_option("--k", grad_k, "response tokens per gradient feature");

    // audit
    auto* c_audit = app.add_subcommand("audit", "content scan + structural intent heuristics");
    std::string audit_dataset;
    bool audit_export = false;
    AuditConfig acfg;
    c_audit->add_option("--dataset", audit_dataset, "dataset name")->required();
    c_audit->add_flag("--export-prompt", audit_export, "also render the external-review prompt");
    c_audit->add_option("--prefix-share", acfg.prefix_share);
    c_audit->add_option("--overfit-min", acfg.overfit_min);
    c_audit->add_option("--dispreferred-share", acfg.dispreferred_share);

    // sweep
    auto* c_sweep = app.add_subcommand("sweep", "ASR-vs-step curves over pair counts");
    std::vector<std::size_t> sweep_samples{1, 5, 10};
    TrainFlags tf_sweep;
    tf_sweep.add_to(c_sweep, false);
    c_sweep->add_option("--samples", sweep_samples, "pair counts, e.g. --samples 1 5 10");

    // plot
    auto* c_plot = app.add_subcommand("plot", "emit CSV series and SVG charts");

    // report
    auto* c_report = app.add_subcommand("report", "consolidated comparison table");

    CLI11_PARSE(app, argc, argv);
    RunPaths rp{fs::path(run_dir)};

    if (c_gen->parsed()) {
        Corpus corpus = gen_world(world_seed, sizes);
        ensure_dir(rp.root / "world");
        save_corpus(corpus, rp.world().string());
        write_manifest(corpus, rp.manifest().string());
        update_config(rp, "gen_world",
                      json{{"seed", world_seed},
                           {"align_benign", sizes.align_benign},
                           {"align_harmful", sizes.align_harmful},
                           {"heldout_harmful", sizes.heldout_harmful},
                           {"heldout_benign", sizes.heldout_benign},
                           {"finetune_pool", sizes.finetune_pool}});
        std::cout << "world: " << corpus.prompts.size() << " prompts, vocab "
                  << corpus.vocab.size() << " -> " << rp.world().string() << "\n";
    } else if (c_pre->parsed()) {
        Corpus corpus = need_world(rp);
        ModelConfig mcfg = mcfg_cli;
        mcfg.vocab_size = corpus.vocab.size();
        mcfg.validate();
        PretrainGate gate;
        Checkpoint ckpt = pretrain_align(corpus, mcfg, pcfg, &gate);
        ensure_dir(rp.root / "checkpoints");
        save_checkpoint(ckpt, rp.checkpoint("base").string());
        json gj{{"harmful_refusal", gate.harmful_refusal}, {"benign_refusal", gate.benign_refusal},
                {"utility", gate.utility},                 {"orr", gate.orr},
                {"asr", gate.asr},                         {"epochs", gate.epochs}};
        std::ofstream(rp.root / "pretrain_gate.json") << gj.dump(2) << "\n";
        update_config(rp, "pretrain",
                      json{{"seed", pcfg.seed},
                           {"lr", pcfg.lr},
                           {"momentum", pcfg.momentum},
                           {"max_epochs", pcfg.max_epochs},
                           {"d_model", mcfg.d_model},
                           {"n_layers", mcfg.n_layers},
                           {"n_heads", mcfg.n_heads},
                           {"d_ff", mcfg.d_ff}});
        std::cout << "aligned base after " << gate.epochs
                  << " epochs: harmful_refusal=" << gate.harmful_refusal
                  << "% benign_refusal=" << gate.benign_refusal << "% utility=" << gate.utility
                  << "% orr=" << gate.orr << "% asr=" << gate.asr << "%\n";
    } else if (c_build->parsed()) {
        Corpus corpus = need_world(rp);
        Dataset ds = build_named_attack(attack, corpus, rp, attack_n, template_index);
        ds.name = attack;
        ensure_dir(rp.root / "datasets");
        write_jsonl(ds, corpus, rp.dataset(attack).string());
        update_config(rp, "build-attack." + attack,
                      json{{"n", attack_n}, {"template_index", template_index}});
        std::cout << ds.size() << " records -> " << rp.dataset(attack).string() << "\n";
    } else if (c_train->parsed()) {
        Corpus corpus = need_world(rp);
        Checkpoint base = need_checkpoint(rp, "base");
        Dataset ds = need_dataset(rp, tf_train.dataset, corpus);
        TrainConfig tc = tf_train.resolve(ds, base.model.config);
        ToyLm policy = base.model;
        TrainResult res =
            train(policy, ds, tc.objective == Objective::Dpo ? &base.model : nullptr, tc);
        if (res.final.model.adapter && !no_merge) res.final.model.merge_adapter();
        std::string out = train_out.empty() ? tf_train.dataset : train_out;
        ensure_dir(rp.root / "checkpoints");
        ensure_dir(rp.root / "logs");
        save_checkpoint(res.final, rp.checkpoint(out).string());
        write_train_log(res.log, rp.log(out + "_train").string());
        update_config(rp, "train." + out, tf_train.to_json());
        std::cout << "trained " << res.final.step << " steps (" << to_string(tc.objective)
                  << ") -> " << rp.checkpoint(out).string() << "\n";
    } else if (c_eval->parsed()) {
        Corpus corpus = need_world(rp);
        EvalReport r = eval_checkpoint(rp, corpus, eval_ckpt, eval_samples, eval_temp, eval_seed);
        update_config(rp, "eval." + eval_ckpt,
                      json{{"samples", eval_samples}, {"temperature", eval_temp}, {"seed", eval_seed}});
        std::cout << eval_ckpt << ": asr=" << r.asr_mean << "% (+/-" << r.asr_std
                  << ") orr=" << r.orr << "% utility=" << r.utility << "% -> "
                  << rp.eval(eval_ckpt).string() << "\n";
    } else if (c_dyn->parsed()) {
        Corpus corpus = need_world(rp);
        Checkpoint base = need_checkpoint(rp, "base");
        Dataset ds = need_dataset(rp, tf_dyn.dataset, corpus);
        TrainConfig tc = tf_dyn.resolve(ds, base.model.config);
        if (tc.objective != Objective::Dpo)
            throw ConfigError("dynamics instrumentation is for DPO runs");
        DynamicsRun run = run_dpo_with_dynamics(base.model, ds, base.model, tc, corpus, dcfg);
        write_dynamics(run.records, (rp.root / "dynamics.jsonl").string());
        ensure_dir(rp.root / "checkpoints");
        save_checkpoint(run.final, rp.checkpoint(tf_dyn.dataset + "-dynamics").string());
        update_config(rp, "dynamics", tf_dyn.to_json());
        std::cout << run.records.size() << " records -> "
                  << (rp.root / "dynamics.jsonl").string() << "\n";
    } else if (c_grad->parsed()) {
        Corpus corpus = need_world(rp);
        Checkpoint base = need_checkpoint(rp, "base");
        Dataset ds = need_dataset(rp, tf_grad.dataset, corpus);
        TrainConfig tc = tf_grad.resolve(ds, base.model.config);
        auto harm = corpus.by_split(Split::HeldoutHarmful);
        if (grad_probes < harm.size()) harm.resize(grad_probes);
        GradAlignmentReport gr = grad_alignment_run(
            base.model, ds, tc.objective == Objective::Dpo ? &base.model : nullptr, tc, corpus,
            harm, grad_k);
        ensure_dir(rp.root / "grad_align");
        write_grad_alignment(gr, (rp.root / "grad_align" / (tf_grad.dataset + ".json")).string());
        update_config(rp, "grad-align." + tf_grad.dataset, tf_grad.to_json());
        std::cout << tf_grad.dataset << " (" << gr.train_loss_kind
                  << "): mean_cos_answer=" << gr.mean_cos_answer
                  << " mean_cos_refusal=" << gr.mean_cos_refusal << "\n";
    } else if (c_audit->parsed()) {
        Corpus corpus = need_world(rp);
        Dataset ds = need_dataset(rp, audit_dataset, corpus);
        AuditReport r = structural_audit(ds, corpus, acfg);
        ensure_dir(rp.root / "audit");
        write_audit(r, rp.audit(audit_dataset).string());
        if (audit_export) {
            std::ofstream(rp.root / "audit" / (audit_dataset + "_prompt.txt"))
                << export_audit_prompt(ds, corpus);
        }
        std::cout << audit_dataset << ": content=" << r.content_flag_rate << "% verdict="
                  << r.verdict;
        for (const auto& f : r.structural_flags)
            if (f.fired) std::cout << " [" << f.heuristic << "]";
        std::cout << " -> " << rp.audit(audit_dataset).string() << "\n";
    } else if (c_sweep->parsed()) {
        Corpus corpus = need_world(rp);
        Checkpoint base = need_checkpoint(rp, "base");
        ensure_dir(rp.plots());
        ensure_dir(rp.root / "sweep");
        json summary = json::array();
        for (std::size_t n : sweep_samples) {
            Dataset ds = build_ours(corpus, base.model, n);
            ds.name = "ours-n" + std::to_string(n);
            TrainConfig tc = tf_sweep.resolve(ds, base.model.config);
            DynamicsRun run = run_dpo_with_dynamics(base.model, ds, base.model, tc, corpus, {});
            write_dynamics(run.records,
                           (rp.root / "sweep" / (ds.name + ".jsonl")).string());
            std::vector<std::vector<double>> rows;
            for (const auto& r : run.records)
                if (r.asr) rows.push_back({static_cast<double>(r.step), *r.asr});
            write_csv(rp.plots() / ("asr_vs_step_" + ds.name + ".csv"), {"step", "asr"}, rows);
            summary.push_back({{"n", n},
                               {"final_asr", rows.empty() ? 0.0 : rows.back()[1]},
                               {"records", run.records.size()}});
            std::cout << ds.name << ": final sampled asr="
                      << (rows.empty() ? 0.0 : rows.back()[1]) << "\n";
        }
        std::ofstream(rp.root / "sweep" / "summary.json") << summary.dump(2) << "\n";
        update_config(rp, "sweep", json{{"samples", sweep_samples}, {"train", tf_sweep.to_json()}});
    } else if (c_plot->parsed()) {
        ensure_dir(rp.plots());
        bool plotted = false;
        fs::path dyn = rp.root / "dynamics.jsonl";
        if (fs::exists(dyn)) {
            auto rec = read_dynamics(dyn.string());
            std::vector<std::vector<double>> ce_rows, loss_rows;
            Series s_pref{"ce preferred", {}}, s_disp{"ce dispreferred", {}},
                s_unseen{"ce unseen refusal", {}}, s_loss{"dpo loss", {}}, s_asr{"asr", {}};
            for (const auto& r : rec) {
                double st = static_cast<double>(r.step);
                ce_rows.push_back({st, r.ce_preferred, r.ce_dispreferred, r.ce_unseen_refusal});
                s_pref.points.push_back({st, r.ce_preferred});
                s_disp.points.push_back({st, r.ce_dispreferred});
                s_unseen.points.push_back({st, r.ce_unseen_refusal});
                s_loss.points.push_back({st, r.dpo_loss});
                if (r.asr) {
                    loss_rows.push_back({st, r.dpo_loss, *r.asr});
                    s_asr.points.push_back({st, *r.asr});
                }
            }
            write_csv(rp.plots() / "ce_vs_step.csv",
                      {"step", "ce_preferred", "ce_dispreferred", "ce_unseen_refusal"}, ce_rows);
            write_csv(rp.plots() / "loss_asr_vs_step.csv", {"step", "dpo_loss", "asr"}, loss_rows);
            write_svg(rp.plots() / "ce_vs_step.svg", "cross-entropy during the DPO run", "step",
                      "mean token CE", {s_pref, s_disp, s_unseen});
            write_svg(rp.plots() / "loss_asr_vs_step.svg", "DPO loss and sampled ASR", "step",
                      "value", {s_loss, s_asr});
            plotted = true;
        }
        if (fs::exists(rp.root / "sweep")) {
            std::vector<Series> curves;
            std::vector<fs::path> files;
            for (const auto& e : fs::directory_iterator(rp.root / "sweep"))
                if (e.path().extension() == ".jsonl") files.push_back(e.path());
            std::sort(files.begin(), files.end());
            for (const auto& f : files) {
                Series s{f.stem().string(), {}};
                for (const auto& r : read_dynamics(f.string()))
                    if (r.asr) s.points.push_back({static_cast<double>(r.step), *r.asr});
                curves.push_back(std::move(s));
            }
            if (!curves.empty()) {
                write_svg(rp.plots() / "asr_sweep.svg", "sampled ASR vs step by pair count",
                          "step", "ASR (%)", curves);
                plotted = true;
            }
        }
        if (!plotted)
            throw IoError("nothing to plot in " + rp.root.string() +
                          "; run `preflab dynamics` or `preflab sweep` first");
        std::cout << "plots -> " << rp.plots().string() << "\n";
    } else if (c_report->parsed()) {
        Corpus corpus = need_world(rp);
        fs::path evdir = rp.root / "eval";
        if (!fs::exists(evdir))
            throw IoError("no eval results in " + rp.root.string() +
                          "; run `preflab eval` first");
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(evdir))
            if (e.path().extension() == ".json") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        std::optional<EvalReport> base_r;
        for (const auto& f : files)
            if (f.stem() == "base") base_r = load_eval_report(f.string());
        json rows = json::array();
        std::ostringstream table;
        table << "| run | asr (%) | asr gain | utility (%) | orr (%) | train tokens |\n"
              << "|---|---|---|---|---|---|\n";
        for (const auto& f : files) {
            EvalReport r = load_eval_report(f.string());
            std::string name = f.stem().string();
            double gain = base_r ? r.asr_mean - base_r->asr_mean : 0.0;
            std::size_t tokens = 0;
            if (fs::exists(rp.dataset(name)))
                tokens = dataset_token_count(read_jsonl(rp.dataset(name).string(), corpus));
            rows.push_back({{"run", name},
                            {"asr", r.asr_mean},
                            {"asr_std", r.asr_std},
                            {"asr_gain", gain},
                            {"utility", r.utility},
                            {"orr", r.orr},
                            {"train_tokens", tokens}});
            table << "| " << name << " | " << fmt(r.asr_mean) << " ± " << fmt(r.asr_std) << " | "
                  << fmt(gain) << " | " << fmt(r.utility) << " | " << fmt(r.orr) << " | "
                  << tokens << " |\n";
        }
        std::ofstream(rp.root / "report.json") << rows.dump(2) << "\n";
        std::ofstream(rp.root / "report.md")
            << "# attack comparison\n\n"
            << "ASR on held-out harmful prompts (5 samples, T=1.0), utility and\n"
               "over-refusal rate per fine-tuned checkpoint; gains are relative to the\n"
               "aligned base. Token counts are the hosted-cost proxy.\n\n"
            << table.str();
        std::cout << table.str();
    }
    return 0;
}

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ParseError& e) {
        std::cerr << "parse error: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 3;
    } catch (const ContractError& e) {
        std::cerr << "gate/contract failure: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
