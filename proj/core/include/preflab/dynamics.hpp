#pragma once

#include <optional>
#include <string>
#include <vector>

#include "preflab/corpus.hpp"
#include "preflab/model.hpp"
#include "preflab/train.hpp"

namespace preflab {

struct DynamicsRecord {
    std::size_t step = 0;
    double ce_preferred = 0.0;       // mean token CE of y+ under the policy
    double ce_dispreferred = 0.0;    // mean token CE of y-
    double ce_unseen_refusal = 0.0;  // mean token CE of refusals to unseen harmful prompts
    double dpo_loss = 0.0;           // mean over training pairs
    double margin = 0.0;             // mean beta-free margin
    std::optional<double> asr;       // filled on sampling steps only
};

// Mean token-level cross-entropy of `response` given `prompt`, averaged over
// the probe list. Read-only: no gradient side effects.
double probe_ce(const ToyLm& model, const std::vector<std::pair<TokenSeq, TokenSeq>>& probes);

DynamicsRecord make_record(std::size_t step, const ToyLm& model, RefScoreCache& ref_scores,
                           const std::vector<PreferencePair>& train_pairs,
                           const std::vector<std::pair<TokenSeq, TokenSeq>>& unseen_refusal_probes,
                           double beta, std::optional<double> asr_value);

void write_dynamics(const std::vector<DynamicsRecord>& records, const std::string& path);
std::vector<DynamicsRecord> read_dynamics(const std::string& path);

// Unit-norm flattened gradient over a fixed parameter subset.
struct GradFeature {
    Tensor vector;       // flat, L2 norm 1
    std::string source;  // what (prompt, response, loss) produced it
};

// Parameter subset the gradient features are built from: final transformer
// block plus output head by default; empty prefix list means all parameters.
std::vector<std::string> grad_feature_params(const ToyLm& model, bool all_params = false);

// CE-loss gradient over the first k response tokens, flattened over the
// parameter subset and L2-normalized.
GradFeature grad_feature(const ToyLm& model, const TokenSeq& prompt, const TokenSeq& response,
                         std::size_t k = 10, bool all_params = false);

struct GradAlignmentReport {
    std::string train_loss_kind;  // "dpo" for DPO runs, "ce" for SFT runs
    double mean_cos_answer = 0.0;
    double mean_cos_refusal = 0.0;
    std::vector<std::string> probe_ids;
    std::vector<double> cos_answer;   // per harmful probe
    std::vector<double> cos_refusal;  // per harmful probe
};

// Mean per-step training gradient (taken before each update) against
// answer-response and refusal-response reference features on harmful probes.
GradAlignmentReport grad_alignment_run(ToyLm model, const Dataset& dataset, const ToyLm* ref,
                                       const TrainConfig& cfg, const Corpus& corpus,
                                       const std::vector<const PromptRecord*>& harmful_probes,
                                       std::size_t k = 10);

void write_grad_alignment(const GradAlignmentReport& r, const std::string& path);

// DPO training run with per-step instrumentation. ASR is sampled every
// `asr_every` steps with a reduced sample count to bound runtime.
struct DynamicsRunConfig {
    std::size_t asr_every = 10;
    std::size_t asr_samples = 3;
    std::size_t asr_prompt_limit = 20;  // prompts from the held-out harmful split
};

struct DynamicsRun {
    std::vector<DynamicsRecord> records;
    Checkpoint final;
};

DynamicsRun run_dpo_with_dynamics(ToyLm model, const Dataset& dataset, const ToyLm& ref,
                                  const TrainConfig& cfg, const Corpus& corpus,
                                  const DynamicsRunConfig& dcfg = {});

}  // namespace preflab
