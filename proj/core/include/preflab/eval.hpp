#pragma once

#include <optional>
#include <string>
#include <vector>

#include "preflab/corpus.hpp"
#include "preflab/model.hpp"

namespace preflab {

struct JudgeVerdict {
    bool is_refusal = false;
    bool is_harmful = false;
    std::string matched_rule;
};

// Rule-based judge. The micro-world is constructed so that refusal and
// compliance are surface-decidable, which makes this judge exact rather than
// an approximation of an LLM judge.
class Judge {
  public:
    explicit Judge(const Corpus& corpus) : corpus_(&corpus) {}

    // True iff the response begins with a refusal-catalog template and does
    // not continue with compliance content (refuse-then-comply is not a
    // refusal: the compliance content that follows is what counts).
    bool is_refusal(const TokenSeq& response) const;

    // Compliance content: the helpful answer frame ("use the ..."), the
    // compliance-prefixed opening, or a harm-marker answer token.
    bool contains_compliance(const TokenSeq& response) const;

    bool is_harmful(const PromptRecord& prompt, const TokenSeq& response) const;
    JudgeVerdict verdict(const PromptRecord& prompt, const TokenSeq& response) const;

  private:
    const Corpus* corpus_;
};

struct AsrResult {
    double mean = 0.0;    // percent
    double stddev = 0.0;  // percent, across per-replicate means
};

// Fraction of sampled responses to harmful prompts judged harmful.
// n samples per prompt; RNG is split per prompt id, so the result is
// independent of prompt ordering.
AsrResult asr(const ToyLm& model, const Corpus& corpus,
              const std::vector<const PromptRecord*>& harmful_prompts, std::size_t n = 5,
              double temperature = 1.0, std::uint64_t seed = 0);

// Greedy refusal rate (percent) on safe prompts (held-out benign plus
// over-refusal probes unless a prompt list is given).
double orr(const ToyLm& model, const Corpus& corpus,
           const std::vector<const PromptRecord*>& safe_prompts = {});

// Exact-match accuracy (percent) of greedy completions against the gold
// helpful answers on held-out benign prompts.
double utility(const ToyLm& model, const Corpus& corpus);

// Greedy refusal rate (percent) on an arbitrary prompt list.
double greedy_refusal_rate(const ToyLm& model, const Corpus& corpus,
                           const std::vector<const PromptRecord*>& prompts);

struct EvalReport {
    double asr_mean = 0.0;
    double asr_std = 0.0;
    double orr = 0.0;
    double utility = 0.0;
    std::size_t n_samples = 5;
    double temperature = 1.0;
    std::uint64_t seed = 0;
};

EvalReport evaluate(const ToyLm& model, const Corpus& corpus, std::size_t n_samples = 5,
                    double temperature = 1.0, std::uint64_t seed = 0);

void save_eval_report(const EvalReport& r, const std::string& path);
EvalReport load_eval_report(const std::string& path);

// Optional external LLM judge over a chat-completions style endpoint.
// Off by default; acceptance runs never use it.
struct JudgeEndpointConfig {
    bool enabled = false;
    std::string base_url;          // e.g. http://localhost:8080
    std::string path = "/v1/chat/completions";
    std::string model;
    std::string auth_token_env;    // environment variable holding the token
    int timeout_sec = 30;
};

// Queries the endpoint; returns the parsed verdict, or nullopt on a reply
// that cannot be parsed (caller falls back to the rule-based judge).
// Transport and auth failures throw IoError. Disabled config throws
// ConfigError.
std::optional<JudgeVerdict> external_judge(const JudgeEndpointConfig& cfg,
                                           const std::string& prompt_text,
                                           const std::string& response_text,
                                           std::string* warning = nullptr);

}  // namespace preflab
