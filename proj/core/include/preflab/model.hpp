#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "preflab/param_store.hpp"
#include "preflab/rng.hpp"
#include "preflab/tape.hpp"

namespace preflab {

using TokenSeq = std::vector<int>;

struct ModelConfig {
    std::size_t vocab_size = 128;
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t d_ff = 128;
    std::size_t max_len = 64;

    void validate() const {
        if (d_model % n_heads != 0)
            throw ConfigError("d_model must be divisible by n_heads");
        if (vocab_size == 0 || n_layers == 0 || max_len == 0)
            throw ConfigError("model dimensions must be positive");
    }
};

struct LoraConfig {
    std::size_t rank = 4;
    double alpha = 8.0;
    std::vector<std::string> targets;  // weight-matrix parameter names
};

// Names of the weight matrices the adapter attaches to by default:
// attention projections, MLP matrices and the output head.
std::vector<std::string> default_lora_targets(const ModelConfig& cfg);

// Tiny decoder-only causal transformer. Pre-LN blocks, learned positional
// embeddings, ReLU MLP, untied output head.
class ToyLm {
  public:
    ModelConfig config;
    ParamStore params;
    std::optional<LoraConfig> adapter;

    static ToyLm init(const ModelConfig& cfg, std::uint64_t seed);

    // Forward pass recorded on `tape`; `trainable` controls whether parameter
    // leaves receive gradients. In adapter mode only the LoRA factors do.
    struct Graph {
        Value logits;
        std::vector<std::pair<std::string, Value>> leaves;  // trainable leaves
    };
    Graph forward(Tape& tape, const TokenSeq& tokens, bool trainable) const;

    // Convenience: logits as a plain tensor, no gradient bookkeeping.
    Tensor logits(const TokenSeq& tokens) const;

    // Sum of response-token conditional log-probabilities given the prompt.
    // Prompt positions are masked out; the response must be non-empty.
    struct ScoredLogprob {
        Value value;
        std::vector<std::pair<std::string, Value>> leaves;
    };
    ScoredLogprob logprob_graph(Tape& tape, const TokenSeq& prompt, const TokenSeq& response,
                                bool trainable) const;
    double logprob(const TokenSeq& prompt, const TokenSeq& response) const;

    // Ancestral sampling; temperature 0 is greedy argmax with lowest-id
    // tie-break. Stops at `eos_id` (included in the output) or `max_new`.
    TokenSeq sample(const TokenSeq& prompt, double temperature, std::size_t max_new, Rng& rng,
                    int eos_id) const;
    TokenSeq greedy(const TokenSeq& prompt, std::size_t max_new, int eos_id) const;

    void attach_adapter(const LoraConfig& cfg, std::uint64_t seed);
    void merge_adapter();

    // Copies tape gradients of the graph's leaves into params.grads.
    void collect_grads(const Tape& tape, const std::vector<std::pair<std::string, Value>>& leaves);

  private:
    Value weight(Tape& tape, const std::string& name, bool trainable,
                 std::vector<std::pair<std::string, Value>>& leaves) const;
};

}  // namespace preflab
