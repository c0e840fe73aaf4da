#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "preflab/model.hpp"
#include "preflab/rng.hpp"

namespace preflab {

enum class Family { Benign, Harmful, OverrefusedBenign };
enum class Split { AlignTrain, FinetunePool, HeldoutHarmful, HeldoutBenign, OverrefusalProbe };

std::string to_string(Family f);
std::string to_string(Split s);
Family family_from_string(const std::string& s);
Split split_from_string(const std::string& s);

// Word-level vocabulary over the synthetic micro-world.
class Vocab {
  public:
    Vocab() = default;
    explicit Vocab(std::vector<std::string> words);

    int id(const std::string& word) const;
    const std::string& word(int id) const;
    std::size_t size() const { return words_.size(); }
    int eos() const { return eos_; }

    TokenSeq encode(const std::string& text) const;        // whitespace split
    std::string decode(const TokenSeq& tokens) const;      // space-joined

  private:
    std::vector<std::string> words_;
    std::map<std::string, int> index_;
    int eos_ = -1;
};

struct PromptRecord {
    std::string id;
    TokenSeq tokens;
    Family family = Family::Benign;
    Split split = Split::AlignTrain;
    // Template answers for this prompt. `answer_plain` is the gold helpful
    // answer; `answer_sure` is the compliance-prefixed form. For harmful
    // prompts these are hypothetical references used only by the analysis
    // modules, never by any dataset construction.
    TokenSeq answer_plain;
    TokenSeq answer_sure;
};

struct WorldSizes {
    std::size_t align_benign = 200;
    std::size_t align_harmful = 60;
    std::size_t overrefused_align = 20;
    std::size_t overrefused_probe = 20;
    std::size_t heldout_harmful = 60;
    std::size_t heldout_benign = 60;
    std::size_t finetune_pool = 20;
};

struct Corpus {
    std::uint64_t seed = 0;
    WorldSizes sizes;
    Vocab vocab;
    std::vector<PromptRecord> prompts;

    std::vector<TokenSeq> refusal_catalog;   // >= 10 surface forms, no trailing eos
    TokenSeq elicitation_q;                  // appended to prompts when eliciting y+
    TokenSeq compliance_prefix;              // "sure here is how"
    TokenSeq non_refusal_text;               // benign-but-unhelpful deflection
    TokenSeq aoa_system;                     // obedient-persona system message
    TokenSeq aoa_prefix;                     // obedience-affirming target prefix
    TokenSeq noice_transition;               // between refusal opener and answer
    std::vector<int> harm_lexicon;           // harm-marker token ids

    std::vector<const PromptRecord*> by_split(Split s) const;
    const PromptRecord* find(const std::string& id) const;
    // Fixed refusal response for a prompt (deterministic, catalog-weighted:
    // the canonical template dominates, mirroring how one surface form
    // dominates real refusals). Includes the trailing eos.
    TokenSeq refusal_for(const PromptRecord& p) const;
    TokenSeq with_eos(TokenSeq t) const;
};

Corpus gen_world(std::uint64_t seed, const WorldSizes& sizes = {});

// Hosted fine-tuning dataset carriers -------------------------------------

struct PreferencePair {
    std::string prompt_id;
    TokenSeq prompt;
    TokenSeq preferred;
    TokenSeq dispreferred;
    std::string provenance;
};

struct SftPair {
    std::string prompt_id;
    TokenSeq system;  // empty unless the construction injects a persona
    TokenSeq prompt;
    TokenSeq target;
    int stage = 0;
    std::string provenance;
};

struct Dataset {
    enum class Kind { Preference, Sft };
    Kind kind = Kind::Preference;
    std::string name;
    std::vector<PreferencePair> pairs;
    std::vector<SftPair> sft;
    std::size_t size() const { return kind == Kind::Preference ? pairs.size() : sft.size(); }
};

enum class DispreferredMode { SingleTemplate, TenVariants, NonRefusal };
enum class PreferredMode { Elicited, VanillaAligned };

// Preference-pair construction from the finetune pool: preferred = base
// model's greedy answer to the elicitation query, dispreferred = refusal.
// Prompts whose elicited answer is itself a refusal are skipped and replaced
// from the pool.
Dataset build_ours(const Corpus& corpus, const ToyLm& base, std::size_t n_pairs = 10,
                   DispreferredMode dmode = DispreferredMode::SingleTemplate,
                   std::size_t template_index = 0,
                   PreferredMode pmode = PreferredMode::Elicited);

Dataset build_indirect(const Corpus& corpus, std::size_t n = 10);
Dataset build_aoa(const Corpus& corpus, std::size_t n = 10);
Dataset build_tenbenign(const Corpus& corpus, std::size_t n = 10);
Dataset build_noice(const Corpus& corpus, std::size_t n = 10);

// Over-refusal reduction pairs: probe prompts the base model incorrectly
// refuses, helpful template answer preferred, the model's refusal dispreferred.
Dataset build_overrefusal_pairs(const Corpus& corpus, const ToyLm& base);

// JSONL serialization in the hosted-service schemas (preference records carry
// input.messages / preferred_output / non_preferred_output; SFT records carry
// a messages[] conversation). Round-trip is lossless.
void write_jsonl(const Dataset& ds, const Corpus& corpus, const std::string& path);
Dataset read_jsonl(const std::string& path, const Corpus& corpus);

void save_corpus(const Corpus& corpus, const std::string& path);
Corpus load_corpus(const std::string& path);
void write_manifest(const Corpus& corpus, const std::string& path);

}  // namespace preflab
