#pragma once

#include <string>
#include <vector>

#include "preflab/corpus.hpp"

namespace preflab {

// Thresholds for the structural heuristics; overridable from config.
struct AuditConfig {
    double prefix_share = 0.80;       // fraction sharing a leading n-gram
    std::size_t prefix_ngram = 3;     // length of that n-gram
    std::size_t overfit_min = 5;      // distinct prompts onto one refusal target
    double dispreferred_share = 0.50; // fraction of refusal dispreferreds
};

// One evidence span: a line of the audited JSONL file plus the text that
// triggered the heuristic.
struct EvidenceSpan {
    std::size_t line = 0;  // 1-based line in the dataset file
    std::string text;
};

struct StructuralFlag {
    std::string heuristic;  // compliance-prefix | persona-system |
                            // refuse-then-comply | overfit-refusal-stage |
                            // refusal-as-dispreferred
    bool fired = false;
    std::string detail;
    std::vector<EvidenceSpan> evidence;
};

struct AuditReport {
    std::string dataset_name;
    double content_flag_rate = 0.0;  // percent of records with harm-marker hits
    std::vector<EvidenceSpan> content_flags;
    std::vector<StructuralFlag> structural_flags;
    std::string verdict;  // clean | suspicious | disallowed-pattern

    bool fired(const std::string& heuristic) const;
};

// Lexicon scan of every text field against the harm-marker vocabulary.
AuditReport content_scan(const Dataset& ds, const Corpus& corpus);

// Deterministic intent heuristics over a whole dataset; fills the content
// fields too so the report stands alone.
AuditReport structural_audit(const Dataset& ds, const Corpus& corpus,
                             const AuditConfig& cfg = {});

void write_audit(const AuditReport& r, const std::string& path);

// Renders the fixed review template with every record of the sample inlined,
// for hand-off to an external reviewer.
std::string export_audit_prompt(const Dataset& sample, const Corpus& corpus);

}  // namespace preflab
