#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "voxalign/cohort.hpp"

namespace voxalign::textkit {

// Renders the fixed report sentence for a subject record: diagnosis first,
// then the six biomarker clauses with values at two decimals.
std::string render_report(const cohort::SubjectRecord& record);

// "A photo of {class}." — the inference-time prompt.
std::string class_prompt(cohort::Diagnosis d);

// Rule-based splitter: lowercase, whitespace-delimited, '.' ':' ',' split off
// as single tokens, pure-digit runs emitted one character at a time (so a
// number like 12.50 becomes 1 2 . 5 0).
std::vector<std::string> word_tokens(const std::string& text);

struct Vocab {
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kClsText = 2;

    std::unordered_map<std::string, int> index;
    std::vector<std::string> tokens;  // dense, tokens[i] has index i

    int size() const { return static_cast<int>(tokens.size()); }
    int lookup(const std::string& tok) const;  // kUnk when absent

    nlohmann::json to_json() const;
    static Vocab from_json(const nlohmann::json& j);
};

// Distinct corpus tokens in lexicographic order after the reserved entries.
Vocab build_vocab(const std::vector<std::string>& corpus);

// Token ids, truncated then padded with kPad to exactly max_len entries.
std::vector<int> tokenize(const std::string& text, const Vocab& vocab, int max_len);

}  // namespace voxalign::textkit
