#include "voxalign/textkit.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <set>

#include "voxalign/errors.hpp"

namespace voxalign::textkit {

namespace {

std::string fmt2(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

constexpr std::array<const char*, cohort::kNumBiomarkers> kClauseNames = {
    "Hippocampal volume", "Ventricular size",        "Whole brain volume",
    "Entorhinal cortex volume", "Fusiform gyrus volume", "Middle temporal gyrus volume"};

bool is_punct(char c) { return c == '.' || c == ':' || c == ','; }
bool is_digit(char c) { return c >= '0' && c <= '9'; }

}  // namespace

std::string render_report(const cohort::SubjectRecord& record) {
    std::string s = "A photo of " + cohort::to_string(record.diagnosis) +
                    ". The MRI scan reveals the following biomarkers: ";
    for (int k = 0; k < cohort::kNumBiomarkers; ++k) {
        s += kClauseNames[static_cast<size_t>(k)];
        s += ": ";
        s += fmt2(record.biomarkers[static_cast<size_t>(k)]);
        s += " mm3";
        s += (k + 1 < cohort::kNumBiomarkers) ? ", " : ".";
    }
    return s;
}

std::string class_prompt(cohort::Diagnosis d) {
    return "A photo of " + cohort::to_string(d) + ".";
}

std::vector<std::string> word_tokens(const std::string& text) {
    std::string lower;
    lower.reserve(text.size());
    for (char c : text) lower += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));

    std::vector<std::string> chunks;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty()) {
            chunks.push_back(cur);
            cur.clear();
        }
    };
    for (char c : lower) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            flush();
        } else if (is_punct(c)) {
            flush();
            chunks.emplace_back(1, c);
        } else {
            cur += c;
        }
    }
    flush();

    std::vector<std::string> out;
    out.reserve(chunks.size());
    for (const std::string& ch : chunks) {
        bool all_digits = !ch.empty() && std::all_of(ch.begin(), ch.end(), is_digit);
        if (all_digits && ch.size() > 1) {
            for (char c : ch) out.emplace_back(1, c);
        } else {
            out.push_back(ch);
        }
    }
    return out;
}

int Vocab::lookup(const std::string& tok) const {
    auto it = index.find(tok);
    return it == index.end() ? kUnk : it->second;
}

nlohmann::json Vocab::to_json() const {
    nlohmann::json j;
    for (int i = 0; i < size(); ++i) j[tokens[static_cast<size_t>(i)]] = i;
    return j;
}

Vocab Vocab::from_json(const nlohmann::json& j) {
    Vocab v;
    v.tokens.resize(j.size());
    for (auto it = j.begin(); it != j.end(); ++it) {
        int idx = it.value().get<int>();
        if (idx < 0 || idx >= static_cast<int>(j.size()))
            throw InvalidArgument("vocab file: index out of range");
        v.tokens[static_cast<size_t>(idx)] = it.key();
        v.index[it.key()] = idx;
    }
    if (v.size() < 3 || v.tokens[0] != "[PAD]" || v.tokens[1] != "[UNK]" || v.tokens[2] != "[CLS_TEXT]")
        throw InvalidArgument("vocab file: reserved tokens missing or misplaced");
    return v;
}

Vocab build_vocab(const std::vector<std::string>& corpus) {
    if (corpus.empty()) throw InvalidArgument("build_vocab: empty corpus");
    std::set<std::string> distinct;
    for (const std::string& text : corpus)
        for (std::string& tok : word_tokens(text)) distinct.insert(std::move(tok));
    Vocab v;
    v.tokens = {"[PAD]", "[UNK]", "[CLS_TEXT]"};
    for (const std::string& tok : distinct) v.tokens.push_back(tok);  // std::set is sorted
    for (int i = 0; i < v.size(); ++i) v.index[v.tokens[static_cast<size_t>(i)]] = i;
    return v;
}

std::vector<int> tokenize(const std::string& text, const Vocab& vocab, int max_len) {
    if (max_len < 0) throw InvalidArgument("tokenize: negative max length");
    std::vector<int> ids;
    ids.reserve(static_cast<size_t>(max_len));
    for (const std::string& tok : word_tokens(text)) {
        if (static_cast<int>(ids.size()) == max_len) break;
        ids.push_back(vocab.lookup(tok));
    }
    ids.resize(static_cast<size_t>(max_len), Vocab::kPad);
    return ids;
}

}  // namespace voxalign::textkit
