#include "mcblab/negex.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "mcblab/rng.hpp"

namespace mcb {

namespace {

std::vector<std::string> split_phrase(const std::string& phrase) {
    std::vector<std::string> out;
    std::istringstream ss(phrase);
    std::string tok;
    while (ss >> tok) out.push_back(tok);
    return out;
}

const std::vector<std::string> kContrastive = {"but", "however", "although", "yet"};

bool is_sentence_end(const std::string& t) { return t == "." || t == "!" || t == "?"; }

bool is_contrastive(const std::string& t) {
    return std::find(kContrastive.begin(), kContrastive.end(), t) != kContrastive.end();
}

// Longest trigger from `set` matching the token stream at position i; 0 if none.
std::size_t longest_match_at(const std::vector<Token>& tokens, std::size_t i,
                             const std::vector<std::vector<std::string>>& set) {
    std::size_t best = 0;
    for (const auto& phrase : set) {
        if (phrase.size() <= best) continue;
        if (i + phrase.size() > tokens.size()) continue;
        bool ok = true;
        for (std::size_t k = 0; k < phrase.size(); ++k) {
            if (tokens[i + k].text != phrase[k]) {
                ok = false;
                break;
            }
        }
        if (ok) best = phrase.size();
    }
    return best;
}

}  // namespace

TriggerLexicon TriggerLexicon::defaults() {
    TriggerLexicon lex;
    for (const char* p : {"no", "not", "without", "denies", "absent", "negative for",
                          "no evidence of", "free of", "rules out"})
        lex.pre_triggers.push_back(split_phrase(p));
    for (const char* p : {"was ruled out", "were negative", "not present"})
        lex.post_triggers.push_back(split_phrase(p));
    for (const char* p : {"not only", "no increase", "without difficulty"})
        lex.pseudo_triggers.push_back(split_phrase(p));
    return lex;
}

TriggerLexicon TriggerLexicon::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open lexicon: " + path);
    TriggerLexicon lex;
    std::vector<std::vector<std::string>>* section = nullptr;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        // trim
        std::size_t b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        std::size_t e = line.find_last_not_of(" \t\r");
        line = line.substr(b, e - b + 1);
        if (line == "[pre]") section = &lex.pre_triggers;
        else if (line == "[post]") section = &lex.post_triggers;
        else if (line == "[pseudo]") section = &lex.pseudo_triggers;
        else if (section) section->push_back(split_phrase(line));
        else throw std::runtime_error("lexicon parse error at line " + std::to_string(lineno) +
                                      ": trigger before any section header");
    }
    if (lex.pre_triggers.empty() || lex.post_triggers.empty())
        throw std::runtime_error("lexicon must contain non-empty [pre] and [post] sections");
    return lex;
}

void TriggerLexicon::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    auto dump = [&](const char* name, const std::vector<std::vector<std::string>>& set) {
        out << "[" << name << "]\n";
        for (const auto& phrase : set) {
            for (std::size_t i = 0; i < phrase.size(); ++i) {
                if (i) out << " ";
                out << phrase[i];
            }
            out << "\n";
        }
    };
    out << "# negation trigger lexicon\n";
    dump("pre", pre_triggers);
    dump("post", post_triggers);
    dump("pseudo", pseudo_triggers);
}

std::vector<ConceptMention> find_mentions(const Note& note, const ConceptVocabulary& vocab) {
    std::vector<ConceptMention> mentions;
    const auto& tokens = note.tokens;
    for (std::size_t c = 0; c < vocab.names.size(); ++c) {
        std::vector<std::string> name_tokens;
        for (const Token& t : tokenize(vocab.names[c])) name_tokens.push_back(t.text);
        if (name_tokens.empty()) continue;
        for (std::size_t i = 0; i + name_tokens.size() <= tokens.size(); ++i) {
            bool ok = true;
            for (std::size_t k = 0; k < name_tokens.size(); ++k) {
                if (tokens[i + k].text != name_tokens[k]) {
                    ok = false;
                    break;
                }
            }
            if (ok) mentions.push_back({c, i, i + name_tokens.size(), false});
        }
    }
    return mentions;
}

std::vector<NegationScope> find_scopes(const Note& note, const TriggerLexicon& lexicon) {
    const auto& tokens = note.tokens;
    std::size_t n = tokens.size();

    // Pseudo-trigger spans, resolved first (longest match, then skip past).
    std::vector<std::pair<std::size_t, std::size_t>> pseudo_spans;
    for (std::size_t i = 0; i < n;) {
        std::size_t len = longest_match_at(tokens, i, lexicon.pseudo_triggers);
        if (len > 0) {
            pseudo_spans.emplace_back(i, i + len);
            i += len;
        } else {
            ++i;
        }
    }
    auto overlaps_pseudo = [&](std::size_t b, std::size_t e) {
        for (auto [pb, pe] : pseudo_spans)
            if (b < pe && pb < e) return true;
        return false;
    };

    constexpr std::size_t kScopeLen = 6;
    std::vector<NegationScope> scopes;
    for (std::size_t i = 0; i < n;) {
        std::size_t pre_len = longest_match_at(tokens, i, lexicon.pre_triggers);
        std::size_t post_len = longest_match_at(tokens, i, lexicon.post_triggers);
        std::size_t len = std::max(pre_len, post_len);
        if (len == 0 || overlaps_pseudo(i, i + len)) {
            ++i;
            continue;
        }
        bool forward = pre_len >= post_len;  // longest match wins; pre on ties
        NegationScope sc;
        sc.trigger_begin = i;
        sc.trigger_end = i + len;
        sc.forward = forward;
        if (forward) {
            std::size_t j = sc.trigger_end;
            std::size_t taken = 0;
            while (j < n && taken < kScopeLen && !is_sentence_end(tokens[j].text) &&
                   !is_contrastive(tokens[j].text)) {
                ++j;
                ++taken;
            }
            sc.scope_begin = sc.trigger_end;
            sc.scope_end = j;
        } else {
            std::size_t j = sc.trigger_begin;
            std::size_t taken = 0;
            while (j > 0 && taken < kScopeLen && !is_sentence_end(tokens[j - 1].text) &&
                   !is_contrastive(tokens[j - 1].text)) {
                --j;
                ++taken;
            }
            sc.scope_begin = j;
            sc.scope_end = sc.trigger_begin;
        }
        if (sc.scope_end > sc.scope_begin) scopes.push_back(sc);
        i += len;
    }
    return scopes;
}

std::vector<std::uint8_t> pseudo_label(const Note& note, const ConceptVocabulary& vocab,
                                       const TriggerLexicon& lexicon) {
    std::vector<std::uint8_t> c(vocab.size(), 0);
    auto mentions = find_mentions(note, vocab);
    auto scopes = find_scopes(note, lexicon);
    for (const ConceptMention& m : mentions) {
        bool negated = false;
        for (const NegationScope& sc : scopes) {
            // Conservative: a mention is negated if any of its tokens falls in a scope.
            if (m.token_begin < sc.scope_end && sc.scope_begin < m.token_end) {
                negated = true;
                break;
            }
        }
        if (!negated) c[m.concept_index] = 1;
    }
    return c;
}

double correction_rate(const std::vector<const Note*>& sample, const ConceptVocabulary& vocab,
                       const TriggerLexicon& lexicon) {
    if (sample.empty()) throw std::invalid_argument("correction_rate: empty sample");
    std::size_t naive = 0, negexed = 0;
    for (const Note* note : sample) {
        auto mentions = find_mentions(*note, vocab);
        std::vector<std::uint8_t> mentioned(vocab.size(), 0);
        for (const ConceptMention& m : mentions) mentioned[m.concept_index] = 1;
        auto c = pseudo_label(*note, vocab, lexicon);
        for (std::size_t k = 0; k < vocab.size(); ++k) {
            naive += mentioned[k];
            negexed += c[k];
        }
    }
    if (naive == 0) throw std::runtime_error("correction_rate: zero naive activations");
    return static_cast<double>(naive - negexed) / static_cast<double>(naive);
}

ConceptVocabulary concept_support_filter(const Dataset& dataset, const TriggerLexicon& lexicon,
                                         double min_fraction, std::size_t sample_n,
                                         std::uint64_t seed) {
    if (min_fraction <= 0.0 || min_fraction >= 1.0)
        throw std::invalid_argument("concept_support_filter: min_fraction must be in (0,1)");
    auto train = dataset.indices_of(Split::Train);
    if (sample_n > train.size())
        throw std::invalid_argument("concept_support_filter: sample_n exceeds train size");
    Rng rng(mix_seed(seed, 0xF117E7));
    rng.shuffle(train);
    train.resize(sample_n);

    std::size_t C = dataset.vocabulary.size();
    std::vector<std::size_t> positive(C, 0);
    for (std::size_t i : train) {
        auto c = pseudo_label(dataset.notes[i], dataset.vocabulary, lexicon);
        for (std::size_t k = 0; k < C; ++k) positive[k] += c[k];
    }
    ConceptVocabulary out;
    for (std::size_t k = 0; k < C; ++k) {
        double rate = static_cast<double>(positive[k]) / static_cast<double>(sample_n);
        if (rate >= min_fraction) out.names.push_back(dataset.vocabulary.names[k]);
    }
    if (out.names.empty())
        throw std::runtime_error("concept_support_filter: no concept meets min_fraction");
    return out;
}

}  // namespace mcb
