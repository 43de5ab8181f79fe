#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mcblab/corpus.hpp"

namespace mcb {

// Trigger phrases as token sequences. Pseudo triggers take precedence over
// pre/post triggers when they overlap.
struct TriggerLexicon {
    std::vector<std::vector<std::string>> pre_triggers;
    std::vector<std::vector<std::string>> post_triggers;
    std::vector<std::vector<std::string>> pseudo_triggers;

    static TriggerLexicon defaults();
    static TriggerLexicon load(const std::string& path);
    void save(const std::string& path) const;
};

struct NegationScope {
    std::size_t trigger_begin = 0, trigger_end = 0;  // token index range [begin, end)
    std::size_t scope_begin = 0, scope_end = 0;
    bool forward = true;
};

struct ConceptMention {
    std::size_t concept_index = 0;
    std::size_t token_begin = 0, token_end = 0;  // [begin, end)
    bool negated = false;
};

// All whole-word, case-insensitive occurrences of each concept name;
// multi-word names match as contiguous token sequences. `negated` is unset.
std::vector<ConceptMention> find_mentions(const Note& note, const ConceptVocabulary& vocab);

// Six-token scopes around each non-pseudo trigger, truncated at sentence
// breaks and at contrastive conjunctions (but, however, although, yet).
std::vector<NegationScope> find_scopes(const Note& note, const TriggerLexicon& lexicon);

// c_k = 1 iff at least one mention of concept k lies wholly outside all scopes.
std::vector<std::uint8_t> pseudo_label(const Note& note, const ConceptVocabulary& vocab,
                                       const TriggerLexicon& lexicon);

// (naive keyword activations - NegEx activations) / naive activations.
double correction_rate(const std::vector<const Note*>& sample, const ConceptVocabulary& vocab,
                       const TriggerLexicon& lexicon);

// Retain concepts whose NegEx-positive rate over a seeded train-split sample
// is at least min_fraction; original order preserved.
ConceptVocabulary concept_support_filter(const Dataset& dataset, const TriggerLexicon& lexicon,
                                         double min_fraction, std::size_t sample_n,
                                         std::uint64_t seed);

}  // namespace mcb
