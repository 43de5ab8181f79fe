#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace mcb {

struct ConceptVocabulary {
    std::vector<std::string> names;  // lowercase, unique, order is identity

    std::size_t size() const { return names.size(); }
};

struct LabelSpace {
    std::vector<std::string> codes;

    std::size_t size() const { return codes.size(); }
};

struct Token {
    std::string text;        // lowercased
    std::size_t char_start;  // offsets into the raw note text
    std::size_t char_end;
};

struct Note {
    std::string id;
    std::string text;
    std::vector<Token> tokens;
    std::vector<std::size_t> sentence_breaks;  // indices of sentence-ending tokens
    std::vector<std::uint8_t> true_concepts;   // length C
    std::vector<std::uint8_t> labels;          // length L
};

enum class Split : std::uint8_t { Train, Val, Test };

std::string split_name(Split s);
Split split_from_name(const std::string& s);

enum class MappingMode : std::uint8_t { Linear, Interaction };

struct GeneratorConfig {
    std::size_t concepts = 12;       // C
    std::size_t labels = 6;          // L
    std::size_t notes_n = 2000;
    MappingMode mapping_mode = MappingMode::Linear;
    double negation_rate = 0.15;
    double pseudo_negation_rate = 0.05;
    double label_noise = 0.0;
    double prevalence_decay = 0.96;  // geometric decay of concept marginals
    std::uint64_t seed = 42;
};

// The generator's causal concept -> label rule: y_j = 1 iff the weighted sum
// of its concept indicators reaches the threshold. In interaction mode the
// last label instead is the XOR of two designated concepts.
struct LabelRule {
    std::vector<std::size_t> concept_indices;  // 2..5 concepts
    std::vector<double> weights;
    double threshold = 0.0;
    bool is_xor = false;  // XOR of concept_indices[0], concept_indices[1]
};

struct GeneratorInfo {
    std::vector<LabelRule> rules;
    double realized_negated_share = 0.0;  // negated mentions / all mentioned (note, concept) pairs
    std::optional<std::size_t> xor_label;
};

struct Dataset {
    ConceptVocabulary vocabulary;
    LabelSpace label_space;
    std::vector<Note> notes;
    std::vector<Split> split_assignment;  // aligned to notes
    std::optional<GeneratorInfo> generator_info;

    std::vector<std::size_t> indices_of(Split s) const;
};

// Whitespace-and-punctuation tokenizer; lowercases, keeps punctuation tokens
// with offsets, treats the literal [MASK] as one token. Sentence breaks at
// '.', '!', '?'.
std::vector<Token> tokenize(const std::string& text);
std::vector<std::size_t> find_sentence_breaks(const std::vector<Token>& tokens);
void retokenize(Note& note);

// Evaluate the causal labeling function on a concept indicator vector.
std::vector<std::uint8_t> apply_label_rules(const std::vector<LabelRule>& rules,
                                            const std::vector<std::uint8_t>& concepts);

Dataset generate_corpus(const GeneratorConfig& config);

Dataset split_dataset(Dataset dataset, double r_train, double r_val, double r_test,
                      std::uint64_t seed);

void save_corpus(const Dataset& dataset, const std::string& path);
Dataset load_corpus(const std::string& path);

bool datasets_equal(const Dataset& a, const Dataset& b);

// Built-in clinical-style concept name pool (size 160).
const std::vector<std::string>& builtin_concept_names();

}  // namespace mcb
