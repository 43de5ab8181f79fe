#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mcblab/metrics.hpp"
#include "mcblab/model.hpp"
#include "mcblab/stats.hpp"

namespace mcb {

struct TopCEntry {
    std::size_t concept_index = 0;
    double r = 0.0;  // Pearson correlation on the training split
};

struct TopCMap {
    std::size_t k = 5;
    std::vector<std::vector<TopCEntry>> per_label;  // L entries of size min(k, C)
};

// Per-label top-k concepts by Pearson correlation between pseudo-label
// column c and label column j. Zero-variance columns get r = 0; ties break
// toward the lower concept index.
TopCMap build_topc(const Array& ctilde, const Array& labels, std::size_t k = 5);

struct CstprResult {
    double macro = 0.0;
    std::vector<double> per_label;               // -1 for labels with no positives
    std::vector<std::size_t> skipped_labels;     // zero-positive labels
};

// Concept-supported true-positive rate: share of positives that are both
// predicted and backed by an active (> 0.5) top concept that the
// pseudo-labeler also marked present.
CstprResult cstpr(const PredictionSet& pred, const TopCMap& topc);

struct CimPair {
    std::size_t concept_index = 0;
    std::size_t label_index = 0;
    double value = 0.0;
    std::size_t support = 0;  // |copos(c, j)|
};

struct CimResult {
    std::vector<CimPair> pairs;
    double aggregate = 0.0;
};

// Concept influence at the diagnosis-head input surface (p_c for the gated
// model, c_hat for the bottleneck baseline), averaged over co-positive
// samples. Closed-form gradients; no autodiff at eval time.
CimResult cim_head(Model& model, const PredictionSet& pred, const Dataset& dataset,
                   const TopCMap& topc, bool full_cross_product = false);

// Same protocol at the shared p_t surface (gate-input path only for the
// gated model; through the sigmoid bottleneck for the baseline).
CimResult cim_common_surface(Model& model, const PredictionSet& pred, const Dataset& dataset,
                             const TopCMap& topc, bool full_cross_product = false);

// Closed-form gradient rows for one sample, all labels at once (L x h for
// the head surface of the gated model, L x C for the baseline; L x h at the
// common surface). Exposed for the oracle tests.
Array cim_head_gradients(const Model& model, const ModelOutput& out);
Array cim_common_surface_gradients(const Model& model, const ModelOutput& out);

struct CcrPair {
    std::size_t concept_index = 0;
    std::size_t label_index = 0;
    double value = 0.0;
    std::size_t support = 0;  // denominator count
};

struct CcrResult {
    std::vector<CcrPair> pairs;
    double aggregate = 0.0;
};

// Concept-conditional recall of label j on samples where concept c was
// pseudo-labeled present, over (j, c in TopC(j)) pairs with support.
CcrResult ccr(const PredictionSet& pred, const TopCMap& topc);

struct InterventionRecord {
    std::string note_id;
    std::size_t row = 0;          // row in the prediction set
    std::size_t label = 0;        // target label j
    std::vector<std::pair<std::size_t, std::size_t>> masked_spans;  // [begin, end) token spans
    double p_before = 0.0;
    double p_after = 0.0;
    double target_drop = 0.0;
    double control_drop = 0.0;
    bool valid = false;
};

struct InterventionSummary {
    std::vector<InterventionRecord> records;
    std::size_t n_valid = 0;
    double mean_target_drop = 0.0;
    double mean_control_drop = 0.0;
    double mean_difference = 0.0;
    CiResult difference_ci;  // bootstrap over per-pair differences
    std::size_t wins = 0;    // pairs with target_drop > control_drop
    std::size_t ties = 0;    // excluded from the sign-test trials
    double sign_test_p = 1.0;
};

// Mask every whole-word occurrence of the target label's top concept names
// (polarity ignored), re-run the model, and compare the target probability
// drop against the mean drop of the note's other positive labels.
InterventionSummary mask_intervention(Model& model, const PredictionSet& pred,
                                      const Dataset& dataset, const TopCMap& topc,
                                      std::size_t n_pairs, std::uint64_t seed,
                                      std::size_t bootstrap_b = 1000);

// Whole-word, case-insensitive character matches of `phrase` in `note.text`,
// mapped to token index spans. Exposed for tests.
std::vector<std::pair<std::size_t, std::size_t>> match_phrase_token_spans(const Note& note,
                                                                          const std::string& phrase);

}  // namespace mcb
