#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "mcblab/array.hpp"

namespace mcb {

// Model outputs and references for one evaluation split, eval at a fixed
// global threshold tau. Rows are samples; decisions[i,j] = 1[scores[i,j] > tau].
struct PredictionSet {
    double tau = 0.5;
    std::vector<std::string> ids;  // note ids, size N
    Array scores;                  // N x L probabilities
    Array decisions;               // N x L binary
    Array labels;                  // N x L binary ground truth
    Array chat;                    // N x C concept activations
    Array ctilde;                  // N x C concept pseudo-labels

    void init(std::size_t n, std::size_t l, std::size_t c);
    std::size_t n_samples() const { return scores.shape[0]; }
    std::size_t n_labels() const { return scores.shape[1]; }
    std::size_t n_concepts() const { return chat.shape[1]; }

    // Recompute decisions from scores at the stored tau.
    void threshold();

    void save(const std::string& path) const;
    static PredictionSet load(const std::string& path);
};

struct F1Result {
    double macro = 0.0;
    double micro = 0.0;
    std::vector<double> per_label;
};

struct AucResult {
    double macro = 0.0;
    double micro = 0.0;
    std::vector<std::size_t> skipped_labels;  // no positives or no negatives
};

struct TopKResult {
    std::size_t k = 0;
    double precision = 0.0;
    double recall = 0.0;
    std::size_t recall_samples = 0;  // samples with >= 1 true label
};

struct PrecisionRecall {
    double macro_p = 0.0, macro_r = 0.0;
    double micro_p = 0.0, micro_r = 0.0;
};

struct LongtailBin {
    std::string name;
    std::vector<std::size_t> label_indices;
    double macro_f1 = 0.0;
};

F1Result f1_scores(const PredictionSet& pred);
AucResult auc_scores(const PredictionSet& pred);
std::vector<TopKResult> topk_metrics(const PredictionSet& pred,
                                     const std::vector<std::size_t>& ks);
PrecisionRecall precision_recall_decomposition(const PredictionSet& pred);

// Sort labels by train positive count descending (ties by index), partition
// into bins of the given sizes (must sum to L), macro-F1 within each bin.
std::vector<LongtailBin> longtail_binned_f1(const PredictionSet& pred,
                                            const std::vector<std::size_t>& train_label_counts,
                                            const std::vector<std::size_t>& bin_sizes);

// Proportional HEAD/MID/TAIL split for small label spaces (16:16:18 shape).
std::vector<std::size_t> default_bin_sizes(std::size_t n_labels);

}  // namespace mcb
