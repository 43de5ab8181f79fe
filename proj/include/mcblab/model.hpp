#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "mcblab/corpus.hpp"
#include "mcblab/negex.hpp"
#include "mcblab/nn.hpp"
#include "mcblab/optim.hpp"
#include "mcblab/tape.hpp"

namespace mcb {

struct EncoderConfig {
    std::size_t vocab_size = 0;
    std::size_t h = 64;
    std::size_t layers = 2;
    std::size_t heads = 4;
    std::size_t max_len = 128;  // including the CLS slot
};

enum class ModelKind : std::uint8_t { MCB, VCBM };
enum class Ablation : std::uint8_t { Full, NoAlign, NoCrossAttn };

std::string kind_name(ModelKind k);
ModelKind kind_from_name(const std::string& s);
std::string ablation_name(Ablation a);
Ablation ablation_from_name(const std::string& s);

struct TrainConfig {
    double lambda_diag = 2.0;
    double lambda_align = 0.5;
    double lambda_concept = 0.3;
    double focal_gamma = 2.0;
    double focal_alpha = 0.25;
    std::size_t epochs = 10;
    std::size_t batch_size = 16;
    AdamWHyper opt;
    double tau = 0.5;
    Ablation ablation = Ablation::Full;
    std::uint64_t seed = 42;
};

// Token id vocabulary built from the training split. Ids 0..3 are reserved.
class TokenVocab {
  public:
    static constexpr int kPad = 0, kCls = 1, kMask = 2, kUnk = 3;

    static TokenVocab build(const Dataset& dataset);
    static TokenVocab from_tokens(std::vector<std::string> tokens);

    int id_of(const std::string& token) const;
    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    // CLS-prefixed id sequence, truncated to max_len.
    std::vector<int> encode(const Note& note, std::size_t max_len, bool* truncated = nullptr) const;

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

struct ModelOutput {
    Array H;       // n x h
    Array p_t;     // h
    Array p_c;     // h (MCB; equals p_t under no_crossattn)
    Array g, h1, h2, u, z;  // gate pipeline intermediates (MCB)
    Array logits;  // L
    Array probs;   // sigmoid(logits)
    Array chat;    // C
};

class Model {
  public:
    ModelKind kind = ModelKind::MCB;
    EncoderConfig enc;
    std::size_t C = 0, L = 0;
    std::size_t gate_hidden = 0;  // d_g (MCB)
    Ablation ablation = Ablation::Full;
    double tau = 0.5;

    ConceptVocabulary concepts;
    LabelSpace labels;
    TokenVocab token_vocab;

    // Encoder.
    Parameter embed;  // vocab_size x h
    Parameter pos;    // max_len x h
    std::vector<EncoderBlockParams> blocks;

    // MCB head.
    Parameter e_c;  // C x h concept queries
    MhaParams concept_attn;
    Parameter gate_w1, gate_b1, gate_w2, gate_b2;  // W1: d_g x 2h, W2: h x d_g
    Parameter ln_gamma, ln_beta;
    Parameter w_d, b_d;  // MCB: L x h; VCBM: L x C
    Parameter w_c, b_c;  // C x h concept head

    static Model make(ModelKind kind, const EncoderConfig& enc, const ConceptVocabulary& concepts,
                      const LabelSpace& labels, const TokenVocab& vocab, Ablation ablation,
                      std::uint64_t seed);

    std::vector<Parameter*> parameters();

    struct GraphVars {
        Tape::Var H, p_t, p_c, g, h1, h2, u, z, logits, chat;
    };
    GraphVars build_graph(Tape& t, const std::vector<int>& ids);

    ModelOutput forward_ids(const std::vector<int>& ids);
    ModelOutput forward(const Note& note);
    std::vector<int> encode_note(const Note& note);

    // Gate -> bottleneck -> diagnosis from fixed (p_t, p_c); shares all head
    // parameters with build_graph. Used by the interpretability oracles.
    GraphVars build_head_graph(Tape& t, Tape::Var p_t, Tape::Var p_c);

    void save_checkpoint(const std::string& path) const;
    static Model load_checkpoint(const std::string& path);

  private:
    bool warned_truncation_ = false;
};

struct EpochStats {
    std::size_t epoch = 0;
    double loss_total = 0.0, loss_diag = 0.0, loss_align = 0.0, loss_concept = 0.0;
    double val_macro_f1 = 0.0, val_micro_f1 = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> curves;
    std::size_t best_epoch = 0;
    double best_val_macro_f1 = 0.0;
};

std::vector<std::vector<std::uint8_t>> compute_pseudo_labels(const Dataset& dataset,
                                                             const TriggerLexicon& lexicon);

// Mini-batch AdamW training with linear warmup/decay; returns per-epoch curves
// and leaves the model at the checkpoint with the best validation Macro-F1.
TrainResult train_model(Model& model, const Dataset& dataset,
                        const std::vector<std::vector<std::uint8_t>>& ctilde,
                        const TrainConfig& config);

// Joint objective on a single already-built graph.
struct LossVars {
    Tape::Var total, diag, align, concept_term;
};
LossVars joint_loss(Tape& t, const Model::GraphVars& gv, const std::vector<double>& y,
                    const std::vector<double>& ctilde, const TrainConfig& cfg, ModelKind kind);

}  // namespace mcb
