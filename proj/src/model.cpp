#include "mcblab/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <stdexcept>

#include "mcblab/metrics.hpp"
#include "json.hpp"

namespace mcb {

using nlohmann::json;

std::string kind_name(ModelKind k) { return k == ModelKind::MCB ? "mcb" : "vcbm"; }

ModelKind kind_from_name(const std::string& s) {
    if (s == "mcb") return ModelKind::MCB;
    if (s == "vcbm") return ModelKind::VCBM;
    throw std::runtime_error("unknown model kind: " + s);
}

std::string ablation_name(Ablation a) {
    switch (a) {
        case Ablation::Full: return "full";
        case Ablation::NoAlign: return "no_align";
        default: return "no_crossattn";
    }
}

Ablation ablation_from_name(const std::string& s) {
    if (s == "full") return Ablation::Full;
    if (s == "no_align") return Ablation::NoAlign;
    if (s == "no_crossattn") return Ablation::NoCrossAttn;
    throw std::runtime_error("unknown ablation: " + s);
}

TokenVocab TokenVocab::from_tokens(std::vector<std::string> tokens) {
    TokenVocab v;
    v.tokens_ = std::move(tokens);
    for (std::size_t i = 0; i < v.tokens_.size(); ++i)
        v.index_[v.tokens_[i]] = static_cast<int>(i);
    return v;
}

TokenVocab TokenVocab::build(const Dataset& dataset) {
    // Frequency over the training split, ties broken lexicographically.
    std::map<std::string, std::size_t> counts;
    for (std::size_t i : dataset.indices_of(Split::Train))
        for (const Token& t : dataset.notes[i].tokens) ++counts[t.text];
    std::vector<std::pair<std::string, std::size_t>> items(counts.begin(), counts.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::vector<std::string> tokens = {"[pad]", "[cls]", "[mask]", "[unk]"};
    for (const auto& [tok, cnt] : items)
        if (tok != "[mask]") tokens.push_back(tok);
    return from_tokens(std::move(tokens));
}

int TokenVocab::id_of(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
}

std::vector<int> TokenVocab::encode(const Note& note, std::size_t max_len, bool* truncated) const {
    std::vector<int> ids;
    ids.reserve(std::min(note.tokens.size() + 1, max_len));
    ids.push_back(kCls);
    bool trunc = false;
    for (const Token& t : note.tokens) {
        if (ids.size() >= max_len) {
            trunc = true;
            break;
        }
        ids.push_back(id_of(t.text));
    }
    if (truncated) *truncated = trunc;
    return ids;
}

Model Model::make(ModelKind kind, const EncoderConfig& enc, const ConceptVocabulary& concepts,
                  const LabelSpace& labels, const TokenVocab& vocab, Ablation ablation,
                  std::uint64_t seed) {
    if (enc.h % enc.heads != 0) throw std::invalid_argument("Model: h must be divisible by heads");
    if (enc.max_len < 2) throw std::invalid_argument("Model: max_len must be at least 2");
    Model m;
    m.kind = kind;
    m.enc = enc;
    m.enc.vocab_size = vocab.size();
    m.C = concepts.size();
    m.L = labels.size();
    m.gate_hidden = enc.h;  // d_g defaults to h
    m.ablation = ablation;
    m.concepts = concepts;
    m.labels = labels;
    m.token_vocab = vocab;

    Rng rng(mix_seed(seed, 0x90DE1));
    std::size_t h = enc.h;
    m.embed = Parameter("encoder.embed", init_uniform({m.enc.vocab_size, h}, h, rng));
    m.pos = Parameter("encoder.pos", init_uniform({enc.max_len, h}, h, rng));
    for (std::size_t l = 0; l < enc.layers; ++l)
        m.blocks.push_back(make_encoder_block("encoder.block" + std::to_string(l), h, rng));

    Array ones({h});
    ones.fill(1.0);
    if (kind == ModelKind::MCB) {
        // Concept queries seeded per concept name.
        Array ec({m.C, h});
        double bound = 1.0 / std::sqrt(static_cast<double>(h));
        for (std::size_t k = 0; k < m.C; ++k) {
            Rng crng(fnv1a(concepts.names[k]));
            for (std::size_t j = 0; j < h; ++j) ec.at(k, j) = crng.uniform(-bound, bound);
        }
        m.e_c = Parameter("mcb.concept_queries", ec);
        m.concept_attn = make_mha_params("mcb.concept_attn", h, rng);
        m.gate_w1 = Parameter("mcb.gate.w1", init_uniform({m.gate_hidden, 2 * h}, 2 * h, rng));
        m.gate_b1 = Parameter("mcb.gate.b1", Array::zeros({m.gate_hidden}));
        m.gate_w2 = Parameter("mcb.gate.w2", init_uniform({h, m.gate_hidden}, m.gate_hidden, rng));
        m.gate_b2 = Parameter("mcb.gate.b2", Array::zeros({h}));
        m.ln_gamma = Parameter("mcb.ln.gamma", ones);
        m.ln_beta = Parameter("mcb.ln.beta", Array::zeros({h}));
        m.w_d = Parameter("head.diag.w", init_uniform({m.L, h}, h, rng));
        m.b_d = Parameter("head.diag.b", Array::zeros({m.L}));
        m.w_c = Parameter("head.concept.w", init_uniform({m.C, h}, h, rng));
        m.b_c = Parameter("head.concept.b", Array::zeros({m.C}));
    } else {
        m.w_c = Parameter("head.concept.w", init_uniform({m.C, h}, h, rng));
        m.b_c = Parameter("head.concept.b", Array::zeros({m.C}));
        m.w_d = Parameter("head.diag.w", init_uniform({m.L, m.C}, m.C, rng));
        m.b_d = Parameter("head.diag.b", Array::zeros({m.L}));
    }
    return m;
}

std::vector<Parameter*> Model::parameters() {
    std::vector<Parameter*> out = {&embed, &pos};
    for (auto& blk : blocks)
        for (Parameter* p : blk.all()) out.push_back(p);
    if (kind == ModelKind::MCB) {
        out.push_back(&e_c);
        for (Parameter* p : concept_attn.all()) out.push_back(p);
        for (Parameter* p : {&gate_w1, &gate_b1, &gate_w2, &gate_b2, &ln_gamma, &ln_beta})
            out.push_back(p);
    }
    for (Parameter* p : {&w_d, &b_d, &w_c, &b_c}) out.push_back(p);
    return out;
}

std::vector<int> Model::encode_note(const Note& note) {
    bool truncated = false;
    auto ids = token_vocab.encode(note, enc.max_len, &truncated);
    if (truncated && !warned_truncation_) {
        std::cerr << "warning: note " << note.id << " exceeds max_len " << enc.max_len
                  << ", truncating (further truncations not reported)\n";
        warned_truncation_ = true;
    }
    return ids;
}

Model::GraphVars Model::build_graph(Tape& t, const std::vector<int>& ids) {
    GraphVars gv{};
    std::size_t n = ids.size();
    Tape::Var emb_p = t.param(embed);
    Tape::Var x = t.embedding(emb_p, ids);
    // embedding() over row indices doubles as a row gather for the learned
    // position table, so gradients land on the used rows only.
    Tape::Var pos_p = t.param(pos);
    std::vector<int> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i] = static_cast<int>(i);
    x = t.add(x, t.embedding(pos_p, rows));
    for (auto& blk : blocks) x = encoder_block_forward(t, x, blk, enc.heads, kLayerNormEps);
    gv.H = x;
    gv.p_t = t.row(x, 0);

    // Concept head (shared by both model kinds).
    Tape::Var wc = t.param(w_c), bc = t.param(b_c);
    gv.chat = t.sigmoid(t.add(t.matvec(wc, gv.p_t), bc));

    if (kind == ModelKind::VCBM) {
        Tape::Var wd = t.param(w_d), bd = t.param(b_d);
        gv.logits = t.add(t.matvec(wd, gv.chat), bd);
        gv.p_c = gv.p_t;
        return gv;
    }

    if (ablation == Ablation::NoCrossAttn) {
        gv.p_c = gv.p_t;
    } else {
        Tape::Var ec = t.param(e_c);
        Tape::Var zc = mha_forward(t, ec, gv.H, gv.H, concept_attn, enc.heads);
        gv.p_c = t.mean_rows(zc);
    }

    GraphVars head = build_head_graph(t, gv.p_t, gv.p_c);
    gv.g = head.g;
    gv.h1 = head.h1;
    gv.h2 = head.h2;
    gv.u = head.u;
    gv.z = head.z;
    gv.logits = head.logits;
    return gv;
}

Model::GraphVars Model::build_head_graph(Tape& t, Tape::Var p_t, Tape::Var p_c) {
    GraphVars gv{};
    gv.p_t = p_t;
    gv.p_c = p_c;
    if (kind == ModelKind::VCBM) {
        Tape::Var wc = t.param(w_c), bc = t.param(b_c);
        gv.chat = t.sigmoid(t.add(t.matvec(wc, p_t), bc));
        Tape::Var wd = t.param(w_d), bd = t.param(b_d);
        gv.logits = t.add(t.matvec(wd, gv.chat), bd);
        return gv;
    }
    Tape::Var w1 = t.param(gate_w1), b1 = t.param(gate_b1);
    Tape::Var w2 = t.param(gate_w2), b2 = t.param(gate_b2);
    Tape::Var cat = t.concat_vec(p_t, p_c);
    gv.h1 = t.add(t.matvec(w1, cat), b1);
    gv.h2 = t.add(t.matvec(w2, t.relu(gv.h1)), b2);
    gv.g = t.sigmoid(gv.h2);
    gv.u = t.mul(gv.g, p_c);
    Tape::Var lng = t.param(ln_gamma), lnb = t.param(ln_beta);
    gv.z = t.layer_norm_rows(gv.u, lng, lnb, kLayerNormEps);
    Tape::Var wd = t.param(w_d), bd = t.param(b_d);
    gv.logits = t.add(t.matvec(wd, gv.z), bd);
    return gv;
}

ModelOutput Model::forward_ids(const std::vector<int>& ids) {
    Tape t;
    GraphVars gv = build_graph(t, ids);
    ModelOutput out;
    out.H = t.value(gv.H);
    out.p_t = t.value(gv.p_t);
    out.p_c = t.value(gv.p_c);
    if (kind == ModelKind::MCB) {
        out.g = t.value(gv.g);
        out.h1 = t.value(gv.h1);
        out.h2 = t.value(gv.h2);
        out.u = t.value(gv.u);
        out.z = t.value(gv.z);
    }
    out.logits = t.value(gv.logits);
    out.chat = t.value(gv.chat);
    out.probs = out.logits;
    for (double& x : out.probs.v) x = 1.0 / (1.0 + std::exp(-x));
    return out;
}

ModelOutput Model::forward(const Note& note) { return forward_ids(encode_note(note)); }

LossVars joint_loss(Tape& t, const Model::GraphVars& gv, const std::vector<double>& y,
                    const std::vector<double>& ctilde, const TrainConfig& cfg, ModelKind kind) {
    LossVars lv{};
    double lam_align = cfg.ablation == Ablation::NoAlign ? 0.0 : cfg.lambda_align;
    if (cfg.lambda_diag < 0 || lam_align < 0 || cfg.lambda_concept < 0)
        throw std::invalid_argument("joint_loss: lambda weights must be non-negative");
    lv.diag = t.focal_loss(gv.logits, y, cfg.focal_gamma, cfg.focal_alpha);
    lv.concept_term = t.bce_loss(gv.chat, ctilde);
    if (kind == ModelKind::MCB) {
        lv.align = t.cosine_align_loss(gv.p_t, gv.p_c);
        lv.total = t.weighted_sum({lv.diag, lv.align, lv.concept_term},
                                  {cfg.lambda_diag, lam_align, cfg.lambda_concept});
    } else {
        lv.align = t.constant(Array::scalar(0.0));
        lv.total = t.weighted_sum({lv.diag, lv.concept_term}, {cfg.lambda_diag, cfg.lambda_concept});
    }
    return lv;
}

std::vector<std::vector<std::uint8_t>> compute_pseudo_labels(const Dataset& dataset,
                                                             const TriggerLexicon& lexicon) {
    std::vector<std::vector<std::uint8_t>> out;
    out.reserve(dataset.notes.size());
    for (const Note& n : dataset.notes) out.push_back(pseudo_label(n, dataset.vocabulary, lexicon));
    return out;
}

namespace {

std::vector<double> to_double(const std::vector<std::uint8_t>& v) {
    return std::vector<double>(v.begin(), v.end());
}

}  // namespace

TrainResult train_model(Model& model, const Dataset& dataset,
                        const std::vector<std::vector<std::uint8_t>>& ctilde,
                        const TrainConfig& cfg) {
    auto train_idx = dataset.indices_of(Split::Train);
    auto val_idx = dataset.indices_of(Split::Val);
    if (train_idx.empty() || val_idx.empty())
        throw std::invalid_argument("train_model: train and val splits must be non-empty");

    std::size_t steps_per_epoch = (train_idx.size() + cfg.batch_size - 1) / cfg.batch_size;
    AdamWHyper hyper = cfg.opt;
    hyper.total_steps = cfg.epochs * steps_per_epoch;
    AdamW opt(model.parameters(), hyper);

    // Token ids and per-note targets, computed once.
    std::vector<std::vector<int>> ids(dataset.notes.size());
    std::vector<std::vector<double>> ys(dataset.notes.size()), cts(dataset.notes.size());
    for (std::size_t i = 0; i < dataset.notes.size(); ++i) {
        ids[i] = model.encode_note(dataset.notes[i]);
        ys[i] = to_double(dataset.notes[i].labels);
        cts[i] = to_double(ctilde[i]);
    }

    TrainResult result;
    std::vector<Array> best_params;
    double best_f1 = -1.0;
    std::size_t best_epoch = 0;
    auto params = model.parameters();

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<std::size_t> order = train_idx;
        Rng erng(mix_seed(cfg.seed, 0xE50C + epoch));
        erng.shuffle(order);

        double sum_total = 0, sum_diag = 0, sum_align = 0, sum_concept = 0;
        std::size_t seen = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
            std::size_t b1 = std::min(order.size(), b0 + cfg.batch_size);
            double inv = 1.0 / static_cast<double>(b1 - b0);
            opt.zero_grad();
            for (std::size_t b = b0; b < b1; ++b) {
                std::size_t i = order[b];
                Tape t;
                auto gv = model.build_graph(t, ids[i]);
                auto lv = joint_loss(t, gv, ys[i], cts[i], cfg, model.kind);
                double total = t.value(lv.total).v[0];
                if (!std::isfinite(total))
                    throw std::runtime_error("train_model: non-finite loss at epoch " +
                                             std::to_string(epoch) + ", note " +
                                             dataset.notes[i].id);
                sum_total += total;
                sum_diag += t.value(lv.diag).v[0];
                sum_align += t.value(lv.align).v[0];
                sum_concept += t.value(lv.concept_term).v[0];
                ++seen;
                t.backward(lv.total, inv);
            }
            opt.step();
        }

        EpochStats st;
        st.epoch = epoch;
        st.loss_total = sum_total / static_cast<double>(seen);
        st.loss_diag = sum_diag / static_cast<double>(seen);
        st.loss_align = sum_align / static_cast<double>(seen);
        st.loss_concept = sum_concept / static_cast<double>(seen);

        // Validation F1 at the fixed threshold.
        PredictionSet val;
        val.tau = cfg.tau;
        val.init(val_idx.size(), model.L, model.C);
        for (std::size_t r = 0; r < val_idx.size(); ++r) {
            std::size_t i = val_idx[r];
            ModelOutput out = model.forward_ids(ids[i]);
            val.ids[r] = dataset.notes[i].id;
            for (std::size_t j = 0; j < model.L; ++j) {
                val.scores.at(r, j) = out.probs.v[j];
                val.decisions.at(r, j) = out.probs.v[j] > cfg.tau ? 1.0 : 0.0;
                val.labels.at(r, j) = ys[i][j];
            }
            for (std::size_t k = 0; k < model.C; ++k) {
                val.chat.at(r, k) = out.chat.v[k];
                val.ctilde.at(r, k) = cts[i][k];
            }
        }
        auto f1 = f1_scores(val);
        st.val_macro_f1 = f1.macro;
        st.val_micro_f1 = f1.micro;
        result.curves.push_back(st);

        if (st.val_macro_f1 > best_f1) {
            best_f1 = st.val_macro_f1;
            best_epoch = epoch;
            best_params.clear();
            for (Parameter* p : params) best_params.push_back(p->value);
        }
    }

    for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = best_params[k];
    result.best_epoch = best_epoch;
    result.best_val_macro_f1 = best_f1;
    return result;
}

void Model::save_checkpoint(const std::string& path) const {
    json j;
    j["format"] = "mcb-checkpoint";
    j["version"] = 1;
    j["kind"] = kind_name(kind);
    j["ablation"] = ablation_name(ablation);
    j["tau"] = tau;
    j["encoder"] = {{"vocab_size", enc.vocab_size}, {"h", enc.h},       {"layers", enc.layers},
                    {"heads", enc.heads},           {"max_len", enc.max_len}};
    j["C"] = C;
    j["L"] = L;
    j["gate_hidden"] = gate_hidden;
    j["concepts"] = concepts.names;
    j["labels"] = labels.codes;
    j["token_vocab"] = token_vocab.tokens();
    json params = json::array();
    for (const Parameter* p : const_cast<Model*>(this)->parameters()) {
        json pj;
        pj["name"] = p->name;
        pj["shape"] = p->value.shape;
        pj["data"] = p->value.v;
        params.push_back(pj);
    }
    j["params"] = params;
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << j.dump() << "\n";
    if (!out) throw std::runtime_error("write failed: " + path);
}

Model Model::load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("checkpoint parse error: " + std::string(e.what()));
    }
    if (j.at("format").get<std::string>() != "mcb-checkpoint")
        throw std::runtime_error("not a checkpoint file: " + path);

    EncoderConfig enc;
    enc.vocab_size = j["encoder"]["vocab_size"].get<std::size_t>();
    enc.h = j["encoder"]["h"].get<std::size_t>();
    enc.layers = j["encoder"]["layers"].get<std::size_t>();
    enc.heads = j["encoder"]["heads"].get<std::size_t>();
    enc.max_len = j["encoder"]["max_len"].get<std::size_t>();

    ConceptVocabulary vocab{j["concepts"].get<std::vector<std::string>>()};
    LabelSpace labels{j["labels"].get<std::vector<std::string>>()};
    TokenVocab tv = TokenVocab::from_tokens(j["token_vocab"].get<std::vector<std::string>>());

    Model m = Model::make(kind_from_name(j["kind"].get<std::string>()), enc, vocab, labels, tv,
                          ablation_from_name(j["ablation"].get<std::string>()), 0);
    m.tau = j["tau"].get<double>();
    m.gate_hidden = j["gate_hidden"].get<std::size_t>();

    std::unordered_map<std::string, Parameter*> by_name;
    for (Parameter* p : m.parameters()) by_name[p->name] = p;
    for (const json& pj : j["params"]) {
        auto it = by_name.find(pj["name"].get<std::string>());
        if (it == by_name.end())
            throw std::runtime_error("checkpoint has unknown parameter: " +
                                     pj["name"].get<std::string>());
        Array a(pj["shape"].get<std::vector<std::size_t>>(), pj["data"].get<std::vector<double>>());
        if (a.shape != it->second->value.shape)
            throw std::runtime_error("checkpoint parameter shape mismatch: " + it->second->name);
        it->second->value = std::move(a);
        it->second->grad = Array::zeros(it->second->value.shape);
    }
    return m;
}

}  // namespace mcb
