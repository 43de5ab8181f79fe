#include "doctest.h"

#include <cmath>

#include "mcblab/interpret.hpp"
#include "mcblab/rng.hpp"

using namespace mcb;

namespace {

Dataset tiny_corpus(std::size_t n, MappingMode mode = MappingMode::Linear,
                    std::uint64_t seed = 42) {
    GeneratorConfig g;
    g.concepts = 6;
    g.labels = 3;
    g.notes_n = n;
    g.mapping_mode = mode;
    g.seed = seed;
    return generate_corpus(g);
}

Model tiny_model(const Dataset& ds, ModelKind kind, std::uint64_t seed = 1,
                 std::size_t h = 8) {
    TokenVocab vocab = TokenVocab::build(ds);
    EncoderConfig enc;
    enc.vocab_size = vocab.size();
    enc.h = h;
    enc.layers = 1;
    enc.heads = 2;
    enc.max_len = 64;
    return Model::make(kind, enc, ds.vocabulary, ds.label_space, vocab, Ablation::Full, seed);
}

// Predictions straight off a (possibly untrained) model, with ground-truth
// concepts standing in for the pseudo-labeler.
PredictionSet predict_all(Model& m, const Dataset& ds) {
    PredictionSet p;
    p.tau = m.tau;
    p.init(ds.notes.size(), m.L, m.C);
    for (std::size_t i = 0; i < ds.notes.size(); ++i) {
        const Note& note = ds.notes[i];
        p.ids[i] = note.id;
        ModelOutput out = m.forward(note);
        for (std::size_t j = 0; j < m.L; ++j) {
            p.scores.at(i, j) = out.probs.v[j];
            p.labels.at(i, j) = note.labels[j];
        }
        for (std::size_t c = 0; c < m.C; ++c) {
            p.chat.at(i, c) = out.chat.v[c];
            p.ctilde.at(i, c) = note.true_concepts[c];
        }
    }
    p.threshold();
    return p;
}

// Reverse-mode gradient of logit j with respect to one head-graph input.
// The one-hot readout is scaled by L so mean_all seeds each logit with the
// intended weight.
Array reverse_grad(Model& m, const ModelOutput& out, std::size_t j, bool wrt_pc) {
    Tape t;
    Tape::Var vpt = t.input(out.p_t);
    Tape::Var vpc = t.input(out.p_c);
    auto gv = m.build_head_graph(t, vpt, vpc);
    Array onehot = Array::zeros(t.value(gv.logits).shape);
    onehot.v[j] = static_cast<double>(onehot.v.size());
    Tape::Var pick = t.mean_all(t.mul(gv.logits, t.constant(onehot)));
    t.backward(pick);
    return t.grad(wrt_pc ? vpc : vpt);
}

double head_logit(Model& m, const Array& p_t, const Array& p_c, std::size_t j) {
    Tape t;
    auto gv = m.build_head_graph(t, t.input(p_t), t.input(p_c));
    return t.value(gv.logits).v[j];
}

double max_rel_err(const Array& a, const Array& b) {
    REQUIRE(a.v.size() == b.v.size());
    double worst = 0.0;
    for (std::size_t i = 0; i < a.v.size(); ++i) {
        double denom = std::max({1.0, std::abs(a.v[i]), std::abs(b.v[i])});
        worst = std::max(worst, std::abs(a.v[i] - b.v[i]) / denom);
    }
    return worst;
}

}  // namespace

TEST_CASE("topc ranks a perfectly correlated concept first") {
    Rng rng(5);
    std::size_t n = 40;
    Array ct = Array::zeros({n, 4}), y = Array::zeros({n, 2});
    for (std::size_t i = 0; i < n; ++i) {
        y.at(i, 0) = rng.bernoulli(0.5) ? 1.0 : 0.0;
        y.at(i, 1) = rng.bernoulli(0.5) ? 1.0 : 0.0;
        ct.at(i, 0) = rng.bernoulli(0.5) ? 1.0 : 0.0;
        ct.at(i, 1) = y.at(i, 0);  // concept 1 == label 0
        ct.at(i, 2) = rng.bernoulli(0.5) ? 1.0 : 0.0;
        ct.at(i, 3) = 1.0;  // constant -> r = 0
    }
    TopCMap map = build_topc(ct, y, 4);
    CHECK(map.per_label[0][0].concept_index == 1);
    CHECK(map.per_label[0][0].r == doctest::Approx(1.0));
    for (const TopCEntry& e : map.per_label[0])
        if (e.concept_index == 3) CHECK(e.r == 0.0);
}

TEST_CASE("topc hand correlation and index tie-break") {
    // ctilde col 0 = (1,1,0,0), label = (1,0,1,0): r = 0 exactly.
    Array ct = Array::zeros({4, 3}), y = Array::zeros({4, 1});
    double c0[4] = {1, 1, 0, 0}, c1[4] = {1, 0, 1, 0}, c2[4] = {1, 0, 1, 0};
    double lab[4] = {1, 0, 1, 0};
    for (std::size_t i = 0; i < 4; ++i) {
        ct.at(i, 0) = c0[i];
        ct.at(i, 1) = c1[i];
        ct.at(i, 2) = c2[i];
        y.at(i, 0) = lab[i];
    }
    TopCMap map = build_topc(ct, y, 3);
    // Concepts 1 and 2 both have r = 1; the lower index wins the tie.
    CHECK(map.per_label[0][0].concept_index == 1);
    CHECK(map.per_label[0][1].concept_index == 2);
    CHECK(map.per_label[0][2].concept_index == 0);
    CHECK(map.per_label[0][2].r == doctest::Approx(0.0));
    CHECK(map.per_label[0][0].r == doctest::Approx(1.0));
}

TEST_CASE("cstpr is 1 on fully supported positives and 0 when chat is silent") {
    PredictionSet p;
    p.init(6, 2, 2);
    for (std::size_t i = 0; i < 6; ++i) {
        p.ids[i] = "n";
        p.labels.at(i, 0) = i % 2 ? 1.0 : 0.0;
        p.labels.at(i, 1) = 1.0;
        p.scores.at(i, 0) = p.labels.at(i, 0);
        p.scores.at(i, 1) = 1.0;
        p.chat.at(i, 0) = 0.9;
        p.chat.at(i, 1) = 0.9;
        p.ctilde.at(i, 0) = 1.0;
        p.ctilde.at(i, 1) = 1.0;
    }
    p.threshold();
    TopCMap map;
    map.k = 1;
    map.per_label = {{{0, 1.0}}, {{1, 1.0}}};
    CstprResult r = cstpr(p, map);
    CHECK(r.macro == doctest::Approx(1.0));

    for (std::size_t i = 0; i < 6; ++i) p.chat.at(i, 0) = p.chat.at(i, 1) = 0.1;
    r = cstpr(p, map);
    CHECK(r.macro == doctest::Approx(0.0));
}

TEST_CASE("cstpr hand enumeration and recall bound") {
    // 3 positives for label 0: one unpredicted, one predicted-but-unsupported,
    // one predicted-and-supported -> CSTPR = 1/3, recall = 2/3.
    PredictionSet p;
    p.init(3, 1, 1);
    for (std::size_t i = 0; i < 3; ++i) {
        p.ids[i] = "n";
        p.labels.at(i, 0) = 1.0;
        p.ctilde.at(i, 0) = 1.0;
    }
    p.scores.at(0, 0) = 0.1;
    p.scores.at(1, 0) = 0.9;
    p.chat.at(1, 0) = 0.2;
    p.scores.at(2, 0) = 0.9;
    p.chat.at(2, 0) = 0.9;
    p.threshold();
    TopCMap map;
    map.k = 1;
    map.per_label = {{{0, 1.0}}};
    CstprResult r = cstpr(p, map);
    CHECK(r.per_label[0] == doctest::Approx(1.0 / 3.0));

    PrecisionRecall pr = precision_recall_decomposition(p);
    CHECK(r.per_label[0] <= pr.macro_r + 1e-12);
}

TEST_CASE("cstpr skips zero-positive labels") {
    PredictionSet p;
    p.init(4, 2, 1);
    for (std::size_t i = 0; i < 4; ++i) {
        p.ids[i] = "n";
        p.labels.at(i, 0) = 1.0;
        p.scores.at(i, 0) = 0.9;
        p.chat.at(i, 0) = 0.9;
        p.ctilde.at(i, 0) = 1.0;
    }
    p.threshold();
    TopCMap map;
    map.k = 1;
    map.per_label = {{{0, 1.0}}, {{0, 1.0}}};
    CstprResult r = cstpr(p, map);
    REQUIRE(r.skipped_labels.size() == 1);
    CHECK(r.skipped_labels[0] == 1);
    CHECK(r.per_label[1] == -1.0);
    CHECK(r.macro == doctest::Approx(1.0));
}

TEST_CASE("bottleneck head influence is the decision row norm, input independent") {
    Dataset ds = tiny_corpus(40);
    Model m = tiny_model(ds, ModelKind::VCBM, 3);
    m.w_d.value.fill(0.0);
    m.w_d.value.at(0, 0) = 3.0;
    m.w_d.value.at(0, 1) = 4.0;
    for (std::size_t j = 1; j < m.L; ++j) m.w_d.value.at(j, j % m.C) = 1.0;

    PredictionSet p = predict_all(m, ds);
    TopCMap map = build_topc(p.ctilde, p.labels, 3);
    CimResult r = cim_head(m, p, ds, map);
    for (const CimPair& pr : r.pairs) {
        double expect = pr.label_index == 0 ? 5.0 : 1.0;
        CHECK(pr.value == doctest::Approx(expect).epsilon(1e-12));
        CHECK(pr.support > 0);
    }
}

TEST_CASE("gated head gradients: closed form agrees with reverse mode and FD") {
    Rng pick(99);
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        GeneratorConfig g;
        g.concepts = 4;
        g.labels = 3;
        g.notes_n = 12;
        g.seed = 200 + seed;
        Dataset ds4 = generate_corpus(g);
        Model m = tiny_model(ds4, ModelKind::MCB, seed);
        ModelOutput out = m.forward(ds4.notes[pick.below(ds4.notes.size())]);

        Array closed = cim_head_gradients(m, out);
        for (std::size_t j = 0; j < m.L; ++j) {
            Array rev = reverse_grad(m, out, j, true);
            Array closed_row({m.enc.h});
            for (std::size_t b = 0; b < m.enc.h; ++b) closed_row.v[b] = closed.at(j, b);
            CHECK(max_rel_err(closed_row, rev) <= 1e-10);

            // Central finite differences on the head graph.
            Array fd({m.enc.h});
            double eps = 1e-6;
            for (std::size_t b = 0; b < m.enc.h; ++b) {
                Array hi = out.p_c, lo = out.p_c;
                hi.v[b] += eps;
                lo.v[b] -= eps;
                fd.v[b] = (head_logit(m, out.p_t, hi, j) - head_logit(m, out.p_t, lo, j)) /
                          (2 * eps);
            }
            CHECK(max_rel_err(closed_row, fd) <= 1e-5);
        }
    }
}

TEST_CASE("shared-surface gradients: closed form agrees with reverse mode and FD") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        GeneratorConfig g;
        g.concepts = 4;
        g.labels = 3;
        g.notes_n = 10;
        g.seed = 300 + seed;
        Dataset ds = generate_corpus(g);
        for (ModelKind kind : {ModelKind::MCB, ModelKind::VCBM}) {
            Model m = tiny_model(ds, kind, seed);
            ModelOutput out = m.forward(ds.notes[seed % ds.notes.size()]);
            Array closed = cim_common_surface_gradients(m, out);
            for (std::size_t j = 0; j < m.L; ++j) {
                Array rev = reverse_grad(m, out, j, false);
                Array closed_row({m.enc.h});
                for (std::size_t b = 0; b < m.enc.h; ++b) closed_row.v[b] = closed.at(j, b);
                CHECK(max_rel_err(closed_row, rev) <= 1e-10);

                Array fd({m.enc.h});
                double eps = 1e-6;
                for (std::size_t b = 0; b < m.enc.h; ++b) {
                    Array hi = out.p_t, lo = out.p_t;
                    hi.v[b] += eps;
                    lo.v[b] -= eps;
                    fd.v[b] = (head_logit(m, hi, out.p_c, j) -
                               head_logit(m, lo, out.p_c, j)) /
                              (2 * eps);
                }
                CHECK(max_rel_err(closed_row, fd) <= 1e-5);
            }
        }
    }
}

TEST_CASE("gate pre-activations pinned at zero kill the gate Jacobian exactly") {
    Dataset ds = tiny_corpus(10);
    Model m = tiny_model(ds, ModelKind::MCB, 7);
    m.gate_w1.value.fill(0.0);
    m.gate_b1.value.fill(0.0);  // h1 == 0, ReLU indicator must read 0
    ModelOutput out = m.forward(ds.notes[0]);
    Array closed = cim_head_gradients(m, out);
    // With the gate path dead, the head gradient is W_d J_z diag(g).
    for (std::size_t j = 0; j < m.L; ++j) {
        Array rev = reverse_grad(m, out, j, true);
        Array closed_row({m.enc.h});
        for (std::size_t b = 0; b < m.enc.h; ++b) closed_row.v[b] = closed.at(j, b);
        CHECK(max_rel_err(closed_row, rev) <= 1e-12);
    }
    // And the shared surface is exactly zero for every label.
    Array common = cim_common_surface_gradients(m, out);
    for (double v : common.v) CHECK(v == 0.0);
}

TEST_CASE("zeroing the p_t block of the gate input zeroes the shared surface") {
    Dataset ds = tiny_corpus(10);
    Model m = tiny_model(ds, ModelKind::MCB, 11);
    std::size_t h = m.enc.h;
    for (std::size_t q = 0; q < m.gate_hidden; ++q)
        for (std::size_t b = 0; b < h; ++b) m.gate_w1.value.at(q, b) = 0.0;
    ModelOutput out = m.forward(ds.notes[3]);
    Array common = cim_common_surface_gradients(m, out);
    for (double v : common.v) CHECK(v == 0.0);
    Array rev = reverse_grad(m, out, 0, false);
    for (double v : rev.v) CHECK(v == 0.0);
}

TEST_CASE("saturated bottleneck concepts flatten the shared surface") {
    Dataset ds = tiny_corpus(10);
    Model m = tiny_model(ds, ModelKind::VCBM, 13);
    m.b_c.value.fill(60.0);  // chat == 1, sigma' == 0
    ModelOutput out = m.forward(ds.notes[0]);
    Array common = cim_common_surface_gradients(m, out);
    for (double v : common.v) CHECK(std::abs(v) <= 1e-12);
}

TEST_CASE("ccr counts conditional recall per supported pair") {
    // 4 samples, concept 0 present in all, label positive in 3, predicted in 2.
    PredictionSet p;
    p.init(4, 1, 1);
    double y[4] = {1, 1, 1, 0}, d[4] = {1, 1, 0, 1};
    for (std::size_t i = 0; i < 4; ++i) {
        p.ids[i] = "n";
        p.labels.at(i, 0) = y[i];
        p.scores.at(i, 0) = d[i] ? 0.9 : 0.1;
        p.ctilde.at(i, 0) = 1.0;
    }
    p.threshold();
    TopCMap map;
    map.k = 1;
    map.per_label = {{{0, 1.0}}};
    CcrResult r = ccr(p, map);
    REQUIRE(r.pairs.size() == 1);
    CHECK(r.pairs[0].support == 3);
    CHECK(r.pairs[0].value == doctest::Approx(2.0 / 3.0));

    // Perfect decisions give 1; all-negative decisions give 0.
    for (std::size_t i = 0; i < 4; ++i) p.decisions.at(i, 0) = y[i];
    CHECK(ccr(p, map).aggregate == doctest::Approx(1.0));
    for (std::size_t i = 0; i < 4; ++i) p.decisions.at(i, 0) = 0.0;
    CHECK(ccr(p, map).aggregate == doctest::Approx(0.0));
}

TEST_CASE("phrase matching is whole-word, case-insensitive, multi-token aware") {
    Note note;
    note.text = "Fevers noted. Patient denies fever but chest pain persists.";
    retokenize(note);
    auto fever = match_phrase_token_spans(note, "fever");
    REQUIRE(fever.size() == 1);  // "Fevers" must not match
    CHECK(note.tokens[fever[0].first].text == "fever");
    auto chest = match_phrase_token_spans(note, "chest pain");
    REQUIRE(chest.size() == 1);
    CHECK(chest[0].second - chest[0].first == 2);
    CHECK(match_phrase_token_spans(note, "rash").empty());
}

TEST_CASE("masking with no matches leaves the forward pass untouched") {
    Dataset ds = tiny_corpus(5);
    Model m = tiny_model(ds, ModelKind::MCB, 17);
    const Note& note = ds.notes[0];
    auto spans = match_phrase_token_spans(note, "zzz-not-here");
    CHECK(spans.empty());
    std::vector<int> ids = m.encode_note(note);
    ModelOutput a = m.forward_ids(ids);
    ModelOutput b = m.forward_ids(ids);
    CHECK(a.logits.v == b.logits.v);
}

TEST_CASE("intervening on a constant-output model yields zero drops and p = 1") {
    Dataset ds = tiny_corpus(30);
    Model m = tiny_model(ds, ModelKind::MCB, 19);
    m.w_d.value.fill(0.0);
    m.b_d.value.fill(2.0);  // sigma(2) > tau for every label
    PredictionSet p = predict_all(m, ds);
    TopCMap map = build_topc(p.ctilde, p.labels, 3);
    InterventionSummary s = mask_intervention(m, p, ds, map, 40, 23, 200);
    CHECK(s.n_valid > 0);
    CHECK(s.mean_target_drop == doctest::Approx(0.0));
    CHECK(s.mean_control_drop == doctest::Approx(0.0));
    CHECK(s.wins == 0);
    CHECK(s.ties == s.n_valid);
    CHECK(s.sign_test_p == 1.0);
    CHECK(s.difference_ci.ci_low == doctest::Approx(0.0));
    CHECK(s.difference_ci.ci_high == doctest::Approx(0.0));
}

TEST_CASE("intervention is deterministic in the seed") {
    Dataset ds = tiny_corpus(25);
    Model m = tiny_model(ds, ModelKind::MCB, 29);
    m.b_d.value.fill(1.0);
    PredictionSet p = predict_all(m, ds);
    TopCMap map = build_topc(p.ctilde, p.labels, 3);
    InterventionSummary a = mask_intervention(m, p, ds, map, 20, 31, 100);
    InterventionSummary b = mask_intervention(m, p, ds, map, 20, 31, 100);
    CHECK(a.n_valid == b.n_valid);
    CHECK(a.mean_difference == b.mean_difference);
    CHECK(a.sign_test_p == b.sign_test_p);
    REQUIRE(a.records.size() == b.records.size());
    for (std::size_t i = 0; i < a.records.size(); ++i)
        CHECK(a.records[i].note_id == b.records[i].note_id);
}
