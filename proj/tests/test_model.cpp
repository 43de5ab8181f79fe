#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mcblab/model.hpp"

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
                 Ablation ab = Ablation::Full, std::size_t h = 8) {
    TokenVocab vocab = TokenVocab::build(ds);
    EncoderConfig enc;
    enc.vocab_size = vocab.size();
    enc.h = h;
    enc.layers = 1;
    enc.heads = 2;
    enc.max_len = 64;
    return Model::make(kind, enc, ds.vocabulary, ds.label_space, vocab, ab, seed);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("token vocab reserves special ids and encodes with a CLS prefix") {
    Dataset ds = tiny_corpus(30);
    TokenVocab vocab = TokenVocab::build(ds);
    CHECK(vocab.id_of("[pad]") == TokenVocab::kPad);
    CHECK(vocab.id_of("[cls]") == TokenVocab::kCls);
    CHECK(vocab.id_of("[mask]") == TokenVocab::kMask);
    CHECK(vocab.id_of("zzz-not-in-vocab") == TokenVocab::kUnk);
    auto ids = vocab.encode(ds.notes[0], 128);
    REQUIRE(!ids.empty());
    CHECK(ids[0] == TokenVocab::kCls);
    CHECK(ids.size() == std::min<std::size_t>(ds.notes[0].tokens.size() + 1, 128));
}

TEST_CASE("forward is deterministic and single-token input gives n=2 rows") {
    Dataset ds = tiny_corpus(20);
    Model m = tiny_model(ds, ModelKind::MCB);
    ModelOutput a = m.forward(ds.notes[0]);
    ModelOutput b = m.forward(ds.notes[0]);
    CHECK(a.logits.v == b.logits.v);
    CHECK(a.chat.v == b.chat.v);

    Note one;
    one.id = "one";
    one.text = "fever";
    retokenize(one);
    ModelOutput o = m.forward(one);
    CHECK(o.H.shape[0] == 2);
    // p_t is row 0 of H by definition.
    for (std::size_t j = 0; j < o.p_t.v.size(); ++j)
        CHECK(o.p_t.v[j] == o.H.at(0, j));
}

TEST_CASE("permuting non-CLS tokens changes the encoding (positions active)") {
    Dataset ds = tiny_corpus(20);
    Model m = tiny_model(ds, ModelKind::MCB);
    Note a, b;
    a.text = "fever cough rash";
    b.text = "rash cough fever";
    retokenize(a);
    retokenize(b);
    ModelOutput oa = m.forward(a);
    ModelOutput ob = m.forward(b);
    double diff = 0;
    for (std::size_t i = 0; i < oa.p_t.v.size(); ++i) diff += std::abs(oa.p_t.v[i] - ob.p_t.v[i]);
    CHECK(diff > 1e-8);
}

TEST_CASE("no-bypass: zero p_c pins the logits at W_d beta + b_d") {
    Dataset ds = tiny_corpus(20);
    Model m = tiny_model(ds, ModelKind::MCB);
    ModelOutput out = m.forward(ds.notes[0]);
    Tape t;
    Tape::Var pt = t.input(out.p_t);
    Tape::Var pc = t.input(Array::zeros({m.enc.h}));
    auto gv = m.build_head_graph(t, pt, pc);
    // Expected: W_d beta + b_d.
    for (std::size_t j = 0; j < m.L; ++j) {
        double expect = m.b_d.value.v[j];
        for (std::size_t k = 0; k < m.enc.h; ++k)
            expect += m.w_d.value.at(j, k) * m.ln_beta.value.v[k];
        CHECK(std::abs(t.value(gv.logits).v[j] - expect) <= 1e-12);
    }
}

TEST_CASE("no-bypass structurally: zeroed concept attention makes logits input-independent") {
    Dataset ds = tiny_corpus(40);
    Model m = tiny_model(ds, ModelKind::MCB);
    // Z_c = 0 once the value/output projections and biases vanish.
    m.concept_attn.wv.value.fill(0.0);
    m.concept_attn.bv.value.fill(0.0);
    m.concept_attn.wo.value.fill(0.0);
    m.concept_attn.bo.value.fill(0.0);
    ModelOutput first = m.forward(ds.notes[0]);
    for (std::size_t i = 1; i < ds.notes.size(); ++i) {
        ModelOutput o = m.forward(ds.notes[i]);
        for (std::size_t j = 0; j < m.L; ++j)
            CHECK(std::abs(o.logits.v[j] - first.logits.v[j]) <= 1e-12);
    }
}

TEST_CASE("concept head is isolated from the diagnosis pathway in MCB") {
    Dataset ds = tiny_corpus(20);
    Model m = tiny_model(ds, ModelKind::MCB);
    auto ids = m.encode_note(ds.notes[0]);
    Tape t;
    auto gv = m.build_graph(t, ids);
    for (Parameter* p : m.parameters()) p->zero_grad();
    t.backward(t.mean_all(gv.logits));
    for (double g : m.w_c.grad.v) CHECK(g == 0.0);
    for (double g : m.b_c.grad.v) CHECK(g == 0.0);

    // And perturbing the concept head leaves the logits bit-identical.
    ModelOutput before = m.forward(ds.notes[0]);
    m.w_c.value.v[0] += 10.0;
    m.b_c.value.v[0] -= 3.0;
    ModelOutput after = m.forward(ds.notes[0]);
    CHECK(before.logits.v == after.logits.v);
    CHECK(before.chat.v != after.chat.v);
}

TEST_CASE("vcbm: logits are a pure function of chat (replay is bit-exact)") {
    Dataset ds = tiny_corpus(20);
    Model m = tiny_model(ds, ModelKind::VCBM);
    ModelOutput out = m.forward(ds.notes[3]);
    for (std::size_t j = 0; j < m.L; ++j) {
        double replay = m.b_d.value.v[j];
        for (std::size_t c = 0; c < m.C; ++c) replay += m.w_d.value.at(j, c) * out.chat.v[c];
        CHECK(out.logits.v[j] == replay);
    }
}

TEST_CASE("gate saturation: huge b2 makes z equal layer_norm(p_c)") {
    Dataset ds = tiny_corpus(20);
    Model m = tiny_model(ds, ModelKind::MCB);
    m.gate_b2.value.fill(50.0);
    ModelOutput out = m.forward(ds.notes[0]);
    // g ~ 1 so u ~ p_c; compare z with an independent layer_norm of p_c.
    Tape t;
    Tape::Var z = t.layer_norm_rows(t.input(out.p_c), t.param(m.ln_gamma), t.param(m.ln_beta),
                                    kLayerNormEps);
    for (std::size_t k = 0; k < m.enc.h; ++k)
        CHECK(std::abs(out.z.v[k] - t.value(z).v[k]) <= 1e-12);
}

TEST_CASE("zeroed gate net gives g = 0.5 everywhere") {
    Dataset ds = tiny_corpus(10);
    Model m = tiny_model(ds, ModelKind::MCB);
    m.gate_w1.value.fill(0.0);
    m.gate_b1.value.fill(0.0);
    m.gate_w2.value.fill(0.0);
    m.gate_b2.value.fill(0.0);
    ModelOutput out = m.forward(ds.notes[0]);
    for (double g : out.g.v) CHECK(g == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("no_crossattn ablation equals hand-wiring p_t into both gate slots") {
    Dataset ds = tiny_corpus(20);
    Model m = tiny_model(ds, ModelKind::MCB, 1, Ablation::NoCrossAttn);
    ModelOutput out = m.forward(ds.notes[0]);
    CHECK(out.p_c.v == out.p_t.v);
    Tape t;
    Tape::Var pt = t.input(out.p_t);
    auto gv = m.build_head_graph(t, pt, pt);
    for (std::size_t j = 0; j < m.L; ++j)
        CHECK(out.logits.v[j] == doctest::Approx(t.value(gv.logits).v[j]).epsilon(1e-14));
}

TEST_CASE("joint loss composes the three weighted components") {
    Dataset ds = tiny_corpus(20);
    Model m = tiny_model(ds, ModelKind::MCB);
    auto ids = m.encode_note(ds.notes[0]);
    std::vector<double> y = {1, 0, 1};
    std::vector<double> ct(m.C, 0.0);
    ct[0] = ct[2] = 1.0;

    TrainConfig cfg;
    Tape t;
    auto gv = m.build_graph(t, ids);
    auto lv = joint_loss(t, gv, y, ct, cfg, ModelKind::MCB);
    double total = t.value(lv.total).v[0];
    double composed = cfg.lambda_diag * t.value(lv.diag).v[0] +
                      cfg.lambda_align * t.value(lv.align).v[0] +
                      cfg.lambda_concept * t.value(lv.concept_term).v[0];
    CHECK(total == doctest::Approx(composed).epsilon(1e-12));

    // lambda = (1, 0, 0) reduces to the focal term alone.
    TrainConfig only_diag;
    only_diag.lambda_diag = 1.0;
    only_diag.lambda_align = 0.0;
    only_diag.lambda_concept = 0.0;
    Tape t2;
    auto gv2 = m.build_graph(t2, ids);
    auto lv2 = joint_loss(t2, gv2, y, ct, only_diag, ModelKind::MCB);
    CHECK(t2.value(lv2.total).v[0] == doctest::Approx(t2.value(lv2.diag).v[0]).epsilon(1e-12));
}

TEST_CASE("full-model joint-loss gradient matches finite differences on a tiny config") {
    GeneratorConfig g;
    g.concepts = 4;
    g.labels = 3;
    g.notes_n = 8;
    Dataset ds = generate_corpus(g);
    Model m = tiny_model(ds, ModelKind::MCB, 5, Ablation::Full, 8);
    Note n;
    n.text = "patient has fever and cough today";
    retokenize(n);  // ~6 tokens -> n=7 with CLS
    auto ids = m.encode_note(n);
    std::vector<double> y = {1, 0, 1};
    std::vector<double> ct = {1, 0, 0, 1};
    TrainConfig cfg;

    auto loss_value = [&]() {
        Tape t;
        auto gv = m.build_graph(t, ids);
        return t.value(joint_loss(t, gv, y, ct, cfg, ModelKind::MCB).total).v[0];
    };

    Tape t;
    auto gv = m.build_graph(t, ids);
    auto lv = joint_loss(t, gv, y, ct, cfg, ModelKind::MCB);
    for (Parameter* p : m.parameters()) p->zero_grad();
    t.backward(lv.total);

    const double h = 1e-5;
    std::size_t checked = 0;
    for (Parameter* p : m.parameters()) {
        // Spot-check a strided subset of each tensor to keep runtime sane.
        std::size_t stride = std::max<std::size_t>(1, p->value.size() / 5);
        for (std::size_t i = 0; i < p->value.size(); i += stride) {
            double keep = p->value.v[i];
            p->value.v[i] = keep + h;
            double fp = loss_value();
            p->value.v[i] = keep - h;
            double fm = loss_value();
            p->value.v[i] = keep;
            double fd = (fp - fm) / (2 * h);
            double ad = p->grad.v[i];
            double err = std::abs(fd - ad) / std::max({1.0, std::abs(fd), std::abs(ad)});
            INFO(p->name << "[" << i << "] ad=" << ad << " fd=" << fd);
            CHECK(err <= 1e-5);
            ++checked;
        }
    }
    CHECK(checked > 50);
}

TEST_CASE("train: zero learning rate leaves parameters untouched and curves flat") {
    Dataset ds = split_dataset(tiny_corpus(40), 0.7, 0.15, 0.15, 42);
    Model m = tiny_model(ds, ModelKind::MCB);
    std::vector<Array> before;
    for (Parameter* p : m.parameters()) before.push_back(p->value);
    auto ct = compute_pseudo_labels(ds, TriggerLexicon::defaults());
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.opt.lr = 0.0;
    cfg.opt.weight_decay = 0.0;
    TrainResult r = train_model(m, ds, ct, cfg);
    auto params = m.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) CHECK(params[i]->value.v == before[i].v);
    REQUIRE(r.curves.size() == 2);
    CHECK(r.curves[0].loss_total == doctest::Approx(r.curves[1].loss_total).epsilon(1e-12));
}

TEST_CASE("no_align ablation matches manually zeroing lambda_align, same seed") {
    Dataset ds = split_dataset(tiny_corpus(40), 0.7, 0.15, 0.15, 42);
    auto ct = compute_pseudo_labels(ds, TriggerLexicon::defaults());

    Model a = tiny_model(ds, ModelKind::MCB, 3, Ablation::NoAlign);
    TrainConfig ca;
    ca.epochs = 2;
    ca.ablation = Ablation::NoAlign;
    TrainResult ra = train_model(a, ds, ct, ca);

    Model b = tiny_model(ds, ModelKind::MCB, 3, Ablation::Full);
    TrainConfig cb;
    cb.epochs = 2;
    cb.lambda_align = 0.0;
    TrainResult rb = train_model(b, ds, ct, cb);

    auto pa = a.parameters(), pb = b.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value.v == pb[i]->value.v);
    for (std::size_t e = 0; e < ra.curves.size(); ++e)
        CHECK(ra.curves[e].loss_total == rb.curves[e].loss_total);
}

TEST_CASE("training is deterministic in the seed") {
    Dataset ds = split_dataset(tiny_corpus(40), 0.7, 0.15, 0.15, 42);
    auto ct = compute_pseudo_labels(ds, TriggerLexicon::defaults());
    TrainConfig cfg;
    cfg.epochs = 2;
    Model a = tiny_model(ds, ModelKind::MCB, 9);
    Model b = tiny_model(ds, ModelKind::MCB, 9);
    train_model(a, ds, ct, cfg);
    train_model(b, ds, ct, cfg);
    auto pa = a.parameters(), pb = b.parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value.v == pb[i]->value.v);
}

TEST_CASE("checkpoint round-trip reproduces outputs bit-exactly and is byte-stable") {
    Dataset ds = tiny_corpus(20);
    Model m = tiny_model(ds, ModelKind::MCB);
    auto dir = std::filesystem::temp_directory_path();
    std::string p1 = (dir / "ckpt_a.json").string();
    std::string p2 = (dir / "ckpt_b.json").string();
    m.save_checkpoint(p1);
    m.save_checkpoint(p2);
    CHECK(slurp(p1) == slurp(p2));

    Model back = Model::load_checkpoint(p1);
    ModelOutput oa = m.forward(ds.notes[0]);
    ModelOutput ob = back.forward(ds.notes[0]);
    CHECK(oa.logits.v == ob.logits.v);
    CHECK(oa.chat.v == ob.chat.v);
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("vcbm checkpoints carry the kind and reload as vcbm") {
    Dataset ds = tiny_corpus(20);
    Model m = tiny_model(ds, ModelKind::VCBM);
    auto dir = std::filesystem::temp_directory_path();
    std::string p = (dir / "ckpt_vcbm.json").string();
    m.save_checkpoint(p);
    Model back = Model::load_checkpoint(p);
    CHECK(back.kind == ModelKind::VCBM);
    CHECK(back.w_d.value.shape == std::vector<std::size_t>{m.L, m.C});
    std::remove(p.c_str());
}
