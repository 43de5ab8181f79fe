#include "mcblab/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace mcb {

Array init_uniform(const std::vector<std::size_t>& shape, std::size_t fan_in, Rng& rng) {
    Array a(shape);
    double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& x : a.v) x = rng.uniform(-bound, bound);
    return a;
}

MhaParams make_mha_params(const std::string& prefix, std::size_t h, Rng& rng) {
    MhaParams p;
    p.wq = Parameter(prefix + ".wq", init_uniform({h, h}, h, rng));
    p.bq = Parameter(prefix + ".bq", Array::zeros({h}));
    p.wk = Parameter(prefix + ".wk", init_uniform({h, h}, h, rng));
    p.bk = Parameter(prefix + ".bk", Array::zeros({h}));
    p.wv = Parameter(prefix + ".wv", init_uniform({h, h}, h, rng));
    p.bv = Parameter(prefix + ".bv", Array::zeros({h}));
    p.wo = Parameter(prefix + ".wo", init_uniform({h, h}, h, rng));
    p.bo = Parameter(prefix + ".bo", Array::zeros({h}));
    return p;
}

Tape::Var mha_forward(Tape& t, Tape::Var q, Tape::Var k, Tape::Var v, MhaParams& p,
                      std::size_t heads, std::vector<Tape::Var>* attn_out) {
    std::size_t h = t.value(q).shape[1];
    if (heads == 0 || h % heads != 0) throw std::invalid_argument("mha_forward: h not divisible by heads");
    if (t.value(k).shape[0] < 1) throw std::invalid_argument("mha_forward: empty key sequence");
    if (t.value(k).shape[1] != h || t.value(v).shape[1] != h)
        throw std::invalid_argument("mha_forward: width mismatch");
    std::size_t dh = h / heads;
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

    Tape::Var qw = t.param(p.wq), qb = t.param(p.bq);
    Tape::Var kw = t.param(p.wk), kb = t.param(p.bk);
    Tape::Var vw = t.param(p.wv), vb = t.param(p.bv);
    Tape::Var ow = t.param(p.wo), ob = t.param(p.bo);

    Tape::Var qp = t.add_rowvec(t.matmul(q, qw, false, true), qb);
    Tape::Var kp = t.add_rowvec(t.matmul(k, kw, false, true), kb);
    Tape::Var vp = t.add_rowvec(t.matmul(v, vw, false, true), vb);

    std::vector<Tape::Var> head_outs;
    head_outs.reserve(heads);
    for (std::size_t hd = 0; hd < heads; ++hd) {
        std::size_t c0 = hd * dh, c1 = (hd + 1) * dh;
        Tape::Var qh = t.slice_cols(qp, c0, c1);
        Tape::Var kh = t.slice_cols(kp, c0, c1);
        Tape::Var vh = t.slice_cols(vp, c0, c1);
        Tape::Var scores = t.scale(t.matmul(qh, kh, false, true), inv_sqrt);
        Tape::Var attn = t.softmax_rows(scores);
        if (attn_out) attn_out->push_back(attn);
        head_outs.push_back(t.matmul(attn, vh));
    }
    Tape::Var merged = heads == 1 ? head_outs[0] : t.concat_cols(head_outs);
    return t.add_rowvec(t.matmul(merged, ow, false, true), ob);
}

std::vector<Parameter*> EncoderBlockParams::all() {
    std::vector<Parameter*> out = attn.all();
    for (Parameter* p : {&ln1_gamma, &ln1_beta, &w_ff1, &b_ff1, &w_ff2, &b_ff2, &ln2_gamma, &ln2_beta})
        out.push_back(p);
    return out;
}

EncoderBlockParams make_encoder_block(const std::string& prefix, std::size_t h, Rng& rng) {
    EncoderBlockParams p;
    p.attn = make_mha_params(prefix + ".attn", h, rng);
    Array ones({h});
    ones.fill(1.0);
    p.ln1_gamma = Parameter(prefix + ".ln1.gamma", ones);
    p.ln1_beta = Parameter(prefix + ".ln1.beta", Array::zeros({h}));
    p.w_ff1 = Parameter(prefix + ".ff1.w", init_uniform({h, h}, h, rng));
    p.b_ff1 = Parameter(prefix + ".ff1.b", Array::zeros({h}));
    p.w_ff2 = Parameter(prefix + ".ff2.w", init_uniform({h, h}, h, rng));
    p.b_ff2 = Parameter(prefix + ".ff2.b", Array::zeros({h}));
    p.ln2_gamma = Parameter(prefix + ".ln2.gamma", ones);
    p.ln2_beta = Parameter(prefix + ".ln2.beta", Array::zeros({h}));
    return p;
}

Tape::Var encoder_block_forward(Tape& t, Tape::Var x, EncoderBlockParams& p, std::size_t heads,
                                double ln_eps) {
    Tape::Var a = mha_forward(t, x, x, x, p.attn, heads);
    Tape::Var g1 = t.param(p.ln1_gamma), b1 = t.param(p.ln1_beta);
    x = t.layer_norm_rows(t.add(x, a), g1, b1, ln_eps);
    Tape::Var w1 = t.param(p.w_ff1), bi1 = t.param(p.b_ff1);
    Tape::Var w2 = t.param(p.w_ff2), bi2 = t.param(p.b_ff2);
    Tape::Var f = t.relu(t.add_rowvec(t.matmul(x, w1, false, true), bi1));
    f = t.add_rowvec(t.matmul(f, w2, false, true), bi2);
    Tape::Var g2 = t.param(p.ln2_gamma), b2 = t.param(p.ln2_beta);
    return t.layer_norm_rows(t.add(x, f), g2, b2, ln_eps);
}

}  // namespace mcb
