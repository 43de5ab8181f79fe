#pragma once

#include <vector>

#include "mcblab/rng.hpp"
#include "mcblab/tape.hpp"

namespace mcb {

struct MhaParams {
    Parameter wq, bq, wk, bk, wv, bv, wo, bo;

    std::vector<Parameter*> all() { return {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo}; }
};

MhaParams make_mha_params(const std::string& prefix, std::size_t h, Rng& rng);

// Scaled dot-product multi-head attention with learned Q/K/V/output
// projections. q: (rows_q x h), k,v: (rows_kv x h). If attn_out is non-null it
// receives one (rows_q x rows_kv) softmax matrix per head.
Tape::Var mha_forward(Tape& t, Tape::Var q, Tape::Var k, Tape::Var v, MhaParams& p,
                      std::size_t heads, std::vector<Tape::Var>* attn_out = nullptr);

// Transformer encoder block: post-norm self-attention + position-wise FFN,
// both with residual connections.
struct EncoderBlockParams {
    MhaParams attn;
    Parameter ln1_gamma, ln1_beta;
    Parameter w_ff1, b_ff1, w_ff2, b_ff2;
    Parameter ln2_gamma, ln2_beta;

    std::vector<Parameter*> all();
};

EncoderBlockParams make_encoder_block(const std::string& prefix, std::size_t h, Rng& rng);

Tape::Var encoder_block_forward(Tape& t, Tape::Var x, EncoderBlockParams& p, std::size_t heads,
                                double ln_eps);

// Uniform init scaled by 1/sqrt(fan_in).
Array init_uniform(const std::vector<std::size_t>& shape, std::size_t fan_in, Rng& rng);

constexpr double kLayerNormEps = 1e-5;

}  // namespace mcb
