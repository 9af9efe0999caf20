#pragma once

// Neural building blocks: causal multi-head self-attention, post-norm
// Transformer decoder blocks, LSTM layers, token/positional/segment
// embeddings, and two output heads (plain softmax, mixture of softmaxes).
// All forwards take a tape and a dropout context; with a null RNG the
// dropout context is a no-op, which is the evaluation path.

#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "cas/error.hpp"
#include "cas/rng.hpp"
#include "cas/tensor.hpp"

namespace cas {

// Dropout rates used during training. rng == nullptr disables all dropout.
struct DropoutCtx {
    Rng* rng = nullptr;
    double attn = 0.0;
    double resid = 0.0;
    double lstm = 0.0;
    double head = 0.0;

    TensorRef apply(Tape& tape, const TensorRef& x, double p) const {
        if (rng == nullptr || p <= 0.0) return x;
        return dropout(tape, x, dropout_mask(x->shape, p, *rng));
    }
};

// ---------------------------------------------------------------------------
// Transformer block

// Weight matrices are stored (out x in) and applied as x * W^T.
struct TransformerBlockParams {
    std::size_t hidden = 0;
    std::size_t heads = 0;
    TensorRef wq, bq, wk, bk, wv, bv;  // attention projections, H x H and 1 x H
    TensorRef wo, bo;                  // attention output projection
    TensorRef w1, b1, w2, b2;          // feed-forward, F x H then H x F
    TensorRef ln1_g, ln1_b, ln2_g, ln2_b;

    void check() const {
        if (hidden == 0 || heads == 0 || hidden % heads != 0)
            throw ConfigError("transformer block: hidden size " + std::to_string(hidden) +
                              " must be a positive multiple of " + std::to_string(heads) +
                              " heads");
    }
};

// Causal multi-head self-attention over one sequence (T x H). Position t
// attends only to positions <= t.
inline TensorRef masked_self_attention(Tape& tape, const TensorRef& x,
                                       const TransformerBlockParams& p,
                                       const DropoutCtx& drop) {
    p.check();
    const std::size_t h = p.hidden;
    if (x->cols() != h)
        throw ShapeError("attention: input " + shape_str(x->shape) + " does not match hidden " +
                         std::to_string(h));
    const std::size_t dh = h / p.heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    auto q = add_bias(tape, matmul_nt(tape, x, p.wq), p.bq);
    auto k = add_bias(tape, matmul_nt(tape, x, p.wk), p.bk);
    auto v = add_bias(tape, matmul_nt(tape, x, p.wv), p.bv);

    std::vector<TensorRef> head_outputs;
    head_outputs.reserve(p.heads);
    for (std::size_t a = 0; a < p.heads; ++a) {
        auto qa = slice_cols(tape, q, a * dh, (a + 1) * dh);
        auto ka = slice_cols(tape, k, a * dh, (a + 1) * dh);
        auto va = slice_cols(tape, v, a * dh, (a + 1) * dh);
        auto scores = scale(tape, matmul_nt(tape, qa, ka), inv_sqrt_dh);
        auto probs = causal_masked_softmax(tape, scores);
        probs = drop.apply(tape, probs, drop.attn);
        head_outputs.push_back(matmul(tape, probs, va));
    }
    auto ctx = p.heads == 1 ? head_outputs[0] : concat_cols(tape, head_outputs);
    return add_bias(tape, matmul_nt(tape, ctx, p.wo), p.bo);
}

// Attention sublayer + residual + layer norm, then feed-forward + residual +
// layer norm.
inline TensorRef transformer_block_forward(Tape& tape, const TensorRef& x,
                                           const TransformerBlockParams& p,
                                           const DropoutCtx& drop) {
    auto a = masked_self_attention(tape, x, p, drop);
    a = drop.apply(tape, a, drop.resid);
    auto h1 = layer_norm(tape, add(tape, x, a), p.ln1_g, p.ln1_b);
    auto f = add_bias(tape, matmul_nt(tape, h1, p.w1), p.b1);
    f = gelu(tape, f);
    f = add_bias(tape, matmul_nt(tape, f, p.w2), p.b2);
    f = drop.apply(tape, f, drop.resid);
    return layer_norm(tape, add(tape, h1, f), p.ln2_g, p.ln2_b);
}

// ---------------------------------------------------------------------------
// LSTM

// Gate order inside the stacked weight matrices is input, forget, candidate,
// output.
struct LstmLayerParams {
    std::size_t hidden = 0;
    TensorRef wx;  // 4H x D
    TensorRef wh;  // 4H x H
    TensorRef b;   // 1 x 4H
};

struct LstmState {
    TensorRef h;  // 1 x H
    TensorRef c;  // 1 x H
};

inline LstmState zero_lstm_state(std::size_t hidden) {
    return {tensor({1, hidden}), tensor({1, hidden})};
}

// Standard LSTM recurrence over one sequence. Returns all hidden states
// (T x H) plus the final state for truncated-BPTT carryover.
inline std::pair<TensorRef, LstmState> lstm_forward(Tape& tape, const TensorRef& x,
                                                    const LstmLayerParams& p,
                                                    const LstmState& initial) {
    const std::size_t h = p.hidden;
    if (initial.h->shape != std::vector<std::size_t>{1, h} ||
        initial.c->shape != std::vector<std::size_t>{1, h})
        throw ShapeError("lstm_forward: state shape " + shape_str(initial.h->shape) +
                         " does not match hidden (1x" + std::to_string(h) + ")");
    if (p.wx->rows() != 4 * h || p.wh->rows() != 4 * h || p.wh->cols() != h)
        throw ShapeError("lstm_forward: gate weights " + shape_str(p.wx->shape) + " / " +
                         shape_str(p.wh->shape) + " inconsistent with hidden " +
                         std::to_string(h));
    const std::size_t t_len = x->rows();
    TensorRef ht = initial.h;
    TensorRef ct = initial.c;
    std::vector<TensorRef> outputs;
    outputs.reserve(t_len);
    for (std::size_t t = 0; t < t_len; ++t) {
        auto xt = slice_rows(tape, x, t, t + 1);
        auto pre = add_bias(tape, add(tape, matmul_nt(tape, xt, p.wx), matmul_nt(tape, ht, p.wh)),
                            p.b);
        auto gi = sigmoid(tape, slice_cols(tape, pre, 0, h));
        auto gf = sigmoid(tape, slice_cols(tape, pre, h, 2 * h));
        auto gc = tanh(tape, slice_cols(tape, pre, 2 * h, 3 * h));
        auto go = sigmoid(tape, slice_cols(tape, pre, 3 * h, 4 * h));
        ct = add(tape, mul(tape, gf, ct), mul(tape, gi, gc));
        ht = mul(tape, go, tanh(tape, ct));
        outputs.push_back(ht);
    }
    auto all = t_len == 1 ? outputs[0] : concat_rows(tape, outputs);
    return {all, LstmState{ht, ct}};
}

// ---------------------------------------------------------------------------
// Embeddings

// Optional tables are null when the architecture removed them.
struct EmbeddingParams {
    TensorRef token;     // V x H
    TensorRef position;  // max_len x H or null
    TensorRef segment;   // 1 x H or null (single-segment corpus)
};

// Sum of the enabled embedding tables; positions are window-relative.
inline TensorRef embed(Tape& tape, const std::vector<std::uint32_t>& tokens,
                       const EmbeddingParams& p) {
    auto e = embedding_lookup(tape, p.token, tokens);
    if (p.position) {
        if (tokens.size() > p.position->rows())
            throw ContractError("embed: sequence length " + std::to_string(tokens.size()) +
                                " exceeds positional table of " +
                                std::to_string(p.position->rows()));
        e = add(tape, e, slice_rows(tape, p.position, 0, tokens.size()));
    }
    if (p.segment) e = add_bias(tape, e, p.segment);
    return e;
}

// ---------------------------------------------------------------------------
// Output heads

struct PlainHeadParams {
    TensorRef w;  // V x H
    TensorRef b;  // 1 x V
};

inline TensorRef plain_head_forward(Tape& tape, const TensorRef& h, const PlainHeadParams& p) {
    return log_softmax(tape, add_bias(tape, matmul_nt(tape, h, p.w), p.b));
}

// Mixture of softmaxes: K tanh projections share one output embedding, and a
// learned prior mixes the K component distributions per position.
struct MosParams {
    std::size_t components = 0;
    TensorRef prior_w;  // K x H
    TensorRef prior_b;  // 1 x K
    std::vector<TensorRef> proj_w;  // K of H x H
    std::vector<TensorRef> proj_b;  // K of 1 x H
    TensorRef out_w;  // V x H, shared across components
    TensorRef out_b;  // 1 x V
};

// Returns log p(w | h) with p = sum_k pi_k(h) * softmax_k(.); rows
// exponentiate-and-sum to 1.
inline TensorRef mos_forward(Tape& tape, const TensorRef& h, const MosParams& p) {
    if (p.components < 1) throw ConfigError("mixture of softmaxes requires K >= 1 components");
    if (p.proj_w.size() != p.components || p.proj_b.size() != p.components)
        throw ConfigError("mixture of softmaxes: projection count does not match K");
    auto prior = softmax(tape, add_bias(tape, matmul_nt(tape, h, p.prior_w), p.prior_b));
    TensorRef mixture;
    for (std::size_t k = 0; k < p.components; ++k) {
        auto hk = tanh(tape, add_bias(tape, matmul_nt(tape, h, p.proj_w[k]), p.proj_b[k]));
        auto pk = softmax(tape, add_bias(tape, matmul_nt(tape, hk, p.out_w), p.out_b));
        auto weighted = scale_rows(tape, pk, slice_cols(tape, prior, k, k + 1));
        mixture = mixture ? add(tape, mixture, weighted) : weighted;
    }
    return log(tape, mixture);
}

}  // namespace cas
