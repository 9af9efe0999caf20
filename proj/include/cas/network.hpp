#pragma once

// Composes a ModelInstance's named parameters into the full language-model
// forward pass: embeddings -> optional leading LSTM stack -> Transformer
// blocks -> optional trailing LSTM stack -> output head -> log-probs.
//
// Recurrent state is carried across consecutive windows as detached values
// (truncated back-propagation through time): gradients never cross a window
// boundary.

#include <cstdint>
#include <string>
#include <vector>

#include "cas/error.hpp"
#include "cas/layers.hpp"
#include "cas/model.hpp"
#include "cas/tensor.hpp"

namespace cas {

// Borrowed, structured view over a model's parameters.
struct NetworkView {
    const ModelInstance* model = nullptr;
    EmbeddingParams embedding;
    std::vector<LstmLayerParams> lstm;  // the single stack, first or last
    std::vector<TransformerBlockParams> blocks;
    HeadKind head_kind = HeadKind::plain;
    PlainHeadParams plain_head;
    MosParams mos_head;

    static NetworkView build(const ModelInstance& m) {
        NetworkView net;
        net.model = &m;
        const auto need = [&](const std::string& name) -> TensorRef {
            const NamedParam* p = m.find(name);
            if (!p) throw ContractError("model is missing parameter " + name);
            return p->tensor;
        };
        net.embedding.token = need("embed.token");
        if (m.arch.use_positional_embedding) net.embedding.position = need("embed.pos");
        if (m.arch.use_segment_embedding) net.embedding.segment = need("embed.seg");

        for (std::size_t l = 0; l < m.arch.lstm_count; ++l) {
            const std::string prefix = "lstm" + std::to_string(l) + ".";
            LstmLayerParams lp;
            lp.hidden = m.dims.hidden;
            lp.wx = need(prefix + "wx");
            lp.wh = need(prefix + "wh");
            lp.b = need(prefix + "b");
            net.lstm.push_back(lp);
        }

        for (std::size_t b = 0; b < m.arch.num_blocks; ++b) {
            const std::string prefix = "block" + std::to_string(b) + ".";
            TransformerBlockParams tp;
            tp.hidden = m.dims.hidden;
            tp.heads = m.dims.heads;
            tp.wq = need(prefix + "attn.wq");
            tp.bq = need(prefix + "attn.bq");
            tp.wk = need(prefix + "attn.wk");
            tp.bk = need(prefix + "attn.bk");
            tp.wv = need(prefix + "attn.wv");
            tp.bv = need(prefix + "attn.bv");
            tp.wo = need(prefix + "attn.wo");
            tp.bo = need(prefix + "attn.bo");
            tp.w1 = need(prefix + "ffn.w1");
            tp.b1 = need(prefix + "ffn.b1");
            tp.w2 = need(prefix + "ffn.w2");
            tp.b2 = need(prefix + "ffn.b2");
            tp.ln1_g = need(prefix + "ln1.g");
            tp.ln1_b = need(prefix + "ln1.b");
            tp.ln2_g = need(prefix + "ln2.g");
            tp.ln2_b = need(prefix + "ln2.b");
            net.blocks.push_back(tp);
        }

        if (!m.arch.has_output_linear)
            throw ContractError("model has no output linear layer; it cannot emit log-probs");
        net.head_kind = m.arch.head_kind;
        if (net.head_kind == HeadKind::plain) {
            net.plain_head.w = need("head.w");
            net.plain_head.b = need("head.b");
        } else {
            net.mos_head.components = m.arch.mos_components;
            net.mos_head.prior_w = need("head.prior.w");
            net.mos_head.prior_b = need("head.prior.b");
            for (std::size_t k = 0; k < m.arch.mos_components; ++k) {
                const std::string prefix = "head.proj" + std::to_string(k) + ".";
                net.mos_head.proj_w.push_back(need(prefix + "w"));
                net.mos_head.proj_b.push_back(need(prefix + "b"));
            }
            net.mos_head.out_w = need("head.out.w");
            net.mos_head.out_b = need("head.out.b");
        }
        return net;
    }
};

// Detached per-stream recurrent state, one (h, c) per LSTM layer.
struct RecurrentState {
    std::vector<std::vector<double>> h;
    std::vector<std::vector<double>> c;

    static RecurrentState zeros(std::size_t layers, std::size_t hidden) {
        RecurrentState s;
        s.h.assign(layers, std::vector<double>(hidden, 0.0));
        s.c.assign(layers, std::vector<double>(hidden, 0.0));
        return s;
    }

    void reset() {
        for (auto& v : h) std::fill(v.begin(), v.end(), 0.0);
        for (auto& v : c) std::fill(v.begin(), v.end(), 0.0);
    }
};

// Forward over one window of tokens (length <= max_seq_len when positional
// embeddings are present). Updates `state` in place with detached final
// values when the model has LSTM layers.
inline TensorRef lm_log_probs(Tape& tape, const NetworkView& net,
                              const std::vector<std::uint32_t>& tokens, RecurrentState* state,
                              const DropoutCtx& drop) {
    if (tokens.empty()) throw ContractError("lm_log_probs: empty token window");
    auto h = embed(tape, tokens, net.embedding);

    const auto run_stack = [&](TensorRef x) {
        for (std::size_t l = 0; l < net.lstm.size(); ++l) {
            LstmState init = zero_lstm_state(net.lstm[l].hidden);
            if (state) {
                init.h->data = state->h[l];
                init.c->data = state->c[l];
            }
            auto [seq, fin] = lstm_forward(tape, x, net.lstm[l], init);
            if (state) {
                state->h[l] = fin.h->data;  // detach: values only
                state->c[l] = fin.c->data;
            }
            x = drop.apply(tape, seq, drop.lstm);
        }
        return x;
    };

    if (net.model->arch.lstm_position == LstmPosition::first) h = run_stack(h);
    for (const auto& block : net.blocks) h = transformer_block_forward(tape, h, block, drop);
    if (net.model->arch.lstm_position == LstmPosition::last) h = run_stack(h);

    h = drop.apply(tape, h, drop.head);
    return net.head_kind == HeadKind::plain ? plain_head_forward(tape, h, net.plain_head)
                                            : mos_forward(tape, h, net.mos_head);
}

}  // namespace cas
