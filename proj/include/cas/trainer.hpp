#pragma once

// Training and evaluation: base-model pretraining, candidate fine-tuning with
// frozen subsets, and perplexity evaluation.
//
// The training stream is split into `batch_size` contiguous sub-streams; each
// optimizer step consumes one window of `seq_len` tokens per sub-stream and
// averages the per-stream losses. LSTM state is carried across consecutive
// windows within an epoch and detached at every window boundary (truncated
// BPTT); it resets between epochs. Evaluation is dropout-free and processes
// the stream as one sequence of non-overlapping windows in a fixed order, so
// its value does not depend on any batching choice.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cas/adam.hpp"
#include "cas/corpus.hpp"
#include "cas/error.hpp"
#include "cas/model.hpp"
#include "cas/network.hpp"
#include "cas/rng.hpp"
#include "cas/tensor.hpp"

namespace cas {

struct TrainConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    double weight_decay = 0.01;
    bool decoupled_weight_decay = true;
    std::size_t seq_len = 32;
    std::size_t batch_size = 16;
    std::size_t epochs = 1;
    double grad_clip_norm = 0.25;  // 0 disables clipping
    double dropout_attn = 0.1;
    double dropout_resid = 0.1;
    double dropout_lstm = 0.1;
    double dropout_head = 0.1;

    void validate() const {
        if (seq_len < 2) throw ConfigError("seq_len must be at least 2");
        if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
        if (epochs < 1) throw ConfigError("epochs must be at least 1");
        if (lr <= 0.0) throw ConfigError("learning rate must be positive");
    }

    AdamConfig adam() const {
        return AdamConfig{lr, beta1, beta2, epsilon, weight_decay, decoupled_weight_decay};
    }

    DropoutCtx dropout_ctx(Rng* rng) const {
        return DropoutCtx{rng, dropout_attn, dropout_resid, dropout_lstm, dropout_head};
    }
};

struct LossPoint {
    std::size_t epoch;
    std::size_t step;  // step within the epoch
    double loss;
};

struct FineTuneResult {
    double val_ppl = 0.0;
    double test_ppl = 0.0;
    std::vector<LossPoint> loss_curve;
    double wall_clock_s = 0.0;
    std::uint64_t tokens_processed = 0;
    std::size_t trainable_params = 0;
    std::size_t total_params = 0;
};

namespace detail {

// Splits a stream into `n` contiguous sub-streams of equal length (the tail
// remainder is dropped).
inline std::vector<std::vector<std::uint32_t>> batchify(const std::vector<std::uint32_t>& stream,
                                                        std::size_t n) {
    const std::size_t per = stream.size() / n;
    std::vector<std::vector<std::uint32_t>> out(n);
    for (std::size_t b = 0; b < n; ++b)
        out[b].assign(stream.begin() + static_cast<std::ptrdiff_t>(b * per),
                      stream.begin() + static_cast<std::ptrdiff_t>((b + 1) * per));
    return out;
}

inline std::vector<std::uint32_t> window(const std::vector<std::uint32_t>& stream,
                                         std::size_t begin, std::size_t len) {
    return {stream.begin() + static_cast<std::ptrdiff_t>(begin),
            stream.begin() + static_cast<std::ptrdiff_t>(begin + len)};
}

}  // namespace detail

// Runs the optimization loop on `model`'s trainable parameters. Throws
// DivergenceError when the loss goes non-finite.
inline std::vector<LossPoint> run_training(ModelInstance& model,
                                           const std::vector<std::uint32_t>& train_stream,
                                           const TrainConfig& cfg, Rng dropout_rng) {
    cfg.validate();
    const auto net = NetworkView::build(model);
    const auto streams = detail::batchify(train_stream, cfg.batch_size);
    if (streams[0].size() < cfg.seq_len + 1)
        throw ConfigError("training stream too short: " + std::to_string(train_stream.size()) +
                          " tokens for batch_size " + std::to_string(cfg.batch_size) +
                          " and seq_len " + std::to_string(cfg.seq_len));
    const std::size_t windows = (streams[0].size() - 1) / cfg.seq_len;

    const auto trainable = model.trainable_tensors();
    AdamOptimizer opt(cfg.adam());
    DropoutCtx drop = cfg.dropout_ctx(&dropout_rng);

    std::vector<LossPoint> curve;
    curve.reserve(cfg.epochs * windows);
    std::size_t global_step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::vector<RecurrentState> states(
            cfg.batch_size, RecurrentState::zeros(model.arch.lstm_count, model.dims.hidden));
        for (std::size_t w = 0; w < windows; ++w) {
            Tape tape;
            TensorRef total;
            for (std::size_t b = 0; b < cfg.batch_size; ++b) {
                const std::size_t t0 = w * cfg.seq_len;
                const auto inputs = detail::window(streams[b], t0, cfg.seq_len);
                const auto targets = detail::window(streams[b], t0 + 1, cfg.seq_len);
                auto log_probs = lm_log_probs(tape, net, inputs, &states[b], drop);
                auto loss = cross_entropy(tape, log_probs, targets);
                total = total ? add(tape, total, loss) : loss;
            }
            total = scale(tape, total, 1.0 / static_cast<double>(cfg.batch_size));
            const double loss_value = total->data[0];
            if (!std::isfinite(loss_value)) throw DivergenceError(global_step, loss_value);

            model.zero_grad();
            backward(total, tape);
            clip_grad_norm(trainable, cfg.grad_clip_norm);
            opt.step(trainable);

            curve.push_back({epoch, w, loss_value});
            ++global_step;
        }
    }
    return curve;
}

// exp(total NLL / token count) over non-overlapping windows with state
// carryover and no dropout.
inline double evaluate_perplexity(const ModelInstance& model,
                                  const std::vector<std::uint32_t>& stream,
                                  std::size_t seq_len) {
    if (stream.size() < 2) throw ContractError("evaluate_perplexity: stream has no targets");
    if (seq_len < 1) throw ConfigError("evaluate_perplexity: seq_len must be positive");
    const auto net = NetworkView::build(model);
    DropoutCtx no_drop;  // evaluation never applies dropout
    RecurrentState state = RecurrentState::zeros(model.arch.lstm_count, model.dims.hidden);

    double total_nll = 0.0;
    std::uint64_t count = 0;
    std::size_t t0 = 0;
    while (t0 + 1 < stream.size()) {
        const std::size_t len = std::min(seq_len, stream.size() - 1 - t0);
        const auto inputs = detail::window(stream, t0, len);
        const auto targets = detail::window(stream, t0 + 1, len);
        Tape tape;
        tape.set_active(false);
        auto log_probs = lm_log_probs(tape, net, inputs, &state, no_drop);
        total_nll += nll_sum(*log_probs, targets);
        count += len;
        t0 += len;
    }
    return std::exp(total_nll / static_cast<double>(count));
}

// Fine-tunes a materialized candidate; optimizer updates exclude frozen
// parameters. Returns validation/test perplexity of the final weights.
inline FineTuneResult fine_tune(ModelInstance& model, const TokenizedCorpus& corpus,
                                const TrainConfig& cfg, Rng dropout_rng) {
    if (corpus.vocab != model.dims.vocab)
        throw MismatchError("corpus vocabulary " + std::to_string(corpus.vocab) +
                            " does not match model vocabulary " +
                            std::to_string(model.dims.vocab));
    const auto start = std::chrono::steady_clock::now();
    FineTuneResult result;
    result.loss_curve = run_training(model, corpus.train, cfg, std::move(dropout_rng));
    result.val_ppl = evaluate_perplexity(model, corpus.valid, cfg.seq_len);
    result.test_ppl = evaluate_perplexity(model, corpus.test, cfg.seq_len);
    result.wall_clock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.tokens_processed = static_cast<std::uint64_t>(result.loss_curve.size()) *
                              cfg.batch_size * cfg.seq_len;
    result.trainable_params = model.trainable_param_count();
    result.total_params = model.total_param_count();
    return result;
}

// Pretrains a fresh base model on the corpus; the result serves as the
// starting point for architecture search.
inline ModelInstance pretrain_base(const TokenizedCorpus& corpus, const ArchDescriptor& arch,
                                   const ModelDims& dims, const TrainConfig& cfg, Rng init_rng,
                                   Rng dropout_rng, FineTuneResult* stats = nullptr) {
    if (corpus.vocab != dims.vocab)
        throw MismatchError("corpus vocabulary " + std::to_string(corpus.vocab) +
                            " does not match configured vocabulary " +
                            std::to_string(dims.vocab));
    if (!arch.has_output_linear)
        throw ConfigError("the base model needs an output linear layer to train as an LM");
    ModelInstance model = init_base_model(arch, dims, init_rng);
    FineTuneResult r = fine_tune(model, corpus, cfg, std::move(dropout_rng));
    if (stats) *stats = std::move(r);
    return model;
}

}  // namespace cas
