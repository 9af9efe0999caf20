#pragma once

// Greedy coordinate search over architectures. Each step samples a candidate
// from the current best descriptor, fine-tunes it, and accepts it only on a
// strict validation-perplexity improvement. The initial baseline is one
// fine-tune of the base model with only the output head trainable.
//
// The evaluator is injected so the loop can be driven by the real trainer or
// by a deterministic mock in tests. A fine-tune that diverges is logged with
// infinite perplexity and rejected; the run continues.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cas/arch.hpp"
#include "cas/corpus.hpp"
#include "cas/error.hpp"
#include "cas/model.hpp"
#include "cas/rng.hpp"
#include "cas/trainer.hpp"

namespace cas {

enum class SearchPreset {
    full,         // all three transformations
    subset_only,  // no AddLSTM
    lstm_only,    // no FixSubset; every candidate freezes all blocks
    fixed_only,   // LSTM stack replaces the Transformer blocks
    fixed_none,   // no LSTM; doubled block count instead
    fixed_first,  // one LSTM before the blocks
    fixed_last,   // one LSTM after the blocks
};

inline const char* to_string(SearchPreset p) {
    switch (p) {
        case SearchPreset::full: return "full";
        case SearchPreset::subset_only: return "subset-only";
        case SearchPreset::lstm_only: return "lstm-only";
        case SearchPreset::fixed_only: return "only-lstm";
        case SearchPreset::fixed_none: return "none-lstm";
        case SearchPreset::fixed_first: return "first-lstm";
        case SearchPreset::fixed_last: return "last-lstm";
    }
    return "full";
}

inline bool is_fixed_placement(SearchPreset p) {
    return p == SearchPreset::fixed_only || p == SearchPreset::fixed_none ||
           p == SearchPreset::fixed_first || p == SearchPreset::fixed_last;
}

enum class WeightsMode { restart, inherit };

struct SearchConfig {
    std::size_t steps = 10;
    std::uint64_t seed = 0;
    TrainConfig fine_tune;
    SearchPreset preset = SearchPreset::full;
    WeightsMode weights = WeightsMode::restart;
};

struct CandidateRecord {
    std::size_t step = 0;  // 1-based
    std::vector<Transformation> transformations;
    ArchDescriptor descriptor;
    double val_ppl = std::numeric_limits<double>::infinity();
    double test_ppl = std::numeric_limits<double>::infinity();
    bool accepted = false;
    bool diverged = false;
    double wall_clock_s = 0.0;
    std::uint64_t tokens = 0;
};

struct SearchLog {
    ArchDescriptor initial_descriptor;
    double initial_val_ppl = std::numeric_limits<double>::infinity();
    double initial_test_ppl = std::numeric_limits<double>::infinity();
    bool has_baseline = false;
    std::vector<CandidateRecord> records;
    ArchDescriptor best_descriptor;
    double best_val_ppl = std::numeric_limits<double>::infinity();
    double best_test_ppl = std::numeric_limits<double>::infinity();
};

struct SearchCost {
    std::size_t candidate_evaluations = 0;
    double total_wall_clock_s = 0.0;
    std::uint64_t total_tokens = 0;
};

inline SearchCost account_search_cost(const SearchLog& log) {
    SearchCost cost;
    cost.candidate_evaluations = log.records.size();
    for (const auto& r : log.records) {
        cost.total_wall_clock_s += r.wall_clock_s;
        cost.total_tokens += r.tokens;
    }
    return cost;
}

// ---------------------------------------------------------------------------
// Evaluators

struct EvalOutcome {
    double val_ppl = std::numeric_limits<double>::infinity();
    double test_ppl = std::numeric_limits<double>::infinity();
    double wall_clock_s = 0.0;
    std::uint64_t tokens = 0;
};

class CandidateEvaluator {
public:
    virtual ~CandidateEvaluator() = default;
    // step 0 is the head-only baseline evaluation of the initial net.
    virtual EvalOutcome evaluate(const ArchDescriptor& candidate, std::size_t step,
                                 bool head_only) = 0;
    virtual void on_accepted(std::size_t step) { (void)step; }
};

// Fine-tunes candidates against a corpus. In restart mode every candidate's
// shared weights come from the original base; in inherit mode they come from
// the last accepted fine-tune.
class FineTuneEvaluator : public CandidateEvaluator {
public:
    FineTuneEvaluator(const ModelInstance& base, const TokenizedCorpus& corpus,
                      const SearchConfig& cfg)
        : base_(&base), corpus_(&corpus), cfg_(&cfg) {}

    EvalOutcome evaluate(const ArchDescriptor& candidate, std::size_t step,
                         bool head_only) override {
        const ModelInstance& source =
            (cfg_->weights == WeightsMode::inherit && best_) ? *best_ : *base_;
        Rng init = Rng(cfg_->seed).substream("init/candidate" + std::to_string(step));
        Rng drop = Rng(cfg_->seed).substream("dropout/candidate" + std::to_string(step));
        last_ = std::make_unique<ModelInstance>(instantiate_model(candidate, source, init));
        if (head_only) last_->set_head_only_trainable();
        FineTuneResult r = fine_tune(*last_, *corpus_, cfg_->fine_tune, std::move(drop));
        return EvalOutcome{r.val_ppl, r.test_ppl, r.wall_clock_s, r.tokens_processed};
    }

    void on_accepted(std::size_t step) override {
        (void)step;
        if (last_) best_ = std::move(last_);
    }

    // The fine-tuned weights of the best candidate seen so far.
    const ModelInstance* best_instance() const { return best_.get(); }

private:
    const ModelInstance* base_;
    const TokenizedCorpus* corpus_;
    const SearchConfig* cfg_;
    std::unique_ptr<ModelInstance> last_;
    std::unique_ptr<ModelInstance> best_;
};

// Deterministic stand-in for tests: perplexity is a pure function of the
// candidate descriptor.
class MockEvaluator : public CandidateEvaluator {
public:
    using PplFn = std::function<double(const ArchDescriptor&)>;
    explicit MockEvaluator(PplFn fn) : fn_(std::move(fn)) {}

    EvalOutcome evaluate(const ArchDescriptor& candidate, std::size_t, bool) override {
        const double ppl = fn_(candidate);
        return EvalOutcome{ppl, ppl, 0.0, 0};
    }

private:
    PplFn fn_;
};

// ---------------------------------------------------------------------------
// Coordinate search

inline std::vector<TransformKind> sampling_pool(SearchPreset preset) {
    switch (preset) {
        case SearchPreset::subset_only:
            return {TransformKind::add_linear, TransformKind::fix_subset};
        case SearchPreset::lstm_only:
            return {TransformKind::add_linear, TransformKind::add_lstm};
        default:
            return all_transformations();
    }
}

// Runs the greedy loop. The baseline (step 0) fine-tunes the initial net
// head-only to establish the perplexity to beat; each of the `steps`
// candidates is accepted iff its validation perplexity strictly improves on
// the best so far.
inline SearchLog coordinate_search_core(const ArchDescriptor& base_arch, const SearchConfig& cfg,
                                        CandidateEvaluator& evaluator) {
    ArchDescriptor initial = base_arch;
    initial.has_output_linear = true;  // the initial net always has a head
    if (cfg.preset == SearchPreset::lstm_only) {
        initial.frozen_blocks.clear();
        for (std::size_t b = 0; b < initial.num_blocks; ++b) initial.frozen_blocks.insert(b);
    }
    initial.validate();

    SearchLog log;
    log.initial_descriptor = initial;
    const EvalOutcome baseline = evaluator.evaluate(initial, 0, /*head_only=*/true);
    log.has_baseline = true;
    log.initial_val_ppl = baseline.val_ppl;
    log.initial_test_ppl = baseline.test_ppl;
    log.best_descriptor = initial;
    log.best_val_ppl = baseline.val_ppl;
    log.best_test_ppl = baseline.test_ppl;
    evaluator.on_accepted(0);

    const auto pool = sampling_pool(cfg.preset);
    Rng sampling = Rng(cfg.seed).substream("sampling");
    ArchDescriptor net_best = initial;

    for (std::size_t step = 1; step <= cfg.steps; ++step) {
        CandidateRecord rec;
        rec.step = step;
        auto [candidate, applied] = sample_candidate(net_best, sampling, pool);
        if (cfg.preset == SearchPreset::lstm_only) {
            candidate.frozen_blocks.clear();
            for (std::size_t b = 0; b < candidate.num_blocks; ++b)
                candidate.frozen_blocks.insert(b);
        }
        candidate.validate();
        rec.transformations = std::move(applied);
        rec.descriptor = candidate;

        try {
            const EvalOutcome out = evaluator.evaluate(candidate, step, /*head_only=*/false);
            rec.val_ppl = out.val_ppl;
            rec.test_ppl = out.test_ppl;
            rec.wall_clock_s = out.wall_clock_s;
            rec.tokens = out.tokens;
        } catch (const DivergenceError&) {
            rec.diverged = true;  // rejected; the search continues
        }

        if (rec.val_ppl < log.best_val_ppl) {
            rec.accepted = true;
            log.best_val_ppl = rec.val_ppl;
            log.best_test_ppl = rec.test_ppl;
            log.best_descriptor = candidate;
            net_best = candidate;
            evaluator.on_accepted(step);
        }
        log.records.push_back(std::move(rec));
    }
    return log;
}

struct SearchResult {
    SearchLog log;
    ModelInstance best;  // fine-tuned weights of the best architecture
};

inline SearchResult coordinate_search(const ModelInstance& base, const TokenizedCorpus& corpus,
                                      const SearchConfig& cfg) {
    if (is_fixed_placement(cfg.preset))
        throw ConfigError("fixed-placement presets are ablation variants, not searches");
    FineTuneEvaluator evaluator(base, corpus, cfg);
    SearchResult result;
    result.log = coordinate_search_core(base.arch, cfg, evaluator);
    if (!evaluator.best_instance())
        throw ContractError("search finished without a materialized best model");
    result.best = *evaluator.best_instance();
    return result;
}

// ---------------------------------------------------------------------------
// Ablation presets

// Builds the descriptor for one fixed-placement variant of the base
// architecture.
inline ArchDescriptor make_fixed_placement(SearchPreset preset, const ArchDescriptor& base) {
    ArchDescriptor d = base;
    d.has_output_linear = true;
    d.frozen_blocks.clear();
    switch (preset) {
        case SearchPreset::fixed_only:
            // The LSTM stack replaces all Transformer blocks.
            d.num_blocks = 0;
            d.lstm_position = LstmPosition::first;
            d.lstm_count = 6;
            d.use_positional_embedding = false;
            d.use_segment_embedding = false;
            break;
        case SearchPreset::fixed_none:
            // No LSTM; another stack of blocks doubles the depth instead.
            d.num_blocks = 2 * base.num_blocks;
            d.lstm_position = LstmPosition::none;
            d.lstm_count = 0;
            break;
        case SearchPreset::fixed_first:
            d.lstm_position = LstmPosition::first;
            d.lstm_count = 1;
            d.use_positional_embedding = false;
            d.use_segment_embedding = false;
            break;
        case SearchPreset::fixed_last:
            d.lstm_position = LstmPosition::last;
            d.lstm_count = 1;
            break;
        default:
            throw ConfigError("not a fixed-placement preset");
    }
    d.validate(false);
    return d;
}

// Runs one ablation variant. Search presets delegate to the coordinate
// search; fixed-placement presets build the variant directly and fine-tune it
// once (its log carries the single result as both initial and best).
inline SearchResult run_ablation(SearchPreset preset, const ModelInstance& base,
                                 const TokenizedCorpus& corpus, SearchConfig cfg) {
    cfg.preset = preset;
    if (!is_fixed_placement(preset)) return coordinate_search(base, corpus, cfg);

    const ArchDescriptor variant = make_fixed_placement(preset, base.arch);
    Rng init = Rng(cfg.seed).substream("init/" + std::string(to_string(preset)));
    Rng drop = Rng(cfg.seed).substream("dropout/" + std::string(to_string(preset)));
    SearchResult result;
    result.best = instantiate_model(variant, base, init);
    const FineTuneResult r = fine_tune(result.best, corpus, cfg.fine_tune, std::move(drop));
    result.log.initial_descriptor = variant;
    result.log.initial_val_ppl = r.val_ppl;
    result.log.initial_test_ppl = r.test_ppl;
    result.log.has_baseline = false;
    result.log.best_descriptor = variant;
    result.log.best_val_ppl = r.val_ppl;
    result.log.best_test_ppl = r.test_ppl;
    return result;
}

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

inline nlohmann::json ppl_json(double v) {
    if (std::isinf(v) || std::isnan(v)) return nullptr;
    return v;
}

}  // namespace detail

inline nlohmann::json record_to_json(const CandidateRecord& r) {
    nlohmann::json j;
    j["step"] = r.step;
    nlohmann::json ts = nlohmann::json::array();
    for (const auto& t : r.transformations) ts.push_back(transformation_to_json(t));
    j["transformations"] = ts;
    j["descriptor"] = descriptor_to_json(r.descriptor);
    j["val_ppl"] = detail::ppl_json(r.val_ppl);
    j["test_ppl"] = detail::ppl_json(r.test_ppl);
    j["accepted"] = r.accepted;
    j["diverged"] = r.diverged;
    j["wall_clock_s"] = r.wall_clock_s;
    j["tokens"] = r.tokens;
    return j;
}

inline CandidateRecord record_from_json(const nlohmann::json& j) {
    CandidateRecord r;
    r.step = j.at("step").get<std::size_t>();
    for (const auto& t : j.at("transformations"))
        r.transformations.push_back(transformation_from_json(t));
    r.descriptor = descriptor_from_json(j.at("descriptor"));
    r.val_ppl = j.at("val_ppl").is_null() ? std::numeric_limits<double>::infinity()
                                          : j.at("val_ppl").get<double>();
    r.test_ppl = j.at("test_ppl").is_null() ? std::numeric_limits<double>::infinity()
                                            : j.at("test_ppl").get<double>();
    r.accepted = j.at("accepted").get<bool>();
    r.diverged = j.at("diverged").get<bool>();
    r.wall_clock_s = j.at("wall_clock_s").get<double>();
    r.tokens = j.at("tokens").get<std::uint64_t>();
    return r;
}

// One JSON object per line, one line per candidate record.
inline std::string log_to_jsonl(const SearchLog& log) {
    std::string out;
    for (const auto& r : log.records) {
        out += record_to_json(r).dump();
        out += '\n';
    }
    return out;
}

inline nlohmann::json log_to_summary_json(const SearchLog& log) {
    nlohmann::json j;
    j["initial"] = {{"descriptor", descriptor_to_json(log.initial_descriptor)},
                    {"val_ppl", detail::ppl_json(log.initial_val_ppl)},
                    {"test_ppl", detail::ppl_json(log.initial_test_ppl)},
                    {"is_baseline", log.has_baseline}};
    j["best"] = {{"descriptor", descriptor_to_json(log.best_descriptor)},
                 {"val_ppl", detail::ppl_json(log.best_val_ppl)},
                 {"test_ppl", detail::ppl_json(log.best_test_ppl)}};
    const SearchCost cost = account_search_cost(log);
    j["cost"] = {{"candidate_evaluations", cost.candidate_evaluations},
                 {"total_wall_clock_s", cost.total_wall_clock_s},
                 {"total_tokens", cost.total_tokens}};
    j["records"] = log.records.size();
    return j;
}

}  // namespace cas
