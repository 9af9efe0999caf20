#pragma once

// Architecture descriptors and the three network transformations:
//
//   AddLinear  adds the output linear layer (skipped when one exists).
//   AddLSTM    places an LSTM stack before or after the Transformer blocks
//              (uniformly at random on first application; placing it first
//              removes the positional and segment embeddings), or appends a
//              layer to an existing stack while fewer than 3 exist.
//   FixSubset  draws k uniformly from [0, n] and freezes a uniform k-subset
//              of the Transformer blocks, replacing any previous subset.
//
// A Transformation records the random choices realized when it was applied,
// so applying a recorded transformation is a pure function of (descriptor,
// record) and a transformation list can be replayed exactly.

#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cas/error.hpp"
#include "cas/rng.hpp"

namespace cas {

enum class LstmPosition { none, first, last };
enum class HeadKind { plain, mos };

inline const char* to_string(LstmPosition p) {
    switch (p) {
        case LstmPosition::none: return "none";
        case LstmPosition::first: return "first";
        case LstmPosition::last: return "last";
    }
    return "none";
}

inline const char* to_string(HeadKind k) {
    return k == HeadKind::plain ? "plain" : "mos";
}

// Transformations keep at most 3 LSTM layers; ablation presets may build
// deeper stacks directly.
inline constexpr std::size_t kMaxLstmLayersBySearch = 3;

struct ArchDescriptor {
    std::size_t num_blocks = 0;
    LstmPosition lstm_position = LstmPosition::none;
    std::size_t lstm_count = 0;
    std::set<std::size_t> frozen_blocks;
    bool has_output_linear = false;
    bool use_positional_embedding = true;
    bool use_segment_embedding = true;
    HeadKind head_kind = HeadKind::plain;
    std::size_t mos_components = 1;

    bool operator==(const ArchDescriptor&) const = default;

    // reachable_by_search additionally enforces the 3-layer LSTM cap that
    // holds for every transformation-produced descriptor.
    void validate(bool reachable_by_search = true) const {
        if ((lstm_count == 0) != (lstm_position == LstmPosition::none))
            throw ContractError("descriptor: lstm_count and lstm_position disagree");
        if (reachable_by_search && lstm_count > kMaxLstmLayersBySearch)
            throw ContractError("descriptor: more than " +
                                std::to_string(kMaxLstmLayersBySearch) + " LSTM layers");
        for (std::size_t b : frozen_blocks)
            if (b >= num_blocks)
                throw ContractError("descriptor: frozen block " + std::to_string(b) +
                                    " out of range for " + std::to_string(num_blocks) + " blocks");
        if (lstm_position == LstmPosition::first &&
            (use_positional_embedding || use_segment_embedding))
            throw ContractError(
                "descriptor: a leading LSTM must remove positional and segment embeddings");
        if (head_kind == HeadKind::mos && mos_components < 1)
            throw ContractError("descriptor: mixture head requires at least 1 component");
    }
};

inline nlohmann::json descriptor_to_json(const ArchDescriptor& d) {
    nlohmann::json j;
    j["num_blocks"] = d.num_blocks;
    j["lstm_position"] = to_string(d.lstm_position);
    j["lstm_count"] = d.lstm_count;
    j["frozen_blocks"] = std::vector<std::size_t>(d.frozen_blocks.begin(), d.frozen_blocks.end());
    j["has_output_linear"] = d.has_output_linear;
    j["use_positional_embedding"] = d.use_positional_embedding;
    j["use_segment_embedding"] = d.use_segment_embedding;
    j["head_kind"] = to_string(d.head_kind);
    j["mos_components"] = d.mos_components;
    return j;
}

inline ArchDescriptor descriptor_from_json(const nlohmann::json& j) {
    ArchDescriptor d;
    d.num_blocks = j.at("num_blocks").get<std::size_t>();
    const std::string pos = j.at("lstm_position").get<std::string>();
    d.lstm_position = pos == "first"  ? LstmPosition::first
                      : pos == "last" ? LstmPosition::last
                                      : LstmPosition::none;
    d.lstm_count = j.at("lstm_count").get<std::size_t>();
    for (const auto& b : j.at("frozen_blocks")) d.frozen_blocks.insert(b.get<std::size_t>());
    d.has_output_linear = j.at("has_output_linear").get<bool>();
    d.use_positional_embedding = j.at("use_positional_embedding").get<bool>();
    d.use_segment_embedding = j.at("use_segment_embedding").get<bool>();
    d.head_kind = j.at("head_kind").get<std::string>() == "mos" ? HeadKind::mos : HeadKind::plain;
    d.mos_components = j.at("mos_components").get<std::size_t>();
    return d;
}

// Sorted keys make this a canonical form usable as a map key.
inline std::string canonical_json(const ArchDescriptor& d) {
    return descriptor_to_json(d).dump();
}

// ---------------------------------------------------------------------------
// Transformations

enum class TransformKind { add_linear, add_lstm, fix_subset };

inline const char* to_string(TransformKind k) {
    switch (k) {
        case TransformKind::add_linear: return "add_linear";
        case TransformKind::add_lstm: return "add_lstm";
        case TransformKind::fix_subset: return "fix_subset";
    }
    return "add_linear";
}

struct Transformation {
    TransformKind kind = TransformKind::add_linear;
    // Realized random choices, sufficient to replay the application.
    LstmPosition lstm_placement = LstmPosition::none;  // add_lstm creating a stack
    std::size_t subset_k = 0;                          // fix_subset
    std::vector<std::size_t> subset_blocks;            // fix_subset, sorted

    bool operator==(const Transformation&) const = default;
};

inline nlohmann::json transformation_to_json(const Transformation& t) {
    nlohmann::json j;
    j["kind"] = to_string(t.kind);
    if (t.kind == TransformKind::add_lstm) j["lstm_placement"] = to_string(t.lstm_placement);
    if (t.kind == TransformKind::fix_subset) {
        j["subset_k"] = t.subset_k;
        j["subset_blocks"] = t.subset_blocks;
    }
    return j;
}

inline Transformation transformation_from_json(const nlohmann::json& j) {
    Transformation t;
    const std::string kind = j.at("kind").get<std::string>();
    t.kind = kind == "add_lstm"     ? TransformKind::add_lstm
             : kind == "fix_subset" ? TransformKind::fix_subset
                                    : TransformKind::add_linear;
    if (t.kind == TransformKind::add_lstm)
        t.lstm_placement = j.at("lstm_placement").get<std::string>() == "first"
                               ? LstmPosition::first
                               : LstmPosition::last;
    if (t.kind == TransformKind::fix_subset) {
        t.subset_k = j.at("subset_k").get<std::size_t>();
        for (const auto& b : j.at("subset_blocks"))
            t.subset_blocks.push_back(b.get<std::size_t>());
    }
    return t;
}

// Draws the random choices a transformation needs against the descriptor it
// will be applied to.
inline Transformation realize_transformation(TransformKind kind, const ArchDescriptor& d,
                                             Rng& rng) {
    Transformation t;
    t.kind = kind;
    switch (kind) {
        case TransformKind::add_linear:
            break;
        case TransformKind::add_lstm:
            t.lstm_placement = d.lstm_count == 0
                                   ? (rng.next_index(2) == 0 ? LstmPosition::first
                                                             : LstmPosition::last)
                                   : d.lstm_position;
            break;
        case TransformKind::fix_subset:
            t.subset_k = rng.next_index(d.num_blocks + 1);
            t.subset_blocks = rng.sample_subset(d.num_blocks, t.subset_k);
            break;
    }
    return t;
}

// Pure application of a recorded transformation. No-ops are legal.
inline ArchDescriptor apply_transformation(const ArchDescriptor& d, const Transformation& t) {
    ArchDescriptor out = d;
    switch (t.kind) {
        case TransformKind::add_linear:
            out.has_output_linear = true;  // skipped if it already exists
            break;
        case TransformKind::add_lstm:
            if (out.lstm_count == 0) {
                out.lstm_position = t.lstm_placement;
                out.lstm_count = 1;
                if (out.lstm_position == LstmPosition::first) {
                    out.use_positional_embedding = false;
                    out.use_segment_embedding = false;
                }
            } else if (out.lstm_count < kMaxLstmLayersBySearch) {
                out.lstm_count += 1;  // append at the existing site
            }
            break;
        case TransformKind::fix_subset:
            out.frozen_blocks.clear();
            out.frozen_blocks.insert(t.subset_blocks.begin(), t.subset_blocks.end());
            break;
    }
    return out;
}

inline std::pair<ArchDescriptor, Transformation> apply_transformation(const ArchDescriptor& d,
                                                                      TransformKind kind,
                                                                      Rng& rng) {
    Transformation t = realize_transformation(kind, d, rng);
    return {apply_transformation(d, t), t};
}

inline ArchDescriptor replay_transformations(const ArchDescriptor& base,
                                             const std::vector<Transformation>& list) {
    ArchDescriptor d = base;
    for (const auto& t : list) d = apply_transformation(d, t);
    return d;
}

// ---------------------------------------------------------------------------
// Candidate sampling

inline const std::vector<TransformKind>& all_transformations() {
    static const std::vector<TransformKind> kAll = {
        TransformKind::add_linear, TransformKind::add_lstm, TransformKind::fix_subset};
    return kAll;
}

// Draws transformations uniformly from the pool and applies them until the
// first AddLinear draw (inclusive); with a uniform pool the list length is
// geometric with p = 1/|pool|. Terminates with probability 1.
inline std::pair<ArchDescriptor, std::vector<Transformation>> sample_candidate(
    const ArchDescriptor& base, Rng& rng,
    const std::vector<TransformKind>& pool = all_transformations()) {
    bool has_terminator = false;
    for (TransformKind k : pool) has_terminator |= (k == TransformKind::add_linear);
    if (!has_terminator)
        throw ConfigError("candidate sampling pool must contain the output-layer transformation");

    ArchDescriptor candidate = base;
    std::vector<Transformation> applied;
    for (;;) {
        const TransformKind kind = pool[rng.next_index(pool.size())];
        Transformation t = realize_transformation(kind, candidate, rng);
        candidate = apply_transformation(candidate, t);
        applied.push_back(std::move(t));
        if (kind == TransformKind::add_linear) break;
    }
    return {candidate, applied};
}

}  // namespace cas
