#pragma once

// Run configuration for the CLI: a flat JSON object with dotted keys, merged
// from an optional config file plus command-line overrides. The fully
// resolved config is serialized next to every output artifact so a run can be
// reproduced bit-identically.

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cas/arch.hpp"
#include "cas/error.hpp"
#include "cas/model.hpp"
#include "cas/search.hpp"
#include "cas/trainer.hpp"

namespace cas {

class RunConfig {
public:
    RunConfig() : values_(nlohmann::json::object()) {}

    static RunConfig from_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw IoError("cannot read config file " + path);
        nlohmann::json j;
        try {
            in >> j;
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
        }
        if (!j.is_object()) throw ConfigError("config file " + path + " must hold a JSON object");
        RunConfig cfg;
        cfg.values_ = std::move(j);
        return cfg;
    }

    // Applies "key=value" overrides; values parse as JSON when possible and
    // fall back to strings.
    void apply_override(const std::string& kv) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("override must look like key=value, got '" + kv + "'");
        const std::string key = kv.substr(0, eq);
        const std::string raw = kv.substr(eq + 1);
        nlohmann::json v = nlohmann::json::parse(raw, nullptr, false);
        values_[key] = v.is_discarded() ? nlohmann::json(raw) : v;
    }

    void set(const std::string& key, nlohmann::json v) { values_[key] = std::move(v); }
    bool has(const std::string& key) const { return values_.contains(key); }

    double get_double(const std::string& key, double fallback) const {
        return get_or<double>(key, fallback, "a number");
    }
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const {
        return get_or<std::uint64_t>(key, fallback, "a non-negative integer");
    }
    bool get_bool(const std::string& key, bool fallback) const {
        return get_or<bool>(key, fallback, "a boolean");
    }
    std::string get_string(const std::string& key, const std::string& fallback) const {
        return get_or<std::string>(key, fallback, "a string");
    }

    // The resolved config; nlohmann::json orders keys, so this is canonical.
    const nlohmann::json& values() const { return values_; }

    TrainConfig train_config(const std::string& prefix) const {
        TrainConfig t;
        t.lr = get_double(prefix + "lr", t.lr);
        t.beta1 = get_double(prefix + "beta1", t.beta1);
        t.beta2 = get_double(prefix + "beta2", t.beta2);
        t.epsilon = get_double(prefix + "epsilon", t.epsilon);
        t.weight_decay = get_double(prefix + "weight_decay", t.weight_decay);
        t.decoupled_weight_decay =
            get_bool(prefix + "decoupled_weight_decay", t.decoupled_weight_decay);
        t.seq_len = get_u64(prefix + "seq_len", t.seq_len);
        t.batch_size = get_u64(prefix + "batch_size", t.batch_size);
        t.epochs = get_u64(prefix + "epochs", t.epochs);
        t.grad_clip_norm = get_double(prefix + "grad_clip_norm", t.grad_clip_norm);
        t.dropout_attn = get_double(prefix + "dropout_attn", t.dropout_attn);
        t.dropout_resid = get_double(prefix + "dropout_resid", t.dropout_resid);
        t.dropout_lstm = get_double(prefix + "dropout_lstm", t.dropout_lstm);
        t.dropout_head = get_double(prefix + "dropout_head", t.dropout_head);
        t.validate();
        return t;
    }

    ModelDims model_dims(std::uint32_t vocab) const {
        ModelDims d;
        d.hidden = get_u64("arch.hidden", d.hidden);
        d.heads = get_u64("arch.heads", d.heads);
        d.vocab = vocab;
        d.max_seq_len = get_u64("arch.max_seq_len", d.max_seq_len);
        d.ffn_hidden = get_u64("arch.ffn_hidden", 0);
        d.validate();
        return d;
    }

    ArchDescriptor base_descriptor() const {
        ArchDescriptor a;
        a.num_blocks = get_u64("arch.num_blocks", 2);
        a.has_output_linear = true;
        const std::string head = get_string("arch.head_kind", "plain");
        if (head == "plain") {
            a.head_kind = HeadKind::plain;
        } else if (head == "mos") {
            a.head_kind = HeadKind::mos;
            a.mos_components = get_u64("arch.mos_components", 15);
        } else {
            throw ConfigError("arch.head_kind must be 'plain' or 'mos', got '" + head + "'");
        }
        a.validate();
        return a;
    }

    WeightsMode weights_mode() const {
        const std::string w = get_string("search.weights", "restart");
        if (w == "restart") return WeightsMode::restart;
        if (w == "inherit") return WeightsMode::inherit;
        throw ConfigError("search.weights must be 'restart' or 'inherit', got '" + w + "'");
    }

private:
    template <typename T>
    T get_or(const std::string& key, T fallback, const char* kind) const {
        if (!values_.contains(key)) return fallback;
        try {
            return values_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("config key '" + key + "' must be " + kind + ", got " +
                              values_.at(key).dump());
        }
    }

    nlohmann::json values_;
};

inline SearchPreset parse_search_preset(const std::string& s) {
    if (s == "full") return SearchPreset::full;
    if (s == "subset" || s == "subset-only") return SearchPreset::subset_only;
    if (s == "lstm" || s == "lstm-only") return SearchPreset::lstm_only;
    if (s == "only" || s == "only-lstm") return SearchPreset::fixed_only;
    if (s == "none" || s == "none-lstm") return SearchPreset::fixed_none;
    if (s == "first" || s == "first-lstm") return SearchPreset::fixed_first;
    if (s == "last" || s == "last-lstm") return SearchPreset::fixed_last;
    throw ConfigError("unknown preset '" + s + "'");
}

}  // namespace cas
