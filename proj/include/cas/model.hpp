#pragma once

// Materialized models: a descriptor plus named parameters, with per-parameter
// trainability (frozen blocks stay bit-identical through fine-tuning).
// Checkpoints are a versioned container: canonical-JSON metadata (descriptor,
// dimensions, parameter manifest with byte offsets) followed by a
// little-endian float64 payload.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cas/arch.hpp"
#include "cas/error.hpp"
#include "cas/rng.hpp"
#include "cas/tensor.hpp"

namespace cas {

static_assert(std::endian::native == std::endian::little,
              "checkpoint payload is little-endian float64");

// Sizes shared by every architecture derived from one base model.
struct ModelDims {
    std::size_t hidden = 64;
    std::size_t heads = 2;
    std::size_t vocab = 0;
    std::size_t max_seq_len = 256;
    std::size_t ffn_hidden = 0;  // 0 means 4 * hidden

    std::size_t ffn() const { return ffn_hidden ? ffn_hidden : 4 * hidden; }

    void validate() const {
        if (hidden == 0 || heads == 0 || hidden % heads != 0)
            throw ConfigError("hidden size must be a positive multiple of the head count");
        if (vocab < 2) throw ConfigError("vocabulary size must be at least 2");
        if (max_seq_len == 0) throw ConfigError("max sequence length must be positive");
    }

    bool operator==(const ModelDims&) const = default;
};

inline nlohmann::json dims_to_json(const ModelDims& d) {
    nlohmann::json j;
    j["hidden"] = d.hidden;
    j["heads"] = d.heads;
    j["vocab"] = d.vocab;
    j["max_seq_len"] = d.max_seq_len;
    j["ffn_hidden"] = d.ffn();
    return j;
}

inline ModelDims dims_from_json(const nlohmann::json& j) {
    ModelDims d;
    d.hidden = j.at("hidden").get<std::size_t>();
    d.heads = j.at("heads").get<std::size_t>();
    d.vocab = j.at("vocab").get<std::size_t>();
    d.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    d.ffn_hidden = j.at("ffn_hidden").get<std::size_t>();
    return d;
}

struct NamedParam {
    std::string name;
    TensorRef tensor;
    bool trainable = true;
};

struct ModelInstance {
    ArchDescriptor arch;
    ModelDims dims;
    std::vector<NamedParam> params;  // fixed, deterministic order

    const NamedParam* find(std::string_view name) const {
        for (const auto& p : params)
            if (p.name == name) return &p;
        return nullptr;
    }

    NamedParam* find(std::string_view name) {
        for (auto& p : params)
            if (p.name == name) return &p;
        return nullptr;
    }

    std::vector<TensorRef> trainable_tensors() const {
        std::vector<TensorRef> out;
        for (const auto& p : params)
            if (p.trainable) out.push_back(p.tensor);
        return out;
    }

    std::size_t total_param_count() const {
        std::size_t n = 0;
        for (const auto& p : params) n += p.tensor->size();
        return n;
    }

    std::size_t trainable_param_count() const {
        std::size_t n = 0;
        for (const auto& p : params)
            if (p.trainable) n += p.tensor->size();
        return n;
    }

    void zero_grad() const {
        for (const auto& p : params)
            if (p.trainable) p.tensor->zero_grad();
    }

    // Restricts training to the output head (the plain pre-search baseline).
    void set_head_only_trainable() {
        for (auto& p : params) set_trainable(p, p.name.rfind("head.", 0) == 0);
    }

    static void set_trainable(NamedParam& p, bool trainable) {
        p.trainable = trainable;
        p.tensor->requires_grad = trainable;
        if (trainable) p.tensor->ensure_grad();
    }
};

namespace detail {

// Enumerates the parameter layout of a descriptor in a fixed order. Weight
// matrices are (out x in); new parameters are drawn uniform scaled by
// 1 / sqrt(fan_in).
struct ParamSpec {
    std::string name;
    std::vector<std::size_t> shape;
    double init_bound;  // 0 for zeros, -1 for ones (layer-norm gains)
};

inline std::vector<ParamSpec> param_layout(const ArchDescriptor& a, const ModelDims& dims) {
    dims.validate();
    const std::size_t h = dims.hidden, v = dims.vocab, f = dims.ffn();
    const double wh = 1.0 / std::sqrt(static_cast<double>(h));
    std::vector<ParamSpec> specs;

    specs.push_back({"embed.token", {v, h}, wh});
    if (a.use_positional_embedding) specs.push_back({"embed.pos", {dims.max_seq_len, h}, wh});
    if (a.use_segment_embedding) specs.push_back({"embed.seg", {1, h}, wh});

    for (std::size_t l = 0; l < a.lstm_count; ++l) {
        const std::string prefix = "lstm" + std::to_string(l) + ".";
        specs.push_back({prefix + "wx", {4 * h, h}, wh});
        specs.push_back({prefix + "wh", {4 * h, h}, wh});
        specs.push_back({prefix + "b", {1, 4 * h}, 0.0});
    }

    for (std::size_t b = 0; b < a.num_blocks; ++b) {
        const std::string prefix = "block" + std::to_string(b) + ".";
        for (const char* m : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
            specs.push_back({prefix + m, {h, h}, wh});
        for (const char* m : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"})
            specs.push_back({prefix + m, {1, h}, 0.0});
        specs.push_back({prefix + "ffn.w1", {f, h}, wh});
        specs.push_back({prefix + "ffn.b1", {1, f}, 0.0});
        specs.push_back({prefix + "ffn.w2", {h, f}, 1.0 / std::sqrt(static_cast<double>(f))});
        specs.push_back({prefix + "ffn.b2", {1, h}, 0.0});
        specs.push_back({prefix + "ln1.g", {1, h}, -1.0});
        specs.push_back({prefix + "ln1.b", {1, h}, 0.0});
        specs.push_back({prefix + "ln2.g", {1, h}, -1.0});
        specs.push_back({prefix + "ln2.b", {1, h}, 0.0});
    }

    if (a.has_output_linear) {
        if (a.head_kind == HeadKind::plain) {
            specs.push_back({"head.w", {v, h}, wh});
            specs.push_back({"head.b", {1, v}, 0.0});
        } else {
            specs.push_back({"head.prior.w", {a.mos_components, h}, wh});
            specs.push_back({"head.prior.b", {1, a.mos_components}, 0.0});
            for (std::size_t k = 0; k < a.mos_components; ++k) {
                const std::string prefix = "head.proj" + std::to_string(k) + ".";
                specs.push_back({prefix + "w", {h, h}, wh});
                specs.push_back({prefix + "b", {1, h}, 0.0});
            }
            specs.push_back({"head.out.w", {v, h}, wh});
            specs.push_back({"head.out.b", {1, v}, 0.0});
        }
    }
    return specs;
}

inline TensorRef init_param(const ParamSpec& spec, Rng& rng) {
    TensorRef t;
    if (spec.init_bound > 0.0) {
        t = param(spec.shape, rng, spec.init_bound);
    } else {
        t = tensor(spec.shape);
        if (spec.init_bound < 0.0) std::fill(t->data.begin(), t->data.end(), 1.0);
        t->requires_grad = true;
        t->ensure_grad();
    }
    return t;
}

inline bool block_frozen(const ArchDescriptor& a, const std::string& name) {
    if (name.rfind("block", 0) != 0) return false;
    const std::size_t dot = name.find('.');
    const std::size_t idx = std::stoul(name.substr(5, dot - 5));
    return a.frozen_blocks.count(idx) > 0;
}

}  // namespace detail

// Fresh model with every parameter drawn from the init stream.
inline ModelInstance init_base_model(const ArchDescriptor& arch, const ModelDims& dims,
                                     Rng& init_rng) {
    arch.validate(false);
    ModelInstance m;
    m.arch = arch;
    m.dims = dims;
    for (const auto& spec : detail::param_layout(arch, dims)) {
        NamedParam p;
        p.name = spec.name;
        p.tensor = detail::init_param(spec, init_rng);
        ModelInstance::set_trainable(p, !detail::block_frozen(arch, spec.name));
        m.params.push_back(std::move(p));
    }
    return m;
}

// Materializes a candidate: parameters shared with the source model are
// copied (Transformer blocks, embeddings, and head when shapes agree); new
// layers are drawn from the init stream. Frozen blocks are marked
// non-trainable.
inline ModelInstance instantiate_model(const ArchDescriptor& arch, const ModelInstance& base,
                                       Rng& init_rng) {
    arch.validate(false);
    if (arch.num_blocks < base.arch.num_blocks)
        throw MismatchError("candidate has " + std::to_string(arch.num_blocks) +
                            " blocks but the base model has " +
                            std::to_string(base.arch.num_blocks));
    ModelInstance m;
    m.arch = arch;
    m.dims = base.dims;
    for (const auto& spec : detail::param_layout(arch, base.dims)) {
        NamedParam p;
        p.name = spec.name;
        if (const NamedParam* src = base.find(spec.name)) {
            if (src->tensor->shape != spec.shape)
                throw MismatchError("parameter " + spec.name + " has shape " +
                                    shape_str(src->tensor->shape) + " in the base model but " +
                                    shape_str(spec.shape) + " in the candidate");
            p.tensor = tensor(spec.shape, src->tensor->data);
        } else {
            p.tensor = detail::init_param(spec, init_rng);
        }
        ModelInstance::set_trainable(p, !detail::block_frozen(arch, spec.name));
        m.params.push_back(std::move(p));
    }
    return m;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline void save_checkpoint(const ModelInstance& m, const std::string& path) {
    nlohmann::json meta;
    meta["arch"] = descriptor_to_json(m.arch);
    meta["dims"] = dims_to_json(m.dims);
    nlohmann::json manifest = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& p : m.params) {
        nlohmann::json e;
        e["name"] = p.name;
        e["shape"] = p.tensor->shape;
        e["offset"] = offset;
        manifest.push_back(e);
        offset += p.tensor->size() * sizeof(double);
    }
    meta["params"] = manifest;
    meta["payload_bytes"] = offset;
    const std::string meta_str = meta.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint to " + path);
    out << "CASCKPT v1 meta_bytes=" << meta_str.size() << "\n";
    out.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));
    for (const auto& p : m.params)
        out.write(reinterpret_cast<const char*>(p.tensor->data.data()),
                  static_cast<std::streamsize>(p.tensor->size() * sizeof(double)));
    if (!out) throw IoError("failed while writing checkpoint to " + path);
}

inline ModelInstance load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint from " + path);
    std::string header;
    std::getline(in, header);
    std::size_t meta_bytes = 0;
    {
        std::istringstream hs(header);
        std::string magic, version, field;
        hs >> magic >> version >> field;
        if (magic != "CASCKPT" || version != "v1" || field.rfind("meta_bytes=", 0) != 0)
            throw IoError("unrecognized checkpoint header in " + path);
        meta_bytes = std::stoull(field.substr(11));
    }
    std::string meta_str(meta_bytes, '\0');
    if (!in.read(meta_str.data(), static_cast<std::streamsize>(meta_bytes)))
        throw IoError("truncated checkpoint metadata in " + path);
    nlohmann::json meta = nlohmann::json::parse(meta_str);

    ModelInstance m;
    m.arch = descriptor_from_json(meta.at("arch"));
    m.dims = dims_from_json(meta.at("dims"));
    for (const auto& e : meta.at("params")) {
        NamedParam p;
        p.name = e.at("name").get<std::string>();
        const std::vector<std::size_t> shape = e.at("shape").get<std::vector<std::size_t>>();
        p.tensor = tensor(shape);
        if (!in.read(reinterpret_cast<char*>(p.tensor->data.data()),
                     static_cast<std::streamsize>(p.tensor->size() * sizeof(double))))
            throw IoError("truncated checkpoint payload in " + path);
        ModelInstance::set_trainable(p, !detail::block_frozen(m.arch, p.name));
        m.params.push_back(std::move(p));
    }

    // The layout derived from the descriptor must agree with the manifest.
    const auto expected = detail::param_layout(m.arch, m.dims);
    if (expected.size() != m.params.size())
        throw MismatchError("checkpoint " + path + " has " + std::to_string(m.params.size()) +
                            " parameters but the descriptor implies " +
                            std::to_string(expected.size()));
    for (std::size_t i = 0; i < expected.size(); ++i)
        if (expected[i].name != m.params[i].name || expected[i].shape != m.params[i].tensor->shape)
            throw MismatchError("checkpoint " + path + " parameter " + m.params[i].name +
                                " does not match the descriptor layout");
    return m;
}

}  // namespace cas
