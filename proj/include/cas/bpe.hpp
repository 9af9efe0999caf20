#pragma once

// Byte-pair-encoding sub-word tokenizer over Unicode codepoints.
//
// Text is pre-split into pieces with a space-prefix convention: a single
// space preceding a word is folded into the word as its first symbol, other
// whitespace stands alone. Merges never cross piece boundaries, so pieces
// concatenate back to the original text and decode(encode(t)) == t for any
// text whose codepoints appeared in the training corpus.
//
// Training greedily merges the most frequent adjacent pair; ties break
// lexicographically on the (left, right) token strings, which makes merge
// rules deterministic.

#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cas/error.hpp"

namespace cas {

inline constexpr std::uint32_t kUnkId = 0;
inline constexpr std::uint32_t kEotId = 1;
inline constexpr const char* kUnkToken = "<unk>";
inline constexpr const char* kEotToken = "<eot>";

struct BpeModel {
    struct MergeRule {
        std::uint32_t left;
        std::uint32_t right;
        std::uint32_t merged;
    };

    std::vector<std::string> id_to_token;                      // dense ids 0..V-1
    std::unordered_map<std::string, std::uint32_t> base_ids;   // single codepoints
    std::vector<MergeRule> merges;                             // training order

    std::uint32_t vocab_size() const { return static_cast<std::uint32_t>(id_to_token.size()); }
};

namespace detail {

// Appends the codepoints of a UTF-8 string as individual strings. Throws on
// malformed sequences.
inline void split_codepoints(std::string_view text, std::vector<std::string>& out,
                             const char* origin) {
    std::size_t i = 0;
    while (i < text.size()) {
        const unsigned char c = static_cast<unsigned char>(text[i]);
        std::size_t len;
        if (c < 0x80) len = 1;
        else if ((c & 0xE0) == 0xC0) len = 2;
        else if ((c & 0xF0) == 0xE0) len = 3;
        else if ((c & 0xF8) == 0xF0) len = 4;
        else throw IoError(std::string("invalid UTF-8 byte in ") + origin);
        if (i + len > text.size())
            throw IoError(std::string("truncated UTF-8 sequence in ") + origin);
        for (std::size_t k = 1; k < len; ++k)
            if ((static_cast<unsigned char>(text[i + k]) & 0xC0) != 0x80)
                throw IoError(std::string("invalid UTF-8 continuation byte in ") + origin);
        out.emplace_back(text.substr(i, len));
        i += len;
    }
}

// Splits text into pieces: a space followed by non-space glues to the word
// behind it; any other whitespace codepoint is its own piece. Pieces
// concatenate to the original text.
inline std::vector<std::string> split_pieces(std::string_view text) {
    std::vector<std::string> pieces;
    std::size_t i = 0;
    const auto is_space = [&](std::size_t k) { return text[k] == ' '; };
    const auto is_break = [&](std::size_t k) {
        const char c = text[k];
        return c == ' ' || c == '\n' || c == '\t' || c == '\r';
    };
    while (i < text.size()) {
        std::size_t start = i;
        if (is_space(i) && i + 1 < text.size() && !is_break(i + 1)) {
            ++i;  // space prefix
            while (i < text.size() && !is_break(i)) ++i;
        } else if (is_break(i)) {
            ++i;  // lone whitespace
        } else {
            while (i < text.size() && !is_break(i)) ++i;
        }
        pieces.emplace_back(text.substr(start, i - start));
    }
    return pieces;
}

inline std::uint64_t pair_key(std::uint32_t a, std::uint32_t b) {
    return (static_cast<std::uint64_t>(a) << 32) | b;
}

inline void merge_pair_in_place(std::vector<std::uint32_t>& symbols, std::uint32_t left,
                                std::uint32_t right, std::uint32_t merged) {
    std::size_t w = 0;
    for (std::size_t r = 0; r < symbols.size();) {
        if (r + 1 < symbols.size() && symbols[r] == left && symbols[r + 1] == right) {
            symbols[w++] = merged;
            r += 2;
        } else {
            symbols[w++] = symbols[r++];
        }
    }
    symbols.resize(w);
}

inline std::string escape_token(std::string_view tok) {
    std::string out;
    out.reserve(tok.size());
    for (char c : tok) {
        switch (c) {
            case '\\': out += "\\\\"; break;
            case '\n': out += "\\n"; break;
            case '\t': out += "\\t"; break;
            case '\r': out += "\\r"; break;
            default: out += c;
        }
    }
    return out;
}

inline std::string unescape_token(std::string_view tok) {
    std::string out;
    out.reserve(tok.size());
    for (std::size_t i = 0; i < tok.size(); ++i) {
        if (tok[i] != '\\') {
            out += tok[i];
            continue;
        }
        if (i + 1 >= tok.size()) throw IoError("dangling escape in tokenizer model");
        switch (tok[++i]) {
            case '\\': out += '\\'; break;
            case 'n': out += '\n'; break;
            case 't': out += '\t'; break;
            case 'r': out += '\r'; break;
            default: throw IoError("unknown escape in tokenizer model");
        }
    }
    return out;
}

}  // namespace detail

// Trains a BPE model: base symbols are the distinct codepoints of the corpus,
// then num_merges greedy highest-frequency pair merges (stopping early once
// no pair occurs twice).
inline BpeModel train_bpe(std::string_view corpus, std::int64_t num_merges) {
    if (num_merges < 0) throw ConfigError("num_merges must be non-negative");
    if (corpus.empty()) throw ConfigError("cannot train a tokenizer on an empty corpus");

    BpeModel model;
    model.id_to_token = {kUnkToken, kEotToken};

    // Distinct pieces with counts, in lexicographic order for determinism.
    std::map<std::string, std::uint64_t> piece_counts;
    for (auto& piece : detail::split_pieces(corpus)) piece_counts[std::move(piece)]++;

    // Base symbols: sorted distinct codepoints.
    std::map<std::string, std::uint32_t> base_sorted;
    std::vector<std::string> cps;
    for (const auto& [piece, count] : piece_counts) {
        cps.clear();
        detail::split_codepoints(piece, cps, "corpus");
        for (auto& cp : cps) base_sorted.emplace(std::move(cp), 0);
    }
    for (auto& [cp, id] : base_sorted) {
        id = model.vocab_size();
        model.id_to_token.push_back(cp);
        model.base_ids.emplace(cp, id);
    }

    struct Word {
        std::vector<std::uint32_t> symbols;
        std::uint64_t count;
    };
    std::vector<Word> words;
    words.reserve(piece_counts.size());
    for (const auto& [piece, count] : piece_counts) {
        Word w;
        w.count = count;
        cps.clear();
        detail::split_codepoints(piece, cps, "corpus");
        w.symbols.reserve(cps.size());
        for (const auto& cp : cps) w.symbols.push_back(model.base_ids.at(cp));
        words.push_back(std::move(w));
    }

    std::unordered_map<std::uint64_t, std::uint64_t> pair_counts;
    for (std::int64_t round = 0; round < num_merges; ++round) {
        pair_counts.clear();
        for (const Word& w : words)
            for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i)
                pair_counts[detail::pair_key(w.symbols[i], w.symbols[i + 1])] += w.count;

        // Best pair by count, ties broken lexicographically on token strings.
        bool found = false;
        std::uint64_t best_count = 0;
        std::uint32_t best_left = 0, best_right = 0;
        for (const auto& [key, count] : pair_counts) {
            if (count < 2) continue;
            const auto left = static_cast<std::uint32_t>(key >> 32);
            const auto right = static_cast<std::uint32_t>(key & 0xffffffffu);
            if (!found || count > best_count ||
                (count == best_count &&
                 (model.id_to_token[left] < model.id_to_token[best_left] ||
                  (model.id_to_token[left] == model.id_to_token[best_left] &&
                   model.id_to_token[right] < model.id_to_token[best_right])))) {
                found = true;
                best_count = count;
                best_left = left;
                best_right = right;
            }
        }
        if (!found) break;

        const std::uint32_t merged = model.vocab_size();
        model.id_to_token.push_back(model.id_to_token[best_left] + model.id_to_token[best_right]);
        model.merges.push_back({best_left, best_right, merged});
        for (Word& w : words) detail::merge_pair_in_place(w.symbols, best_left, best_right, merged);
    }
    return model;
}

// Encodes one piece: start from base symbols, repeatedly apply the earliest
// applicable merge rule until none applies. Unknown codepoints become the
// unknown id and never participate in merges.
inline std::vector<std::uint32_t> encode_piece(const BpeModel& model, std::string_view piece) {
    std::vector<std::string> cps;
    detail::split_codepoints(piece, cps, "text");
    std::vector<std::uint32_t> symbols;
    symbols.reserve(cps.size());
    for (const auto& cp : cps) {
        auto it = model.base_ids.find(cp);
        symbols.push_back(it == model.base_ids.end() ? kUnkId : it->second);
    }

    std::unordered_map<std::uint64_t, std::uint32_t> rank;
    rank.reserve(model.merges.size());
    for (std::uint32_t r = 0; r < model.merges.size(); ++r)
        rank.emplace(detail::pair_key(model.merges[r].left, model.merges[r].right), r);

    while (symbols.size() >= 2) {
        std::uint32_t best_rank = UINT32_MAX;
        for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
            auto it = rank.find(detail::pair_key(symbols[i], symbols[i + 1]));
            if (it != rank.end() && it->second < best_rank) best_rank = it->second;
        }
        if (best_rank == UINT32_MAX) break;
        const auto& rule = model.merges[best_rank];
        detail::merge_pair_in_place(symbols, rule.left, rule.right, rule.merged);
    }
    return symbols;
}

inline std::vector<std::uint32_t> encode(const BpeModel& model, std::string_view text) {
    std::vector<std::uint32_t> ids;
    std::unordered_map<std::string, std::vector<std::uint32_t>> cache;
    for (const auto& piece : detail::split_pieces(text)) {
        auto it = cache.find(piece);
        if (it == cache.end()) it = cache.emplace(piece, encode_piece(model, piece)).first;
        ids.insert(ids.end(), it->second.begin(), it->second.end());
    }
    return ids;
}

inline std::string decode(const BpeModel& model, const std::vector<std::uint32_t>& ids) {
    std::string out;
    for (std::uint32_t id : ids) {
        if (id >= model.vocab_size())
            throw IndexError("decode: id " + std::to_string(id) + " out of range for vocabulary of " +
                             std::to_string(model.vocab_size()));
        out += model.id_to_token[id];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization: versioned plain text. Header, one merge rule per line
// (left/right/merged ids), then one vocabulary entry per line as
// token<TAB>id with control characters escaped.

inline void save_bpe(const BpeModel& model, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write tokenizer model to " + path);
    out << "CASBPE v1 merges=" << model.merges.size() << " vocab=" << model.vocab_size()
        << " specials=2\n";
    for (const auto& m : model.merges)
        out << m.left << '\t' << m.right << '\t' << m.merged << '\n';
    for (std::uint32_t id = 0; id < model.vocab_size(); ++id)
        out << detail::escape_token(model.id_to_token[id]) << '\t' << id << '\n';
    if (!out) throw IoError("failed while writing tokenizer model to " + path);
}

inline BpeModel load_bpe(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read tokenizer model from " + path);
    std::string header;
    std::getline(in, header);
    std::size_t n_merges = 0, n_vocab = 0;
    {
        std::istringstream hs(header);
        std::string magic, field;
        hs >> magic >> field;
        if (magic != "CASBPE" || field != "v1")
            throw IoError("unrecognized tokenizer model header in " + path);
        while (hs >> field) {
            if (field.rfind("merges=", 0) == 0) n_merges = std::stoull(field.substr(7));
            else if (field.rfind("vocab=", 0) == 0) n_vocab = std::stoull(field.substr(6));
        }
    }
    BpeModel model;
    std::string line;
    for (std::size_t i = 0; i < n_merges; ++i) {
        if (!std::getline(in, line)) throw IoError("truncated merge list in " + path);
        std::istringstream ls(line);
        BpeModel::MergeRule r{};
        if (!(ls >> r.left >> r.right >> r.merged))
            throw IoError("malformed merge rule in " + path);
        model.merges.push_back(r);
    }
    model.id_to_token.resize(n_vocab);
    std::vector<bool> seen(n_vocab, false);
    for (std::size_t i = 0; i < n_vocab; ++i) {
        if (!std::getline(in, line)) throw IoError("truncated vocabulary in " + path);
        const auto tab = line.rfind('\t');
        if (tab == std::string::npos) throw IoError("malformed vocabulary entry in " + path);
        const std::uint32_t id = static_cast<std::uint32_t>(std::stoul(line.substr(tab + 1)));
        if (id >= n_vocab || seen[id]) throw IoError("vocabulary ids are not dense in " + path);
        seen[id] = true;
        model.id_to_token[id] = detail::unescape_token(line.substr(0, tab));
    }
    // Base symbols are everything that is neither special nor merge output.
    std::vector<bool> merged_out(n_vocab, false);
    for (const auto& m : model.merges) {
        if (m.left >= n_vocab || m.right >= n_vocab || m.merged >= n_vocab)
            throw IoError("merge rule references unknown id in " + path);
        merged_out[m.merged] = true;
    }
    for (std::uint32_t id = 2; id < n_vocab; ++id)
        if (!merged_out[id]) model.base_ids.emplace(model.id_to_token[id], id);
    return model;
}

}  // namespace cas
