#pragma once

// Tokenized train/valid/test id streams plus their on-disk format. Each
// input file is one document; an end-of-text id separates documents (here,
// terminates each file's stream).

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cas/bpe.hpp"
#include "cas/error.hpp"

namespace cas {

struct TokenizedCorpus {
    std::vector<std::uint32_t> train;
    std::vector<std::uint32_t> valid;
    std::vector<std::uint32_t> test;
    std::uint32_t vocab = 0;
};

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return text;
}

inline std::vector<std::uint32_t> tokenize_document(const BpeModel& model,
                                                    const std::string& path) {
    const std::string text = read_text_file(path);
    {
        // Validate encoding up front so errors name the file.
        std::vector<std::string> cps;
        detail::split_codepoints(text, cps, path.c_str());
    }
    auto ids = encode(model, text);
    ids.push_back(kEotId);
    return ids;
}

inline TokenizedCorpus build_splits(const BpeModel& model, const std::string& train_path,
                                    const std::string& valid_path,
                                    const std::string& test_path) {
    TokenizedCorpus corpus;
    corpus.train = tokenize_document(model, train_path);
    corpus.valid = tokenize_document(model, valid_path);
    corpus.test = tokenize_document(model, test_path);
    corpus.vocab = model.vocab_size();
    return corpus;
}

// ---------------------------------------------------------------------------
// Id-stream files: one text header line, then little-endian uint32 payload.

inline void save_ids(const std::string& path, const std::vector<std::uint32_t>& ids,
                     std::uint32_t vocab) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write id stream to " + path);
    out << "CASIDS v1 count=" << ids.size() << " vocab=" << vocab << "\n";
    for (std::uint32_t id : ids) {
        unsigned char bytes[4] = {static_cast<unsigned char>(id & 0xff),
                                  static_cast<unsigned char>((id >> 8) & 0xff),
                                  static_cast<unsigned char>((id >> 16) & 0xff),
                                  static_cast<unsigned char>((id >> 24) & 0xff)};
        out.write(reinterpret_cast<const char*>(bytes), 4);
    }
    if (!out) throw IoError("failed while writing id stream to " + path);
}

inline std::pair<std::vector<std::uint32_t>, std::uint32_t> load_ids(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read id stream from " + path);
    std::string header;
    std::getline(in, header);
    std::size_t count = 0;
    std::uint32_t vocab = 0;
    {
        std::istringstream hs(header);
        std::string magic, version, field;
        hs >> magic >> version;
        if (magic != "CASIDS" || version != "v1")
            throw IoError("unrecognized id stream header in " + path);
        while (hs >> field) {
            if (field.rfind("count=", 0) == 0) count = std::stoull(field.substr(6));
            else if (field.rfind("vocab=", 0) == 0)
                vocab = static_cast<std::uint32_t>(std::stoul(field.substr(6)));
        }
    }
    std::vector<std::uint32_t> ids(count);
    for (std::size_t i = 0; i < count; ++i) {
        unsigned char bytes[4];
        if (!in.read(reinterpret_cast<char*>(bytes), 4))
            throw IoError("truncated id stream in " + path);
        ids[i] = static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
                 (static_cast<std::uint32_t>(bytes[2]) << 16) |
                 (static_cast<std::uint32_t>(bytes[3]) << 24);
        if (vocab != 0 && ids[i] >= vocab)
            throw IoError("id stream " + path + " contains id " + std::to_string(ids[i]) +
                          " >= vocab " + std::to_string(vocab));
    }
    return {std::move(ids), vocab};
}

}  // namespace cas
