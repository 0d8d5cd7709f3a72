#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "capmod/errors.hpp"
#include "capmod/rng.hpp"

namespace capmod {

using TokenId = std::uint32_t;

// Token ids with four reserved entries. Non-reserved ids are assigned by
// descending corpus frequency, ties broken lexicographically, so builds
// are reproducible.
class Vocabulary {
  public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kStart = 1;
    static constexpr TokenId kEnd = 2;
    static constexpr TokenId kUnk = 3;

    Vocabulary() { add_specials(); }

    static Vocabulary build(const std::vector<std::vector<std::string>>& captions,
                            std::size_t min_count) {
        if (min_count < 1) throw ContractError("build_vocab: min_count must be >= 1");
        if (captions.empty()) throw ContractError("build_vocab: empty corpus");
        std::map<std::string, std::size_t> freq;
        for (const auto& cap : captions)
            for (const auto& tok : cap) ++freq[tok];
        std::vector<std::pair<std::string, std::size_t>> kept;
        for (const auto& [tok, n] : freq)
            if (n >= min_count && !is_special(tok)) kept.emplace_back(tok, n);
        std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
            if (a.second != b.second) return a.second > b.second;
            return a.first < b.first;
        });
        Vocabulary v;
        v.min_count_ = min_count;
        for (const auto& [tok, n] : kept) v.push_token(tok);
        return v;
    }

    std::size_t size() const { return id_to_token_.size(); }
    std::size_t min_count() const { return min_count_; }

    bool contains(const std::string& tok) const { return token_to_id_.count(tok) > 0; }

    TokenId encode(const std::string& tok) const {
        auto it = token_to_id_.find(tok);
        return it == token_to_id_.end() ? kUnk : it->second;
    }

    std::vector<TokenId> encode(const std::vector<std::string>& toks) const {
        std::vector<TokenId> out;
        out.reserve(toks.size());
        for (const auto& t : toks) out.push_back(encode(t));
        return out;
    }

    const std::string& decode(TokenId id) const {
        if (id >= id_to_token_.size())
            throw ContractError("vocab: id " + std::to_string(id) + " out of range (size " +
                                std::to_string(id_to_token_.size()) + ")");
        return id_to_token_[id];
    }

    std::vector<std::string> decode(const std::vector<TokenId>& ids) const {
        std::vector<std::string> out;
        out.reserve(ids.size());
        for (TokenId id : ids) out.push_back(decode(id));
        return out;
    }

    static bool is_special_id(TokenId id) { return id < 4; }

    // Content hash used to refuse checkpoint/vocabulary mismatches.
    std::uint64_t content_hash() const {
        std::uint64_t h = fnv1a64("vocab");
        for (const auto& tok : id_to_token_) {
            h = fnv1a64(tok, h);
            h = fnv1a64("\x1f", h);
        }
        return h;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["min_count"] = min_count_;
        j["tokens"] = id_to_token_;
        return j;
    }

    static Vocabulary from_json(const nlohmann::json& j) {
        Vocabulary v;
        v.min_count_ = j.at("min_count").get<std::size_t>();
        auto toks = j.at("tokens").get<std::vector<std::string>>();
        if (toks.size() < 4 || toks[0] != "<pad>" || toks[1] != "<start>" ||
            toks[2] != "<end>" || toks[3] != "<unk>")
            throw IoError("vocab json: reserved tokens missing or reordered");
        for (std::size_t i = 4; i < toks.size(); ++i) v.push_token(toks[i]);
        return v;
    }

  private:
    static bool is_special(const std::string& t) {
        return t == "<pad>" || t == "<start>" || t == "<end>" || t == "<unk>";
    }
    void add_specials() {
        for (const char* t : {"<pad>", "<start>", "<end>", "<unk>"}) push_token(t);
    }
    void push_token(const std::string& t) {
        token_to_id_.emplace(t, static_cast<TokenId>(id_to_token_.size()));
        id_to_token_.push_back(t);
    }

    std::unordered_map<std::string, TokenId> token_to_id_;
    std::vector<std::string> id_to_token_;
    std::size_t min_count_ = 1;
};

inline std::vector<std::string> split_ws(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r') {
            if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

inline std::string join_ws(const std::vector<std::string>& toks) {
    std::string out;
    for (std::size_t i = 0; i < toks.size(); ++i) {
        if (i) out.push_back(' ');
        out += toks[i];
    }
    return out;
}

}  // namespace capmod
