#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "capmod/errors.hpp"
#include "capmod/features_io.hpp"
#include "capmod/tensor.hpp"
#include "capmod/vocab.hpp"

namespace capmod {

// One dataset record as stored on disk. Captions are whitespace-tokenized
// lowercase strings; feature paths are relative to the JSONL's directory.
struct RawExample {
    std::string id;
    std::string image_features_path;
    std::string region_features_path;  // empty when absent
    std::string existing;
    std::vector<std::string> attributes;
    std::vector<std::string> gold;
    std::string policy;  // corruption policy tag, empty for external data
};

// Model-ready example: features loaded, captions encoded. Gold sequences
// exclude <start>/<end>; the trainer adds them.
template <typename Real>
struct Example {
    std::string id;
    Tensor<Real> image_features;            // (p+1) x d_v, global row last
    std::optional<Tensor<Real>> region_features;  // k x d_b
    std::vector<TokenId> existing;
    std::vector<TokenId> attributes;         // exactly 5
    std::vector<std::vector<TokenId>> gold;
    std::vector<std::string> gold_text;      // kept verbatim for metrics
    std::string existing_text;
    std::string policy;
};

inline nlohmann::ordered_json raw_example_to_json(const RawExample& e) {
    nlohmann::ordered_json j;
    j["id"] = e.id;
    j["image_features_path"] = e.image_features_path;
    if (!e.region_features_path.empty()) j["region_features_path"] = e.region_features_path;
    j["existing"] = e.existing;
    j["attributes"] = e.attributes;
    j["gold"] = e.gold;
    if (!e.policy.empty()) j["policy"] = e.policy;
    return j;
}

inline RawExample raw_example_from_json(const nlohmann::json& j, const std::string& where) {
    try {
        RawExample e;
        e.id = j.at("id").get<std::string>();
        e.image_features_path = j.at("image_features_path").get<std::string>();
        if (j.contains("region_features_path"))
            e.region_features_path = j.at("region_features_path").get<std::string>();
        e.existing = j.at("existing").get<std::string>();
        e.attributes = j.at("attributes").get<std::vector<std::string>>();
        e.gold = j.at("gold").get<std::vector<std::string>>();
        if (j.contains("policy")) e.policy = j.at("policy").get<std::string>();
        return e;
    } catch (const nlohmann::json::exception& ex) {
        throw IoError(where + ": bad example record: " + ex.what());
    }
}

inline std::vector<RawExample> load_dataset(const std::string& jsonl_path) {
    std::ifstream in(jsonl_path);
    if (!in) throw IoError("cannot open dataset " + jsonl_path);
    std::vector<RawExample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& ex) {
            throw IoError(jsonl_path + ":" + std::to_string(lineno) + ": " + ex.what());
        }
        out.push_back(raw_example_from_json(j, jsonl_path + ":" + std::to_string(lineno)));
    }
    if (out.empty()) throw IoError(jsonl_path + ": no examples");
    return out;
}

inline void save_dataset(const std::string& jsonl_path, const std::vector<RawExample>& examples) {
    std::ofstream out(jsonl_path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + jsonl_path + " for writing");
    for (const auto& e : examples) out << raw_example_to_json(e).dump() << "\n";
    if (!out) throw IoError("short write to " + jsonl_path);
}

inline std::vector<std::string> all_gold_token_lists_flat(const std::vector<RawExample>& examples) {
    std::vector<std::string> caps;
    for (const auto& e : examples)
        for (const auto& g : e.gold) caps.push_back(g);
    return caps;
}

inline Vocabulary build_vocab_from_dataset(const std::vector<RawExample>& examples,
                                           std::size_t min_count) {
    std::vector<std::vector<std::string>> caps;
    for (const auto& e : examples)
        for (const auto& g : e.gold) caps.push_back(split_ws(g));
    return Vocabulary::build(caps, min_count);
}

template <typename Real>
Example<Real> encode_example(const RawExample& raw, const Vocabulary& vocab,
                             const std::string& base_dir, std::size_t max_len) {
    namespace fs = std::filesystem;
    Example<Real> ex;
    ex.id = raw.id;
    ex.policy = raw.policy;
    auto resolve = [&](const std::string& p) {
        fs::path fp(p);
        return fp.is_absolute() ? fp.string() : (fs::path(base_dir) / fp).string();
    };
    ex.image_features = features_to_tensor<Real>(read_features(resolve(raw.image_features_path)));
    if (ex.image_features.rank() != 2)
        throw IoError(raw.id + ": image features must be a matrix, got " +
                      shape_str(ex.image_features.shape()));
    if (!raw.region_features_path.empty()) {
        auto b = features_to_tensor<Real>(read_features(resolve(raw.region_features_path)));
        if (b.rank() != 2)
            throw IoError(raw.id + ": region features must be a matrix, got " +
                          shape_str(b.shape()));
        ex.region_features = std::move(b);
    }
    auto clamp_len = [max_len](std::vector<TokenId> ids) {
        if (ids.size() > max_len) ids.resize(max_len);
        return ids;
    };
    ex.existing = clamp_len(vocab.encode(split_ws(raw.existing)));
    ex.existing_text = raw.existing;
    if (raw.attributes.size() != 5)
        throw ContractError(raw.id + ": expected exactly 5 attributes, got " +
                            std::to_string(raw.attributes.size()));
    ex.attributes = vocab.encode(raw.attributes);
    for (const auto& g : raw.gold) {
        ex.gold.push_back(clamp_len(vocab.encode(split_ws(g))));
        ex.gold_text.push_back(g);
    }
    if (ex.gold.empty()) throw ContractError(raw.id + ": no gold captions");
    return ex;
}

template <typename Real>
std::vector<Example<Real>> encode_dataset(const std::vector<RawExample>& raws,
                                          const Vocabulary& vocab, const std::string& base_dir,
                                          std::size_t max_len) {
    std::vector<Example<Real>> out;
    out.reserve(raws.size());
    for (const auto& r : raws) out.push_back(encode_example<Real>(r, vocab, base_dir, max_len));
    return out;
}

// Words skipped when picking caption attributes.
inline bool is_function_word(const std::string& t) {
    static const std::vector<std::string> kFunction = {
        "a", "an", "the", "above", "beside", "on", "in", "of",
        "with", "and", "is", "are", "at", "to"};
    return std::find(kFunction.begin(), kFunction.end(), t) != kFunction.end();
}

// Five most frequent content words over the given captions, frequency
// descending with first-occurrence order breaking ties, padded from
// `fallbacks` and then by cycling; duplicates are allowed.
inline std::vector<std::string> derive_attributes(
    const std::vector<std::vector<std::string>>& captions,
    const std::vector<std::string>& fallbacks) {
    std::vector<std::string> order;
    std::map<std::string, std::size_t> freq;
    for (const auto& cap : captions)
        for (const auto& tok : cap) {
            bool reserved = !tok.empty() && tok.front() == '<' && tok.back() == '>';
            if (is_function_word(tok) || reserved) continue;
            if (freq.find(tok) == freq.end()) order.push_back(tok);
            ++freq[tok];
        }
    std::stable_sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
        return freq.at(a) > freq.at(b);
    });
    std::vector<std::string> attrs(order.begin(),
                                   order.begin() + std::min<std::size_t>(5, order.size()));
    for (const auto& f : fallbacks) {
        if (attrs.size() >= 5) break;
        attrs.push_back(f);
    }
    for (std::size_t i = 0; attrs.size() < 5; ++i)
        attrs.push_back(attrs.empty() ? "<unk>" : attrs[i % attrs.size()]);
    return attrs;
}

// Karpathy-style COCO JSON: images[{cocoid|imgid, split, sentences[{tokens}]}].
// Produces caption-only records (no features, empty existing caption);
// attributes are derived from the gold captions.
inline std::vector<RawExample> load_coco_json(const std::string& path,
                                              const std::string& split_filter) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& ex) {
        throw IoError(path + ": " + ex.what());
    }
    if (!j.contains("images") || !j["images"].is_array())
        throw IoError(path + ": missing images array");
    std::vector<RawExample> out;
    for (const auto& img : j["images"]) {
        try {
            std::string split = img.value("split", "");
            if (!split_filter.empty() && split != split_filter) continue;
            RawExample e;
            if (img.contains("cocoid"))
                e.id = std::to_string(img["cocoid"].get<std::int64_t>());
            else
                e.id = std::to_string(img.at("imgid").get<std::int64_t>());
            std::vector<std::vector<std::string>> toks;
            for (const auto& s : img.at("sentences")) {
                auto t = s.at("tokens").get<std::vector<std::string>>();
                e.gold.push_back(join_ws(t));
                toks.push_back(std::move(t));
            }
            if (e.gold.empty()) throw IoError("image " + e.id + " has no sentences");
            e.attributes = derive_attributes(toks, {});
            out.push_back(std::move(e));
        } catch (const nlohmann::json::exception& ex) {
            throw IoError(path + ": malformed image record: " + ex.what());
        }
    }
    return out;
}

}  // namespace capmod
