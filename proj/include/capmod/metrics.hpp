#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "capmod/errors.hpp"
#include "capmod/vocab.hpp"

namespace capmod {

// Corpus-level caption metrics. The formulas follow the reference captioning
// evaluation toolkit exactly (smoothing constants, closest-reference brevity
// penalty, separate max precision/recall in ROUGE-L, CIDEr-D clipping and
// length gaussian), so scores are comparable with published numbers.

using Caption = std::vector<std::string>;

struct EvalScores {
    std::array<double, 4> bleu{0, 0, 0, 0};
    double rouge_l = 0;
    double cider = 0;
    std::size_t n_images = 0;
    std::vector<std::string> warnings;
};

// Metric tokenization, frozen: lowercase, drop punctuation characters,
// split on whitespace.
inline Caption tokenize_caption(const std::string& text) {
    Caption out;
    std::string cur;
    for (char ch : text) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            if (!cur.empty()) out.push_back(std::move(cur)), cur.clear();
        } else if (!std::ispunct(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

namespace detail {

using NgramCounts = std::map<std::string, double>;

inline std::string ngram_key(const Caption& toks, std::size_t start, std::size_t n) {
    std::string key;
    for (std::size_t i = 0; i < n; ++i) {
        if (i) key.push_back('\x1f');
        key += toks[start + i];
    }
    return key;
}

inline NgramCounts count_ngrams(const Caption& toks, std::size_t n) {
    NgramCounts c;
    if (toks.size() >= n)
        for (std::size_t i = 0; i + n <= toks.size(); ++i) c[ngram_key(toks, i, n)] += 1;
    return c;
}

inline void check_corpus(const std::vector<Caption>& cands,
                         const std::vector<std::vector<Caption>>& refs) {
    if (cands.empty()) throw ContractError("metrics: empty candidate set");
    if (cands.size() != refs.size())
        throw ContractError("metrics: " + std::to_string(cands.size()) + " candidates vs " +
                            std::to_string(refs.size()) + " reference lists");
    for (std::size_t i = 0; i < refs.size(); ++i)
        if (refs[i].empty())
            throw ContractError("metrics: image " + std::to_string(i) + " has no references");
}

inline std::size_t lcs_len(const Caption& a, const Caption& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

}  // namespace detail

inline std::array<double, 4> bleu_corpus(const std::vector<Caption>& cands,
                                         const std::vector<std::vector<Caption>>& refs) {
    detail::check_corpus(cands, refs);
    constexpr double small = 1e-9, tiny = 1e-15;
    double testlen = 0, reflen = 0;
    std::array<double, 4> guess{0, 0, 0, 0}, correct{0, 0, 0, 0};

    for (std::size_t img = 0; img < cands.size(); ++img) {
        const Caption& cand = cands[img];
        testlen += static_cast<double>(cand.size());

        // closest reference length; ties pick the shorter reference
        std::size_t best_len = refs[img][0].size();
        for (const Caption& r : refs[img]) {
            auto diff = [&](std::size_t l) {
                return l > cand.size() ? l - cand.size() : cand.size() - l;
            };
            if (diff(r.size()) < diff(best_len) ||
                (diff(r.size()) == diff(best_len) && r.size() < best_len))
                best_len = r.size();
        }
        reflen += static_cast<double>(best_len);

        for (std::size_t n = 1; n <= 4; ++n) {
            detail::NgramCounts max_ref;
            for (const Caption& r : refs[img])
                for (const auto& [k, v] : detail::count_ngrams(r, n))
                    max_ref[k] = std::max(max_ref[k], v);
            auto cnt = detail::count_ngrams(cand, n);
            for (const auto& [k, v] : cnt) {
                auto it = max_ref.find(k);
                if (it != max_ref.end()) correct[n - 1] += std::min(v, it->second);
            }
            if (cand.size() >= n) guess[n - 1] += static_cast<double>(cand.size() - n + 1);
        }
    }

    std::array<double, 4> out;
    double running = 1.0;
    for (std::size_t k = 0; k < 4; ++k) {
        running *= (correct[k] + tiny) / (guess[k] + small);
        out[k] = std::pow(running, 1.0 / static_cast<double>(k + 1));
    }
    double ratio = (testlen + tiny) / (reflen + small);
    if (ratio < 1.0)
        for (double& b : out) b *= std::exp(1.0 - 1.0 / ratio);
    return out;
}

inline double rouge_l_corpus(const std::vector<Caption>& cands,
                             const std::vector<std::vector<Caption>>& refs) {
    detail::check_corpus(cands, refs);
    constexpr double beta = 1.2;
    double total = 0;
    for (std::size_t img = 0; img < cands.size(); ++img) {
        double prec_max = 0, rec_max = 0;
        for (const Caption& r : refs[img]) {
            double l = static_cast<double>(detail::lcs_len(cands[img], r));
            if (!cands[img].empty()) prec_max = std::max(prec_max, l / cands[img].size());
            if (!r.empty()) rec_max = std::max(rec_max, l / r.size());
        }
        double denom = rec_max + beta * beta * prec_max;
        if (denom > 0) total += (1 + beta * beta) * prec_max * rec_max / denom;
    }
    return total / static_cast<double>(cands.size());
}

inline double cider_corpus(const std::vector<Caption>& cands,
                           const std::vector<std::vector<Caption>>& refs,
                           std::vector<std::string>* warnings = nullptr) {
    detail::check_corpus(cands, refs);
    constexpr double sigma = 6.0;
    const std::size_t n_img = cands.size();
    if (n_img < 2 && warnings)
        warnings->push_back("cider over a single image: inverse document frequencies are "
                            "degenerate and the score collapses to 0");

    // document frequency of each n-gram over the reference corpus: one count
    // per image in which any reference contains it
    std::array<detail::NgramCounts, 4> df;
    for (const auto& image_refs : refs) {
        std::array<detail::NgramCounts, 4> seen;
        for (const Caption& r : image_refs)
            for (std::size_t n = 1; n <= 4; ++n)
                for (const auto& [k, v] : detail::count_ngrams(r, n)) seen[n - 1][k] = 1;
        for (std::size_t n = 0; n < 4; ++n)
            for (const auto& [k, v] : seen[n]) df[n][k] += 1;
    }
    const double log_n = std::log(static_cast<double>(n_img));

    struct Vecs {
        std::array<detail::NgramCounts, 4> v;
        std::array<double, 4> norm{0, 0, 0, 0};
        double length = 0;
    };
    auto to_vec = [&](const Caption& toks) {
        Vecs out;
        for (std::size_t n = 1; n <= 4; ++n) {
            for (const auto& [k, tf] : detail::count_ngrams(toks, n)) {
                auto it = df[n - 1].find(k);
                double d = it == df[n - 1].end() ? 0.0 : it->second;
                double w = tf * (log_n - std::log(std::max(1.0, d)));
                out.v[n - 1][k] = w;
                out.norm[n - 1] += w * w;
            }
            out.norm[n - 1] = std::sqrt(out.norm[n - 1]);
        }
        // the reference scorer measures caption length for the gaussian
        // penalty as the count of distinct bigram types, kept verbatim so
        // scores stay comparable
        out.length = static_cast<double>(out.v[1].size());
        return out;
    };

    double total = 0;
    for (std::size_t img = 0; img < n_img; ++img) {
        Vecs hyp = to_vec(cands[img]);
        double image_score = 0;
        for (const Caption& r : refs[img]) {
            Vecs ref = to_vec(r);
            double delta = hyp.length - ref.length;
            double penalty = std::exp(-(delta * delta) / (2 * sigma * sigma));
            for (std::size_t n = 0; n < 4; ++n) {
                double val = 0;
                for (const auto& [k, hv] : hyp.v[n]) {
                    auto it = ref.v[n].find(k);
                    if (it != ref.v[n].end()) val += std::min(hv, it->second) * it->second;
                }
                if (hyp.norm[n] > 0 && ref.norm[n] > 0) val /= hyp.norm[n] * ref.norm[n];
                image_score += val * penalty;
            }
        }
        // mean over the 4 n-gram orders and over this image's references
        total += image_score / (4.0 * static_cast<double>(refs[img].size())) * 10.0;
    }
    return total / static_cast<double>(n_img);
}

inline EvalScores score_corpus(const std::vector<Caption>& cands,
                               const std::vector<std::vector<Caption>>& refs) {
    EvalScores s;
    s.n_images = cands.size();
    s.bleu = bleu_corpus(cands, refs);
    s.rouge_l = rouge_l_corpus(cands, refs);
    s.cider = cider_corpus(cands, refs, &s.warnings);
    return s;
}

// Adapter for decoded token-id sequences.
inline Caption ids_to_caption(const std::vector<TokenId>& ids, const Vocabulary& vocab) {
    Caption out;
    for (TokenId id : ids)
        if (!vocab.is_special_id(id)) out.push_back(vocab.decode(id));
    return out;
}

}  // namespace capmod
