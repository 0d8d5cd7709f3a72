#pragma once

#include <algorithm>
#include <vector>

#include "capmod/model.hpp"
#include "capmod/tensor.hpp"
#include "capmod/vocab.hpp"

namespace capmod {

// Mean of the caption's word embeddings. Padding and sequence markers are
// dropped first; <unk> is a real word and stays.
template <typename Real>
std::vector<TokenId> strip_markers(const std::vector<TokenId>& caption) {
    std::vector<TokenId> kept;
    for (TokenId id : caption)
        if (id == Vocabulary::kUnk || id > Vocabulary::kUnk) kept.push_back(id);
    return kept;
}

template <typename Real>
Tensor<Real> average_words(const ModelParams<Real>& P, const std::vector<TokenId>& word_ids) {
    if (word_ids.empty()) throw ContractError("average_words: empty caption");
    Tensor<Real> acc = take_row(P.embedding, word_ids[0]);
    for (std::size_t i = 1; i < word_ids.size(); ++i)
        acc = add(acc, take_row(P.embedding, word_ids[i]));
    return scale(acc, static_cast<Real>(1.0 / static_cast<double>(word_ids.size())));
}

// Sentence embedding of the existing caption: word average through two
// tanh layers. A caption that is empty once markers are stripped maps to
// the learned null-sentence vector.
template <typename Real>
Tensor<Real> encode_sentence(const ModelParams<Real>& P, const std::vector<TokenId>& caption) {
    auto words = strip_markers<Real>(caption);
    if (words.empty()) return P.dan_e_null;
    // summing in sorted id order makes the embedding bit-identical under
    // any permutation of the caption, not merely equal up to rounding
    std::sort(words.begin(), words.end());
    Tensor<Real> avg = average_words(P, words);
    if (P.has_dan_proj) avg = matmul(avg, P.dan_proj);
    Tensor<Real> h1 = tanh(add(matmul(avg, P.dan_W1), P.dan_b1));
    return tanh(add(matmul(h1, P.dan_W2), P.dan_b2));
}

}  // namespace capmod
