#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "capmod/decoder.hpp"
#include "capmod/errors.hpp"
#include "capmod/model.hpp"
#include "capmod/vocab.hpp"

namespace capmod {

// Diagnostics for one emitted token.
struct StepTrace {
    TokenId token = 0;
    double logprob = 0;  // log p of this token at its step
    double gr_mean = 0;
    double gs_mean = 0;
    std::vector<double> alpha;
};

struct DecodeResult {
    std::vector<TokenId> tokens;  // content tokens, terminator excluded
    double logprob = 0;           // cumulative, includes the terminator when ended
    bool ended = false;           // stopped on <end> rather than the length cap
    std::size_t finish_time = 0;  // step index at which decoding stopped
    std::vector<StepTrace> trace; // one entry per emitted token

    double final_score(bool length_normalize) const {
        if (!length_normalize) return logprob;
        std::size_t terms = tokens.size() + (ended ? 1 : 0);
        return logprob / static_cast<double>(std::max<std::size_t>(terms, 1));
    }
};

namespace detail {

// Tokens never proposed during decoding: padding and the start marker are
// not legal outputs, and <unk> is suppressed as standard search hygiene.
inline bool expandable_token(TokenId id) {
    return id != Vocabulary::kPad && id != Vocabulary::kStart && id != Vocabulary::kUnk;
}

// Final ranking: higher score, then earlier completion, then lexicographically
// smaller token sequence.
inline bool better_result(const DecodeResult& a, const DecodeResult& b, bool length_normalize) {
    double sa = a.final_score(length_normalize), sb = b.final_score(length_normalize);
    if (sa != sb) return sa > sb;
    if (a.finish_time != b.finish_time) return a.finish_time < b.finish_time;
    return a.tokens < b.tokens;
}

template <typename Real>
std::vector<double> step_logprobs(const Tensor<Real>& logits) {
    auto lp = log_softmax_vec(logits);
    std::vector<double> out(lp.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<double>(lp.at(i));
    return out;
}

inline StepTrace make_trace(TokenId tok, double logprob, const StepDiag& diag) {
    StepTrace t;
    t.token = tok;
    t.logprob = logprob;
    t.gr_mean = diag.gr_mean;
    t.gs_mean = diag.gs_mean;
    t.alpha = diag.alpha;
    return t;
}

}  // namespace detail

template <typename Real>
DecodeResult greedy_decode(const ModelParams<Real>& P, const SequenceContext<Real>& ctx,
                           std::size_t max_len) {
    if (max_len < 1) throw ContractError("greedy_decode: max_len must be at least 1");
    DecodeResult out;
    DecoderState<Real> state = DecoderState<Real>::zeros(P.dims);
    TokenId prev = Vocabulary::kStart;
    for (std::size_t t = 0; t < max_len; ++t) {
        auto step = decode_step(P, ctx, prev, state);
        auto lp = detail::step_logprobs(step.logits);
        TokenId best = 0;
        double best_lp = -1e300;
        for (std::size_t id = 0; id < lp.size(); ++id) {
            if (!detail::expandable_token(static_cast<TokenId>(id))) continue;
            if (lp[id] > best_lp) {  // strict: ties keep the lowest id
                best_lp = lp[id];
                best = static_cast<TokenId>(id);
            }
        }
        out.logprob += best_lp;
        out.finish_time = t;
        if (best == Vocabulary::kEnd) {
            out.ended = true;
            return out;
        }
        out.tokens.push_back(best);
        out.trace.push_back(detail::make_trace(best, best_lp, step.diag));
        state = step.state;
        prev = best;
    }
    out.finish_time = max_len;
    return out;
}

template <typename Real>
DecodeResult greedy_decode(const ModelParams<Real>& P, const Example<Real>& ex,
                           std::size_t max_len) {
    return greedy_decode(P, make_context(P, ex), max_len);
}

struct BeamResult {
    DecodeResult best;
    std::vector<DecodeResult> hypotheses;  // final beam, best first
};

template <typename Real>
BeamResult beam_decode(const ModelParams<Real>& P, const SequenceContext<Real>& ctx,
                       std::size_t k, std::size_t max_len, bool length_normalize = false) {
    if (k < 1) throw ConfigError("beam_decode: beam size must be at least 1");
    if (max_len < 1) throw ContractError("beam_decode: max_len must be at least 1");

    struct Hyp {
        DecodeResult res;
        DecoderState<Real> state;
        TokenId prev = Vocabulary::kStart;
    };
    std::vector<Hyp> active(1);
    active[0].state = DecoderState<Real>::zeros(P.dims);
    std::vector<DecodeResult> finished;

    for (std::size_t t = 0; t < max_len && !active.empty(); ++t) {
        struct Cand {
            double logprob;
            std::size_t hyp;
            TokenId tok;
            double step_lp;
        };
        std::vector<Cand> cands;
        std::vector<StepDiag> diags(active.size());
        std::vector<DecoderState<Real>> states(active.size());
        for (std::size_t i = 0; i < active.size(); ++i) {
            auto step = decode_step(P, ctx, active[i].prev, active[i].state);
            auto lp = detail::step_logprobs(step.logits);
            diags[i] = step.diag;
            states[i] = step.state;
            for (std::size_t id = 0; id < lp.size(); ++id)
                if (detail::expandable_token(static_cast<TokenId>(id)))
                    cands.push_back({active[i].res.logprob + lp[id], i,
                                     static_cast<TokenId>(id), lp[id]});
        }
        std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.logprob != b.logprob) return a.logprob > b.logprob;
            if (a.hyp != b.hyp) return a.hyp < b.hyp;
            return a.tok < b.tok;
        });
        if (cands.size() > k) cands.resize(k);

        std::vector<Hyp> next;
        next.reserve(cands.size());
        for (const Cand& c : cands) {
            Hyp h = active[c.hyp];
            h.res.logprob = c.logprob;
            h.res.finish_time = t;
            if (c.tok == Vocabulary::kEnd) {
                h.res.ended = true;
                finished.push_back(std::move(h.res));
            } else {
                h.res.tokens.push_back(c.tok);
                h.res.trace.push_back(detail::make_trace(c.tok, c.step_lp, diags[c.hyp]));
                h.state = states[c.hyp];
                h.prev = c.tok;
                next.push_back(std::move(h));
            }
        }
        active = std::move(next);
    }
    for (Hyp& h : active) {  // length cap reached: kept without a terminator bonus
        h.res.finish_time = max_len;
        finished.push_back(std::move(h.res));
    }

    std::stable_sort(finished.begin(), finished.end(),
                     [&](const DecodeResult& a, const DecodeResult& b) {
                         return detail::better_result(a, b, length_normalize);
                     });
    BeamResult out;
    out.best = finished.front();
    out.hypotheses = std::move(finished);
    if (out.hypotheses.size() > k) out.hypotheses.resize(k);
    return out;
}

template <typename Real>
BeamResult beam_decode(const ModelParams<Real>& P, const Example<Real>& ex, std::size_t k,
                       std::size_t max_len, bool length_normalize = false) {
    return beam_decode(P, make_context(P, ex), k, max_len, length_normalize);
}

// End-to-end modification of one example's existing caption.
template <typename Real>
DecodeResult modify(const ModelParams<Real>& P, const Example<Real>& ex, std::size_t k,
                    std::size_t max_len, bool length_normalize = false) {
    return beam_decode(P, ex, k, max_len, length_normalize).best;
}

}  // namespace capmod
