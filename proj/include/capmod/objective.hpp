#pragma once

#include <cmath>
#include <set>
#include <vector>

#include "capmod/decoder.hpp"
#include "capmod/model.hpp"
#include "capmod/tensor.hpp"
#include "capmod/vocab.hpp"

namespace capmod {

struct LossConfig {
    double beta = 0.4;
    double occurrence_threshold = 4.0;
    bool attr_term_enabled = false;
};

struct LossBreakdown {
    double cross_entropy = 0;
    double attribute_term = 0;
    double total = 0;
};

// Scaled negative exponential on the attribute occurrence count f over a
// batch of N captions: beta * exp(-2f / 3N) while f/N is under the
// threshold, zero once attributes occur often enough. Counting is
// discrete, so this term carries no gradient; it is reported and can be
// added to the monitored loss.
inline double attribute_term(std::size_t f, std::size_t n_captions, const LossConfig& cfg) {
    if (n_captions == 0) throw ContractError("attribute_term: empty batch");
    double fN = static_cast<double>(f) / static_cast<double>(n_captions);
    if (fN >= cfg.occurrence_threshold) return 0.0;
    return cfg.beta * std::exp(-2.0 * static_cast<double>(f) /
                               (3.0 * static_cast<double>(n_captions)));
}

// Occurrences of each caption's own attribute tokens in that caption,
// counted with multiplicity over caption tokens, summed over the batch.
inline std::size_t count_attribute_occurrences(
    const std::vector<std::vector<TokenId>>& captions,
    const std::vector<std::vector<TokenId>>& attributes) {
    if (captions.size() != attributes.size())
        throw ContractError("count_attribute_occurrences: size mismatch");
    std::size_t f = 0;
    for (std::size_t i = 0; i < captions.size(); ++i) {
        std::set<TokenId> attr_set(attributes[i].begin(), attributes[i].end());
        for (TokenId t : captions[i]) f += attr_set.count(t);
    }
    return f;
}

// Negative log likelihood of one target sequence given per-step
// distributions. Targets equal to <pad> contribute nothing.
template <typename Real>
Tensor<Real> sequence_nll(const std::vector<Tensor<Real>>& step_logits,
                          const std::vector<TokenId>& targets) {
    if (step_logits.size() != targets.size())
        throw ContractError("sequence_nll: " + std::to_string(step_logits.size()) +
                            " distributions vs " + std::to_string(targets.size()) + " targets");
    Tensor<Real> total = Tensor<Real>::scalar(Real(0));
    bool any = false;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        if (targets[t] == Vocabulary::kPad) continue;
        if (targets[t] >= step_logits[t].size())
            throw ContractError("sequence_nll: target " + std::to_string(targets[t]) +
                                " out of range");
        Tensor<Real> lp = log_softmax_vec(step_logits[t]);
        Tensor<Real> nll_t = neg(pick(lp, targets[t]));
        total = any ? add(total, nll_t) : nll_t;
        any = true;
    }
    return total;
}

// One teacher-forced pass over a single (example, gold caption) pair.
template <typename Real>
struct TeacherForcedRun {
    Tensor<Real> nll;             // scalar graph node: sum over timesteps
    std::vector<TokenId> argmax;  // greedy pick per step, used for the
                                  // attribute count and token accuracy
    std::size_t steps = 0;
    std::size_t correct = 0;
};

template <typename Real>
TeacherForcedRun<Real> teacher_forced_nll(const ModelParams<Real>& P,
                                          const SequenceContext<Real>& ctx,
                                          const std::vector<TokenId>& gold) {
    if (gold.empty()) throw ContractError("teacher_forced_nll: empty gold caption");
    std::vector<TokenId> inputs = {Vocabulary::kStart};
    inputs.insert(inputs.end(), gold.begin(), gold.end());
    std::vector<TokenId> targets(gold.begin(), gold.end());
    targets.push_back(Vocabulary::kEnd);

    TeacherForcedRun<Real> run;
    DecoderState<Real> state = DecoderState<Real>::zeros(P.dims);
    std::vector<Tensor<Real>> logits;
    logits.reserve(targets.size());
    for (std::size_t t = 0; t < targets.size(); ++t) {
        StepResult<Real> step = decode_step(P, ctx, inputs[t], state);
        state = step.state;
        TokenId best = 0;
        for (std::size_t i = 1; i < step.logits.size(); ++i)
            if (step.logits.at(i) > step.logits.at(best)) best = static_cast<TokenId>(i);
        run.argmax.push_back(best);
        if (best == targets[t]) ++run.correct;
        logits.push_back(std::move(step.logits));
    }
    run.steps = targets.size();
    run.nll = sequence_nll(logits, targets);
    return run;
}

// Batch loss: cross-entropy averaged over the batch and summed over
// timesteps, plus the monitored attribute term when enabled.
template <typename Real>
struct BatchLoss {
    Tensor<Real> objective;  // graph node the optimizer differentiates
    LossBreakdown breakdown;
    std::size_t tokens = 0;
    std::size_t correct = 0;
};

template <typename Real>
struct BatchItem {
    const Example<Real>* example;
    std::size_t gold_idx;
};

template <typename Real>
BatchLoss<Real> batch_loss(const ModelParams<Real>& P, const std::vector<BatchItem<Real>>& batch,
                           const LossConfig& cfg,
                           const std::vector<DropoutMasks<Real>>* masks = nullptr) {
    if (batch.empty()) throw ContractError("batch_loss: empty batch");
    Tensor<Real> sum_nll;
    std::vector<std::vector<TokenId>> generated, attrs;
    BatchLoss<Real> out;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto& item = batch[i];
        auto ctx = make_context(P, *item.example,
                                masks ? (*masks)[i] : DropoutMasks<Real>::none());
        auto run = teacher_forced_nll(P, ctx, item.example->gold[item.gold_idx]);
        sum_nll = (i == 0) ? run.nll : add(sum_nll, run.nll);
        out.tokens += run.steps;
        out.correct += run.correct;
        generated.push_back(std::move(run.argmax));
        attrs.push_back(item.example->attributes);
    }
    out.objective = scale(sum_nll, static_cast<Real>(1.0 / static_cast<double>(batch.size())));
    out.breakdown.cross_entropy = static_cast<double>(out.objective.item());
    if (cfg.attr_term_enabled) {
        std::size_t f = count_attribute_occurrences(generated, attrs);
        out.breakdown.attribute_term = attribute_term(f, batch.size(), cfg);
    }
    out.breakdown.total = out.breakdown.cross_entropy + out.breakdown.attribute_term;
    return out;
}

}  // namespace capmod
