#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "capmod/adam.hpp"
#include "capmod/checkpoint.hpp"
#include "capmod/config.hpp"
#include "capmod/dataset.hpp"
#include "capmod/dropout.hpp"
#include "capmod/errors.hpp"
#include "capmod/inference.hpp"
#include "capmod/metrics.hpp"
#include "capmod/model.hpp"
#include "capmod/objective.hpp"
#include "capmod/rng.hpp"

namespace capmod {

// lr annealing: multiply by lr_decay every lr_decay_every epochs (0-based).
inline double lr_schedule(const RunConfig& cfg, std::size_t epoch0) {
    return cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(epoch0 / cfg.lr_decay_every));
}

struct EpochStats {
    std::size_t epoch = 0;  // 1-based, continues across resumes
    double lr = 0;
    double xent = 0;       // mean per-example teacher-forced nll
    double attr_term = 0;  // monitored attribute penalty, 0 when disabled
    double val_cider = 0;
    double val_bleu4 = 0;
    double elapsed_s = 0;  // stays 0.0 unless measure_time is on
};

inline nlohmann::ordered_json epoch_stats_to_json(const EpochStats& s) {
    nlohmann::ordered_json j;
    j["epoch"] = s.epoch;
    j["lr"] = s.lr;
    j["xent"] = s.xent;
    j["attr_term"] = s.attr_term;
    j["val_cider"] = s.val_cider;
    j["val_bleu4"] = s.val_bleu4;
    j["elapsed_s"] = s.elapsed_s;
    return j;
}

struct ValScores {
    double cider = 0;
    double bleu4 = 0;
};

// Decodes every validation example at the configured beam size and scores
// against all gold references.
template <typename Real>
ValScores validate_model(const ModelParams<Real>& P, const std::vector<Example<Real>>& val_set,
                         const Vocabulary& vocab, const RunConfig& cfg) {
    std::vector<Caption> cands;
    std::vector<std::vector<Caption>> refs;
    for (const auto& ex : val_set) {
        auto res = beam_decode(P, ex, cfg.beam_size, cfg.max_len, cfg.length_normalize);
        cands.push_back(ids_to_caption(res.best.tokens, vocab));
        std::vector<Caption> r;
        for (const auto& g : ex.gold) r.push_back(ids_to_caption(g, vocab));
        refs.push_back(std::move(r));
    }
    EvalScores s = score_corpus(cands, refs);
    return {s.cider, s.bleu[3]};
}

template <typename Real>
struct TrainResult {
    ModelParams<Real> best_params;
    double best_val_cider = -std::numeric_limits<double>::infinity();
    std::size_t best_epoch = 0;  // 1-based
    std::vector<EpochStats> log;
    bool stopped_early = false;
};

namespace detail {

template <typename Real>
std::string param_norm_dump(const ModelParams<Real>& P) {
    std::string out;
    for (const auto& [name, t] : P.named_parameters()) {
        double sq = 0;
        for (Real v : t.value()) sq += static_cast<double>(v) * static_cast<double>(v);
        out += " " + name + "=" + std::to_string(std::sqrt(sq));
    }
    return out;
}

}  // namespace detail

// One full training run. Mutates `params` in place; the returned best_params
// snapshot is the validation-CIDEr winner. start_epoch shifts the epoch
// numbering (resume); optimizer moments always start fresh.
template <typename Real>
TrainResult<Real> train_model(ModelParams<Real>& params,
                              const std::vector<Example<Real>>& train_set,
                              const std::vector<Example<Real>>& val_set,
                              const Vocabulary& vocab, const RunConfig& cfg,
                              std::size_t start_epoch = 0,
                              const std::function<void(const EpochStats&)>& on_epoch = {}) {
    if (train_set.empty()) throw ContractError("train_model: empty training split");
    if (val_set.empty()) throw ContractError("train_model: empty validation split");

    std::vector<BatchItem<Real>> items;
    for (const auto& ex : train_set) {
        if (ex.gold.empty())
            throw ContractError("train_model: example " + ex.id + " has no gold caption");
        for (std::size_t g = 0; g < ex.gold.size(); ++g) items.push_back({&ex, g});
    }

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    acfg.beta1 = cfg.adam_beta1;
    acfg.beta2 = cfg.adam_beta2;
    acfg.eps = cfg.adam_eps;
    auto param_list = params.parameters();
    Adam<Real> opt(param_list, acfg);
    LossConfig lcfg{cfg.beta, cfg.occurrence_threshold, cfg.attr_term_enabled};

    TrainResult<Real> res;
    res.best_params = params.clone();
    res.best_epoch = start_epoch;
    std::size_t since_best = 0;

    for (std::size_t ep0 = start_epoch; ep0 < cfg.max_epochs; ++ep0) {
        auto wall_start = std::chrono::steady_clock::now();
        double lr = lr_schedule(cfg, ep0);

        std::vector<std::size_t> order(items.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        auto shuffle_rng = substream(cfg.seed, "shuffle-epoch-" + std::to_string(ep0));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);
        auto drop_rng = substream(cfg.seed, "dropout-epoch-" + std::to_string(ep0));

        double ce_sum = 0, attr_sum = 0;
        std::size_t n_items = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::size_t batch_index = start / cfg.batch_size;
            std::vector<BatchItem<Real>> batch;
            std::vector<DropoutMasks<Real>> masks;
            for (std::size_t i = start; i < std::min(start + cfg.batch_size, order.size()); ++i) {
                batch.push_back(items[order[i]]);
                masks.push_back(DropoutMasks<Real>::sample(params.dims, cfg.dropout, drop_rng));
            }
            auto abort_training = [&](const char* what) -> NumericalError {
                return NumericalError("training aborted at epoch " + std::to_string(ep0 + 1) +
                                      ", batch " + std::to_string(batch_index) + ": " + what +
                                      "; parameter norms:" + detail::param_norm_dump(params));
            };
            try {
                Tape<Real> tape;
                auto loss = batch_loss(params, batch, lcfg, &masks);
                if (!std::isfinite(loss.breakdown.cross_entropy))
                    throw NumericalError("non-finite loss");
                tape.backward(loss.objective);
                clip_grad_norm(param_list, cfg.grad_clip);
                opt.step(lr);
                ce_sum += loss.breakdown.cross_entropy * static_cast<double>(batch.size());
                attr_sum += loss.breakdown.attribute_term * static_cast<double>(batch.size());
                n_items += batch.size();
            } catch (const NumericalError& e) {
                throw abort_training(e.what());
            } catch (const DomainError& e) {  // non-finite forward pass
                throw abort_training(e.what());
            }
        }

        ValScores v = validate_model(params, val_set, vocab, cfg);
        EpochStats st;
        st.epoch = ep0 + 1;
        st.lr = lr;
        st.xent = ce_sum / static_cast<double>(n_items);
        st.attr_term = attr_sum / static_cast<double>(n_items);
        st.val_cider = v.cider;
        st.val_bleu4 = v.bleu4;
        if (cfg.measure_time) {
            auto wall_end = std::chrono::steady_clock::now();
            st.elapsed_s = std::chrono::duration<double>(wall_end - wall_start).count();
        }
        res.log.push_back(st);
        if (on_epoch) on_epoch(st);

        if (v.cider > res.best_val_cider) {
            res.best_val_cider = v.cider;
            res.best_epoch = ep0 + 1;
            res.best_params = params.clone();
            since_best = 0;
        } else if (cfg.patience > 0 && ++since_best >= cfg.patience) {
            res.stopped_early = true;
            break;
        }
    }
    return res;
}

}  // namespace capmod
