#pragma once

#include <algorithm>
#include <vector>

#include "capmod/attention.hpp"
#include "capmod/dan.hpp"
#include "capmod/dataset.hpp"
#include "capmod/dropout.hpp"
#include "capmod/model.hpp"
#include "capmod/tensor.hpp"

namespace capmod {

template <typename Real>
struct DecoderState {
    Tensor<Real> h1, m1, h2, m2;

    static DecoderState zeros(const ModelDims& dims) {
        using T = Tensor<Real>;
        return {T::zeros({dims.h}), T::zeros({dims.h}), T::zeros({dims.h}), T::zeros({dims.h})};
    }
};

template <typename Real>
struct LstmOut {
    Tensor<Real> h, m;
};

// One fused-gate LSTM step: z = xW + h_prev U + b split into input,
// forget, candidate, output blocks.
template <typename Real>
LstmOut<Real> lstm_step(const Tensor<Real>& W, const Tensor<Real>& U, const Tensor<Real>& b,
                        const Tensor<Real>& x, const Tensor<Real>& h_prev,
                        const Tensor<Real>& m_prev) {
    std::size_t h = h_prev.dim(0);
    Tensor<Real> z = add(add(matmul(x, W), matmul(h_prev, U)), b);
    Tensor<Real> gi = sigmoid(slice(z, 0, h));
    Tensor<Real> gf = sigmoid(slice(z, h, h));
    Tensor<Real> gc = tanh(slice(z, 2 * h, h));
    Tensor<Real> go = sigmoid(slice(z, 3 * h, h));
    Tensor<Real> m = add(mul(gf, m_prev), mul(gi, gc));
    return {mul(go, tanh(m)), m};
}

// Per-sequence quantities that do not change across timesteps: sentence
// embedding of the existing caption, the attended feature matrix and its
// mean row, and the reduced attribute embedding.
template <typename Real>
struct SequenceContext {
    Tensor<Real> e;
    Tensor<Real> feats;
    Tensor<Real> v_gb;
    Tensor<Real> a_avg;
    DropoutMasks<Real> masks;
};

template <typename Real>
Tensor<Real> reduce_attributes(const ModelParams<Real>& P, const std::vector<TokenId>& attrs) {
    if (attrs.size() != 5)
        throw ContractError("reduce_attributes: expected exactly 5 attributes, got " +
                            std::to_string(attrs.size()));
    // sorted accumulation: attribute order never changes the pooled value
    std::vector<TokenId> ids(attrs.begin(), attrs.end());
    std::sort(ids.begin(), ids.end());
    Tensor<Real> acc = take_row(P.embedding, ids[0]);
    for (std::size_t i = 1; i < 5; ++i) acc = add(acc, take_row(P.embedding, ids[i]));
    Tensor<Real> mean = scale(acc, static_cast<Real>(0.2));
    Tensor<Real> t1 = tanh(add(matmul(mean, P.attr_W1), P.attr_b1));
    return tanh(add(matmul(t1, P.attr_W2), P.attr_b2));
}

template <typename Real>
SequenceContext<Real> make_context(const ModelParams<Real>& P, const Example<Real>& ex,
                                   DropoutMasks<Real> masks = DropoutMasks<Real>::none()) {
    SequenceContext<Real> ctx;
    ctx.e = encode_sentence(P, ex.existing);
    if (P.dims.attention == AttentionKind::Spatial) {
        ctx.feats = ex.image_features;
    } else {
        if (!ex.region_features)
            throw ContractError(ex.id + ": region attention needs region features");
        ctx.feats = *ex.region_features;
    }
    if (ctx.feats.dim(1) != P.dims.feat_dim())
        throw ShapeError(ex.id + ": feature width " + std::to_string(ctx.feats.dim(1)) +
                         " does not match model (" + std::to_string(P.dims.feat_dim()) + ")");
    ctx.v_gb = mean_rows(ctx.feats);
    ctx.a_avg = reduce_attributes(P, ex.attributes);
    ctx.masks = std::move(masks);
    return ctx;
}

struct StepDiag {
    std::vector<double> alpha;
    double gs_mean = 0, gr_mean = 0;
};

template <typename Real>
struct StepResult {
    Tensor<Real> logits;
    DecoderState<Real> state;
    StepDiag diag;
};

namespace detail {

template <typename Real>
double mean_value(const Tensor<Real>& t) {
    double s = 0;
    for (std::size_t i = 0; i < t.size(); ++i) s += static_cast<double>(t.at(i));
    return s / static_cast<double>(t.size());
}

}  // namespace detail

template <typename Real>
struct SentinelOut {
    Tensor<Real> s;    // what the decoder already knows
    Tensor<Real> g_s;  // its gate, kept for diagnostics
};

// Visual sentinel: gate on (input, previous hidden), applied to the
// post-step memory.
template <typename Real>
SentinelOut<Real> sentinel(const ModelParams<Real>& P, const Tensor<Real>& x2,
                           const Tensor<Real>& h2_prev, const Tensor<Real>& m2_post) {
    Tensor<Real> g_s = sigmoid(add(matmul(x2, P.sen_Wx), matmul(h2_prev, P.sen_Wh)));
    return {mul(g_s, tanh(m2_post)), g_s};
}

// How much of the encoded existing caption survives into the output.
template <typename Real>
Tensor<Real> modification_gate(const ModelParams<Real>& P, const Tensor<Real>& e,
                               const Tensor<Real>& s) {
    return sigmoid(add(matmul(e, P.head_We), matmul(s, P.head_Wm)));
}

template <typename Real>
struct ResidualOut {
    Tensor<Real> o;       // gated caption content plus resized hidden state
    Tensor<Real> logits;  // o projected to vocabulary scores
};

template <typename Real>
ResidualOut<Real> residual_output(const ModelParams<Real>& P, const Tensor<Real>& g_r,
                                  const Tensor<Real>& e, const Tensor<Real>& h2) {
    Tensor<Real> w_f = mul(g_r, e);
    Tensor<Real> o = add(w_f, tanh(add(matmul(h2, P.res_W), P.res_b)));
    return {o, matmul(o, P.head_Wp)};
}

// One decoding timestep:
//   x1 = [e; v_gb; w_prev]            -> attention LSTM
//   attention over feature rows       -> context c
//   x2 = [A_avg; h1; c]               -> language LSTM
//   g_s = sigma(Wx x2 + Wh h2_prev),  s = g_s * tanh(m2)
//   g_r = sigma(We e + Wm s)
//   o   = g_r * e + tanh(resize(h2)), logits = o Wp
template <typename Real>
StepResult<Real> decode_step(const ModelParams<Real>& P, const SequenceContext<Real>& ctx,
                             TokenId w_prev, const DecoderState<Real>& state) {
    if (w_prev >= P.dims.vocab)
        throw ContractError("decode_step: token " + std::to_string(w_prev) + " out of range");
    Tensor<Real> w = take_row(P.embedding, w_prev);
    Tensor<Real> x1 = concat<Real>({ctx.e, ctx.v_gb, w});
    x1 = apply_mask(x1, ctx.masks, ctx.masks.x1);
    LstmOut<Real> l1 = lstm_step(P.l1_W, P.l1_U, P.l1_b, x1, state.h1, state.m1);

    AttentionResult<Real> att = attend(ctx.feats, l1.h, P.att_Wf, P.att_Wh, P.att_w);

    Tensor<Real> x2 = concat<Real>({ctx.a_avg, l1.h, att.context});
    x2 = apply_mask(x2, ctx.masks, ctx.masks.x2);
    LstmOut<Real> l2 = lstm_step(P.l2_W, P.l2_U, P.l2_b, x2, state.h2, state.m2);

    SentinelOut<Real> sen = sentinel(P, x2, state.h2, l2.m);
    Tensor<Real> g_r = modification_gate(P, ctx.e, sen.s);
    Tensor<Real> h2_head = apply_mask(l2.h, ctx.masks, ctx.masks.h2);
    ResidualOut<Real> head = residual_output(P, g_r, ctx.e, h2_head);

    StepResult<Real> out;
    out.logits = head.logits;
    out.state = {l1.h, l1.m, l2.h, l2.m};
    out.diag.alpha.reserve(att.alpha.size());
    for (std::size_t i = 0; i < att.alpha.size(); ++i)
        out.diag.alpha.push_back(static_cast<double>(att.alpha.at(i)));
    // the gate means drive the per-token modification trace
    out.diag.gs_mean = detail::mean_value(sen.g_s);
    out.diag.gr_mean = detail::mean_value(g_r);
    return out;
}

// Numerically safe log softmax: shift by the max, subtract log-sum-exp.
template <typename Real>
Tensor<Real> log_softmax_vec(const Tensor<Real>& logits) {
    if (logits.rank() != 1 || logits.size() == 0)
        throw ShapeError("log_softmax: expected a non-empty vector, got " +
                         shape_str(logits.shape()));
    Real mx = logits.at(0);
    for (std::size_t i = 1; i < logits.size(); ++i) mx = std::max(mx, logits.at(i));
    Tensor<Real> shifted = add_const(logits, -mx);
    Tensor<Real> lse = log(sum(exp(shifted)));
    return sub(shifted, lse);
}

}  // namespace capmod
