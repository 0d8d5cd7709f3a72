#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "capmod/config.hpp"
#include "capmod/errors.hpp"
#include "capmod/rng.hpp"
#include "capmod/tensor.hpp"

namespace capmod {

enum class AttentionKind { Spatial, Region };

// Static shape information for one model instance. Exactly one attention
// branch is active; it fixes which feature matrix is attended, the width
// of the context vector, and therefore both LSTM input sizes.
struct ModelDims {
    std::size_t vocab = 0;
    std::size_t emb = 32;
    std::size_t d = 32;   // sentence embedding / gate / output width
    std::size_t h = 64;   // LSTM hidden size
    std::size_t a = 32;   // attention size
    std::size_t d_v = 0;  // spatial feature width
    std::size_t d_b = 0;  // region feature width
    AttentionKind attention = AttentionKind::Spatial;

    std::size_t feat_dim() const { return attention == AttentionKind::Spatial ? d_v : d_b; }
    std::size_t x1_dim() const { return d + feat_dim() + emb; }       // [e; v_gb; w]
    std::size_t x2_dim() const { return d + h + feat_dim(); }         // [A_avg; h1; c]

    bool operator==(const ModelDims&) const = default;

    static ModelDims from_config(const RunConfig& cfg, std::size_t vocab_size, std::size_t dv,
                                 std::size_t db) {
        ModelDims m;
        m.vocab = vocab_size;
        m.emb = cfg.emb;
        m.d = cfg.d;
        m.h = cfg.h;
        m.a = cfg.attn;
        m.d_v = dv;
        m.d_b = db;
        m.attention = cfg.attention == "region" ? AttentionKind::Region : AttentionKind::Spatial;
        if (m.attention == AttentionKind::Region && db == 0)
            throw ConfigError("region attention requested but dataset has no region features");
        return m;
    }
};

// All learnable tensors. Weight matrices are stored (input_dim, output_dim)
// so row vectors multiply from the left. LSTM gates are fused in the order
// input, forget, candidate, output.
template <typename Real>
struct ModelParams {
    ModelDims dims;

    Tensor<Real> embedding;  // (vocab, emb), shared by decoder input,
                             // attribute lookup and the sentence encoder

    // sentence encoder (two tanh layers over the word average)
    bool has_dan_proj = false;
    Tensor<Real> dan_proj;  // (emb, d), present only when emb != d
    Tensor<Real> dan_W1, dan_b1;  // (d,d), (d)
    Tensor<Real> dan_W2, dan_b2;  // (d,d), (d)
    Tensor<Real> dan_e_null;      // (d), stands in for empty captions

    // additive attention over the active feature branch
    Tensor<Real> att_Wf;  // (feat_dim, a)
    Tensor<Real> att_Wh;  // (h, a)
    Tensor<Real> att_w;   // (a)

    // attention LSTM
    Tensor<Real> l1_W, l1_U, l1_b;  // (x1,4h), (h,4h), (4h)
    // language LSTM
    Tensor<Real> l2_W, l2_U, l2_b;  // (x2,4h), (h,4h), (4h)
    // sentinel gate on the language LSTM
    Tensor<Real> sen_Wx;  // (x2, h)
    Tensor<Real> sen_Wh;  // (h, h)

    // attribute reducer: two tanh layers over the mean attribute embedding
    Tensor<Real> attr_W1, attr_b1;  // (emb,d), (d)
    Tensor<Real> attr_W2, attr_b2;  // (d,d), (d)

    // modification gate and residual output head
    Tensor<Real> head_We;  // (d, d)
    Tensor<Real> head_Wm;  // (h, d)
    Tensor<Real> res_W;    // (h, d)
    Tensor<Real> res_b;    // (d)
    Tensor<Real> head_Wp;  // (d, vocab)

    std::vector<std::pair<std::string, Tensor<Real>>> named_parameters() const {
        std::string branch =
            dims.attention == AttentionKind::Spatial ? "attention.spatial." : "attention.region.";
        std::vector<std::pair<std::string, Tensor<Real>>> out = {
            {"embedding", embedding},
        };
        if (has_dan_proj) out.emplace_back("encoder.proj", dan_proj);
        out.insert(out.end(), {
            {"encoder.W1", dan_W1}, {"encoder.b1", dan_b1},
            {"encoder.W2", dan_W2}, {"encoder.b2", dan_b2},
            {"encoder.e_null", dan_e_null},
            {branch + "Wf", att_Wf}, {branch + "Wh", att_Wh}, {branch + "w", att_w},
            {"lstm1.W", l1_W}, {"lstm1.U", l1_U}, {"lstm1.b", l1_b},
            {"lstm2.W", l2_W}, {"lstm2.U", l2_U}, {"lstm2.b", l2_b},
            {"sentinel.Wx", sen_Wx}, {"sentinel.Wh", sen_Wh},
            {"attr.W1", attr_W1}, {"attr.b1", attr_b1},
            {"attr.W2", attr_W2}, {"attr.b2", attr_b2},
            {"head.We", head_We}, {"head.Wm", head_Wm},
            {"head.resize.W", res_W}, {"head.resize.b", res_b},
            {"head.Wp", head_Wp},
        });
        return out;
    }

    std::vector<Tensor<Real>> parameters() const {
        std::vector<Tensor<Real>> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (auto& [name, t] : named_parameters()) n += t.size();
        return n;
    }

    // Deep copy: fresh storage, no recorded graph state.
    ModelParams clone() const {
        ModelParams c = *this;
        c.embedding = embedding.detached_copy();
        if (has_dan_proj) c.dan_proj = dan_proj.detached_copy();
        c.dan_W1 = dan_W1.detached_copy();
        c.dan_b1 = dan_b1.detached_copy();
        c.dan_W2 = dan_W2.detached_copy();
        c.dan_b2 = dan_b2.detached_copy();
        c.dan_e_null = dan_e_null.detached_copy();
        c.att_Wf = att_Wf.detached_copy();
        c.att_Wh = att_Wh.detached_copy();
        c.att_w = att_w.detached_copy();
        c.l1_W = l1_W.detached_copy();
        c.l1_U = l1_U.detached_copy();
        c.l1_b = l1_b.detached_copy();
        c.l2_W = l2_W.detached_copy();
        c.l2_U = l2_U.detached_copy();
        c.l2_b = l2_b.detached_copy();
        c.sen_Wx = sen_Wx.detached_copy();
        c.sen_Wh = sen_Wh.detached_copy();
        c.attr_W1 = attr_W1.detached_copy();
        c.attr_b1 = attr_b1.detached_copy();
        c.attr_W2 = attr_W2.detached_copy();
        c.attr_b2 = attr_b2.detached_copy();
        c.head_We = head_We.detached_copy();
        c.head_Wm = head_Wm.detached_copy();
        c.res_W = res_W.detached_copy();
        c.res_b = res_b.detached_copy();
        c.head_Wp = head_Wp.detached_copy();
        return c;
    }
};

namespace detail {

template <typename Real>
Tensor<Real> init_matrix(std::uint64_t seed, const std::string& name, std::size_t in,
                         std::size_t out) {
    auto rng = substream(seed, "init:" + name);
    Real r = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(in)));
    std::vector<Real> v(in * out);
    for (auto& x : v) x = static_cast<Real>(rng.uniform(-r, r));
    return Tensor<Real>({in, out}, std::move(v));
}

template <typename Real>
Tensor<Real> init_vector(std::uint64_t seed, const std::string& name, std::size_t n, double r) {
    auto rng = substream(seed, "init:" + name);
    std::vector<Real> v(n);
    for (auto& x : v) x = static_cast<Real>(rng.uniform(-r, r));
    return Tensor<Real>({n}, std::move(v));
}

}  // namespace detail

template <typename Real>
ModelParams<Real> init_model(const ModelDims& dims, std::uint64_t seed) {
    if (dims.vocab < 5) throw ContractError("init_model: vocabulary too small");
    if (dims.feat_dim() == 0) throw ContractError("init_model: active feature width is 0");
    ModelParams<Real> P;
    P.dims = dims;
    auto M = [&](const char* n, std::size_t i, std::size_t o) {
        return detail::init_matrix<Real>(seed, n, i, o);
    };
    using T = Tensor<Real>;

    P.embedding = M("embedding", dims.vocab, dims.emb);
    P.has_dan_proj = dims.emb != dims.d;
    if (P.has_dan_proj) P.dan_proj = M("encoder.proj", dims.emb, dims.d);
    P.dan_W1 = M("encoder.W1", dims.d, dims.d);
    P.dan_b1 = T::zeros({dims.d});
    P.dan_W2 = M("encoder.W2", dims.d, dims.d);
    P.dan_b2 = T::zeros({dims.d});
    P.dan_e_null = detail::init_vector<Real>(seed, "encoder.e_null", dims.d, 0.1);

    P.att_Wf = M("attention.Wf", dims.feat_dim(), dims.a);
    P.att_Wh = M("attention.Wh", dims.h, dims.a);
    P.att_w = detail::init_vector<Real>(seed, "attention.w", dims.a,
                                        1.0 / std::sqrt(static_cast<double>(dims.a)));

    auto lstm_bias = [&](std::size_t h) {
        // forget-gate bias starts at 1 so memory persists early in training
        std::vector<Real> b(4 * h, Real(0));
        for (std::size_t i = h; i < 2 * h; ++i) b[i] = Real(1);
        return T({4 * h}, std::move(b));
    };
    P.l1_W = M("lstm1.W", dims.x1_dim(), 4 * dims.h);
    P.l1_U = M("lstm1.U", dims.h, 4 * dims.h);
    P.l1_b = lstm_bias(dims.h);
    P.l2_W = M("lstm2.W", dims.x2_dim(), 4 * dims.h);
    P.l2_U = M("lstm2.U", dims.h, 4 * dims.h);
    P.l2_b = lstm_bias(dims.h);

    P.sen_Wx = M("sentinel.Wx", dims.x2_dim(), dims.h);
    P.sen_Wh = M("sentinel.Wh", dims.h, dims.h);

    P.attr_W1 = M("attr.W1", dims.emb, dims.d);
    P.attr_b1 = T::zeros({dims.d});
    P.attr_W2 = M("attr.W2", dims.d, dims.d);
    P.attr_b2 = T::zeros({dims.d});

    P.head_We = M("head.We", dims.d, dims.d);
    P.head_Wm = M("head.Wm", dims.h, dims.d);
    P.res_W = M("head.resize.W", dims.h, dims.d);
    P.res_b = T::zeros({dims.d});
    P.head_Wp = M("head.Wp", dims.d, dims.vocab);
    return P;
}

}  // namespace capmod
