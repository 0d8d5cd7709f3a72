#pragma once

#include "capmod/model.hpp"
#include "capmod/rng.hpp"
#include "capmod/tensor.hpp"

namespace capmod {

// Variational dropout: one mask per sequence, reused at every timestep.
// Masks use inverted scaling (kept entries are multiplied by 1/keep) so
// evaluation needs no rescaling. Sites: the attention LSTM input, the
// language LSTM input, and the language hidden state entering the output
// head.
template <typename Real>
struct DropoutMasks {
    bool active = false;
    Tensor<Real> x1, x2, h2;

    static DropoutMasks none() { return DropoutMasks{}; }

    static DropoutMasks sample(const ModelDims& dims, double rate, SplitMix64& rng) {
        DropoutMasks m;
        if (rate <= 0.0) return m;
        m.active = true;
        double keep = 1.0 - rate;
        auto draw = [&](std::size_t n) {
            std::vector<Real> v(n);
            for (auto& x : v)
                x = rng.bernoulli(keep) ? static_cast<Real>(1.0 / keep) : Real(0);
            return Tensor<Real>({n}, std::move(v));
        };
        m.x1 = draw(dims.x1_dim());
        m.x2 = draw(dims.x2_dim());
        m.h2 = draw(dims.h);
        return m;
    }
};

template <typename Real>
Tensor<Real> apply_mask(const Tensor<Real>& x, const DropoutMasks<Real>& masks,
                        const Tensor<Real>& mask) {
    return masks.active ? mul(x, mask) : x;
}

}  // namespace capmod
