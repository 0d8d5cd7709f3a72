#pragma once

#include "capmod/tensor.hpp"

namespace capmod {

template <typename Real>
struct AttentionResult {
    Tensor<Real> alpha;    // simplex over feature rows
    Tensor<Real> context;  // convex combination of the rows
};

// Additive attention: score_i = w . relu(Wf f_i + Wh h), alpha = softmax,
// context = sum_i alpha_i f_i. Works unchanged for the spatial branch
// (rows = p cells plus the global feature) and the region branch (rows =
// k detections); the parameter set decides which.
template <typename Real>
AttentionResult<Real> attend(const Tensor<Real>& feats, const Tensor<Real>& hidden,
                             const Tensor<Real>& Wf, const Tensor<Real>& Wh,
                             const Tensor<Real>& w) {
    if (feats.rank() != 2 || feats.dim(0) == 0)
        throw ShapeError("attend: features must be a non-empty matrix, got " +
                         shape_str(feats.shape()));
    Tensor<Real> proj = matmul(feats, Wf);                    // (rows, a)
    Tensor<Real> hproj = matmul(hidden, Wh);                  // (a)
    Tensor<Real> scores = matmul(relu(add(proj, hproj)), w);  // (rows)
    AttentionResult<Real> out;
    out.alpha = softmax(scores);
    out.context = matmul(out.alpha, feats);  // (feat_dim)
    return out;
}

}  // namespace capmod
