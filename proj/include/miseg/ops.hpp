#pragma once

#include <vector>

#include "miseg/tape.hpp"

namespace miseg {

// Elementwise arithmetic. Shapes must match, or one operand may be a
// scalar or a trailing-suffix shape of the other (broadcast over leading
// axes). Mismatches reject with both shapes named.
DiffArray add(const DiffArray& a, const DiffArray& b);
DiffArray subtract(const DiffArray& a, const DiffArray& b);
DiffArray multiply(const DiffArray& a, const DiffArray& b);
DiffArray squared_difference(const DiffArray& a, const DiffArray& b);
DiffArray scale(const DiffArray& a, double factor);

DiffArray exp(const DiffArray& a);
// log(max(v, 1e-12)); the floor keeps losses on vanishing probabilities finite.
DiffArray log(const DiffArray& a);
DiffArray leaky_relu(const DiffArray& a, double slope = 0.01);
DiffArray softmax(const DiffArray& a, int axis);

// Reductions drop the reduced axes; empty axis list reduces everything to a
// rank-0 scalar. Accumulation runs in fixed index order.
DiffArray sum(const DiffArray& a, const std::vector<int>& axes = {});
DiffArray mean(const DiffArray& a, const std::vector<int>& axes = {});

DiffArray matmul(const DiffArray& a, const DiffArray& b);  // [M,K] x [K,N]
DiffArray outer(const DiffArray& a, const DiffArray& b);   // [M] x [N] -> [M,N]

DiffArray transpose(const DiffArray& a, const std::vector<int>& perm);
DiffArray transpose(const DiffArray& a);  // rank-2 swap
DiffArray reshape(const DiffArray& a, Shape shape);
DiffArray slice(const DiffArray& a, int axis, int start, int stop);
DiffArray concat(const std::vector<DiffArray>& parts, int axis);

// x: [N,Ci,H,W], w: [Co,Ci,kh,kw], bias: [Co]. Zero padding.
DiffArray conv2d(const DiffArray& x, const DiffArray& w, const DiffArray& bias,
                 int stride, int pad);
DiffArray conv2d(const DiffArray& x, const DiffArray& w, int stride, int pad);

DiffArray upsample_nearest2x(const DiffArray& x);                    // [N,C,H,W] -> [N,C,2H,2W]
DiffArray maxpool2d(const DiffArray& x, int kernel, int stride);     // [N,C,H,W]
DiffArray global_maxpool(const DiffArray& x);                        // [N,C,H,W] -> [N,C]

// Permutes the trailing two spatial axes by a dst->src index map of length
// H*W. The map must be a bijection; gradients are scattered through the
// inverse. The batched form applies one map per leading-axis sample.
DiffArray pixel_permute(const DiffArray& x, const std::vector<int>& dst_to_src);
DiffArray pixel_permute(const DiffArray& x, const std::vector<std::vector<int>>& per_sample);

// Non-differentiating value kernels shared with backward closures.
NDArray transpose_values(const NDArray& a, const std::vector<int>& perm);

}  // namespace miseg
