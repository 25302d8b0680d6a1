#pragma once

#include <utility>
#include <vector>

#include "miseg/ops.hpp"

namespace miseg::infomax {

// Per-sample ([N,K]) or per-pixel ([N,K,h,w]) categorical distribution over
// K clusters, as produced by a projection head.
struct ClusterAssignment {
  DiffArray probs;

  int clusters() const { return probs.shape()[1]; }
  int samples() const { return probs.shape()[0]; }
};

// Validates shape and (loosely) the simplex constraint before wrapping.
ClusterAssignment make_assignment(DiffArray probs);

// K x K joint probability matrix over cluster co-occurrences.
struct JointDistribution {
  DiffArray P;

  int clusters() const { return P.shape()[0]; }
};

// P = (1/N) * sum_n a_n b_n^T, optionally symmetrized to (P + P^T)/2.
// Differentiable w.r.t. both assignments.
JointDistribution estimate_joint(const ClusterAssignment& a, const ClusterAssignment& b,
                                 bool symmetrize = false);

// MI(P) = sum_cc' P_cc' log(P_cc' / (rowsum_c * colsum_c')), floored logs.
DiffArray mutual_information(const JointDistribution& joint);

// Independent route: H(col marginal) - H(col | row), skipping zero terms
// exactly. Serves as the oracle for the KL-form computation above.
double mi_by_entropy(const NDArray& P);

// -(1/heads) * sum_h MI(estimate_joint(pair_h)).
DiffArray global_mi_loss(const std::vector<std::pair<ClusterAssignment, ClusterAssignment>>& pairs,
                         bool symmetrize = false);

// Integer spatial offsets defining the local neighborhood.
struct DisplacementSet {
  int radius = 0;
  std::vector<std::pair<int, int>> offsets;

  static DisplacementSet grid(int radius);  // all offsets with |p|,|q| <= radius
  static DisplacementSet make(int radius, std::vector<std::pair<int, int>> offsets);
};

// Joint over assignments at positions displaced by (p,q), averaged over all
// samples and valid positions only (no padded positions), renormalized by
// the valid count.
JointDistribution local_joint(const ClusterAssignment& fa, const ClusterAssignment& fb,
                              std::pair<int, int> offset);

struct LocalBlock {
  ClusterAssignment fa;  // already aligned to fb's coordinate frame
  ClusterAssignment fb;
  DisplacementSet displacements;
};

// -(1/B) sum_b (1/|D_b|) sum_{(p,q)} MI(local_joint(fa, fb, (p,q))).
DiffArray local_mi_loss(const std::vector<LocalBlock>& blocks);

// Mean over N*H*W positions of the squared L2 distance between C-vectors.
DiffArray consistency_loss(const DiffArray& out_t, const DiffArray& out_aligned);

// Mean pixel-wise Shannon entropy of softmax outputs [N,C,H,W].
DiffArray entropy_min_loss(const DiffArray& probs);

}  // namespace miseg::infomax
