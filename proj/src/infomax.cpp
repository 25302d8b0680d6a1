#include "miseg/infomax.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace miseg::infomax {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Loose tolerances: finite-difference probes shift sums by ~step, so the
// guards only reject grossly invalid inputs.
constexpr double kEntryTol = 1e-4;
constexpr double kSumTol = 1e-3;

}  // namespace

ClusterAssignment make_assignment(DiffArray probs) {
  const int rank = probs.value.rank();
  require(rank == 2 || rank == 4,
          "cluster assignment must be [N,K] or [N,K,h,w], got " + shape_str(probs.shape()));
  require(probs.shape()[0] >= 1 && probs.shape()[1] >= 1,
          "cluster assignment must be non-empty, got " + shape_str(probs.shape()));
  return ClusterAssignment{std::move(probs)};
}

JointDistribution estimate_joint(const ClusterAssignment& a, const ClusterAssignment& b,
                                 bool symmetrize) {
  require(a.probs.value.rank() == 2 && b.probs.value.rank() == 2,
          "estimate_joint: expected [N,K] assignments, got " + shape_str(a.probs.shape()) +
              " and " + shape_str(b.probs.shape()));
  require(a.probs.shape()[0] == b.probs.shape()[0],
          "estimate_joint: sample counts differ: " + shape_str(a.probs.shape()) + " vs " +
              shape_str(b.probs.shape()));
  require(a.probs.shape()[1] == b.probs.shape()[1],
          "estimate_joint: cluster counts differ: " + shape_str(a.probs.shape()) + " vs " +
              shape_str(b.probs.shape()));
  const int n = a.probs.shape()[0];
  require(n >= 1, "estimate_joint: empty batch");

  DiffArray joint = scale(matmul(transpose(a.probs), b.probs), 1.0 / n);
  if (symmetrize) joint = scale(add(joint, transpose(joint)), 0.5);
  return JointDistribution{joint};
}

DiffArray mutual_information(const JointDistribution& joint) {
  const DiffArray& P = joint.P;
  require(P.value.rank() == 2 && P.shape()[0] == P.shape()[1],
          "mutual_information: joint must be square, got " + shape_str(P.shape()));
  double total = 0.0;
  for (int64_t i = 0; i < P.size(); ++i) {
    require(P.value[i] >= -kEntryTol,
            "mutual_information: negative entry " + std::to_string(P.value[i]));
    total += P.value[i];
  }
  require(std::fabs(total - 1.0) <= kSumTol,
          "mutual_information: joint sums to " + std::to_string(total) + ", expected 1");

  DiffArray row = sum(P, {1});
  DiffArray col = sum(P, {0});
  DiffArray independent = outer(row, col);
  return sum(multiply(P, subtract(miseg::log(P), miseg::log(independent))));
}

double mi_by_entropy(const NDArray& P) {
  const int k = P.shape()[0];
  std::vector<double> row(static_cast<size_t>(k), 0.0), col(static_cast<size_t>(k), 0.0);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      const double v = P.at({i, j});
      row[static_cast<size_t>(i)] += v;
      col[static_cast<size_t>(j)] += v;
    }

  double h_col = 0.0;
  for (int j = 0; j < k; ++j)
    if (col[static_cast<size_t>(j)] > 0.0) h_col -= col[static_cast<size_t>(j)] * std::log(col[static_cast<size_t>(j)]);

  double h_cond = 0.0;  // H(col | row)
  for (int i = 0; i < k; ++i) {
    if (row[static_cast<size_t>(i)] <= 0.0) continue;
    for (int j = 0; j < k; ++j) {
      const double v = P.at({i, j});
      if (v > 0.0) h_cond -= v * std::log(v / row[static_cast<size_t>(i)]);
    }
  }
  return h_col - h_cond;
}

DiffArray global_mi_loss(const std::vector<std::pair<ClusterAssignment, ClusterAssignment>>& pairs,
                         bool symmetrize) {
  require(!pairs.empty(), "global_mi_loss: no projector heads");
  DiffArray acc;
  bool first = true;
  for (const auto& [a, b] : pairs) {
    DiffArray mi = mutual_information(estimate_joint(a, b, symmetrize));
    acc = first ? mi : add(acc, mi);
    first = false;
  }
  return scale(acc, -1.0 / static_cast<double>(pairs.size()));
}

DisplacementSet DisplacementSet::grid(int radius) {
  require(radius >= 0, "displacement radius must be >= 0");
  DisplacementSet d;
  d.radius = radius;
  for (int p = -radius; p <= radius; ++p)
    for (int q = -radius; q <= radius; ++q) d.offsets.emplace_back(p, q);
  return d;
}

DisplacementSet DisplacementSet::make(int radius, std::vector<std::pair<int, int>> offsets) {
  require(radius >= 0, "displacement radius must be >= 0");
  for (size_t i = 0; i < offsets.size(); ++i) {
    const auto& [p, q] = offsets[i];
    require(std::abs(p) <= radius && std::abs(q) <= radius,
            "displacement (" + std::to_string(p) + "," + std::to_string(q) +
                ") outside radius " + std::to_string(radius));
    for (size_t j = i + 1; j < offsets.size(); ++j)
      require(offsets[j] != offsets[i], "duplicate displacement");
  }
  DisplacementSet d;
  d.radius = radius;
  d.offsets = std::move(offsets);
  return d;
}

JointDistribution local_joint(const ClusterAssignment& fa, const ClusterAssignment& fb,
                              std::pair<int, int> offset) {
  require(fa.probs.value.rank() == 4 && fb.probs.value.rank() == 4,
          "local_joint: expected [N,K,h,w] assignments, got " + shape_str(fa.probs.shape()) +
              " and " + shape_str(fb.probs.shape()));
  require(fa.probs.shape() == fb.probs.shape(),
          "local_joint: shapes " + shape_str(fa.probs.shape()) + " and " +
              shape_str(fb.probs.shape()) + " differ");
  const int n = fa.probs.shape()[0];
  const int k = fa.probs.shape()[1];
  const int h = fa.probs.shape()[2];
  const int w = fa.probs.shape()[3];
  const auto [p, q] = offset;
  require(std::abs(p) < h && std::abs(q) < w,
          "local_joint: offset (" + std::to_string(p) + "," + std::to_string(q) +
              ") leaves no valid positions on a " + std::to_string(h) + "x" + std::to_string(w) +
              " map");

  // Valid anchor positions (i,j) such that (i+p, j+q) stays in bounds.
  const int i0 = std::max(0, -p), i1 = std::min(h - 1, h - 1 - p);
  const int j0 = std::max(0, -q), j1 = std::min(w - 1, w - 1 - q);
  const int rows = i1 - i0 + 1, cols = j1 - j0 + 1;
  const int64_t count = static_cast<int64_t>(n) * rows * cols;

  DiffArray a = slice(slice(fa.probs, 2, i0, i1 + 1), 3, j0, j1 + 1);
  DiffArray b = slice(slice(fb.probs, 2, i0 + p, i1 + p + 1), 3, j0 + q, j1 + q + 1);
  a = reshape(transpose(a, {0, 2, 3, 1}), {static_cast<int>(count), k});
  b = reshape(transpose(b, {0, 2, 3, 1}), {static_cast<int>(count), k});
  return JointDistribution{scale(matmul(transpose(a), b), 1.0 / static_cast<double>(count))};
}

DiffArray local_mi_loss(const std::vector<LocalBlock>& blocks) {
  require(!blocks.empty(), "local_mi_loss: no blocks");
  DiffArray acc;
  bool first = true;
  for (const LocalBlock& block : blocks) {
    require(!block.displacements.offsets.empty(), "local_mi_loss: empty displacement set");
    DiffArray block_mi;
    bool block_first = true;
    for (const auto& offset : block.displacements.offsets) {
      DiffArray mi = mutual_information(local_joint(block.fa, block.fb, offset));
      block_mi = block_first ? mi : add(block_mi, mi);
      block_first = false;
    }
    block_mi = scale(block_mi, 1.0 / static_cast<double>(block.displacements.offsets.size()));
    acc = first ? block_mi : add(acc, block_mi);
    first = false;
  }
  return scale(acc, -1.0 / static_cast<double>(blocks.size()));
}

DiffArray consistency_loss(const DiffArray& out_t, const DiffArray& out_aligned) {
  require(out_t.value.rank() == 4, "consistency_loss: expected [N,C,H,W], got " +
                                       shape_str(out_t.shape()));
  require(out_t.shape() == out_aligned.shape(),
          "consistency_loss: shapes " + shape_str(out_t.shape()) + " and " +
              shape_str(out_aligned.shape()) + " differ");
  const int64_t positions = static_cast<int64_t>(out_t.shape()[0]) * out_t.shape()[2] * out_t.shape()[3];
  return scale(sum(squared_difference(out_t, out_aligned)), 1.0 / static_cast<double>(positions));
}

DiffArray entropy_min_loss(const DiffArray& probs) {
  require(probs.value.rank() == 4, "entropy_min_loss: expected [N,C,H,W], got " +
                                       shape_str(probs.shape()));
  const int64_t positions = static_cast<int64_t>(probs.shape()[0]) * probs.shape()[2] * probs.shape()[3];
  return scale(sum(multiply(probs, miseg::log(probs))), -1.0 / static_cast<double>(positions));
}

}  // namespace miseg::infomax
