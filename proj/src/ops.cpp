#include "miseg/ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace miseg {
namespace {

constexpr double kLogFloor = 1e-12;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

void check_finite(const char* op, const DiffArray& a) {
  if (!a.value.all_finite()) {
    throw std::invalid_argument(std::string(op) + ": non-finite input of shape " +
                                shape_str(a.shape()));
  }
}

Tape* common_tape(const char* op, std::initializer_list<const DiffArray*> xs) {
  Tape* tape = nullptr;
  for (const DiffArray* x : xs) {
    if (!x->tracked()) continue;
    if (tape == nullptr) {
      tape = x->tape;
    } else if (tape != x->tape) {
      throw std::invalid_argument(std::string(op) + ": operands from different computation records");
    }
  }
  return tape;
}

DiffArray finish(Tape* tape, NDArray out, Tape::BackwardFn backward) {
  if (tape == nullptr) return constant(std::move(out));
  Shape s = out.shape();
  const int id = tape->emit(std::move(s), std::move(backward));
  return DiffArray(std::move(out), tape, id);
}

// Broadcast layout: the small operand repeats `outer` times over the large
// operand's leading axes; `inner` is the small operand's element count.
struct Bcast {
  bool a_is_small = false;
  bool b_is_small = false;
  int64_t outer = 1;
  int64_t inner = 1;
  Shape out_shape;
};

bool is_suffix(const Shape& small, const Shape& large) {
  if (small.size() > large.size()) return false;
  return std::equal(small.rbegin(), small.rend(), large.rbegin());
}

Bcast broadcast_plan(const char* op, const DiffArray& a, const DiffArray& b) {
  Bcast plan;
  if (a.shape() == b.shape()) {
    plan.inner = a.size();
    plan.out_shape = a.shape();
    return plan;
  }
  const auto shapes_msg = std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()) + " do not conform";
  if (b.size() == 1 || is_suffix(b.shape(), a.shape())) {
    plan.b_is_small = true;
    plan.inner = b.size();
    plan.outer = a.size() / std::max<int64_t>(plan.inner, 1);
    plan.out_shape = a.shape();
    require(plan.inner > 0, shapes_msg);
    return plan;
  }
  if (a.size() == 1 || is_suffix(a.shape(), b.shape())) {
    plan.a_is_small = true;
    plan.inner = a.size();
    plan.outer = b.size() / std::max<int64_t>(plan.inner, 1);
    plan.out_shape = b.shape();
    require(plan.inner > 0, shapes_msg);
    return plan;
  }
  throw std::invalid_argument(shapes_msg);
}

// Sums gradient over the repeated leading block; result has the small shape.
NDArray reduce_to_small(const NDArray& g, const Shape& small_shape, int64_t outer, int64_t inner) {
  NDArray out(small_shape);
  double* dst = out.mutable_data();
  const double* src = g.data();
  for (int64_t o = 0; o < outer; ++o) {
    const double* row = src + o * inner;
    for (int64_t i = 0; i < inner; ++i) dst[i] += row[i];
  }
  return out;
}

enum class BinOp { Add, Sub, Mul };

DiffArray binary_op(const char* name, BinOp kind, const DiffArray& a, const DiffArray& b) {
  check_finite(name, a);
  check_finite(name, b);
  Tape* tape = common_tape(name, {&a, &b});
  const Bcast plan = broadcast_plan(name, a, b);

  NDArray out(plan.out_shape);
  double* dst = out.mutable_data();
  const double* pa = a.value.data();
  const double* pb = b.value.data();
  const int64_t outer = plan.outer;
  const int64_t inner = plan.inner;
  for (int64_t o = 0; o < outer; ++o) {
    const int64_t base = o * inner;
    for (int64_t i = 0; i < inner; ++i) {
      const double va = plan.a_is_small ? pa[i] : pa[base + i];
      const double vb = plan.b_is_small ? pb[i] : pb[base + i];
      switch (kind) {
        case BinOp::Add: dst[base + i] = va + vb; break;
        case BinOp::Sub: dst[base + i] = va - vb; break;
        case BinOp::Mul: dst[base + i] = va * vb; break;
      }
    }
  }

  if (tape == nullptr) return constant(std::move(out));
  const int an = a.node, bn = b.node;
  NDArray av = a.value, bv = b.value;
  auto backward = [=](const NDArray& g, Tape& t) {
    auto partial = [&](bool wrt_a) -> NDArray {
      const Shape& want = wrt_a ? av.shape() : bv.shape();
      const bool small = wrt_a ? plan.a_is_small : plan.b_is_small;
      NDArray full(g.shape());
      double* d = full.mutable_data();
      const double* gp = g.data();
      const double* pav = av.data();
      const double* pbv = bv.data();
      for (int64_t o = 0; o < outer; ++o) {
        const int64_t base = o * inner;
        for (int64_t i = 0; i < inner; ++i) {
          double factor = 1.0;
          if (kind == BinOp::Mul) {
            factor = wrt_a ? (plan.b_is_small ? pbv[i] : pbv[base + i])
                           : (plan.a_is_small ? pav[i] : pav[base + i]);
          } else if (kind == BinOp::Sub && !wrt_a) {
            factor = -1.0;
          }
          d[base + i] = gp[base + i] * factor;
        }
      }
      if (small) return reduce_to_small(full, want, outer, inner);
      return full;
    };
    if (an >= 0) t.accumulate(an, partial(true));
    if (bn >= 0) t.accumulate(bn, partial(false));
  };
  return finish(tape, std::move(out), std::move(backward));
}

// Decomposes a shape around one axis as (before, length, after).
void axis_split(const Shape& s, int axis, int64_t& before, int64_t& len, int64_t& after) {
  before = 1;
  after = 1;
  for (int d = 0; d < static_cast<int>(s.size()); ++d) {
    if (d < axis) before *= s[d];
    if (d > axis) after *= s[d];
  }
  len = s[static_cast<size_t>(axis)];
}

}  // namespace

DiffArray add(const DiffArray& a, const DiffArray& b) { return binary_op("add", BinOp::Add, a, b); }
DiffArray subtract(const DiffArray& a, const DiffArray& b) { return binary_op("subtract", BinOp::Sub, a, b); }
DiffArray multiply(const DiffArray& a, const DiffArray& b) { return binary_op("multiply", BinOp::Mul, a, b); }

DiffArray squared_difference(const DiffArray& a, const DiffArray& b) {
  check_finite("squared_difference", a);
  check_finite("squared_difference", b);
  require(a.shape() == b.shape(), "squared_difference: shapes " + shape_str(a.shape()) +
                                      " and " + shape_str(b.shape()) + " do not match");
  Tape* tape = common_tape("squared_difference", {&a, &b});
  NDArray out(a.shape());
  double* dst = out.mutable_data();
  const double* pa = a.value.data();
  const double* pb = b.value.data();
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) {
    const double d = pa[i] - pb[i];
    dst[i] = d * d;
  }
  if (tape == nullptr) return constant(std::move(out));
  const int an = a.node, bn = b.node;
  NDArray av = a.value, bv = b.value;
  auto backward = [=](const NDArray& g, Tape& t) {
    NDArray ga(av.shape());
    double* d = ga.mutable_data();
    const double* gp = g.data();
    for (int64_t i = 0; i < av.size(); ++i) d[i] = 2.0 * (av[i] - bv[i]) * gp[i];
    if (an >= 0) t.accumulate(an, ga);
    if (bn >= 0) {
      for (int64_t i = 0; i < av.size(); ++i) d[i] = -d[i];
      t.accumulate(bn, ga);
    }
  };
  return finish(tape, std::move(out), std::move(backward));
}

DiffArray scale(const DiffArray& a, double factor) {
  check_finite("scale", a);
  require(std::isfinite(factor), "scale: non-finite factor");
  Tape* tape = common_tape("scale", {&a});
  NDArray out(a.shape());
  double* dst = out.mutable_data();
  const double* src = a.value.data();
  for (int64_t i = 0; i < a.size(); ++i) dst[i] = src[i] * factor;
  if (tape == nullptr) return constant(std::move(out));
  const int an = a.node;
  auto backward = [=](const NDArray& g, Tape& t) {
    NDArray ga(g.shape());
    double* d = ga.mutable_data();
    const double* gp = g.data();
    for (int64_t i = 0; i < g.size(); ++i) d[i] = gp[i] * factor;
    t.accumulate(an, ga);
  };
  return finish(tape, std::move(out), std::move(backward));
}

DiffArray exp(const DiffArray& a) {
  check_finite("exp", a);
  Tape* tape = common_tape("exp", {&a});
  NDArray out(a.shape());
  double* dst = out.mutable_data();
  const double* src = a.value.data();
  for (int64_t i = 0; i < a.size(); ++i) dst[i] = std::exp(src[i]);
  if (tape == nullptr) return constant(std::move(out));
  const int an = a.node;
  NDArray saved = out;
  auto backward = [=](const NDArray& g, Tape& t) {
    NDArray ga(g.shape());
    double* d = ga.mutable_data();
    for (int64_t i = 0; i < g.size(); ++i) d[i] = g[i] * saved[i];
    t.accumulate(an, ga);
  };
  return finish(tape, std::move(out), std::move(backward));
}

DiffArray log(const DiffArray& a) {
  check_finite("log", a);
  Tape* tape = common_tape("log", {&a});
  NDArray out(a.shape());
  double* dst = out.mutable_data();
  const double* src = a.value.data();
  for (int64_t i = 0; i < a.size(); ++i) dst[i] = std::log(std::max(src[i], kLogFloor));
  if (tape == nullptr) return constant(std::move(out));
  const int an = a.node;
  NDArray saved = a.value;
  auto backward = [=](const NDArray& g, Tape& t) {
    NDArray ga(g.shape());
    double* d = ga.mutable_data();
    for (int64_t i = 0; i < g.size(); ++i) d[i] = saved[i] >= kLogFloor ? g[i] / saved[i] : 0.0;
    t.accumulate(an, ga);
  };
  return finish(tape, std::move(out), std::move(backward));
}

DiffArray leaky_relu(const DiffArray& a, double slope) {
  check_finite("leaky_relu", a);
  Tape* tape = common_tape("leaky_relu", {&a});
  NDArray out(a.shape());
  double* dst = out.mutable_data();
  const double* src = a.value.data();
  for (int64_t i = 0; i < a.size(); ++i) dst[i] = src[i] > 0.0 ? src[i] : slope * src[i];
  if (tape == nullptr) return constant(std::move(out));
  const int an = a.node;
  NDArray saved = a.value;
  auto backward = [=](const NDArray& g, Tape& t) {
    NDArray ga(g.shape());
    double* d = ga.mutable_data();
    for (int64_t i = 0; i < g.size(); ++i) d[i] = saved[i] > 0.0 ? g[i] : slope * g[i];
    t.accumulate(an, ga);
  };
  return finish(tape, std::move(out), std::move(backward));
}

DiffArray softmax(const DiffArray& a, int axis) {
  check_finite("softmax", a);
  require(axis >= 0 && axis < a.value.rank(),
          "softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(a.shape()));
  Tape* tape = common_tape("softmax", {&a});
  int64_t before, len, after;
  axis_split(a.shape(), axis, before, len, after);

  NDArray out(a.shape());
  double* dst = out.mutable_data();
  const double* src = a.value.data();
  for (int64_t o = 0; o < before; ++o) {
    for (int64_t i = 0; i < after; ++i) {
      const int64_t base = o * len * after + i;
      double mx = src[base];
      for (int64_t j = 1; j < len; ++j) mx = std::max(mx, src[base + j * after]);
      double total = 0.0;
      for (int64_t j = 0; j < len; ++j) {
        const double e = std::exp(src[base + j * after] - mx);
        dst[base + j * after] = e;
        total += e;
      }
      const double inv = 1.0 / total;
      for (int64_t j = 0; j < len; ++j) dst[base + j * after] *= inv;
    }
  }
  if (tape == nullptr) return constant(std::move(out));
  const int an = a.node;
  NDArray saved = out;
  auto backward = [=](const NDArray& g, Tape& t) {
    NDArray ga(g.shape());
    double* d = ga.mutable_data();
    const double* gp = g.data();
    const double* s = saved.data();
    for (int64_t o = 0; o < before; ++o) {
      for (int64_t i = 0; i < after; ++i) {
        const int64_t base = o * len * after + i;
        double dot = 0.0;
        for (int64_t j = 0; j < len; ++j) dot += gp[base + j * after] * s[base + j * after];
        for (int64_t j = 0; j < len; ++j) {
          const int64_t k = base + j * after;
          d[k] = s[k] * (gp[k] - dot);
        }
      }
    }
    t.accumulate(an, ga);
  };
  return finish(tape, std::move(out), std::move(backward));
}

namespace {

struct ReducePlan {
  Shape out_shape;
  std::vector<int64_t> out_stride;  // per input axis; 0 on reduced axes
  int64_t count = 1;                // elements folded into each output slot
};

ReducePlan reduce_plan(const char* op, const Shape& in, const std::vector<int>& axes) {
  ReducePlan plan;
  std::vector<char> reduced(in.size(), 0);
  if (axes.empty()) {
    std::fill(reduced.begin(), reduced.end(), 1);
  } else {
    for (int ax : axes) {
      require(ax >= 0 && ax < static_cast<int>(in.size()),
              std::string(op) + ": axis " + std::to_string(ax) + " out of range for " + shape_str(in));
      require(!reduced[static_cast<size_t>(ax)], std::string(op) + ": duplicate axis");
      reduced[static_cast<size_t>(ax)] = 1;
    }
  }
  for (size_t d = 0; d < in.size(); ++d) {
    if (reduced[d]) {
      plan.count *= in[d];
    } else {
      plan.out_shape.push_back(in[d]);
    }
  }
  plan.out_stride.assign(in.size(), 0);
  int64_t stride = 1;
  for (int d = static_cast<int>(in.size()) - 1; d >= 0; --d) {
    if (!reduced[static_cast<size_t>(d)]) {
      plan.out_stride[static_cast<size_t>(d)] = stride;
      stride *= in[static_cast<size_t>(d)];
    }
  }
  return plan;
}

// Walks the input linearly while tracking the output offset via an odometer.
template <typename Fn>
void reduce_walk(const Shape& in, const std::vector<int64_t>& out_stride, Fn&& fn) {
  const int rank = static_cast<int>(in.size());
  std::vector<int> idx(static_cast<size_t>(rank), 0);
  int64_t out_off = 0;
  const int64_t n = shape_numel(in);
  for (int64_t i = 0; i < n; ++i) {
    fn(i, out_off);
    for (int d = rank - 1; d >= 0; --d) {
      const size_t ud = static_cast<size_t>(d);
      ++idx[ud];
      out_off += out_stride[ud];
      if (idx[ud] < in[ud]) break;
      idx[ud] = 0;
      out_off -= out_stride[ud] * in[ud];
    }
  }
}

DiffArray reduce_op(const char* name, const DiffArray& a, const std::vector<int>& axes, bool take_mean) {
  check_finite(name, a);
  Tape* tape = common_tape(name, {&a});
  ReducePlan plan = reduce_plan(name, a.shape(), axes);
  const double factor = take_mean ? 1.0 / static_cast<double>(plan.count) : 1.0;

  NDArray out(plan.out_shape);
  double* dst = out.mutable_data();
  const double* src = a.value.data();
  reduce_walk(a.shape(), plan.out_stride, [&](int64_t i, int64_t o) { dst[o] += src[i]; });
  if (take_mean) {
    for (int64_t i = 0; i < out.size(); ++i) dst[i] *= factor;
  }
  if (tape == nullptr) return constant(std::move(out));
  const int an = a.node;
  Shape in_shape = a.shape();
  std::vector<int64_t> strides = plan.out_stride;
  auto backward = [=](const NDArray& g, Tape& t) {
    NDArray ga(in_shape);
    double* d = ga.mutable_data();
    const double* gp = g.data();
    reduce_walk(in_shape, strides, [&](int64_t i, int64_t o) { d[i] = gp[o] * factor; });
    t.accumulate(an, ga);
  };
  return finish(tape, std::move(out), std::move(backward));
}

}  // namespace

DiffArray sum(const DiffArray& a, const std::vector<int>& axes) {
  return reduce_op("sum", a, axes, false);
}

DiffArray mean(const DiffArray& a, const std::vector<int>& axes) {
  return reduce_op("mean", a, axes, true);
}

DiffArray matmul(const DiffArray& a, const DiffArray& b) {
  check_finite("matmul", a);
  check_finite("matmul", b);
  require(a.value.rank() == 2 && b.value.rank() == 2 && a.shape()[1] == b.shape()[0],
          "matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
              " do not conform");
  Tape* tape = common_tape("matmul", {&a, &b});
  const int M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  NDArray out(Shape{M, N});
  {
    double* dst = out.mutable_data();
    const double* pa = a.value.data();
    const double* pb = b.value.data();
#pragma omp parallel for schedule(static)
    for (int m = 0; m < M; ++m) {
      double* row = dst + static_cast<int64_t>(m) * N;
      const double* arow = pa + static_cast<int64_t>(m) * K;
      for (int k = 0; k < K; ++k) {
        const double av = arow[k];
        const double* brow = pb + static_cast<int64_t>(k) * N;
        for (int n = 0; n < N; ++n) row[n] += av * brow[n];
      }
    }
  }
  if (tape == nullptr) return constant(std::move(out));
  const int an = a.node, bn = b.node;
  NDArray av = a.value, bv = b.value;
  auto backward = [=](const NDArray& g, Tape& t) {
    const double* gp = g.data();
    if (an >= 0) {
      NDArray ga(Shape{M, K});
      double* d = ga.mutable_data();
      const double* pb = bv.data();
#pragma omp parallel for schedule(static)
      for (int m = 0; m < M; ++m) {
        const double* grow = gp + static_cast<int64_t>(m) * N;
        double* drow = d + static_cast<int64_t>(m) * K;
        for (int k = 0; k < K; ++k) {
          const double* brow = pb + static_cast<int64_t>(k) * N;
          double acc = 0.0;
          for (int n = 0; n < N; ++n) acc += grow[n] * brow[n];
          drow[k] = acc;
        }
      }
      t.accumulate(an, ga);
    }
    if (bn >= 0) {
      NDArray gb(Shape{K, N});
      double* d = gb.mutable_data();
      const double* pa = av.data();
#pragma omp parallel for schedule(static)
      for (int k = 0; k < K; ++k) {
        double* drow = d + static_cast<int64_t>(k) * N;
        for (int m = 0; m < M; ++m) {
          const double av_ = pa[static_cast<int64_t>(m) * K + k];
          const double* grow = gp + static_cast<int64_t>(m) * N;
          for (int n = 0; n < N; ++n) drow[n] += av_ * grow[n];
        }
      }
      t.accumulate(bn, gb);
    }
  };
  return finish(tape, std::move(out), std::move(backward));
}

DiffArray outer(const DiffArray& a, const DiffArray& b) {
  check_finite("outer", a);
  check_finite("outer", b);
  require(a.value.rank() == 1 && b.value.rank() == 1,
          "outer: expected vectors, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  Tape* tape = common_tape("outer", {&a, &b});
  const int M = a.shape()[0], N = b.shape()[0];
  NDArray out(Shape{M, N});
  double* dst = out.mutable_data();
  for (int m = 0; m < M; ++m)
    for (int n = 0; n < N; ++n) dst[static_cast<int64_t>(m) * N + n] = a.value[m] * b.value[n];
  if (tape == nullptr) return constant(std::move(out));
  const int an = a.node, bn = b.node;
  NDArray av = a.value, bv = b.value;
  auto backward = [=](const NDArray& g, Tape& t) {
    if (an >= 0) {
      NDArray ga(Shape{M});
      for (int m = 0; m < M; ++m) {
        double acc = 0.0;
        for (int n = 0; n < N; ++n) acc += g[static_cast<int64_t>(m) * N + n] * bv[n];
        ga[m] = acc;
      }
      t.accumulate(an, ga);
    }
    if (bn >= 0) {
      NDArray gb(Shape{N});
      double* d = gb.mutable_data();
      for (int m = 0; m < M; ++m) {
        const double av_ = av[m];
        for (int n = 0; n < N; ++n) d[n] += g[static_cast<int64_t>(m) * N + n] * av_;
      }
      t.accumulate(bn, gb);
    }
  };
  return finish(tape, std::move(out), std::move(backward));
}

NDArray transpose_values(const NDArray& a, const std::vector<int>& perm) {
  const int rank = a.rank();
  Shape out_shape(static_cast<size_t>(rank));
  for (int d = 0; d < rank; ++d) out_shape[static_cast<size_t>(d)] = a.shape()[static_cast<size_t>(perm[static_cast<size_t>(d)])];

  std::vector<int64_t> in_stride(static_cast<size_t>(rank), 1);
  for (int d = rank - 2; d >= 0; --d)
    in_stride[static_cast<size_t>(d)] = in_stride[static_cast<size_t>(d) + 1] * a.shape()[static_cast<size_t>(d) + 1];
  std::vector<int64_t> gather_stride(static_cast<size_t>(rank));
  for (int d = 0; d < rank; ++d)
    gather_stride[static_cast<size_t>(d)] = in_stride[static_cast<size_t>(perm[static_cast<size_t>(d)])];

  NDArray out(out_shape);
  double* dst = out.mutable_data();
  const double* src = a.data();
  std::vector<int> idx(static_cast<size_t>(rank), 0);
  int64_t src_off = 0;
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) {
    dst[i] = src[src_off];
    for (int d = rank - 1; d >= 0; --d) {
      const size_t ud = static_cast<size_t>(d);
      ++idx[ud];
      src_off += gather_stride[ud];
      if (idx[ud] < out_shape[ud]) break;
      idx[ud] = 0;
      src_off -= gather_stride[ud] * out_shape[ud];
    }
  }
  return out;
}

DiffArray transpose(const DiffArray& a, const std::vector<int>& perm) {
  check_finite("transpose", a);
  const int rank = a.value.rank();
  require(static_cast<int>(perm.size()) == rank, "transpose: permutation rank mismatch for " +
                                                     shape_str(a.shape()));
  std::vector<char> seen(static_cast<size_t>(rank), 0);
  for (int p : perm) {
    require(p >= 0 && p < rank && !seen[static_cast<size_t>(p)], "transpose: invalid permutation");
    seen[static_cast<size_t>(p)] = 1;
  }
  Tape* tape = common_tape("transpose", {&a});
  NDArray out = transpose_values(a.value, perm);
  if (tape == nullptr) return constant(std::move(out));
  std::vector<int> inverse(perm.size());
  for (size_t d = 0; d < perm.size(); ++d) inverse[static_cast<size_t>(perm[d])] = static_cast<int>(d);
  const int an = a.node;
  auto backward = [=](const NDArray& g, Tape& t) { t.accumulate(an, transpose_values(g, inverse)); };
  return finish(tape, std::move(out), std::move(backward));
}

DiffArray transpose(const DiffArray& a) {
  require(a.value.rank() == 2, "transpose: expected rank-2, got " + shape_str(a.shape()));
  return transpose(a, {1, 0});
}

DiffArray reshape(const DiffArray& a, Shape shape) {
  check_finite("reshape", a);
  require(shape_numel(shape) == a.size(), "reshape: cannot view " + shape_str(a.shape()) +
                                              " as " + shape_str(shape));
  Tape* tape = common_tape("reshape", {&a});
  NDArray out(shape, std::vector<double>(a.value.data(), a.value.data() + a.size()));
  if (tape == nullptr) return constant(std::move(out));
  const int an = a.node;
  Shape in_shape = a.shape();
  auto backward = [=](const NDArray& g, Tape& t) {
    NDArray ga(in_shape, std::vector<double>(g.data(), g.data() + g.size()));
    t.accumulate(an, ga);
  };
  return finish(tape, std::move(out), std::move(backward));
}

DiffArray slice(const DiffArray& a, int axis, int start, int stop) {
  check_finite("slice", a);
  const int rank = a.value.rank();
  require(axis >= 0 && axis < rank, "slice: axis out of range for " + shape_str(a.shape()));
  const int len = a.shape()[static_cast<size_t>(axis)];
  require(0 <= start && start < stop && stop <= len,
          "slice: range [" + std::to_string(start) + "," + std::to_string(stop) +
              ") invalid for axis of extent " + std::to_string(len));
  Tape* tape = common_tape("slice", {&a});
  int64_t before, alen, after;
  axis_split(a.shape(), axis, before, alen, after);
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = stop - start;

  NDArray out(out_shape);
  double* dst = out.mutable_data();
  const double* src = a.value.data();
  const int64_t span = static_cast<int64_t>(stop - start) * after;
  for (int64_t o = 0; o < before; ++o) {
    const double* s = src + (o * alen + start) * after;
    std::copy(s, s + span, dst + o * span);
  }
  if (tape == nullptr) return constant(std::move(out));
  const int an = a.node;
  Shape in_shape = a.shape();
  auto backward = [=](const NDArray& g, Tape& t) {
    NDArray ga(in_shape);
    double* d = ga.mutable_data();
    const double* gp = g.data();
    for (int64_t o = 0; o < before; ++o) {
      std::copy(gp + o * span, gp + (o + 1) * span, d + (o * alen + start) * after);
    }
    t.accumulate(an, ga);
  };
  return finish(tape, std::move(out), std::move(backward));
}

DiffArray concat(const std::vector<DiffArray>& parts, int axis) {
  require(!parts.empty(), "concat: empty input list");
  const int rank = parts[0].value.rank();
  require(axis >= 0 && axis < rank, "concat: axis out of range");
  Shape out_shape = parts[0].shape();
  int total = 0;
  for (const DiffArray& p : parts) {
    check_finite("concat", p);
    require(p.value.rank() == rank, "concat: rank mismatch");
    for (int d = 0; d < rank; ++d) {
      if (d == axis) continue;
      require(p.shape()[static_cast<size_t>(d)] == out_shape[static_cast<size_t>(d)],
              "concat: shapes " + shape_str(out_shape) + " and " + shape_str(p.shape()) +
                  " differ off-axis");
    }
    total += p.shape()[static_cast<size_t>(axis)];
  }
  out_shape[static_cast<size_t>(axis)] = total;

  std::vector<const DiffArray*> refs;
  for (const DiffArray& p : parts) refs.push_back(&p);
  Tape* tape = nullptr;
  for (const DiffArray& p : parts) {
    if (p.tracked()) {
      require(tape == nullptr || tape == p.tape, "concat: operands from different computation records");
      tape = p.tape;
    }
  }

  int64_t before, alen, after;
  axis_split(out_shape, axis, before, alen, after);
  NDArray out(out_shape);
  double* dst = out.mutable_data();
  int64_t written = 0;
  std::vector<int> extents;
  for (const DiffArray& p : parts) {
    const int plen = p.shape()[static_cast<size_t>(axis)];
    extents.push_back(plen);
    const double* src = p.value.data();
    const int64_t span = static_cast<int64_t>(plen) * after;
    for (int64_t o = 0; o < before; ++o) {
      std::copy(src + o * span, src + (o + 1) * span, dst + (o * alen + written) * after);
    }
    written += plen;
  }
  if (tape == nullptr) return constant(std::move(out));
  std::vector<int> nodes;
  for (const DiffArray& p : parts) nodes.push_back(p.node);
  auto backward = [=](const NDArray& g, Tape& t) {
    const double* gp = g.data();
    int64_t off = 0;
    for (size_t i = 0; i < nodes.size(); ++i) {
      const int64_t span = static_cast<int64_t>(extents[i]) * after;
      if (nodes[i] >= 0) {
        Shape pshape = g.shape();
        pshape[static_cast<size_t>(axis)] = extents[i];
        NDArray gp_i(pshape);
        double* d = gp_i.mutable_data();
        for (int64_t o = 0; o < before; ++o) {
          const double* s = gp + (o * alen + off) * after;
          std::copy(s, s + span, d + o * span);
        }
        t.accumulate(nodes[i], gp_i);
      }
      off += extents[i];
    }
  };
  return finish(tape, std::move(out), std::move(backward));
}

namespace {

struct ConvDims {
  int N, Ci, H, W, Co, kh, kw, Ho, Wo;
};

ConvDims conv_dims(const DiffArray& x, const DiffArray& w, int stride, int pad) {
  require(x.value.rank() == 4, "conv2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  require(w.value.rank() == 4, "conv2d: weights must be [Co,Ci,kh,kw], got " + shape_str(w.shape()));
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(pad >= 0, "conv2d: padding must be >= 0");
  ConvDims d;
  d.N = x.shape()[0];
  d.Ci = x.shape()[1];
  d.H = x.shape()[2];
  d.W = x.shape()[3];
  d.Co = w.shape()[0];
  d.kh = w.shape()[2];
  d.kw = w.shape()[3];
  require(w.shape()[1] == d.Ci, "conv2d: channel mismatch between input " + shape_str(x.shape()) +
                                    " and weights " + shape_str(w.shape()));
  d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
  require(d.H + 2 * pad >= d.kh && d.W + 2 * pad >= d.kw, "conv2d: kernel larger than padded input");
  return d;
}

}  // namespace

DiffArray conv2d(const DiffArray& x, const DiffArray& w, const DiffArray& bias, int stride, int pad) {
  check_finite("conv2d", x);
  check_finite("conv2d", w);
  const ConvDims dd = conv_dims(x, w, stride, pad);
  const bool has_bias = bias.size() > 0;
  if (has_bias) {
    check_finite("conv2d", bias);
    require(bias.value.rank() == 1 && bias.shape()[0] == dd.Co,
            "conv2d: bias shape " + shape_str(bias.shape()) + " does not match Co=" +
                std::to_string(dd.Co));
  }
  Tape* tape = common_tape("conv2d", {&x, &w, &bias});

  NDArray out(Shape{dd.N, dd.Co, dd.Ho, dd.Wo});
  {
    double* dst = out.mutable_data();
    const double* px = x.value.data();
    const double* pw = w.value.data();
    const double* pb = has_bias ? bias.value.data() : nullptr;
#pragma omp parallel for collapse(2) schedule(static)
    for (int n = 0; n < dd.N; ++n) {
      for (int co = 0; co < dd.Co; ++co) {
        double* plane = dst + ((static_cast<int64_t>(n) * dd.Co + co) * dd.Ho) * dd.Wo;
        const double bv = pb ? pb[co] : 0.0;
        for (int64_t i = 0; i < static_cast<int64_t>(dd.Ho) * dd.Wo; ++i) plane[i] = bv;
        for (int ci = 0; ci < dd.Ci; ++ci) {
          const double* in_plane = px + ((static_cast<int64_t>(n) * dd.Ci + ci) * dd.H) * dd.W;
          const double* wk = pw + ((static_cast<int64_t>(co) * dd.Ci + ci) * dd.kh) * dd.kw;
          for (int r = 0; r < dd.kh; ++r) {
            for (int c = 0; c < dd.kw; ++c) {
              const double wv = wk[r * dd.kw + c];
              if (wv == 0.0) continue;
              for (int oh = 0; oh < dd.Ho; ++oh) {
                const int ih = oh * stride + r - pad;
                if (ih < 0 || ih >= dd.H) continue;
                const double* in_row = in_plane + static_cast<int64_t>(ih) * dd.W;
                double* out_row = plane + static_cast<int64_t>(oh) * dd.Wo;
                // valid ow range: 0 <= ow*stride + c - pad < W
                int lo = 0;
                while (lo * stride + c - pad < 0) ++lo;
                int hi = dd.Wo - 1;
                while (hi >= 0 && hi * stride + c - pad >= dd.W) --hi;
                const int shift = c - pad;
                if (stride == 1) {
                  for (int ow = lo; ow <= hi; ++ow) out_row[ow] += wv * in_row[ow + shift];
                } else {
                  for (int ow = lo; ow <= hi; ++ow) out_row[ow] += wv * in_row[ow * stride + shift];
                }
              }
            }
          }
        }
      }
    }
  }
  if (tape == nullptr) return constant(std::move(out));
  const int xn = x.node, wn = w.node, bn = has_bias ? bias.node : -1;
  NDArray xv = x.value, wv = w.value;
  auto backward = [=](const NDArray& g, Tape& t) {
    const double* gp = g.data();
    if (xn >= 0) {
      NDArray gx(xv.shape());
      double* d = gx.mutable_data();
      const double* pw = wv.data();
#pragma omp parallel for collapse(2) schedule(static)
      for (int n = 0; n < dd.N; ++n) {
        for (int ci = 0; ci < dd.Ci; ++ci) {
          double* plane = d + ((static_cast<int64_t>(n) * dd.Ci + ci) * dd.H) * dd.W;
          for (int ih = 0; ih < dd.H; ++ih) {
            for (int iw = 0; iw < dd.W; ++iw) {
              double acc = 0.0;
              for (int co = 0; co < dd.Co; ++co) {
                const double* gplane = gp + ((static_cast<int64_t>(n) * dd.Co + co) * dd.Ho) * dd.Wo;
                const double* wk = pw + ((static_cast<int64_t>(co) * dd.Ci + ci) * dd.kh) * dd.kw;
                for (int r = 0; r < dd.kh; ++r) {
                  const int oh_num = ih + pad - r;
                  if (oh_num < 0 || oh_num % stride) continue;
                  const int oh = oh_num / stride;
                  if (oh >= dd.Ho) continue;
                  for (int c = 0; c < dd.kw; ++c) {
                    const int ow_num = iw + pad - c;
                    if (ow_num < 0 || ow_num % stride) continue;
                    const int ow = ow_num / stride;
                    if (ow >= dd.Wo) continue;
                    acc += gplane[static_cast<int64_t>(oh) * dd.Wo + ow] * wk[r * dd.kw + c];
                  }
                }
              }
              plane[static_cast<int64_t>(ih) * dd.W + iw] = acc;
            }
          }
        }
      }
      t.accumulate(xn, gx);
    }
    if (wn >= 0) {
      NDArray gw(wv.shape());
      double* d = gw.mutable_data();
      const double* px = xv.data();
#pragma omp parallel for collapse(2) schedule(static)
      for (int co = 0; co < dd.Co; ++co) {
        for (int ci = 0; ci < dd.Ci; ++ci) {
          double* wk = d + ((static_cast<int64_t>(co) * dd.Ci + ci) * dd.kh) * dd.kw;
          for (int r = 0; r < dd.kh; ++r) {
            for (int c = 0; c < dd.kw; ++c) {
              double acc = 0.0;
              for (int n = 0; n < dd.N; ++n) {
                const double* gplane = gp + ((static_cast<int64_t>(n) * dd.Co + co) * dd.Ho) * dd.Wo;
                const double* in_plane = px + ((static_cast<int64_t>(n) * dd.Ci + ci) * dd.H) * dd.W;
                for (int oh = 0; oh < dd.Ho; ++oh) {
                  const int ih = oh * stride + r - pad;
                  if (ih < 0 || ih >= dd.H) continue;
                  const double* grow = gplane + static_cast<int64_t>(oh) * dd.Wo;
                  const double* in_row = in_plane + static_cast<int64_t>(ih) * dd.W;
                  for (int ow = 0; ow < dd.Wo; ++ow) {
                    const int iw = ow * stride + c - pad;
                    if (iw < 0 || iw >= dd.W) continue;
                    acc += grow[ow] * in_row[iw];
                  }
                }
              }
              wk[r * dd.kw + c] = acc;
            }
          }
        }
      }
      t.accumulate(wn, gw);
    }
    if (bn >= 0) {
      NDArray gb(Shape{dd.Co});
      for (int co = 0; co < dd.Co; ++co) {
        double acc = 0.0;
        for (int n = 0; n < dd.N; ++n) {
          const double* gplane = gp + ((static_cast<int64_t>(n) * dd.Co + co) * dd.Ho) * dd.Wo;
          for (int64_t i = 0; i < static_cast<int64_t>(dd.Ho) * dd.Wo; ++i) acc += gplane[i];
        }
        gb[co] = acc;
      }
      t.accumulate(bn, gb);
    }
  };
  return finish(tape, std::move(out), std::move(backward));
}

DiffArray conv2d(const DiffArray& x, const DiffArray& w, int stride, int pad) {
  DiffArray no_bias = constant(NDArray(Shape{0}));
  return conv2d(x, w, no_bias, stride, pad);
}

DiffArray upsample_nearest2x(const DiffArray& x) {
  check_finite("upsample_nearest2x", x);
  require(x.value.rank() == 4, "upsample_nearest2x: input must be [N,C,H,W], got " + shape_str(x.shape()));
  Tape* tape = common_tape("upsample_nearest2x", {&x});
  const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  NDArray out(Shape{N, C, 2 * H, 2 * W});
  double* dst = out.mutable_data();
  const double* src = x.value.data();
  const int64_t planes = static_cast<int64_t>(N) * C;
  for (int64_t p = 0; p < planes; ++p) {
    const double* in_plane = src + p * H * W;
    double* out_plane = dst + p * 4 * H * W;
    for (int h = 0; h < H; ++h) {
      for (int w0 = 0; w0 < W; ++w0) {
        const double v = in_plane[static_cast<int64_t>(h) * W + w0];
        double* o = out_plane + (static_cast<int64_t>(2 * h) * 2 * W) + 2 * w0;
        o[0] = v;
        o[1] = v;
        o[2 * W] = v;
        o[2 * W + 1] = v;
      }
    }
  }
  if (tape == nullptr) return constant(std::move(out));
  const int xn = x.node;
  Shape in_shape = x.shape();
  auto backward = [=](const NDArray& g, Tape& t) {
    NDArray gx(in_shape);
    double* d = gx.mutable_data();
    const double* gp = g.data();
    for (int64_t p = 0; p < planes; ++p) {
      const double* g_plane = gp + p * 4 * H * W;
      double* in_plane = d + p * H * W;
      for (int h = 0; h < H; ++h) {
        for (int w0 = 0; w0 < W; ++w0) {
          const double* o = g_plane + (static_cast<int64_t>(2 * h) * 2 * W) + 2 * w0;
          in_plane[static_cast<int64_t>(h) * W + w0] = o[0] + o[1] + o[2 * W] + o[2 * W + 1];
        }
      }
    }
    t.accumulate(xn, gx);
  };
  return finish(tape, std::move(out), std::move(backward));
}

DiffArray maxpool2d(const DiffArray& x, int kernel, int stride) {
  check_finite("maxpool2d", x);
  require(x.value.rank() == 4, "maxpool2d: input must be [N,C,H,W], got " + shape_str(x.shape()));
  require(kernel >= 1 && stride >= 1, "maxpool2d: kernel and stride must be >= 1");
  const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int Ho = (H - kernel) / stride + 1;
  const int Wo = (W - kernel) / stride + 1;
  require(Ho >= 1 && Wo >= 1, "maxpool2d: window larger than input " + shape_str(x.shape()));
  Tape* tape = common_tape("maxpool2d", {&x});

  NDArray out(Shape{N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<int>>(static_cast<size_t>(out.size()));
  {
    double* dst = out.mutable_data();
    const double* src = x.value.data();
    int* am = argmax->data();
    const int64_t planes = static_cast<int64_t>(N) * C;
    for (int64_t p = 0; p < planes; ++p) {
      const double* in_plane = src + p * H * W;
      double* out_plane = dst + p * Ho * Wo;
      int* am_plane = am + p * Ho * Wo;
      for (int oh = 0; oh < Ho; ++oh) {
        for (int ow = 0; ow < Wo; ++ow) {
          double best = -std::numeric_limits<double>::infinity();
          int best_idx = 0;
          for (int r = 0; r < kernel; ++r) {
            for (int c = 0; c < kernel; ++c) {
              const int idx = (oh * stride + r) * W + (ow * stride + c);
              if (in_plane[idx] > best) {
                best = in_plane[idx];
                best_idx = idx;
              }
            }
          }
          out_plane[static_cast<int64_t>(oh) * Wo + ow] = best;
          am_plane[static_cast<int64_t>(oh) * Wo + ow] = best_idx;
        }
      }
    }
  }
  if (tape == nullptr) return constant(std::move(out));
  const int xn = x.node;
  Shape in_shape = x.shape();
  auto backward = [=](const NDArray& g, Tape& t) {
    NDArray gx(in_shape);
    double* d = gx.mutable_data();
    const double* gp = g.data();
    const int* am = argmax->data();
    const int64_t planes = static_cast<int64_t>(N) * C;
    for (int64_t p = 0; p < planes; ++p) {
      double* in_plane = d + p * H * W;
      const double* g_plane = gp + p * Ho * Wo;
      const int* am_plane = am + p * Ho * Wo;
      for (int64_t i = 0; i < static_cast<int64_t>(Ho) * Wo; ++i) in_plane[am_plane[i]] += g_plane[i];
    }
    t.accumulate(xn, gx);
  };
  return finish(tape, std::move(out), std::move(backward));
}

DiffArray global_maxpool(const DiffArray& x) {
  check_finite("global_maxpool", x);
  require(x.value.rank() == 4, "global_maxpool: input must be [N,C,H,W], got " + shape_str(x.shape()));
  const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  Tape* tape = common_tape("global_maxpool", {&x});
  NDArray out(Shape{N, C});
  auto argmax = std::make_shared<std::vector<int>>(static_cast<size_t>(N) * C);
  {
    double* dst = out.mutable_data();
    const double* src = x.value.data();
    for (int64_t p = 0; p < static_cast<int64_t>(N) * C; ++p) {
      const double* plane = src + p * H * W;
      double best = plane[0];
      int best_idx = 0;
      for (int i = 1; i < H * W; ++i) {
        if (plane[i] > best) {
          best = plane[i];
          best_idx = i;
        }
      }
      dst[p] = best;
      (*argmax)[static_cast<size_t>(p)] = best_idx;
    }
  }
  if (tape == nullptr) return constant(std::move(out));
  const int xn = x.node;
  Shape in_shape = x.shape();
  auto backward = [=](const NDArray& g, Tape& t) {
    NDArray gx(in_shape);
    double* d = gx.mutable_data();
    for (int64_t p = 0; p < static_cast<int64_t>(N) * C; ++p) {
      d[p * H * W + (*argmax)[static_cast<size_t>(p)]] += g[p];
    }
    t.accumulate(xn, gx);
  };
  return finish(tape, std::move(out), std::move(backward));
}

namespace {

void validate_pixel_map(const std::vector<int>& map, int hw) {
  require(static_cast<int>(map.size()) == hw,
          "pixel_permute: map size " + std::to_string(map.size()) + " != H*W=" + std::to_string(hw));
  std::vector<char> seen(static_cast<size_t>(hw), 0);
  for (int v : map) {
    require(v >= 0 && v < hw && !seen[static_cast<size_t>(v)], "pixel_permute: map is not a bijection");
    seen[static_cast<size_t>(v)] = 1;
  }
}

}  // namespace

DiffArray pixel_permute(const DiffArray& x, const std::vector<int>& dst_to_src) {
  check_finite("pixel_permute", x);
  require(x.value.rank() >= 2, "pixel_permute: input must have spatial axes, got " + shape_str(x.shape()));
  const int rank = x.value.rank();
  const int H = x.shape()[static_cast<size_t>(rank - 2)];
  const int W = x.shape()[static_cast<size_t>(rank - 1)];
  const int hw = H * W;
  validate_pixel_map(dst_to_src, hw);
  Tape* tape = common_tape("pixel_permute", {&x});

  const int64_t blocks = x.size() / hw;
  NDArray out(x.shape());
  double* dst = out.mutable_data();
  const double* src = x.value.data();
  for (int64_t b = 0; b < blocks; ++b) {
    const double* s = src + b * hw;
    double* d = dst + b * hw;
    for (int i = 0; i < hw; ++i) d[i] = s[dst_to_src[static_cast<size_t>(i)]];
  }
  if (tape == nullptr) return constant(std::move(out));
  const int xn = x.node;
  Shape in_shape = x.shape();
  std::vector<int> map = dst_to_src;
  auto backward = [=](const NDArray& g, Tape& t) {
    NDArray gx(in_shape);
    double* d = gx.mutable_data();
    const double* gp = g.data();
    for (int64_t b = 0; b < blocks; ++b) {
      const double* s = gp + b * hw;
      double* dd = d + b * hw;
      for (int i = 0; i < hw; ++i) dd[map[static_cast<size_t>(i)]] += s[i];
    }
    t.accumulate(xn, gx);
  };
  return finish(tape, std::move(out), std::move(backward));
}

DiffArray pixel_permute(const DiffArray& x, const std::vector<std::vector<int>>& per_sample) {
  check_finite("pixel_permute", x);
  require(x.value.rank() >= 3, "pixel_permute: batched input must be [N,...,H,W], got " +
                                   shape_str(x.shape()));
  const int rank = x.value.rank();
  const int N = x.shape()[0];
  const int H = x.shape()[static_cast<size_t>(rank - 2)];
  const int W = x.shape()[static_cast<size_t>(rank - 1)];
  const int hw = H * W;
  require(static_cast<int>(per_sample.size()) == N,
          "pixel_permute: expected " + std::to_string(N) + " maps, got " +
              std::to_string(per_sample.size()));
  for (const auto& m : per_sample) validate_pixel_map(m, hw);
  Tape* tape = common_tape("pixel_permute", {&x});

  const int64_t sample_sz = x.size() / N;
  const int64_t blocks = sample_sz / hw;
  NDArray out(x.shape());
  double* dst = out.mutable_data();
  const double* src = x.value.data();
  for (int n = 0; n < N; ++n) {
    const std::vector<int>& map = per_sample[static_cast<size_t>(n)];
    for (int64_t b = 0; b < blocks; ++b) {
      const double* s = src + n * sample_sz + b * hw;
      double* d = dst + n * sample_sz + b * hw;
      for (int i = 0; i < hw; ++i) d[i] = s[map[static_cast<size_t>(i)]];
    }
  }
  if (tape == nullptr) return constant(std::move(out));
  const int xn = x.node;
  Shape in_shape = x.shape();
  auto maps = std::make_shared<std::vector<std::vector<int>>>(per_sample);
  auto backward = [=](const NDArray& g, Tape& t) {
    NDArray gx(in_shape);
    double* d = gx.mutable_data();
    const double* gp = g.data();
    for (int n = 0; n < N; ++n) {
      const std::vector<int>& map = (*maps)[static_cast<size_t>(n)];
      for (int64_t b = 0; b < blocks; ++b) {
        const double* s = gp + n * sample_sz + b * hw;
        double* dd = d + n * sample_sz + b * hw;
        for (int i = 0; i < hw; ++i) dd[map[static_cast<size_t>(i)]] += s[i];
      }
    }
    t.accumulate(xn, gx);
  };
  return finish(tape, std::move(out), std::move(backward));
}

}  // namespace miseg
