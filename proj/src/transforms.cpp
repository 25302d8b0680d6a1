#include "miseg/transforms.hpp"

#include <stdexcept>
#include <string>

namespace miseg::transforms {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

int mod(int v, int m) {
  const int r = v % m;
  return r < 0 ? r + m : r;
}

// dst -> src map of a single step.
std::vector<int> step_map(const Step& s, int H, int W) {
  std::vector<int> map(static_cast<size_t>(H) * W);
  auto at = [W](int r, int c) { return r * W + c; };
  switch (s.kind) {
    case Kind::identity:
      for (int i = 0; i < H * W; ++i) map[static_cast<size_t>(i)] = i;
      break;
    case Kind::hflip:
      for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) map[static_cast<size_t>(at(r, c))] = at(r, W - 1 - c);
      break;
    case Kind::vflip:
      for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c) map[static_cast<size_t>(at(r, c))] = at(H - 1 - r, c);
      break;
    case Kind::rot90: {
      const int k = mod(s.quarter_turns, 4);
      if (k % 2 == 1) {
        require(H == W, "rot90: odd quarter turns require a square grid, got " +
                            std::to_string(H) + "x" + std::to_string(W));
      }
      for (int r = 0; r < H; ++r) {
        for (int c = 0; c < W; ++c) {
          int sr = r, sc = c;
          switch (k) {
            case 0: break;
            case 1: sr = H - 1 - c; sc = r; break;          // counter-clockwise
            case 2: sr = H - 1 - r; sc = W - 1 - c; break;
            case 3: sr = c; sc = W - 1 - r; break;
          }
          map[static_cast<size_t>(at(r, c))] = at(sr, sc);
        }
      }
      break;
    }
    case Kind::translate: {
      require(std::abs(s.dx) < W && std::abs(s.dy) < H,
              "translate(" + std::to_string(s.dx) + "," + std::to_string(s.dy) +
                  ") exceeds grid " + std::to_string(H) + "x" + std::to_string(W));
      for (int r = 0; r < H; ++r)
        for (int c = 0; c < W; ++c)
          map[static_cast<size_t>(at(r, c))] = at(mod(r - s.dy, H), mod(c - s.dx, W));
      break;
    }
  }
  return map;
}

}  // namespace

TransformSpec TransformSpec::rot90(int quarter_turns) {
  require(quarter_turns >= 1 && quarter_turns <= 3, "rot90: quarter turns must be in {1,2,3}");
  return {{Step{Kind::rot90, quarter_turns, 0, 0}}};
}

TransformSpec TransformSpec::then(const TransformSpec& next) const {
  TransformSpec out = *this;
  out.steps.insert(out.steps.end(), next.steps.begin(), next.steps.end());
  return out;
}

bool TransformSpec::is_identity() const {
  for (const Step& s : steps) {
    switch (s.kind) {
      case Kind::identity: break;
      case Kind::rot90:
        if (mod(s.quarter_turns, 4) != 0) return false;
        break;
      case Kind::translate:
        if (s.dx != 0 || s.dy != 0) return false;
        break;
      default:
        return false;
    }
  }
  return true;
}

TransformSpec invert(const TransformSpec& t) {
  TransformSpec out;
  for (auto it = t.steps.rbegin(); it != t.steps.rend(); ++it) {
    Step s = *it;
    switch (s.kind) {
      case Kind::identity:
      case Kind::hflip:
      case Kind::vflip:
        break;  // involutions
      case Kind::rot90:
        s.quarter_turns = mod(4 - s.quarter_turns, 4);
        break;
      case Kind::translate:
        s.dx = -s.dx;
        s.dy = -s.dy;
        break;
    }
    out.steps.push_back(s);
  }
  return out;
}

std::vector<int> pixel_map(const TransformSpec& t, int height, int width) {
  require(height >= 1 && width >= 1, "pixel_map: empty grid");
  std::vector<int> map(static_cast<size_t>(height) * width);
  for (size_t i = 0; i < map.size(); ++i) map[i] = static_cast<int>(i);
  // steps run s1..sk over the array, so the dst->src maps compose as
  // m1(m2(...mk(d))).
  for (const Step& s : t.steps) {
    std::vector<int> m = step_map(s, height, width);
    std::vector<int> composed(map.size());
    for (size_t d = 0; d < map.size(); ++d)
      composed[d] = map[static_cast<size_t>(m[d])];
    map.swap(composed);
  }
  return map;
}

DiffArray apply(const TransformSpec& t, const DiffArray& a) {
  require(a.value.rank() >= 2, "apply: expected spatial trailing axes, got " + shape_str(a.shape()));
  const int rank = a.value.rank();
  const int H = a.shape()[static_cast<size_t>(rank - 2)];
  const int W = a.shape()[static_cast<size_t>(rank - 1)];
  return pixel_permute(a, pixel_map(t, H, W));
}

DiffArray apply_batch(const std::vector<TransformSpec>& ts, const DiffArray& a) {
  require(a.value.rank() >= 3, "apply_batch: expected [N,...,H,W], got " + shape_str(a.shape()));
  const int rank = a.value.rank();
  const int H = a.shape()[static_cast<size_t>(rank - 2)];
  const int W = a.shape()[static_cast<size_t>(rank - 1)];
  std::vector<std::vector<int>> maps;
  maps.reserve(ts.size());
  for (const TransformSpec& t : ts) maps.push_back(pixel_map(t, H, W));
  return pixel_permute(a, maps);
}

TransformSpec for_featuremap(const TransformSpec& t, int scale) {
  require(scale >= 1, "for_featuremap: scale must be >= 1");
  TransformSpec out;
  for (Step s : t.steps) {
    if (s.kind == Kind::translate) {
      require(s.dx % scale == 0 && s.dy % scale == 0,
              "for_featuremap: translate(" + std::to_string(s.dx) + "," + std::to_string(s.dy) +
                  ") is not divisible by scale " + std::to_string(scale));
      s.dx /= scale;
      s.dy /= scale;
    }
    out.steps.push_back(s);
  }
  return out;
}

DiffArray apply_to_featuremap(const TransformSpec& t, const DiffArray& f, int scale) {
  return apply(for_featuremap(t, scale), f);
}

TransformSpec sample_transform(Rng& rng, const TransformPool& pool) {
  require(!pool.empty(), "sample_transform: empty pool");
  std::vector<Kind> kinds;
  if (pool.allow_identity) kinds.push_back(Kind::identity);
  if (pool.allow_hflip) kinds.push_back(Kind::hflip);
  if (pool.allow_vflip) kinds.push_back(Kind::vflip);
  if (pool.allow_rot90) kinds.push_back(Kind::rot90);
  if (pool.max_translate > 0) kinds.push_back(Kind::translate);

  const Kind kind = kinds[rng.uniform_int(kinds.size())];
  switch (kind) {
    case Kind::identity: return TransformSpec::identity();
    case Kind::hflip: return TransformSpec::hflip();
    case Kind::vflip: return TransformSpec::vflip();
    case Kind::rot90: return TransformSpec::rot90(rng.uniform_int(1, 3));
    case Kind::translate: {
      const int step = std::max(pool.translate_step, 1);
      const int radius = pool.max_translate / step;
      const int dx = step * rng.uniform_int(-radius, radius);
      const int dy = step * rng.uniform_int(-radius, radius);
      return TransformSpec::translate(dx, dy);
    }
  }
  return TransformSpec::identity();
}

}  // namespace miseg::transforms
