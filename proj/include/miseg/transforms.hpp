#pragma once

#include <vector>

#include "miseg/ops.hpp"
#include "miseg/rng.hpp"

namespace miseg::transforms {

enum class Kind { identity, hflip, vflip, rot90, translate };

struct Step {
  Kind kind = Kind::identity;
  int quarter_turns = 1;  // rot90 only, counter-clockwise, in {1,2,3}
  int dx = 0;             // translate only: column shift (circular)
  int dy = 0;             // translate only: row shift (circular)
};

// Invertible geometric transform, applied step by step in list order.
// Every member has an exact inverse in the same family; translations are
// circular so the round trip restores arrays bit-exactly.
struct TransformSpec {
  std::vector<Step> steps;

  static TransformSpec identity() { return {}; }
  static TransformSpec hflip() { return {{Step{Kind::hflip, 1, 0, 0}}}; }
  static TransformSpec vflip() { return {{Step{Kind::vflip, 1, 0, 0}}}; }
  static TransformSpec rot90(int quarter_turns);
  static TransformSpec translate(int dx, int dy) { return {{Step{Kind::translate, 1, dx, dy}}}; }

  TransformSpec then(const TransformSpec& next) const;
  bool is_identity() const;
};

TransformSpec invert(const TransformSpec& t);

// dst -> src pixel index map for an H x W grid. rot90 with an odd number of
// quarter turns requires H == W; translations must stay within the extents.
std::vector<int> pixel_map(const TransformSpec& t, int height, int width);

// Applies the transform to the trailing two (spatial) axes. Pure index
// permutation, differentiable.
DiffArray apply(const TransformSpec& t, const DiffArray& a);

// One transform per sample along the leading axis.
DiffArray apply_batch(const std::vector<TransformSpec>& ts, const DiffArray& a);

// Rescales the transform onto a feature map whose resolution is 1/scale of
// the image. Translations must be divisible by scale; other kinds are
// resolution covariant.
TransformSpec for_featuremap(const TransformSpec& t, int scale);
DiffArray apply_to_featuremap(const TransformSpec& t, const DiffArray& f, int scale);

struct TransformPool {
  bool allow_identity = true;
  bool allow_hflip = true;
  bool allow_vflip = true;
  bool allow_rot90 = false;  // quarter turns sampled from {1,2,3}
  int max_translate = 0;     // 0 disables translations
  int translate_step = 1;    // offsets sampled as multiples; set to the feature
                             // scale to keep the pool alignment-safe
  bool empty() const {
    return !allow_identity && !allow_hflip && !allow_vflip && !allow_rot90 && max_translate == 0;
  }
};

TransformSpec sample_transform(Rng& rng, const TransformPool& pool);

}  // namespace miseg::transforms
