#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "miseg/ndarray.hpp"
#include "miseg/rng.hpp"

namespace miseg::data {

// Synthetic pseudo-volumes of nested-ellipse slices (ring + core on a
// background), with per-volume geometry and intensity variation and smooth
// drift across slices. Stands in for volumetric anatomy at desk scale.
struct SyntheticSpec {
  int extent = 64;
  int classes = 3;  // background, ring, core
  int train_volumes = 20;
  int val_volumes = 6;
  int slices_per_volume = 8;
  double noise_std = 0.03;
  uint64_t seed = 1;

  void validate() const;
};

struct SegSample {
  NDArray image;               // [1,H,W], values in [0,1]
  std::vector<uint8_t> label;  // H*W row-major, values in {0..C-1}
  int volume_id = 0;
  int slice_index = 0;
  bool labels_hidden = false;  // set on the unlabeled split; kept for diagnostics only
};

struct Dataset {
  SyntheticSpec spec;
  std::vector<SegSample> train;  // grouped by volume, slices in order
  std::vector<SegSample> validation;
};

struct SplitSpec {
  double labeled_ratio = 0.05;

  void validate() const;
};

struct Splits {
  std::vector<SegSample> labeled;
  std::vector<SegSample> unlabeled;
  std::vector<SegSample> validation;
};

Dataset generate_dataset(const SyntheticSpec& spec);

// Volume-level split of the training pool; never separates slices of one
// volume. Labeled volume count rounds to >= 1.
Splits split(const Dataset& dataset, const SplitSpec& spec, uint64_t seed);

struct AugmentPool {
  bool hflip = false;
  bool vflip = false;
  double max_rotate_deg = 0.0;   // nearest-neighbor resampling
  int max_shift = 0;             // integer pixel shifts, edge-clamped
  double intensity_scale = 0.0;  // multiplicative jitter half-range
  double intensity_shift = 0.0;  // additive jitter half-range

  bool is_identity() const {
    return !hflip && !vflip && max_rotate_deg == 0.0 && max_shift == 0 &&
           intensity_scale == 0.0 && intensity_shift == 0.0;
  }
};

// Label transformed with identical geometry (nearest interpolation);
// intensity jitter touches the image only.
SegSample augment(const SegSample& sample, Rng& rng, const AugmentPool& pool);

// 2|S n G| / (|S| + |G|) over whole volumes; both empty -> 1, one empty -> 0.
double dice_3d(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt, int cls,
               int num_classes);

// Split cache: u32 header length, JSON header, then per-sample records
// (volume id, slice index, hidden flag, u8 labels, f64 image).
void save_split(const std::string& path, const std::vector<SegSample>& samples,
                const std::string& header_json);
std::vector<SegSample> load_split(const std::string& path, std::string* header_json = nullptr);

}  // namespace miseg::data
