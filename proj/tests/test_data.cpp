#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "miseg/data.hpp"

using namespace miseg;
using namespace miseg::data;

namespace {

SyntheticSpec small_spec() {
  SyntheticSpec spec;
  spec.extent = 32;
  spec.train_volumes = 6;
  spec.val_volumes = 2;
  spec.slices_per_volume = 4;
  spec.seed = 42;
  return spec;
}

}  // namespace

TEST_CASE("generation is deterministic given the seed") {
  SyntheticSpec spec = small_spec();
  Dataset a = generate_dataset(spec);
  Dataset b = generate_dataset(spec);
  REQUIRE(a.train.size() == b.train.size());
  for (size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].label == b.train[i].label);
    for (int64_t j = 0; j < a.train[i].image.size(); ++j)
      CHECK(a.train[i].image[j] == b.train[i].image[j]);
  }
}

TEST_CASE("noise-free images are piecewise constant and match labels") {
  SyntheticSpec spec = small_spec();
  spec.noise_std = 0.0;
  Dataset ds = generate_dataset(spec);
  for (const SegSample& s : ds.train) {
    std::map<uint8_t, double> class_value;
    for (size_t i = 0; i < s.label.size(); ++i) {
      const double v = s.image[static_cast<int64_t>(i)];
      auto [it, inserted] = class_value.emplace(s.label[i], v);
      if (!inserted) CHECK(it->second == v);
    }
    // Distinct classes map to distinct intensities.
    std::set<double> values;
    for (const auto& [cls, v] : class_value) values.insert(v);
    CHECK(values.size() == class_value.size());
  }
}

TEST_CASE("foreground fraction stays in a sane band") {
  SyntheticSpec spec;
  spec.extent = 32;
  spec.train_volumes = 100;
  spec.val_volumes = 1;
  spec.slices_per_volume = 8;
  spec.seed = 7;
  Dataset ds = generate_dataset(spec);
  double total_fg = 0.0;
  int64_t slices = 0;
  for (const SegSample& s : ds.train) {
    int fg = 0;
    for (uint8_t v : s.label) fg += v != 0;
    total_fg += static_cast<double>(fg) / static_cast<double>(s.label.size());
    ++slices;
  }
  const double mean_fraction = total_fg / static_cast<double>(slices);
  CHECK(mean_fraction > 0.02);
  CHECK(mean_fraction < 0.5);
}

TEST_CASE("most slices contain foreground") {
  SyntheticSpec spec = small_spec();
  Dataset ds = generate_dataset(spec);
  std::map<int, int> nonempty, count;
  for (const SegSample& s : ds.train) {
    count[s.volume_id]++;
    for (uint8_t v : s.label)
      if (v != 0) {
        nonempty[s.volume_id]++;
        break;
      }
  }
  for (const auto& [vol, n] : count) CHECK(nonempty[vol] * 2 >= n);
}

TEST_CASE("split behavior") {
  SyntheticSpec spec = small_spec();
  spec.train_volumes = 20;
  Dataset ds = generate_dataset(spec);

  SUBCASE("ratio 1.0 leaves nothing unlabeled") {
    Splits s = split(ds, SplitSpec{1.0}, 1);
    CHECK(s.unlabeled.empty());
    CHECK(s.labeled.size() == ds.train.size());
  }
  SUBCASE("5% of 20 volumes is exactly one labeled volume") {
    Splits s = split(ds, SplitSpec{0.05}, 1);
    std::set<int> labeled_vols;
    for (const SegSample& x : s.labeled) labeled_vols.insert(x.volume_id);
    CHECK(labeled_vols.size() == 1);
    CHECK(s.unlabeled.size() == ds.train.size() - spec.slices_per_volume);
    for (const SegSample& x : s.unlabeled) CHECK(x.labels_hidden);
    for (const SegSample& x : s.labeled) CHECK(!x.labels_hidden);
  }
  SUBCASE("same seed reproduces the split") {
    Splits a = split(ds, SplitSpec{0.25}, 9);
    Splits b = split(ds, SplitSpec{0.25}, 9);
    REQUIRE(a.labeled.size() == b.labeled.size());
    for (size_t i = 0; i < a.labeled.size(); ++i)
      CHECK(a.labeled[i].volume_id == b.labeled[i].volume_id);
  }
  SUBCASE("splits are volume-disjoint") {
    Splits s = split(ds, SplitSpec{0.3}, 5);
    std::set<int> lab, unlab, val;
    for (const SegSample& x : s.labeled) lab.insert(x.volume_id);
    for (const SegSample& x : s.unlabeled) unlab.insert(x.volume_id);
    for (const SegSample& x : s.validation) val.insert(x.volume_id);
    for (int v : lab) {
      CHECK(unlab.count(v) == 0);
      CHECK(val.count(v) == 0);
    }
    for (int v : unlab) CHECK(val.count(v) == 0);
  }
  SUBCASE("invalid ratio is rejected") {
    CHECK_THROWS_AS(split(ds, SplitSpec{0.0}, 1), std::invalid_argument);
    CHECK_THROWS_AS(split(ds, SplitSpec{-0.5}, 1), std::invalid_argument);
  }
}

TEST_CASE("augmentation") {
  SyntheticSpec spec = small_spec();
  spec.noise_std = 0.0;
  Dataset ds = generate_dataset(spec);
  const SegSample& s = ds.train[5];

  SUBCASE("identity pool leaves the sample unchanged") {
    Rng rng(1);
    SegSample out = augment(s, rng, AugmentPool{});
    CHECK(out.label == s.label);
    for (int64_t i = 0; i < s.image.size(); ++i) CHECK(out.image[i] == s.image[i]);
  }

  SUBCASE("flips move label and image together") {
    AugmentPool pool;
    pool.hflip = true;
    Rng rng(2);
    bool saw_flip = false;
    for (int t = 0; t < 20; ++t) {
      SegSample out = augment(s, rng, pool);
      const int e = spec.extent;
      bool flipped = out.label != s.label;
      if (flipped) {
        saw_flip = true;
        for (int r = 0; r < e; ++r)
          for (int c = 0; c < e; ++c) {
            CHECK(out.label[r * e + c] == s.label[r * e + (e - 1 - c)]);
            CHECK(out.image[static_cast<int64_t>(r) * e + c] ==
                  s.image[static_cast<int64_t>(r) * e + (e - 1 - c)]);
          }
      }
    }
    CHECK(saw_flip);
  }

  SUBCASE("flips preserve the label histogram exactly") {
    AugmentPool pool;
    pool.hflip = true;
    pool.vflip = true;
    Rng rng(3);
    std::map<uint8_t, int> before, after;
    for (uint8_t v : s.label) before[v]++;
    SegSample out = augment(s, rng, pool);
    for (uint8_t v : out.label) after[v]++;
    CHECK(before == after);
  }

  SUBCASE("45-degree rotation round trip restores most pixels") {
    // Measured: nearest-neighbor resampling loses only boundary pixels.
    SyntheticSpec big = small_spec();
    big.extent = 64;
    big.noise_std = 0.0;
    Dataset bds = generate_dataset(big);
    const SegSample& sample = bds.train[2];
    const int e = big.extent;

    auto rotate = [&](const SegSample& in, double deg) {
      SegSample out = in;
      const double theta = deg * 3.14159265358979323846 / 180.0;
      const double cosa = std::cos(theta), sina = std::sin(theta);
      const double ctr = 0.5 * (e - 1);
      for (int r = 0; r < e; ++r)
        for (int c = 0; c < e; ++c) {
          const double dx = c - ctr, dy = r - ctr;
          const int sc = std::clamp(static_cast<int>(std::lround(ctr + dx * cosa - dy * sina)), 0, e - 1);
          const int sr = std::clamp(static_cast<int>(std::lround(ctr + dx * sina + dy * cosa)), 0, e - 1);
          out.label[r * e + c] = in.label[sr * e + sc];
        }
      return out;
    };
    SegSample round_trip = rotate(rotate(sample, 45.0), -45.0);
    int restored = 0;
    for (size_t i = 0; i < sample.label.size(); ++i)
      restored += round_trip.label[i] == sample.label[i];
    CHECK(static_cast<double>(restored) / static_cast<double>(sample.label.size()) >= 0.9);
  }

  SUBCASE("intensity jitter touches the image only") {
    AugmentPool pool;
    pool.intensity_scale = 0.1;
    pool.intensity_shift = 0.05;
    Rng rng(4);
    SegSample out = augment(s, rng, pool);
    CHECK(out.label == s.label);
    bool changed = false;
    for (int64_t i = 0; i < s.image.size(); ++i)
      if (out.image[i] != s.image[i]) changed = true;
    CHECK(changed);
  }
}

TEST_CASE("dice coefficient") {
  SUBCASE("exact match on a non-empty mask") {
    std::vector<uint8_t> v = {0, 1, 1, 0, 2, 1};
    CHECK(dice_3d(v, v, 1, 3) == 1.0);
    CHECK(dice_3d(v, v, 2, 3) == 1.0);
  }
  SUBCASE("disjoint equal-size masks give zero") {
    std::vector<uint8_t> a = {1, 1, 0, 0};
    std::vector<uint8_t> b = {0, 0, 1, 1};
    CHECK(dice_3d(a, b, 1, 2) == 0.0);
  }
  SUBCASE("partial overlap: |S|=2, |G|=4, |S n G|=2 gives 2/3") {
    std::vector<uint8_t> pred = {1, 1, 0, 0, 0, 0};
    std::vector<uint8_t> gt = {1, 1, 1, 1, 0, 0};
    CHECK(dice_3d(pred, gt, 1, 2) == doctest::Approx(2.0 * 2 / 6).epsilon(1e-12));
  }
  SUBCASE("both empty -> 1, one empty -> 0") {
    std::vector<uint8_t> empty = {0, 0, 0};
    std::vector<uint8_t> some = {0, 1, 0};
    CHECK(dice_3d(empty, empty, 1, 2) == 1.0);
    CHECK(dice_3d(some, empty, 1, 2) == 0.0);
    CHECK(dice_3d(empty, some, 1, 2) == 0.0);
  }
  SUBCASE("symmetry and range on random masks") {
    Rng rng(11);
    for (int t = 0; t < 100; ++t) {
      std::vector<uint8_t> a(50), b(50);
      for (size_t i = 0; i < a.size(); ++i) {
        a[i] = static_cast<uint8_t>(rng.uniform_int(3));
        b[i] = static_cast<uint8_t>(rng.uniform_int(3));
      }
      for (int cls = 0; cls < 3; ++cls) {
        const double ab = dice_3d(a, b, cls, 3);
        const double ba = dice_3d(b, a, cls, 3);
        CHECK(ab == ba);
        CHECK(ab >= 0.0);
        CHECK(ab <= 1.0);
      }
    }
  }
  SUBCASE("unknown class is rejected") {
    std::vector<uint8_t> v = {0, 1};
    CHECK_THROWS_AS(dice_3d(v, v, 5, 3), std::invalid_argument);
  }
}

TEST_CASE("degenerate spec is rejected") {
  SyntheticSpec spec = small_spec();
  spec.classes = 1;
  CHECK_THROWS_AS(generate_dataset(spec), std::invalid_argument);
}

TEST_CASE("split cache round trip") {
  SyntheticSpec spec = small_spec();
  Dataset ds = generate_dataset(spec);
  Splits s = split(ds, SplitSpec{0.5}, 3);
  const std::string path = "test_split_cache.bin";
  save_split(path, s.unlabeled, R"({"split":"unlabeled"})");

  std::string header;
  std::vector<SegSample> loaded = load_split(path, &header);
  CHECK(header.find("unlabeled") != std::string::npos);
  REQUIRE(loaded.size() == s.unlabeled.size());
  for (size_t i = 0; i < loaded.size(); ++i) {
    CHECK(loaded[i].volume_id == s.unlabeled[i].volume_id);
    CHECK(loaded[i].slice_index == s.unlabeled[i].slice_index);
    CHECK(loaded[i].labels_hidden == s.unlabeled[i].labels_hidden);
    CHECK(loaded[i].label == s.unlabeled[i].label);
    for (int64_t j = 0; j < loaded[i].image.size(); ++j)
      CHECK(loaded[i].image[j] == s.unlabeled[i].image[j]);
  }
  std::remove(path.c_str());
}
