#include "miseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace miseg::data {

namespace {

using nlohmann::json;

constexpr double kPi = 3.14159265358979323846;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

struct VolumeGeometry {
  double cx, cy;          // ellipse center
  double ax, ay;          // outer radii
  double core_fraction;   // inner ellipse radius fraction
  double angle;           // orientation
  double drift_x, drift_y, drift_angle;
  double mid;             // slice profile center
  double base_intensity[3];
};

VolumeGeometry sample_volume(Rng& rng, const SyntheticSpec& spec) {
  const double e = spec.extent;
  VolumeGeometry g;
  g.cx = e * rng.uniform(0.35, 0.65);
  g.cy = e * rng.uniform(0.35, 0.65);
  g.ax = e * rng.uniform(0.17, 0.27);
  g.ay = e * rng.uniform(0.17, 0.27);
  g.core_fraction = rng.uniform(0.42, 0.62);
  g.angle = rng.uniform(0.0, kPi);
  g.drift_x = rng.uniform(-0.012, 0.012) * e;
  g.drift_y = rng.uniform(-0.012, 0.012) * e;
  g.drift_angle = rng.uniform(-0.06, 0.06);
  g.mid = (spec.slices_per_volume - 1) * rng.uniform(0.4, 0.6);
  // Per-volume intensity variation is what keeps a single labeled volume
  // from covering the appearance of the rest.
  g.base_intensity[0] = rng.uniform(0.12, 0.30);
  g.base_intensity[1] = rng.uniform(0.42, 0.62);
  g.base_intensity[2] = rng.uniform(0.72, 0.92);
  return g;
}

SegSample render_slice(const VolumeGeometry& g, const SyntheticSpec& spec, int volume_id,
                       int slice, Rng& noise_rng) {
  const int e = spec.extent;
  SegSample sample;
  sample.volume_id = volume_id;
  sample.slice_index = slice;
  sample.image = NDArray(Shape{1, e, e});
  sample.label.assign(static_cast<size_t>(e) * e, 0);

  const double half = 0.5 * (spec.slices_per_volume - 1) + 1.5;
  const double rel = (slice - g.mid) / half;
  const double profile = std::sqrt(std::max(0.05, 1.0 - rel * rel));
  const double ax = g.ax * profile;
  const double ay = g.ay * profile;
  const double cx = g.cx + g.drift_x * (slice - g.mid);
  const double cy = g.cy + g.drift_y * (slice - g.mid);
  const double angle = g.angle + g.drift_angle * (slice - g.mid);
  const double cosa = std::cos(angle), sina = std::sin(angle);
  const double core2 = g.core_fraction * g.core_fraction;

  double* img = sample.image.mutable_data();
  for (int r = 0; r < e; ++r) {
    for (int c = 0; c < e; ++c) {
      const double dx = c - cx, dy = r - cy;
      const double u = dx * cosa + dy * sina;
      const double v = -dx * sina + dy * cosa;
      const double rho = (u / ax) * (u / ax) + (v / ay) * (v / ay);
      uint8_t cls = 0;
      if (rho <= core2) {
        cls = 2;
      } else if (rho <= 1.0) {
        cls = 1;
      }
      if (spec.classes == 2 && cls == 2) cls = 1;
      sample.label[static_cast<size_t>(r) * e + c] = cls;
      double value = g.base_intensity[cls];
      if (spec.noise_std > 0.0) value += spec.noise_std * noise_rng.normal();
      img[static_cast<size_t>(r) * e + c] = std::clamp(value, 0.0, 1.0);
    }
  }
  return sample;
}

std::vector<SegSample> generate_volumes(const SyntheticSpec& spec, int first_id, int count,
                                        uint64_t salt) {
  std::vector<SegSample> out;
  for (int v = 0; v < count; ++v) {
    const int volume_id = first_id + v;
    Rng rng = Rng::stream(spec.seed, salt + static_cast<uint64_t>(volume_id));
    VolumeGeometry g = sample_volume(rng, spec);
    for (int s = 0; s < spec.slices_per_volume; ++s) {
      out.push_back(render_slice(g, spec, volume_id, s, rng));
    }
  }
  return out;
}

}  // namespace

void SyntheticSpec::validate() const {
  require(classes >= 2 && classes <= 3, "data.classes must be 2 or 3, got " + std::to_string(classes));
  require(extent >= 8, "data.extent must be >= 8, got " + std::to_string(extent));
  require(train_volumes >= 1, "data.train_volumes must be >= 1");
  require(val_volumes >= 1, "data.val_volumes must be >= 1");
  require(slices_per_volume >= 1, "data.slices_per_volume must be >= 1");
  require(noise_std >= 0.0, "data.noise_std must be >= 0");
}

void SplitSpec::validate() const {
  require(labeled_ratio > 0.0 && labeled_ratio <= 1.0,
          "split.labeled_ratio must be in (0,1], got " + std::to_string(labeled_ratio));
}

Dataset generate_dataset(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  ds.train = generate_volumes(spec, 0, spec.train_volumes, /*salt=*/0);
  ds.validation = generate_volumes(spec, spec.train_volumes, spec.val_volumes, /*salt=*/0x5a11);
  return ds;
}

Splits split(const Dataset& dataset, const SplitSpec& spec, uint64_t seed) {
  spec.validate();
  const int volumes = dataset.spec.train_volumes;
  int labeled_count = static_cast<int>(std::llround(spec.labeled_ratio * volumes));
  labeled_count = std::clamp(labeled_count, 1, volumes);
  require(labeled_count >= 1, "split produced no labeled volumes");

  std::vector<int> order(static_cast<size_t>(volumes));
  for (int i = 0; i < volumes; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng = Rng::stream(seed, 0xB0B);
  for (int i = volumes - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(i + 1)));
    std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(j)]);
  }
  std::vector<char> is_labeled(static_cast<size_t>(volumes), 0);
  for (int i = 0; i < labeled_count; ++i) is_labeled[static_cast<size_t>(order[static_cast<size_t>(i)])] = 1;

  Splits out;
  for (const SegSample& s : dataset.train) {
    if (is_labeled[static_cast<size_t>(s.volume_id)]) {
      out.labeled.push_back(s);
    } else {
      SegSample hidden = s;
      hidden.labels_hidden = true;
      out.unlabeled.push_back(hidden);
    }
  }
  out.validation = dataset.validation;
  return out;
}

SegSample augment(const SegSample& sample, Rng& rng, const AugmentPool& pool) {
  SegSample out = sample;
  const int e = sample.image.shape()[1];
  const int w = sample.image.shape()[2];

  // Rotation by nearest-neighbor inverse mapping, edge-clamped.
  if (pool.max_rotate_deg > 0.0) {
    const double deg = rng.uniform(-pool.max_rotate_deg, pool.max_rotate_deg);
    const double theta = deg * kPi / 180.0;
    const double cosa = std::cos(theta), sina = std::sin(theta);
    const double cx = 0.5 * (w - 1), cy = 0.5 * (e - 1);
    NDArray img(Shape{1, e, w});
    std::vector<uint8_t> lab(static_cast<size_t>(e) * w);
    for (int r = 0; r < e; ++r) {
      for (int c = 0; c < w; ++c) {
        const double dx = c - cx, dy = r - cy;
        const int sc = std::clamp(static_cast<int>(std::lround(cx + dx * cosa - dy * sina)), 0, w - 1);
        const int sr = std::clamp(static_cast<int>(std::lround(cy + dx * sina + dy * cosa)), 0, e - 1);
        img.mutable_data()[static_cast<size_t>(r) * w + c] =
            out.image.data()[static_cast<size_t>(sr) * w + sc];
        lab[static_cast<size_t>(r) * w + c] = out.label[static_cast<size_t>(sr) * w + sc];
      }
    }
    out.image = img;
    out.label = lab;
  }

  if (pool.max_shift > 0) {
    const int dx = rng.uniform_int(-pool.max_shift, pool.max_shift);
    const int dy = rng.uniform_int(-pool.max_shift, pool.max_shift);
    if (dx != 0 || dy != 0) {
      NDArray img(Shape{1, e, w});
      std::vector<uint8_t> lab(static_cast<size_t>(e) * w);
      for (int r = 0; r < e; ++r) {
        for (int c = 0; c < w; ++c) {
          const int sr = std::clamp(r - dy, 0, e - 1);
          const int sc = std::clamp(c - dx, 0, w - 1);
          img.mutable_data()[static_cast<size_t>(r) * w + c] =
              out.image.data()[static_cast<size_t>(sr) * w + sc];
          lab[static_cast<size_t>(r) * w + c] = out.label[static_cast<size_t>(sr) * w + sc];
        }
      }
      out.image = img;
      out.label = lab;
    }
  }

  // Flips are exact index mirrors.
  auto mirror = [&](bool horizontal) {
    NDArray img(Shape{1, e, w});
    std::vector<uint8_t> lab(static_cast<size_t>(e) * w);
    for (int r = 0; r < e; ++r)
      for (int c = 0; c < w; ++c) {
        const int sr = horizontal ? r : e - 1 - r;
        const int sc = horizontal ? w - 1 - c : c;
        img.mutable_data()[static_cast<size_t>(r) * w + c] =
            out.image.data()[static_cast<size_t>(sr) * w + sc];
        lab[static_cast<size_t>(r) * w + c] = out.label[static_cast<size_t>(sr) * w + sc];
      }
    out.image = img;
    out.label = lab;
  };
  if (pool.hflip && rng.uniform() < 0.5) mirror(true);
  if (pool.vflip && rng.uniform() < 0.5) mirror(false);

  if (pool.intensity_scale > 0.0 || pool.intensity_shift > 0.0) {
    const double gain = 1.0 + rng.uniform(-pool.intensity_scale, pool.intensity_scale);
    const double offset = rng.uniform(-pool.intensity_shift, pool.intensity_shift);
    NDArray img = out.image.clone();
    for (int64_t i = 0; i < img.size(); ++i)
      img[i] = std::clamp(img[i] * gain + offset, 0.0, 1.0);
    out.image = img;
  }
  return out;
}

double dice_3d(const std::vector<uint8_t>& pred, const std::vector<uint8_t>& gt, int cls,
               int num_classes) {
  require(pred.size() == gt.size(), "dice_3d: volumes differ in size: " +
                                        std::to_string(pred.size()) + " vs " +
                                        std::to_string(gt.size()));
  require(cls >= 0 && cls < num_classes,
          "dice_3d: unknown class " + std::to_string(cls) + " of " + std::to_string(num_classes));
  int64_t s = 0, g = 0, both = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const bool in_s = pred[i] == cls;
    const bool in_g = gt[i] == cls;
    s += in_s;
    g += in_g;
    both += in_s && in_g;
  }
  if (s + g == 0) return 1.0;  // both empty
  return 2.0 * static_cast<double>(both) / static_cast<double>(s + g);
}

void save_split(const std::string& path, const std::vector<SegSample>& samples,
                const std::string& header_json) {
  json header = json::parse(header_json);
  header["samples"] = samples.size();
  if (!samples.empty()) {
    header["height"] = samples[0].image.shape()[1];
    header["width"] = samples[0].image.shape()[2];
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot write split cache " + path);
  const uint32_t len = static_cast<uint32_t>(text.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const SegSample& s : samples) {
    const int32_t vol = s.volume_id, slice = s.slice_index;
    const uint8_t hidden = s.labels_hidden ? 1 : 0;
    out.write(reinterpret_cast<const char*>(&vol), sizeof(vol));
    out.write(reinterpret_cast<const char*>(&slice), sizeof(slice));
    out.write(reinterpret_cast<const char*>(&hidden), sizeof(hidden));
    out.write(reinterpret_cast<const char*>(s.label.data()),
              static_cast<std::streamsize>(s.label.size()));
    out.write(reinterpret_cast<const char*>(s.image.data()),
              static_cast<std::streamsize>(s.image.size() * sizeof(double)));
  }
  require(out.good(), "short write on split cache " + path);
}

std::vector<SegSample> load_split(const std::string& path, std::string* header_json) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot read split cache " + path);
  uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  require(in.good(), "truncated split cache header in " + path);
  json header = json::parse(text);
  if (header_json) *header_json = text;

  const size_t count = header.at("samples").get<size_t>();
  std::vector<SegSample> samples;
  if (count == 0) return samples;
  const int h = header.at("height").get<int>();
  const int w = header.at("width").get<int>();
  samples.reserve(count);
  for (size_t i = 0; i < count; ++i) {
    SegSample s;
    int32_t vol = 0, slice = 0;
    uint8_t hidden = 0;
    in.read(reinterpret_cast<char*>(&vol), sizeof(vol));
    in.read(reinterpret_cast<char*>(&slice), sizeof(slice));
    in.read(reinterpret_cast<char*>(&hidden), sizeof(hidden));
    s.volume_id = vol;
    s.slice_index = slice;
    s.labels_hidden = hidden != 0;
    s.label.resize(static_cast<size_t>(h) * w);
    in.read(reinterpret_cast<char*>(s.label.data()), static_cast<std::streamsize>(s.label.size()));
    s.image = NDArray(Shape{1, h, w});
    in.read(reinterpret_cast<char*>(s.image.mutable_data()),
            static_cast<std::streamsize>(s.image.size() * sizeof(double)));
    require(in.good(), "truncated split cache record in " + path);
    samples.push_back(std::move(s));
  }
  return samples;
}

}  // namespace miseg::data
