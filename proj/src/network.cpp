#include "miseg/network.hpp"

#include <cmath>
#include <cstdint>
#include <algorithm>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace miseg::net {

namespace {

using nlohmann::json;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

std::string dec_site(int b) { return "dec" + std::to_string(b); }

NDArray normal_init(Rng& rng, Shape shape, int fan_in) {
  NDArray w(std::move(shape));
  const double stddev = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (int64_t i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, stddev);
  return w;
}

}  // namespace

void SegNetConfig::validate() const {
  require(depth >= 2, "network.depth must be >= 2, got " + std::to_string(depth));
  require(base_channels >= 1, "network.base_channels must be >= 1");
  require(classes >= 2, "network.classes must be >= 2, got " + std::to_string(classes));
  require(clusters >= 2, "network.clusters must be >= 2, got " + std::to_string(clusters));
  require(heads_per_site >= 1, "network.heads_per_site must be >= 1");
  for (const std::string& s : global_sites)
    require(s == "bottleneck", "network.global_sites may only contain \"bottleneck\", got " + s);
  const auto decs = decoder_sites();
  for (const std::string& s : local_sites)
    require(std::find(decs.begin(), decs.end(), s) != decs.end(),
            "network.local_sites: unknown decoder site " + s);
}

std::vector<std::string> SegNetConfig::decoder_sites() const {
  std::vector<std::string> out;
  for (int b = depth - 1; b >= 0; --b) out.push_back(dec_site(b));
  return out;
}

int SegNetConfig::scale_of(const std::string& site) const {
  if (site == "bottleneck") return 1 << depth;
  for (int b = 0; b < depth; ++b)
    if (site == dec_site(b)) return 1 << b;
  throw std::invalid_argument("unknown site " + site);
}

int SegNetConfig::channels_of(const std::string& site) const {
  if (site == "bottleneck") return base_channels << depth;
  for (int b = 0; b < depth; ++b)
    if (site == dec_site(b)) return base_channels << b;
  throw std::invalid_argument("unknown site " + site);
}

int64_t NetworkParams::total_size() const {
  int64_t n = 0;
  for (const auto& [name, a] : arrays) n += a.size();
  return n;
}

const DiffArray& BoundParams::at(const std::string& name) const {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw std::invalid_argument("unknown parameter " + name);
  return it->second;
}

BoundParams bind(Tape* tape, const NetworkParams& params) {
  BoundParams bound;
  for (const auto& [name, a] : params.arrays) {
    bound.arrays.emplace(name, tape ? tape->leaf(a) : constant(a));
  }
  return bound;
}

NetworkParams init_params(Rng& rng, const SegNetConfig& cfg) {
  cfg.validate();
  NetworkParams p;
  auto conv = [&](const std::string& name, int co, int ci, int k) {
    p.arrays.emplace(name + "/w", normal_init(rng, {co, ci, k, k}, ci * k * k));
    p.arrays.emplace(name + "/b", NDArray(Shape{co}));
  };

  int ch = cfg.base_channels;
  int in_ch = 1;
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string base = "enc" + std::to_string(i);
    conv(base + "/conv1", ch, in_ch, 3);
    conv(base + "/conv2", ch, ch, 3);
    in_ch = ch;
    ch *= 2;
  }
  conv("bottleneck/conv1", ch, in_ch, 3);
  conv("bottleneck/conv2", ch, ch, 3);

  for (int b = cfg.depth - 1; b >= 0; --b) {
    const int out_ch = cfg.base_channels << b;
    const int prev_ch = out_ch * 2;  // block above (or the bottleneck)
    conv(dec_site(b) + "/up", out_ch, prev_ch, 3);
    conv(dec_site(b) + "/conv", out_ch, prev_ch, 3);  // after skip concat
  }
  conv("head", cfg.classes, cfg.base_channels, 1);

  auto init_heads = [&](const std::string& site, bool global) {
    const int ci = cfg.channels_of(site);
    for (int h = 0; h < cfg.heads_per_site; ++h) {
      const std::string base = "proj/" + site + "/" + std::to_string(h);
      if (global) {
        p.arrays.emplace(base + "/w", normal_init(rng, {ci, cfg.clusters}, ci));
        p.arrays.emplace(base + "/b", NDArray(Shape{cfg.clusters}));
      } else {
        p.arrays.emplace(base + "/w", normal_init(rng, {cfg.clusters, ci, 1, 1}, ci));
        p.arrays.emplace(base + "/b", NDArray(Shape{cfg.clusters}));
      }
    }
  };
  for (const std::string& site : cfg.global_sites) init_heads(site, true);
  for (const std::string& site : cfg.local_sites) init_heads(site, false);
  return p;
}

ForwardResult forward(const BoundParams& params, const SegNetConfig& cfg, const DiffArray& x) {
  require(x.value.rank() == 4 && x.shape()[1] == 1,
          "forward: input must be [N,1,H,W], got " + shape_str(x.shape()));
  const int H = x.shape()[2], W = x.shape()[3];
  const int div = 1 << cfg.depth;
  require(H % div == 0 && W % div == 0,
          "forward: extents " + shape_str(x.shape()) + " not divisible by 2^depth=" +
              std::to_string(div));

  auto act = [&](const DiffArray& v) { return leaky_relu(v, cfg.leaky_slope); };
  auto conv = [&](const DiffArray& v, const std::string& name, int k) {
    return conv2d(v, params.at(name + "/w"), params.at(name + "/b"), 1, k / 2);
  };

  ForwardResult out;
  std::vector<DiffArray> skips;
  DiffArray e = x;
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string base = "enc" + std::to_string(i);
    e = act(conv(e, base + "/conv1", 3));
    e = act(conv(e, base + "/conv2", 3));
    skips.push_back(e);
    e = maxpool2d(e, 2, 2);
  }
  e = act(conv(e, "bottleneck/conv1", 3));
  e = act(conv(e, "bottleneck/conv2", 3));
  out.embeddings.emplace("bottleneck", e);

  DiffArray d = e;
  for (int b = cfg.depth - 1; b >= 0; --b) {
    d = upsample_nearest2x(d);
    d = act(conv(d, dec_site(b) + "/up", 3));
    d = concat({d, skips[static_cast<size_t>(b)]}, 1);
    d = act(conv(d, dec_site(b) + "/conv", 3));
    out.embeddings.emplace(dec_site(b), d);
  }
  out.probs = softmax(conv(d, "head", 1), 1);
  return out;
}

std::vector<ProjectorHead> heads_for_site(const SegNetConfig& cfg, const std::string& site) {
  const bool global = site == "bottleneck";
  std::vector<ProjectorHead> heads;
  for (int h = 0; h < cfg.heads_per_site; ++h)
    heads.push_back(ProjectorHead{site, global ? HeadKind::global : HeadKind::local, h});
  return heads;
}

infomax::ClusterAssignment project(const BoundParams& params, const SegNetConfig& cfg,
                                   const ProjectorHead& head, const std::string& emb_site,
                                   const DiffArray& emb) {
  require(head.site == emb_site, "project: head for site " + head.site +
                                     " applied to embedding from " + emb_site);
  const std::string base = "proj/" + head.site + "/" + std::to_string(head.index);
  if (head.kind == HeadKind::global) {
    DiffArray pooled = global_maxpool(emb);  // [N,C']
    DiffArray logits = add(matmul(pooled, params.at(base + "/w")), params.at(base + "/b"));
    return infomax::make_assignment(softmax(logits, 1));
  }
  DiffArray logits = conv2d(emb, params.at(base + "/w"), params.at(base + "/b"), 1, 0);
  return infomax::make_assignment(softmax(logits, 1));
}

void ema_update(NetworkParams& teacher, const NetworkParams& student, double decay) {
  require(decay >= 0.0 && decay <= 1.0, "ema_update: decay must be in [0,1]");
  require(teacher.arrays.size() == student.arrays.size(),
          "ema_update: parameter sets differ in size");
  auto ti = teacher.arrays.begin();
  auto si = student.arrays.begin();
  for (; ti != teacher.arrays.end(); ++ti, ++si) {
    require(ti->first == si->first, "ema_update: parameter name mismatch: " + ti->first +
                                        " vs " + si->first);
    require(ti->second.shape() == si->second.shape(),
            "ema_update: shape mismatch for " + ti->first + ": " + shape_str(ti->second.shape()) +
                " vs " + shape_str(si->second.shape()));
    NDArray updated(ti->second.shape());
    const double* t = ti->second.data();
    const double* s = si->second.data();
    double* u = updated.mutable_data();
    for (int64_t i = 0; i < updated.size(); ++i) u[i] = decay * t[i] + (1.0 - decay) * s[i];
    ti->second = updated;
  }
}

void save_checkpoint(const std::string& path, const NetworkParams& params,
                     const std::string& meta_json) {
  json manifest;
  manifest["version"] = "miseg-ckpt-1";
  manifest["meta"] = json::parse(meta_json);
  json arrays = json::array();
  int64_t offset = 0;
  for (const auto& [name, a] : params.arrays) {
    json entry;
    entry["name"] = name;
    entry["shape"] = a.shape();
    entry["offset"] = offset;
    arrays.push_back(entry);
    offset += a.size() * static_cast<int64_t>(sizeof(double));
  }
  manifest["arrays"] = arrays;

  const std::string text = manifest.dump();
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cannot write checkpoint " + path);
  const uint32_t len = static_cast<uint32_t>(text.size());
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, a] : params.arrays) {
    out.write(reinterpret_cast<const char*>(a.data()),
              static_cast<std::streamsize>(a.size() * sizeof(double)));
  }
  require(out.good(), "short write on checkpoint " + path);
}

NetworkParams load_checkpoint(const std::string& path, std::string* meta_json) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "cannot read checkpoint " + path);
  uint32_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  require(in.good(), "truncated checkpoint manifest in " + path);

  json manifest = json::parse(text);
  require(manifest.value("version", "") == "miseg-ckpt-1",
          "unsupported checkpoint version in " + path);
  if (meta_json) *meta_json = manifest["meta"].dump();

  NetworkParams params;
  const std::streampos data_start = in.tellg();
  for (const auto& entry : manifest["arrays"]) {
    const std::string name = entry["name"];
    Shape shape = entry["shape"].get<Shape>();
    NDArray a(shape);
    in.seekg(data_start + static_cast<std::streamoff>(entry["offset"].get<int64_t>()));
    in.read(reinterpret_cast<char*>(a.mutable_data()),
            static_cast<std::streamsize>(a.size() * sizeof(double)));
    require(in.good(), "truncated checkpoint data for " + name + " in " + path);
    params.arrays.emplace(name, std::move(a));
  }
  return params;
}

}  // namespace miseg::net
