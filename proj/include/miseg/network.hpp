#pragma once

#include <map>
#include <string>
#include <vector>

#include "miseg/infomax.hpp"
#include "miseg/ops.hpp"
#include "miseg/rng.hpp"

namespace miseg::net {

// Encoder-decoder segmentation network. Desk-scale default is depth 3;
// depth 5 reproduces the paper-scale shape. Sites name the embeddings that
// regularization can attach to: "bottleneck" plus "dec<b>" for decoder block
// outputs at resolution H / 2^b.
struct SegNetConfig {
  int depth = 3;
  int base_channels = 8;
  int classes = 3;
  int clusters = 10;
  int heads_per_site = 5;
  double leaky_slope = 0.01;
  std::vector<std::string> global_sites = {"bottleneck"};
  std::vector<std::string> local_sites = {"dec1", "dec0"};

  void validate() const;
  std::vector<std::string> decoder_sites() const;
  int scale_of(const std::string& site) const;     // resolution divisor
  int channels_of(const std::string& site) const;  // embedding channels
};

struct NetworkParams {
  std::map<std::string, NDArray> arrays;

  int64_t total_size() const;
};

enum class HeadKind { global, local };

struct ProjectorHead {
  std::string site;
  HeadKind kind = HeadKind::global;
  int index = 0;
};

// Parameters registered on a record (leaves) or frozen (constants, e.g. the
// EMA teacher or evaluation-time forward passes).
struct BoundParams {
  std::map<std::string, DiffArray> arrays;

  const DiffArray& at(const std::string& name) const;
};

BoundParams bind(Tape* tape, const NetworkParams& params);

struct ForwardResult {
  DiffArray probs;  // [N,C,H,W], softmax over C
  std::map<std::string, DiffArray> embeddings;
};

NetworkParams init_params(Rng& rng, const SegNetConfig& cfg);

ForwardResult forward(const BoundParams& params, const SegNetConfig& cfg, const DiffArray& x);

// Projects a site embedding to a cluster assignment. Global heads pool
// spatially (max) before a linear layer; local heads keep the resolution
// with a 1x1 convolution. Softmax either way.
infomax::ClusterAssignment project(const BoundParams& params, const SegNetConfig& cfg,
                                   const ProjectorHead& head, const std::string& emb_site,
                                   const DiffArray& emb);

std::vector<ProjectorHead> heads_for_site(const SegNetConfig& cfg, const std::string& site);

// teacher <- decay * teacher + (1 - decay) * student, elementwise.
void ema_update(NetworkParams& teacher, const NetworkParams& student, double decay);

// Checkpoint file: u32 manifest length, JSON manifest (version "miseg-ckpt-1",
// array names/shapes/offsets, free-form meta), then raw little-endian f64.
void save_checkpoint(const std::string& path, const NetworkParams& params,
                     const std::string& meta_json = "{}");
NetworkParams load_checkpoint(const std::string& path, std::string* meta_json = nullptr);

}  // namespace miseg::net
