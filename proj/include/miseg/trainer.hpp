#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "miseg/data.hpp"
#include "miseg/network.hpp"
#include "miseg/transforms.hpp"

namespace miseg::trainer {

enum class Method {
  full_sup,
  partial_sup,
  mi_only,
  consistency_only,
  entropy_min,
  mean_teacher,
  ours,
  ours_ema,
  pretrain_finetune,
};

std::string method_name(Method m);
Method method_from_name(const std::string& name);

struct TrainConfig {
  Method method = Method::ours;
  double lambda1 = 0.1;  // global MI weight
  double lambda2 = 0.1;  // local MI weight
  double lambda3 = 5.0;  // consistency weight (also the single-term baseline weight)
  int epochs = 60;
  int iters_per_epoch = 100;
  int labeled_batch = 4;
  int unlabeled_batch = 10;
  double base_lr = 2.5e-5;
  double warmup_factor = 400.0;
  int warmup_epochs = 10;
  uint64_t seed = 1;
  double ema_decay = 0.999;
  int pretrain_epochs = -1;  // stage-1 length for pretrain_finetune; -1 -> epochs/2
  bool symmetrize_joint = false;
  std::map<std::string, int> site_radius;  // displacement radius per local site; default 1
  transforms::TransformPool mi_pool;       // defaults to {identity, hflip, vflip}
  data::AugmentPool augment_pool;          // input augmentation for all methods

  void validate() const;
  int radius_for(const std::string& site) const;
  bool uses_teacher() const {
    return method == Method::mean_teacher || method == Method::ours_ema;
  }
};

// Linear warm-up from base to warmup_factor * base over the first
// warmup_epochs, then cosine decay to zero at the final epoch.
double lr_at(int epoch, const TrainConfig& cfg);

// Cross-entropy on integer labels: -mean over pixels of log prob of the
// true class (floored log).
DiffArray supervised_loss(const DiffArray& probs, const std::vector<uint8_t>& labels);

struct AdamState {
  std::map<std::string, NDArray> m;
  std::map<std::string, NDArray> v;
  int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Standard bias-corrected adaptive-moment update. Parameters without a
// gradient entry decay their moments only.
void optimizer_step(net::NetworkParams& params, const std::map<std::string, NDArray>& grads,
                    AdamState& state, double lr);

struct LabeledBatch {
  NDArray images;               // [N,1,H,W]
  std::vector<uint8_t> labels;  // N*H*W
};

struct UnlabeledBatch {
  NDArray images;  // [N,1,H,W]
  std::vector<transforms::TransformSpec> tfs;  // one per image
};

struct LossBreakdown {
  double spv = 0.0;
  double mi_global = 0.0;
  double mi_local = 0.0;
  double cons = 0.0;
  double entropy = 0.0;
  double w1 = 0.0, w2 = 0.0, w3 = 0.0;  // effective weights used
  double total = 0.0;
};

// Assembles the method's loss on one batch pair. Pass labeled == nullptr to
// drop the supervised term (pretraining stage). The teacher forward carries
// no gradient.
DiffArray total_loss(Tape& tape, const net::BoundParams& student,
                     const net::NetworkParams* teacher, const net::SegNetConfig& netcfg,
                     const TrainConfig& cfg, const LabeledBatch* labeled,
                     const UnlabeledBatch* unlabeled, LossBreakdown* breakdown);

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double loss_spv = 0.0;
  double loss_mi_global = 0.0;
  double loss_mi_local = 0.0;
  double loss_cons = 0.0;
  double loss_entropy = 0.0;
  std::vector<double> dsc_per_class;  // foreground classes 1..C-1
  double dsc_mean = 0.0;
};

struct TrainReport {
  std::string config_echo;  // JSON document sufficient to rerun
  std::vector<EpochStats> epochs;
  int best_epoch = -1;
  double best_dsc = 0.0;
  std::string best_checkpoint;
  std::string last_checkpoint;
  double wall_seconds = 0.0;
};

std::string report_to_json(const TrainReport& report);
std::string report_to_csv(const TrainReport& report);

struct Divergence : std::runtime_error {
  explicit Divergence(const std::string& msg) : std::runtime_error(msg) {}
};

// Full training run; writes best/last checkpoints under out_dir (empty
// out_dir skips checkpoint files). Aborts with Divergence on non-finite
// loss, keeping the last good checkpoint. resume_from, when set, must be a
// last-checkpoint written by the same config and continues after its epoch.
TrainReport train(const net::SegNetConfig& netcfg, const TrainConfig& cfg,
                  const data::Splits& splits, const std::string& out_dir,
                  const std::string& config_echo = "{}",
                  const std::string& resume_from = "");

// Validation helper shared with the eval command: per-class mean DSC over
// volumes, classes 1..C-1.
std::vector<double> validation_dsc(const net::NetworkParams& params,
                                   const net::SegNetConfig& netcfg,
                                   const std::vector<data::SegSample>& validation);

struct ToyConfig {
  int points = 600;
  int clusters = 3;
  int steps = 2000;
  double noise_std = 0.1;
  double lr = 0.05;
  uint64_t seed = 1;
  int trajectory_stride = 10;
};

struct ToyReport {
  double final_mi = 0.0;
  std::vector<double> mi_trajectory;  // every trajectory_stride steps plus the last
  NDArray joint;                      // [K,K] at the final step
  std::vector<int> assignments;       // argmax cluster per point
  std::vector<double> points;         // n*3 coordinates
};

// Maximizes MI between cluster assignments of random 3-D points and their
// noise-perturbed copies through a shared linear head.
ToyReport toy_cluster(const ToyConfig& cfg);

}  // namespace miseg::trainer
