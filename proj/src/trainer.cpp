#include "miseg/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>

#include <json.hpp>

#include "miseg/infomax.hpp"

namespace miseg::trainer {

namespace {

using infomax::ClusterAssignment;
using infomax::DisplacementSet;
using infomax::LocalBlock;
using nlohmann::json;

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

constexpr int kStreamInit = 1;
constexpr int kStreamBatch = 2;
constexpr int kStreamAugment = 3;
constexpr int kStreamTransform = 4;
constexpr int kStreamToy = 5;

uint64_t stream_tag(int purpose, int epoch, int iter) {
  return (static_cast<uint64_t>(purpose) << 56) ^ (static_cast<uint64_t>(epoch) << 28) ^
         static_cast<uint64_t>(iter);
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

bool uses_mi(Method m) {
  return m == Method::mi_only || m == Method::ours || m == Method::ours_ema ||
         m == Method::pretrain_finetune;
}

bool uses_consistency(Method m) {
  return m == Method::consistency_only || m == Method::mean_teacher || m == Method::ours ||
         m == Method::ours_ema || m == Method::pretrain_finetune;
}

}  // namespace

std::string method_name(Method m) {
  switch (m) {
    case Method::full_sup: return "full_sup";
    case Method::partial_sup: return "partial_sup";
    case Method::mi_only: return "mi_only";
    case Method::consistency_only: return "consistency_only";
    case Method::entropy_min: return "entropy_min";
    case Method::mean_teacher: return "mean_teacher";
    case Method::ours: return "ours";
    case Method::ours_ema: return "ours_ema";
    case Method::pretrain_finetune: return "pretrain_finetune";
  }
  return "unknown";
}

Method method_from_name(const std::string& name) {
  for (Method m : {Method::full_sup, Method::partial_sup, Method::mi_only,
                   Method::consistency_only, Method::entropy_min, Method::mean_teacher,
                   Method::ours, Method::ours_ema, Method::pretrain_finetune}) {
    if (method_name(m) == name) return m;
  }
  throw std::invalid_argument("train.method: unknown method \"" + name + "\"");
}

void TrainConfig::validate() const {
  require(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda3 >= 0.0,
          "train.lambda weights must be >= 0");
  require(epochs >= 1, "train.epochs must be >= 1");
  require(iters_per_epoch >= 1, "train.iters_per_epoch must be >= 1");
  require(labeled_batch >= 1 && unlabeled_batch >= 1, "train batch sizes must be >= 1");
  require(base_lr > 0.0, "train.base_lr must be positive");
  require(warmup_factor >= 1.0, "train.warmup_factor must be >= 1");
  require(warmup_epochs >= 1, "train.warmup_epochs must be >= 1");
  require(ema_decay >= 0.0 && ema_decay <= 1.0, "train.ema_decay must be in [0,1]");
  for (const auto& [site, radius] : site_radius)
    require(radius >= 0, "train.site_radius[" + site + "] must be >= 0");
}

int TrainConfig::radius_for(const std::string& site) const {
  auto it = site_radius.find(site);
  return it == site_radius.end() ? 1 : it->second;
}

double lr_at(int epoch, const TrainConfig& cfg) {
  require(epoch >= 0 && epoch < cfg.epochs,
          "lr_at: epoch " + std::to_string(epoch) + " outside [0," + std::to_string(cfg.epochs) + ")");
  const int warmup = std::min(cfg.warmup_epochs, cfg.epochs);
  const double peak = cfg.base_lr * cfg.warmup_factor;
  if (epoch < warmup) {
    return cfg.base_lr +
           (peak - cfg.base_lr) * static_cast<double>(epoch) / static_cast<double>(warmup);
  }
  if (cfg.epochs == warmup) return peak;
  const double t = static_cast<double>(epoch - warmup) / static_cast<double>(cfg.epochs - warmup);
  return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

DiffArray supervised_loss(const DiffArray& probs, const std::vector<uint8_t>& labels) {
  require(probs.value.rank() == 4, "supervised_loss: probs must be [N,C,H,W], got " +
                                       shape_str(probs.shape()));
  const int n = probs.shape()[0], c = probs.shape()[1], h = probs.shape()[2], w = probs.shape()[3];
  require(static_cast<int64_t>(labels.size()) == static_cast<int64_t>(n) * h * w,
          "supervised_loss: label count " + std::to_string(labels.size()) + " != N*H*W");
  NDArray mask(probs.shape());
  double* md = mask.mutable_data();
  const int64_t plane = static_cast<int64_t>(h) * w;
  for (int s = 0; s < n; ++s) {
    for (int64_t i = 0; i < plane; ++i) {
      const uint8_t cls = labels[static_cast<size_t>(s) * plane + i];
      require(cls < c, "supervised_loss: label " + std::to_string(cls) + " out of range for C=" +
                           std::to_string(c));
      md[(static_cast<int64_t>(s) * c + cls) * plane + i] = 1.0;
    }
  }
  const double inv = -1.0 / static_cast<double>(static_cast<int64_t>(n) * plane);
  return scale(sum(multiply(constant(mask), miseg::log(probs))), inv);
}

void optimizer_step(net::NetworkParams& params, const std::map<std::string, NDArray>& grads,
                    AdamState& state, double lr) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (auto& [name, p] : params.arrays) {
    auto mit = state.m.find(name);
    if (mit == state.m.end()) {
      mit = state.m.emplace(name, NDArray(p.shape())).first;
      state.v.emplace(name, NDArray(p.shape()));
    }
    NDArray& m = mit->second;
    NDArray& v = state.v.at(name);
    require(m.shape() == p.shape(), "optimizer_step: moment shape mismatch for " + name);

    const auto git = grads.find(name);
    const double* g = nullptr;
    if (git != grads.end()) {
      require(git->second.shape() == p.shape(),
              "optimizer_step: gradient shape mismatch for " + name + ": " +
                  shape_str(git->second.shape()) + " vs " + shape_str(p.shape()));
      if (!git->second.all_finite()) {
        throw std::invalid_argument("optimizer_step: non-finite gradient for parameter " + name);
      }
      g = git->second.data();
    }

    NDArray updated = p.clone();
    double* pd = updated.mutable_data();
    double* md = m.mutable_data();
    double* vd = v.mutable_data();
    const int64_t size = p.size();
    for (int64_t i = 0; i < size; ++i) {
      const double gi = g ? g[i] : 0.0;
      md[i] = state.beta1 * md[i] + (1.0 - state.beta1) * gi;
      vd[i] = state.beta2 * vd[i] + (1.0 - state.beta2) * gi * gi;
      const double mhat = md[i] / bc1;
      const double vhat = vd[i] / bc2;
      pd[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
    p = updated;
  }
}

namespace {

struct UnsupTerms {
  DiffArray mi_global, mi_local, cons, entropy;
  bool has_mi = false, has_cons = false, has_entropy = false;
};

UnsupTerms unsupervised_terms(const net::BoundParams& student, const net::NetworkParams* teacher,
                              const net::SegNetConfig& netcfg, const TrainConfig& cfg,
                              const UnlabeledBatch& batch) {
  UnsupTerms terms;
  const Method m = cfg.method;
  const bool teacher_side = cfg.uses_teacher();
  if (teacher_side) {
    require(teacher != nullptr, "total_loss: method " + method_name(m) + " needs teacher parameters");
  }

  const DiffArray x = constant(batch.images);
  const bool want_mi = uses_mi(m);
  const bool want_cons = uses_consistency(m);
  const bool want_entropy = m == Method::entropy_min;

  // Forward of the untransformed image: the student's, or the teacher's
  // (gradient-free) for the EMA variants.
  std::optional<net::ForwardResult> fx;
  net::BoundParams teacher_bound;
  if (want_entropy || ((want_mi || want_cons) && !teacher_side)) {
    fx = net::forward(student, netcfg, x);
  } else if (teacher_side) {
    teacher_bound = net::bind(nullptr, *teacher);
    fx = net::forward(teacher_bound, netcfg, x);
  }
  const net::BoundParams& untransformed_params = teacher_side ? teacher_bound : student;

  if (want_entropy) {
    terms.entropy = infomax::entropy_min_loss(fx->probs);
    terms.has_entropy = true;
    return terms;
  }

  // Forward of the transformed image (always the gradient-carrying student).
  DiffArray xt = transforms::apply_batch(batch.tfs, x);
  net::ForwardResult ft = net::forward(student, netcfg, xt);

  if (want_mi) {
    std::vector<std::pair<ClusterAssignment, ClusterAssignment>> pairs;
    for (const std::string& site : netcfg.global_sites) {
      for (const net::ProjectorHead& head : net::heads_for_site(netcfg, site)) {
        ClusterAssignment from_x =
            net::project(untransformed_params, netcfg, head, site, fx->embeddings.at(site));
        ClusterAssignment from_t = net::project(student, netcfg, head, site, ft.embeddings.at(site));
        pairs.emplace_back(from_x, from_t);
      }
    }
    if (!pairs.empty()) {
      terms.mi_global = infomax::global_mi_loss(pairs, cfg.symmetrize_joint);
      terms.has_mi = true;
    }

    std::vector<LocalBlock> blocks;
    for (const std::string& site : netcfg.local_sites) {
      const int scale = netcfg.scale_of(site);
      std::vector<transforms::TransformSpec> scaled;
      scaled.reserve(batch.tfs.size());
      for (const auto& t : batch.tfs) scaled.push_back(transforms::for_featuremap(t, scale));
      DiffArray aligned = transforms::apply_batch(scaled, fx->embeddings.at(site));
      const DisplacementSet displacements = DisplacementSet::grid(cfg.radius_for(site));
      for (const net::ProjectorHead& head : net::heads_for_site(netcfg, site)) {
        ClusterAssignment fa = net::project(student, netcfg, head, site, ft.embeddings.at(site));
        ClusterAssignment fb = net::project(untransformed_params, netcfg, head, site, aligned);
        blocks.push_back(LocalBlock{fa, fb, displacements});
      }
    }
    if (!blocks.empty()) {
      terms.mi_local = infomax::local_mi_loss(blocks);
      terms.has_mi = true;
    }
  }

  if (want_cons) {
    DiffArray aligned = transforms::apply_batch(batch.tfs, fx->probs);
    terms.cons = infomax::consistency_loss(ft.probs, aligned);
    terms.has_cons = true;
  }
  return terms;
}

}  // namespace

DiffArray total_loss(Tape& tape, const net::BoundParams& student,
                     const net::NetworkParams* teacher, const net::SegNetConfig& netcfg,
                     const TrainConfig& cfg, const LabeledBatch* labeled,
                     const UnlabeledBatch* unlabeled, LossBreakdown* breakdown) {
  const Method m = cfg.method;
  const double w1 = uses_mi(m) ? cfg.lambda1 : 0.0;
  const double w2 = uses_mi(m) ? cfg.lambda2 : 0.0;
  const double w3 = (uses_consistency(m) || m == Method::entropy_min) ? cfg.lambda3 : 0.0;
  const bool needs_unlabeled =
      m != Method::full_sup && m != Method::partial_sup && (w1 > 0 || w2 > 0 || w3 > 0);
  require(!needs_unlabeled || unlabeled != nullptr,
          "total_loss: method " + method_name(m) + " with nonzero weights needs an unlabeled batch");
  require(labeled != nullptr || needs_unlabeled, "total_loss: no active loss terms");

  LossBreakdown bd;
  bd.w1 = w1;
  bd.w2 = w2;
  bd.w3 = w3;

  DiffArray total;
  bool first = true;
  auto accumulate = [&](const DiffArray& term, double weight) {
    DiffArray weighted = weight == 1.0 ? term : scale(term, weight);
    total = first ? weighted : add(total, weighted);
    first = false;
  };

  if (labeled != nullptr) {
    net::ForwardResult out = net::forward(student, netcfg, constant(labeled->images));
    DiffArray spv = supervised_loss(out.probs, labeled->labels);
    bd.spv = spv.scalar_value();
    accumulate(spv, 1.0);
  }

  (void)tape;
  if (needs_unlabeled) {
    UnsupTerms terms = unsupervised_terms(student, teacher, netcfg, cfg, *unlabeled);
    if (terms.has_mi && w1 > 0) {
      bd.mi_global = terms.mi_global.scalar_value();
      accumulate(terms.mi_global, w1);
    }
    if (terms.has_mi && w2 > 0) {
      bd.mi_local = terms.mi_local.scalar_value();
      accumulate(terms.mi_local, w2);
    }
    if (terms.has_cons && w3 > 0) {
      bd.cons = terms.cons.scalar_value();
      accumulate(terms.cons, w3);
    }
    if (terms.has_entropy && w3 > 0) {
      bd.entropy = terms.entropy.scalar_value();
      accumulate(terms.entropy, w3);
    }
  }

  bd.total = total.scalar_value();
  if (breakdown) *breakdown = bd;
  return total;
}

namespace {

LabeledBatch assemble_labeled(const std::vector<data::SegSample>& pool, int batch, Rng& pick,
                              Rng& aug, const data::AugmentPool& aug_pool) {
  const int h = pool[0].image.shape()[1];
  const int w = pool[0].image.shape()[2];
  LabeledBatch out;
  out.images = NDArray(Shape{batch, 1, h, w});
  out.labels.resize(static_cast<size_t>(batch) * h * w);
  for (int i = 0; i < batch; ++i) {
    const data::SegSample& raw = pool[pick.uniform_int(pool.size())];
    data::SegSample s = data::augment(raw, aug, aug_pool);
    std::copy(s.image.data(), s.image.data() + s.image.size(),
              out.images.mutable_data() + static_cast<int64_t>(i) * h * w);
    std::copy(s.label.begin(), s.label.end(), out.labels.begin() + static_cast<int64_t>(i) * h * w);
  }
  return out;
}

UnlabeledBatch assemble_unlabeled(const std::vector<data::SegSample>& pool, int batch, Rng& pick,
                                  Rng& aug, const data::AugmentPool& aug_pool, Rng& tf_rng,
                                  const transforms::TransformPool& tf_pool) {
  const int h = pool[0].image.shape()[1];
  const int w = pool[0].image.shape()[2];
  UnlabeledBatch out;
  out.images = NDArray(Shape{batch, 1, h, w});
  for (int i = 0; i < batch; ++i) {
    const data::SegSample& raw = pool[pick.uniform_int(pool.size())];
    data::SegSample s = data::augment(raw, aug, aug_pool);
    std::copy(s.image.data(), s.image.data() + s.image.size(),
              out.images.mutable_data() + static_cast<int64_t>(i) * h * w);
    out.tfs.push_back(transforms::sample_transform(tf_rng, tf_pool));
  }
  return out;
}

struct CheckpointBundle {
  net::NetworkParams params;
  AdamState adam;
  net::NetworkParams teacher;
  bool has_teacher = false;
  int epoch = -1;
};

void save_bundle(const std::string& path, const net::NetworkParams& params, const AdamState& adam,
                 const net::NetworkParams* teacher, int epoch, const std::string& method) {
  net::NetworkParams all;
  for (const auto& [name, a] : params.arrays) all.arrays.emplace(name, a);
  for (const auto& [name, a] : adam.m) all.arrays.emplace("adam/m/" + name, a);
  for (const auto& [name, a] : adam.v) all.arrays.emplace("adam/v/" + name, a);
  if (teacher) {
    for (const auto& [name, a] : teacher->arrays) all.arrays.emplace("teacher/" + name, a);
  }
  json meta;
  meta["epoch"] = epoch;
  meta["adam_step"] = adam.step;
  meta["method"] = method;
  net::save_checkpoint(path, all, meta.dump());
}

CheckpointBundle load_bundle(const std::string& path) {
  std::string meta_text;
  net::NetworkParams all = net::load_checkpoint(path, &meta_text);
  json meta = json::parse(meta_text);
  CheckpointBundle b;
  b.epoch = meta.value("epoch", -1);
  b.adam.step = meta.value("adam_step", int64_t{0});
  for (const auto& [name, a] : all.arrays) {
    if (name.rfind("adam/m/", 0) == 0) {
      b.adam.m.emplace(name.substr(7), a);
    } else if (name.rfind("adam/v/", 0) == 0) {
      b.adam.v.emplace(name.substr(7), a);
    } else if (name.rfind("teacher/", 0) == 0) {
      b.teacher.arrays.emplace(name.substr(8), a);
      b.has_teacher = true;
    } else {
      b.params.arrays.emplace(name, a);
    }
  }
  return b;
}

std::vector<uint8_t> predict_labels(const net::NetworkParams& params,
                                    const net::SegNetConfig& netcfg,
                                    const std::vector<const data::SegSample*>& slices) {
  const int n = static_cast<int>(slices.size());
  const int h = slices[0]->image.shape()[1];
  const int w = slices[0]->image.shape()[2];
  NDArray x(Shape{n, 1, h, w});
  for (int i = 0; i < n; ++i)
    std::copy(slices[static_cast<size_t>(i)]->image.data(),
              slices[static_cast<size_t>(i)]->image.data() + static_cast<int64_t>(h) * w,
              x.mutable_data() + static_cast<int64_t>(i) * h * w);
  net::ForwardResult out = net::forward(net::bind(nullptr, params), netcfg, constant(x));
  const int c = out.probs.shape()[1];
  std::vector<uint8_t> pred(static_cast<size_t>(n) * h * w);
  const double* p = out.probs.value.data();
  const int64_t plane = static_cast<int64_t>(h) * w;
  for (int i = 0; i < n; ++i) {
    for (int64_t j = 0; j < plane; ++j) {
      int best = 0;
      double best_v = p[(static_cast<int64_t>(i) * c) * plane + j];
      for (int cls = 1; cls < c; ++cls) {
        const double v = p[(static_cast<int64_t>(i) * c + cls) * plane + j];
        if (v > best_v) {
          best_v = v;
          best = cls;
        }
      }
      pred[static_cast<size_t>(i * plane + j)] = static_cast<uint8_t>(best);
    }
  }
  return pred;
}

}  // namespace

std::vector<double> validation_dsc(const net::NetworkParams& params,
                                   const net::SegNetConfig& netcfg,
                                   const std::vector<data::SegSample>& validation) {
  require(!validation.empty(), "validation split is empty");
  std::map<int, std::vector<const data::SegSample*>> volumes;
  for (const data::SegSample& s : validation) volumes[s.volume_id].push_back(&s);

  const int classes = netcfg.classes;
  std::vector<double> per_class(static_cast<size_t>(classes - 1), 0.0);
  for (const auto& [vol, slices] : volumes) {
    std::vector<uint8_t> pred = predict_labels(params, netcfg, slices);
    std::vector<uint8_t> gt;
    for (const data::SegSample* s : slices) gt.insert(gt.end(), s->label.begin(), s->label.end());
    for (int cls = 1; cls < classes; ++cls)
      per_class[static_cast<size_t>(cls - 1)] += data::dice_3d(pred, gt, cls, classes);
  }
  for (double& v : per_class) v /= static_cast<double>(volumes.size());
  return per_class;
}

TrainReport train(const net::SegNetConfig& netcfg, const TrainConfig& cfg,
                  const data::Splits& splits, const std::string& out_dir,
                  const std::string& config_echo, const std::string& resume_from) {
  netcfg.validate();
  cfg.validate();
  require(!splits.validation.empty(), "train: validation split is empty");
  const auto t0 = std::chrono::steady_clock::now();

  const Method m = cfg.method;
  const bool needs_unlabeled = m != Method::full_sup && m != Method::partial_sup;
  require(!needs_unlabeled || !splits.unlabeled.empty(),
          "train: method " + method_name(m) + " needs an unlabeled split");

  // full supervision trains on every image with its labels visible.
  std::vector<data::SegSample> labeled_pool = splits.labeled;
  if (m == Method::full_sup) {
    for (data::SegSample s : splits.unlabeled) {
      s.labels_hidden = false;
      labeled_pool.push_back(std::move(s));
    }
  }
  require(!labeled_pool.empty(), "train: labeled split is empty");
  for (const data::SegSample& s : labeled_pool)
    require(!s.labels_hidden, "train: hidden labels in the supervised pool");

  // The pretraining stage clusters every available image.
  std::vector<data::SegSample> pretrain_pool = splits.labeled;
  pretrain_pool.insert(pretrain_pool.end(), splits.unlabeled.begin(), splits.unlabeled.end());
  const int stage1_epochs =
      m == Method::pretrain_finetune
          ? (cfg.pretrain_epochs >= 0 ? std::min(cfg.pretrain_epochs, cfg.epochs) : cfg.epochs / 2)
          : 0;

  net::NetworkParams params;
  net::NetworkParams teacher;
  AdamState adam;
  int start_epoch = 0;
  if (!resume_from.empty()) {
    CheckpointBundle bundle = load_bundle(resume_from);
    params = std::move(bundle.params);
    adam = std::move(bundle.adam);
    if (bundle.has_teacher) teacher = std::move(bundle.teacher);
    start_epoch = bundle.epoch + 1;
    require(start_epoch >= 1 && start_epoch < cfg.epochs,
            "train: resume checkpoint already covers epoch " + std::to_string(bundle.epoch));
  } else {
    Rng init_rng = Rng::stream(cfg.seed, stream_tag(kStreamInit, 0, 0));
    params = net::init_params(init_rng, netcfg);
    if (cfg.uses_teacher()) teacher = params;
  }

  TrainReport report;
  report.config_echo = config_echo;
  if (!out_dir.empty()) std::filesystem::create_directories(out_dir);
  const std::string best_path = out_dir.empty() ? "" : out_dir + "/best.ckpt";
  const std::string last_path = out_dir.empty() ? "" : out_dir + "/last.ckpt";

  for (int epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    const bool pretrain_stage = m == Method::pretrain_finetune && epoch < stage1_epochs;
    const bool finetune_stage = m == Method::pretrain_finetune && !pretrain_stage;

    double sum_spv = 0, sum_gmi = 0, sum_lmi = 0, sum_cons = 0, sum_ent = 0;
    for (int iter = 0; iter < cfg.iters_per_epoch; ++iter) {
      Rng pick = Rng::stream(cfg.seed, stream_tag(kStreamBatch, epoch, iter));
      Rng aug = Rng::stream(cfg.seed, stream_tag(kStreamAugment, epoch, iter));
      Rng tf = Rng::stream(cfg.seed, stream_tag(kStreamTransform, epoch, iter));

      std::optional<LabeledBatch> labeled;
      std::optional<UnlabeledBatch> unlabeled;
      if (!pretrain_stage) {
        labeled = assemble_labeled(labeled_pool, cfg.labeled_batch, pick, aug, cfg.augment_pool);
      }
      if (needs_unlabeled && !finetune_stage) {
        const auto& pool = pretrain_stage ? pretrain_pool : splits.unlabeled;
        unlabeled = assemble_unlabeled(pool, cfg.unlabeled_batch, pick, aug, cfg.augment_pool, tf,
                                       cfg.mi_pool);
      }

      TrainConfig iter_cfg = cfg;
      if (finetune_stage) iter_cfg.method = Method::partial_sup;

      Tape tape;
      net::BoundParams bound = net::bind(&tape, params);
      LossBreakdown bd;
      auto diverged = [&](const std::string& what) {
        if (!last_path.empty()) {
          save_bundle(last_path, params, adam, cfg.uses_teacher() ? &teacher : nullptr, epoch - 1,
                      method_name(m));
        }
        return Divergence("training diverged at epoch " + std::to_string(epoch) + " iteration " +
                          std::to_string(iter) + " (" + what + "); last good checkpoint: " +
                          (last_path.empty() ? "none" : last_path));
      };
      DiffArray loss;
      try {
        loss = total_loss(tape, bound, cfg.uses_teacher() ? &teacher : nullptr, netcfg, iter_cfg,
                          labeled ? &*labeled : nullptr, unlabeled ? &*unlabeled : nullptr, &bd);
      } catch (const std::invalid_argument& e) {
        // Overflow inside an op surfaces as a non-finite-input rejection.
        if (std::string(e.what()).find("non-finite") != std::string::npos) throw diverged(e.what());
        throw;
      }
      if (!std::isfinite(bd.total)) throw diverged("loss " + std::to_string(bd.total));
      tape.backward(loss);

      std::map<std::string, NDArray> grads;
      for (const auto& [name, leaf] : bound.arrays) {
        if (const NDArray* g = tape.gradient(leaf)) grads.emplace(name, *g);
      }
      optimizer_step(params, grads, adam, lr);
      if (cfg.uses_teacher()) net::ema_update(teacher, params, cfg.ema_decay);

      sum_spv += bd.spv;
      sum_gmi += bd.mi_global;
      sum_lmi += bd.mi_local;
      sum_cons += bd.cons;
      sum_ent += bd.entropy;
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.lr = lr;
    const double inv = 1.0 / static_cast<double>(cfg.iters_per_epoch);
    stats.loss_spv = sum_spv * inv;
    stats.loss_mi_global = sum_gmi * inv;
    stats.loss_mi_local = sum_lmi * inv;
    stats.loss_cons = sum_cons * inv;
    stats.loss_entropy = sum_ent * inv;
    stats.dsc_per_class = validation_dsc(params, netcfg, splits.validation);
    double mean = 0.0;
    for (double v : stats.dsc_per_class) mean += v;
    stats.dsc_mean = mean / static_cast<double>(stats.dsc_per_class.size());
    report.epochs.push_back(stats);

    if (!last_path.empty()) {
      save_bundle(last_path, params, adam, cfg.uses_teacher() ? &teacher : nullptr, epoch,
                  method_name(m));
      report.last_checkpoint = last_path;
    }
    if (stats.dsc_mean > report.best_dsc || report.best_epoch < 0) {
      report.best_dsc = stats.dsc_mean;
      report.best_epoch = epoch;
      if (!best_path.empty()) {
        json meta;
        meta["epoch"] = epoch;
        meta["dsc_mean"] = stats.dsc_mean;
        meta["method"] = method_name(m);
        net::save_checkpoint(best_path, params, meta.dump());
        report.best_checkpoint = best_path;
      }
    }
  }

  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

std::string report_to_json(const TrainReport& report) {
  json j;
  j["config"] = json::parse(report.config_echo);
  j["best_epoch"] = report.best_epoch;
  j["best_dsc"] = report.best_dsc;
  j["best_checkpoint"] = report.best_checkpoint;
  j["last_checkpoint"] = report.last_checkpoint;
  j["wall_seconds"] = report.wall_seconds;
  json epochs = json::array();
  for (const EpochStats& e : report.epochs) {
    json row;
    row["epoch"] = e.epoch;
    row["lr"] = e.lr;
    row["loss_spv"] = e.loss_spv;
    row["loss_mi_global"] = e.loss_mi_global;
    row["loss_mi_local"] = e.loss_mi_local;
    row["loss_cons"] = e.loss_cons;
    row["loss_entropy"] = e.loss_entropy;
    row["dsc_per_class"] = e.dsc_per_class;
    row["dsc_mean"] = e.dsc_mean;
    epochs.push_back(row);
  }
  j["epochs"] = epochs;
  return j.dump(2);
}

std::string report_to_csv(const TrainReport& report) {
  std::string out = "epoch,lr,loss_spv,loss_mi_global,loss_mi_local,loss_cons,loss_entropy";
  const size_t classes = report.epochs.empty() ? 0 : report.epochs[0].dsc_per_class.size();
  for (size_t c = 0; c < classes; ++c) out += ",dsc_class" + std::to_string(c + 1);
  out += ",dsc_mean\n";
  for (const EpochStats& e : report.epochs) {
    out += std::to_string(e.epoch);
    out += "," + fmt(e.lr);
    out += "," + fmt(e.loss_spv);
    out += "," + fmt(e.loss_mi_global);
    out += "," + fmt(e.loss_mi_local);
    out += "," + fmt(e.loss_cons);
    out += "," + fmt(e.loss_entropy);
    for (double v : e.dsc_per_class) out += "," + fmt(v);
    out += "," + fmt(e.dsc_mean) + "\n";
  }
  return out;
}

ToyReport toy_cluster(const ToyConfig& cfg) {
  require(cfg.clusters >= 2, "toy.clusters must be >= 2");
  require(cfg.points >= cfg.clusters, "toy.points must be >= clusters");
  require(cfg.steps >= 0, "toy.steps must be >= 0");

  Rng rng = Rng::stream(cfg.seed, stream_tag(kStreamToy, 0, 0));
  NDArray x(Shape{cfg.points, 3});
  for (int64_t i = 0; i < x.size(); ++i) x[i] = rng.normal();

  net::NetworkParams head;
  {
    NDArray w(Shape{3, cfg.clusters});
    const double stddev = 1.0 / std::sqrt(3.0);
    for (int64_t i = 0; i < w.size(); ++i) w[i] = rng.normal(0.0, stddev);
    head.arrays.emplace("w", w);
    head.arrays.emplace("b", NDArray(Shape{cfg.clusters}));
  }
  AdamState adam;

  ToyReport report;
  report.points.assign(x.data(), x.data() + x.size());

  auto perturbed = [&](int step) {
    Rng noise = Rng::stream(cfg.seed, stream_tag(kStreamToy, 1, step));
    NDArray noisy = x.clone();
    for (int64_t i = 0; i < noisy.size(); ++i) noisy[i] += cfg.noise_std * noise.normal();
    return noisy;
  };
  auto assignments_of = [&](const net::BoundParams& bound, const NDArray& input) {
    return infomax::make_assignment(
        softmax(add(matmul(constant(input), bound.at("w")), bound.at("b")), 1));
  };

  for (int step = 0; step < cfg.steps; ++step) {
    NDArray noisy = perturbed(step);
    Tape tape;
    net::BoundParams bound = net::bind(&tape, head);
    auto joint = infomax::estimate_joint(assignments_of(bound, x), assignments_of(bound, noisy));
    DiffArray loss = scale(infomax::mutual_information(joint), -1.0);
    if (step % std::max(cfg.trajectory_stride, 1) == 0) {
      report.mi_trajectory.push_back(-loss.scalar_value());
    }
    tape.backward(loss);
    std::map<std::string, NDArray> grads;
    for (const auto& [name, leaf] : bound.arrays) {
      if (const NDArray* g = tape.gradient(leaf)) grads.emplace(name, *g);
    }
    optimizer_step(head, grads, adam, cfg.lr);
  }

  // Final evaluation with a fresh perturbation and frozen parameters.
  net::BoundParams frozen = net::bind(nullptr, head);
  auto a_final = assignments_of(frozen, x);
  auto joint = infomax::estimate_joint(a_final, assignments_of(frozen, perturbed(cfg.steps)));
  report.final_mi = infomax::mutual_information(joint).scalar_value();
  report.joint = joint.P.value;
  report.mi_trajectory.push_back(report.final_mi);

  report.assignments.resize(static_cast<size_t>(cfg.points));
  for (int i = 0; i < cfg.points; ++i) {
    int best = 0;
    double best_v = a_final.probs.value.at({i, 0});
    for (int k = 1; k < cfg.clusters; ++k) {
      const double v = a_final.probs.value.at({i, k});
      if (v > best_v) {
        best_v = v;
        best = k;
      }
    }
    report.assignments[static_cast<size_t>(i)] = best;
  }
  return report;
}

}  // namespace miseg::trainer
