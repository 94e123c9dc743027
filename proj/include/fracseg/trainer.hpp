#pragma once

// Training loop: Adam with cosine-annealed learning rate, foreground-biased
// patch batching, per-case signed distance fields, checkpointing, and
// tiled inference.

#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fracseg/common.hpp"
#include "fracseg/losses.hpp"
#include "fracseg/metrics.hpp"
#include "fracseg/model.hpp"
#include "fracseg/preprocess.hpp"
#include "fracseg/tensor.hpp"
#include "fracseg/volume.hpp"

namespace fracseg {

enum class LossMode { kDiceOnly, kSurfaceOnly, kCombined };

inline std::string to_string(LossMode m) {
  switch (m) {
    case LossMode::kDiceOnly: return "dice-only";
    case LossMode::kSurfaceOnly: return "surface-only";
    case LossMode::kCombined: return "combined";
  }
  return "?";
}

inline LossMode loss_mode_from_string(const std::string& s) {
  if (s == "dice-only") return LossMode::kDiceOnly;
  if (s == "surface-only") return LossMode::kSurfaceOnly;
  if (s == "combined") return LossMode::kCombined;
  throw DataError("unknown loss mode '" + s + "' (dice-only|surface-only|combined)");
}

struct TrainConfig {
  float initial_lr = 0.01f;
  float beta1 = 0.5f;
  float beta2 = 0.999f;
  int batch_size = 2;
  int max_epochs = 200;
  int steps_per_epoch = 4;
  float lambda = 1.0f;
  LossMode loss_mode = LossMode::kCombined;
  uint64_t seed = 1;
  int patch_size = 32;
  int validate_every = 10;  // epochs; 0 disables validation

  void validate() const {
    if (!(initial_lr > 0)) throw DataError("train config: lr must be > 0");
    if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1)
      throw DataError("train config: betas must be in [0,1)");
    if (batch_size < 1) throw DataError("train config: batch_size must be >= 1");
    if (max_epochs < 1 || steps_per_epoch < 1)
      throw DataError("train config: epochs/steps must be >= 1");
    if (patch_size % 8 != 0)
      throw DataError("train config: patch_size must be divisible by 8");
  }
};

// lr = lr_min + 0.5*(lr0 - lr_min)*(1 + cos(pi*epoch/max_epochs))
inline double cosine_lr(int epoch, int max_epochs, double lr0, double lr_min = 0.0) {
  if (epoch < 0 || epoch > max_epochs) throw DataError("cosine_lr: epoch out of range");
  return lr_min + 0.5 * (lr0 - lr_min) *
                      (1.0 + std::cos(3.14159265358979323846 * epoch / max_epochs));
}

struct AdamState {
  std::vector<std::vector<float>> m, v;
  int64_t t = 0;
};

// Bias-corrected Adam over a parameter registry.
inline void adam_step(ParamRegistry& params, AdamState& state, double lr,
                      double beta1, double beta2, double eps = 1e-8) {
  auto& items = params.items();
  if (state.m.empty()) {
    state.m.resize(items.size());
    state.v.resize(items.size());
    for (size_t i = 0; i < items.size(); ++i) {
      state.m[i].assign(static_cast<size_t>(items[i].second.size()), 0.0f);
      state.v[i].assign(static_cast<size_t>(items[i].second.size()), 0.0f);
    }
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (size_t i = 0; i < items.size(); ++i) {
    Tensor& p = items[i].second;
    if (!p.has_grad()) continue;
    float* w = p.value().data();
    const float* g = p.grad().data();
    float* m = state.m[i].data();
    float* v = state.v[i].data();
    for (int64_t j = 0; j < p.size(); ++j) {
      m[j] = static_cast<float>(beta1 * m[j] + (1.0 - beta1) * g[j]);
      v[j] = static_cast<float>(beta2 * v[j] + (1.0 - beta2) * static_cast<double>(g[j]) * g[j]);
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      w[j] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
    }
  }
}

struct TrainingCase {
  std::string id;
  Volume image;      // normalized intensities
  LabelVolume label;
};

struct RunRecord {
  std::vector<double> epoch_losses;
  std::vector<double> lr_trace;
  std::vector<std::pair<int, double>> val_dsc;  // (epoch, mean dsc)
  int best_epoch = -1;
  double best_val_dsc = -1.0;
  std::string best_checkpoint, final_checkpoint;
  std::map<std::string, std::string> config_echo;

  void write_loss_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw DataError("run record: cannot open " + path);
    os << "epoch,loss,lr\n";
    os.precision(10);
    for (size_t e = 0; e < epoch_losses.size(); ++e)
      os << (e + 1) << "," << epoch_losses[e] << "," << lr_trace[e] << "\n";
  }

  void write_manifest(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw DataError("run record: cannot open " + path);
    os << "RUN1\n";
    for (const auto& [k, v] : config_echo) os << "cfg " << k << " " << v << "\n";
    os << "best_epoch " << best_epoch << "\n";
    os.precision(10);
    os << "best_val_dsc " << best_val_dsc << "\n";
    os << "best_checkpoint " << best_checkpoint << "\n";
    os << "final_checkpoint " << final_checkpoint << "\n";
    for (const auto& [e, d] : val_dsc) os << "val " << e << " " << d << "\n";
  }
};

inline LabelVolume infer(Network& net, const Volume& volume, int patch_size,
                         int overlap = 0) {
  const auto origins = tile_origins(volume.extents, patch_size, overlap);
  std::vector<Tensor> fg;
  fg.reserve(origins.size());
  for (const auto& o : origins) {
    Tensor patch = extract_patch(volume, o, patch_size);
    Tape tape;
    tape.set_recording(false);
    Tensor prob = net.forward(tape, patch, BnMode::kEval);
    // keep the foreground channel
    Tensor f({1, 1, patch_size, patch_size, patch_size});
    const int64_t sp = static_cast<int64_t>(patch_size) * patch_size * patch_size;
    std::copy(prob.value().begin() + sp, prob.value().begin() + 2 * sp, f.value().begin());
    fg.push_back(std::move(f));
  }
  return stitch_patches(fg, origins, volume.extents, volume.spacing);
}

namespace detail {

inline std::map<std::string, std::string> echo_config(const TrainConfig& cfg) {
  std::map<std::string, std::string> m;
  auto put = [&](const std::string& k, auto v) {
    std::ostringstream os;
    os.precision(10);
    os << v;
    m[k] = os.str();
  };
  put("initial_lr", cfg.initial_lr);
  put("beta1", cfg.beta1);
  put("beta2", cfg.beta2);
  put("batch_size", cfg.batch_size);
  put("max_epochs", cfg.max_epochs);
  put("steps_per_epoch", cfg.steps_per_epoch);
  put("lambda", cfg.lambda);
  m["loss_mode"] = to_string(cfg.loss_mode);
  put("seed", cfg.seed);
  put("patch_size", cfg.patch_size);
  return m;
}

// The surface term must see distances of the true object geometry, so the
// field is computed once per case on the full label and cropped with the
// patch; recomputing it on the crop would turn patch faces into fake surface.
inline SignedDistanceField crop_sdf(const SignedDistanceField& sdf, const PatchOrigin& o,
                                    int p) {
  SignedDistanceField out;
  out.extents[0] = out.extents[1] = out.extents[2] = p;
  for (int a = 0; a < 3; ++a) out.spacing[a] = sdf.spacing[a];
  out.phi.resize(static_cast<size_t>(p) * p * p);
  size_t i = 0;
  for (int d = 0; d < p; ++d)
    for (int h = 0; h < p; ++h)
      for (int w = 0; w < p; ++w, ++i)
        out.phi[i] = sdf.phi[static_cast<size_t>(sdf.index(o.d + d, o.h + h, o.w + w))];
  return out;
}

}  // namespace detail

// Deterministic given (seed, config, dataset). Scheduler steps per epoch.
// Non-finite losses abort with a diagnostic snapshot.
inline RunRecord train(Network& net, const std::vector<TrainingCase>& train_set,
                       const std::vector<TrainingCase>& val_set, const TrainConfig& cfg,
                       const std::string& out_dir, bool verbose = false) {
  cfg.validate();
  if (train_set.empty()) throw DataError("train: empty training set");
  LossConfig loss_cfg;
  loss_cfg.lambda = cfg.lambda;
  RunRecord rec;
  rec.config_echo = detail::echo_config(cfg);
  AdamState adam;
  Rng rng(cfg.seed);
  const std::string best_path = out_dir + "/best.ckpt";
  const std::string final_path = out_dir + "/final.ckpt";

  // distance fields on the full labels, shared by every patch of a case;
  // degenerate labels keep a placeholder that is never read (their patches
  // are all degenerate too and get skipped below)
  std::vector<SignedDistanceField> case_sdfs;
  if (cfg.loss_mode != LossMode::kDiceOnly) {
    case_sdfs.reserve(train_set.size());
    for (const auto& t : train_set) {
      const int64_t fgc = t.label.foreground_count();
      case_sdfs.push_back(fgc == 0 || fgc == t.label.voxels() ? SignedDistanceField{}
                                                              : signed_distance(t.label));
    }
  }

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const double lr = cosine_lr(epoch, cfg.max_epochs, cfg.initial_lr);
    double epoch_loss = 0.0;
    int epoch_samples = 0;
    for (int step = 0; step < cfg.steps_per_epoch; ++step) {
      Tape tape;
      net.zero_grads();
      Tensor batch_loss;
      int batched = 0;
      for (int b = 0; b < cfg.batch_size; ++b) {
        const size_t ci = static_cast<size_t>(
            uniform_index(rng, static_cast<int64_t>(train_set.size())));
        const auto& tc = train_set[ci];
        Patch patch = sample_training_patch(tc.image, tc.label, cfg.patch_size, rng);
        // an all-background or all-foreground patch is still usable as long as
        // the case itself has a surface to measure distances from
        if (cfg.loss_mode != LossMode::kDiceOnly && case_sdfs[ci].phi.empty()) {
          if (verbose)
            std::cerr << "warn: skipping patch of surface-less case " << tc.id << "\n";
          continue;
        }
        Tensor prob = net.forward(tape, patch.image, BnMode::kTrain);
        Tensor loss;
        switch (cfg.loss_mode) {
          case LossMode::kDiceOnly:
            loss = dice_loss(tape, prob, patch.label, loss_cfg);
            break;
          case LossMode::kSurfaceOnly:
            loss = surface_loss(
                tape, prob, detail::crop_sdf(case_sdfs[ci], patch.origin, cfg.patch_size),
                loss_cfg);
            break;
          case LossMode::kCombined:
            loss = combined_loss(
                tape, prob, patch.label,
                detail::crop_sdf(case_sdfs[ci], patch.origin, cfg.patch_size), loss_cfg);
            break;
        }
        batch_loss = batched == 0 ? loss : add(tape, batch_loss, loss);
        ++batched;
      }
      if (batched == 0) continue;
      Tensor mean_loss = scale(tape, batch_loss, 1.0f / static_cast<float>(batched));
      if (!std::isfinite(mean_loss.item())) {
        net.save_checkpoint(out_dir + "/diverged.ckpt");
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch + 1) +
                           "; diagnostic snapshot written to " + out_dir + "/diverged.ckpt");
      }
      tape.backward(mean_loss);
      adam_step(net.params(), adam, lr, cfg.beta1, cfg.beta2);
      epoch_loss += mean_loss.item();
      ++epoch_samples;
    }
    rec.epoch_losses.push_back(epoch_samples ? epoch_loss / epoch_samples : 0.0);
    rec.lr_trace.push_back(lr);

    const bool last = epoch + 1 == cfg.max_epochs;
    if (!val_set.empty() && cfg.validate_every > 0 &&
        ((epoch + 1) % cfg.validate_every == 0 || last)) {
      std::vector<CaseMetrics> cases;
      for (const auto& vc : val_set) {
        LabelVolume pred = infer(net, vc.image, cfg.patch_size);
        cases.push_back(evaluate_case(vc.id, pred, vc.label));
      }
      const auto report = aggregate(std::move(cases));
      rec.val_dsc.emplace_back(epoch + 1, report.mean_dsc);
      if (report.mean_dsc > rec.best_val_dsc) {
        rec.best_val_dsc = report.mean_dsc;
        rec.best_epoch = epoch + 1;
        net.save_checkpoint(best_path);
        rec.best_checkpoint = best_path;
      }
      if (verbose)
        std::cerr << "epoch " << (epoch + 1) << " loss " << rec.epoch_losses.back()
                  << " val_dsc " << report.mean_dsc << "\n";
    } else if (verbose && (epoch + 1) % 10 == 0) {
      std::cerr << "epoch " << (epoch + 1) << " loss " << rec.epoch_losses.back() << "\n";
    }
  }
  net.save_checkpoint(final_path);
  rec.final_checkpoint = final_path;
  if (rec.best_checkpoint.empty()) {
    rec.best_checkpoint = final_path;
    rec.best_epoch = cfg.max_epochs;
  }
  return rec;
}

}  // namespace fracseg
