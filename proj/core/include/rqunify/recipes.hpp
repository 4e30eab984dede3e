#pragma once

// Staged training driver for the vision tower, including the failed-recipe
// ablation modes. Stage A is the from-scratch stand-in for pretrained
// alignment weights (contrastive-only); Stage B freezes the text encoder
// and trains jointly, except where a mode says otherwise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "rqunify/data.hpp"
#include "rqunify/optim.hpp"
#include "rqunify/tower.hpp"

namespace rqunify {

struct ToyDataset {
  SyntheticSpec spec;  // kept for train-time re-rendering (augmentation)
  std::vector<Image> train_images, eval_images;
  std::vector<std::vector<int64_t>> train_caps, eval_caps;
  std::vector<int> train_labels, eval_labels;
};

inline ToyDataset make_toy_dataset(const SyntheticSpec& spec,
                                   const TextVocab& vocab) {
  auto split = make_split(spec);
  ToyDataset ds;
  ds.spec = spec;
  for (int label : split.train_labels) {
    auto a = Attributes::from_label(label);
    ds.train_images.push_back(render_image(spec, a));
    ds.train_caps.push_back(vocab.encode(caption_for(a)));
    ds.train_labels.push_back(label);
  }
  for (int label : split.eval_labels) {
    auto a = Attributes::from_label(label);
    ds.eval_images.push_back(render_image(spec, a));
    ds.eval_caps.push_back(vocab.encode(caption_for(a)));
    ds.eval_labels.push_back(label);
  }
  return ds;
}

struct RecipeConfig {
  int stage_a_steps = 600;
  int stage_b_steps = 600;
  int batch_size = 16;
  double lr = 1e-3;
  // the joint phase restarts the optimizer at this rate; stage-A moments and
  // step size belong to a different objective and destroy alignment if kept
  double joint_lr = 1e-4;
  // contrastive upweighting in the joint phase, countering encoder drift
  // under the (initially large) reconstruction gradients
  double joint_w_contra = 2.0;
  // decoupled weight decay; the eval split is disjoint in attribute
  // combinations, so unregularized training memorizes the 32 train pairs
  double weight_decay = 0.0;
  // train-time augmentation: re-render each batch image with a random
  // sub-grid offset and add pixel noise. Without it the encoder keys on
  // exact pixel patterns and eval retrieval saturates near 0.4.
  double aug_noise = 0.05;
  int aug_shift = 2;
  // cosine learning-rate decay within each phase, starting at this fraction
  // of the phase and bottoming out at a tenth of the phase's base rate
  double lr_decay_frac = 0.5;
  uint64_t seed = 0;
  int eval_every = 100;  // steps between metric records
  bool contrastive_enabled = true;  // off = pure reconstruction tower
  // resume point inside the joint phase; pretraining is skipped and model /
  // optimizer / codebook state must come from a checkpoint
  int resume_joint_from = 0;
};

// Per-step RNG derivation (splitmix64 over seed, phase, step). Randomness
// depends only on the step coordinates, never on how the run was sliced,
// which is what makes checkpoint resume bit-exact.
inline uint64_t step_seed(uint64_t seed, uint64_t phase_id, uint64_t step) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ull * (phase_id * 0x10001ull + step + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

struct RecipeMetrics {
  int step = 0;
  std::string phase;  // "stage_a", "stage_b", "joint"
  double contra = 0, recon = 0, commit = 0, total = 0;
  double retrieval = 0, recon_mse = 0;
};

struct RecipeResult {
  std::vector<RecipeMetrics> history;
  bool diverged = false;
  std::string divergence_note;
  double final_retrieval = 0;
  double final_recon_mse = 0;
};

namespace detail {

template <typename S>
void reinit_params_with_prefix(ParamSetT<S>& dst, ParamSetT<S>& src,
                               const std::string& prefix) {
  for (size_t i = 0; i < dst.size(); ++i)
    if (dst.names[i].rfind(prefix, 0) == 0) {
      if (src.names[i] != dst.names[i])
        throw ContractError("parameter registries diverged");
      dst.tensors[i].data() = src.tensors[i].data();
    }
}

}  // namespace detail

// Warm start the codebook from current encoder features before quantized
// training begins; a cold random codebook is degenerate at this scale and
// collapses every image to the same reconstruction.
template <typename S>
void warm_start_codebook(TowerT<S>& tower, const ToyDataset& ds,
                         const RecipeConfig& cfg) {
  std::mt19937_64 rng(step_seed(cfg.seed, 4, 0));
  std::vector<std::vector<S>> pool;
  const int64_t C = tower.config().embed_dim;
  for (const auto& img : ds.train_images) {
    auto feats = tower.encode_image(img);
    for (int64_t p = 0; p < tower.config().patches(); ++p)
      pool.emplace_back(feats.data().begin() + p * C,
                        feats.data().begin() + (p + 1) * C);
  }
  tower.codebook().init_from_data(pool, rng);
}

// One gradient step on a batch; returns false on numeric divergence.
template <typename S>
bool tower_train_step(TowerT<S>& tower, AdamT<S>& opt,
                      const std::vector<Image>& images,
                      const std::vector<std::vector<int64_t>>& captions,
                      bool use_quantizer, RecipeMetrics* metrics,
                      std::mt19937_64& rng) {
  tower.params().zero_grad();
  auto res = tower.tower_loss(images, captions, use_quantizer);
  double total = res.losses.total.item();
  if (metrics) {
    metrics->contra = res.losses.contra.item();
    metrics->recon = res.losses.recon.item();
    metrics->commit = res.losses.commit.item();
    metrics->total = total;
  }
  if (!std::isfinite(total)) return false;
  backward(res.losses.total);
  opt.step(tower.params().tensors, &tower.params().trainable);
  if (use_quantizer) {
    tower.codebook().ema_update(res.assignments);
    // once per "epoch" (approximated by a step interval), reseed dead codes
    if (opt.step_count() % 50 == 0)
      tower.codebook().reseed_dead_codes(res.encoder_outputs, rng);
  }
  return true;
}

// Runs one training phase; appends metric records and returns false on
// divergence (recorded, not thrown — failed recipes may legitimately blow up).
template <typename S>
bool run_phase(TowerT<S>& tower, AdamT<S>& opt, const ToyDataset& ds,
               const RecipeConfig& cfg, int steps, bool use_quantizer,
               const std::string& phase, uint64_t phase_id,
               RecipeResult& result,
               const std::function<void(const RecipeMetrics&)>& on_metrics,
               int start_step = 0) {
  const int64_t N = int64_t(ds.train_images.size());
  const double base_lr = opt.config().lr;
  const double base_wd = opt.config().weight_decay;
  const int decay_start = int(cfg.lr_decay_frac * steps);
  for (int step = start_step; step < steps; ++step) {
    if (cfg.lr_decay_frac > 0 && cfg.lr_decay_frac < 1 &&
        step >= decay_start) {
      // pure function of the step index, so resume reproduces the schedule
      double f = double(step - decay_start) / double(steps - decay_start);
      double lr = 0.1 * base_lr +
                  0.9 * base_lr * 0.5 * (1.0 + std::cos(f * 3.14159265358979));
      opt.set_hyper(lr, base_wd);
    }
    std::mt19937_64 rng(step_seed(cfg.seed, phase_id, uint64_t(step)));
    std::vector<Image> imgs;
    std::vector<std::vector<int64_t>> caps;
    std::uniform_int_distribution<int64_t> pick(0, N - 1);
    // sample without replacement within the batch so InfoNCE negatives
    // are guaranteed distinct
    std::vector<int64_t> chosen;
    while (int64_t(chosen.size()) < std::min<int64_t>(cfg.batch_size, N)) {
      int64_t i = pick(rng);
      if (std::find(chosen.begin(), chosen.end(), i) == chosen.end())
        chosen.push_back(i);
    }
    std::uniform_int_distribution<int> off(-cfg.aug_shift, cfg.aug_shift);
    std::normal_distribution<float> jitter(0.f, float(cfg.aug_noise));
    for (int64_t i : chosen) {
      Image img =
          cfg.aug_shift > 0
              ? render_image(ds.spec,
                             Attributes::from_label(ds.train_labels[size_t(i)]),
                             off(rng), off(rng))
              : ds.train_images[size_t(i)];
      if (cfg.aug_noise > 0)
        for (auto& v : img.rgb)
          v = std::clamp(v + jitter(rng), 0.f, 1.f);
      imgs.push_back(std::move(img));
      caps.push_back(ds.train_caps[size_t(i)]);
    }
    RecipeMetrics m;
    m.phase = phase;
    bool ok = tower_train_step(tower, opt, imgs, caps, use_quantizer,
                               &m, rng);
    if (!ok) {
      result.diverged = true;
      result.divergence_note = "NaN/Inf loss in " + phase + " at step " +
                               std::to_string(step);
      return false;
    }
    if ((step + 1) % cfg.eval_every == 0 || step + 1 == steps) {
      m.step = step + 1;
      m.retrieval = tower.retrieval_eval(ds.eval_images, ds.eval_caps,
                                         use_quantizer);
      m.recon_mse = use_quantizer ? tower.mean_recon_mse(ds.eval_images) : 0.0;
      result.history.push_back(m);
      if (on_metrics) on_metrics(m);
    }
  }
  return true;
}

template <typename S>
RecipeResult run_recipe(
    RecipeMode mode, TowerT<S>& tower, AdamT<S>& opt, const ToyDataset& ds,
    const RecipeConfig& cfg,
    const std::function<void(const RecipeMetrics&)>& on_metrics = {});

// Staged recipe driver. The tower passed in must be freshly constructed
// with the run's seed; the mode decides initialization and freezing.
template <typename S>
RecipeResult run_recipe(
    RecipeMode mode, TowerT<S>& tower, const ToyDataset& ds,
    const RecipeConfig& cfg,
    const std::function<void(const RecipeMetrics&)>& on_metrics = {}) {
  AdamT<S> opt({.lr = cfg.lr, .weight_decay = cfg.weight_decay});
  return run_recipe(mode, tower, opt, ds, cfg, on_metrics);
}

// Variant with a caller-owned optimizer, required for checkpoint resume.
template <typename S>
RecipeResult run_recipe(
    RecipeMode mode, TowerT<S>& tower, AdamT<S>& opt, const ToyDataset& ds,
    const RecipeConfig& cfg,
    const std::function<void(const RecipeMetrics&)>& on_metrics) {
  RecipeResult result;

  const bool contra = cfg.contrastive_enabled;
  const bool resuming = cfg.resume_joint_from > 0;
  auto stage_a_contrastive = [&](int steps) {
    return run_phase(tower, opt, ds, cfg, steps, /*use_quantizer=*/false,
                     "stage_a", 1, result, on_metrics);
  };

  bool ok = true;
  bool cb_warmed = false;
  // when resuming, the pretraining outcome already lives in the checkpoint
  if (!resuming) switch (mode) {
    case RecipeMode::Final:
    case RecipeMode::Failed3_FrozenVisionEnc:
    case RecipeMode::Failed4_TrainableTextEnc: {
      if (contra) ok = stage_a_contrastive(cfg.stage_a_steps);
      break;
    }
    case RecipeMode::Failed1_TextCLIPOnly: {
      // alignment pretraining happens, but only the text side keeps it:
      // the vision encoder is re-randomized before the joint stage
      if (contra) ok = stage_a_contrastive(cfg.stage_a_steps);
      if (ok) {
        std::mt19937_64 fresh_rng(cfg.seed + 17);
        TowerT<S> fresh(tower.config(), tower.codebook().config(), fresh_rng);
        detail::reinit_params_with_prefix(tower.params(), fresh.params(),
                                          "vision_enc.");
        detail::reinit_params_with_prefix(tower.params(), fresh.params(),
                                          "proj.img");
      }
      break;
    }
    case RecipeMode::Failed2_RQVAEInit: {
      // reconstruction-only pretraining of encoder/decoder + quantizer
      double w = tower.config().w_contra;
      tower.mutable_config().w_contra = 0.0;
      warm_start_codebook(tower, ds, cfg);
      cb_warmed = true;
      ok = run_phase(tower, opt, ds, cfg, cfg.stage_a_steps, true,
                     "stage_a", 1, result, on_metrics);
      tower.mutable_config().w_contra = w;
      break;
    }
    case RecipeMode::JointFromScratch:
      break;  // no pretraining at all
  }
  if (!ok) return result;

  // Joint phase
  std::string phase = "stage_b";
  int steps = cfg.stage_b_steps;
  switch (mode) {
    case RecipeMode::Final:
    case RecipeMode::Failed1_TextCLIPOnly:
      tower.set_stage(RecipeStage::JointFrozenText);
      break;
    case RecipeMode::Failed3_FrozenVisionEnc:
      tower.set_stage(RecipeStage::JointFrozenText);
      tower.params().set_trainable_prefix("vision_enc.", false);
      break;
    case RecipeMode::Failed2_RQVAEInit:
    case RecipeMode::Failed4_TrainableTextEnc:
      // text encoder stays trainable in the joint phase
      break;
    case RecipeMode::JointFromScratch:
      phase = "joint";
      steps = cfg.stage_a_steps + cfg.stage_b_steps;  // identical budget
      break;
  }
  if (cfg.contrastive_enabled)
    tower.mutable_config().w_contra *= cfg.joint_w_contra;
  else
    tower.mutable_config().w_contra = 0.0;
  if (!resuming && !cb_warmed) warm_start_codebook(tower, ds, cfg);
  if (resuming)
    opt.set_hyper(cfg.joint_lr, cfg.weight_decay);
  else
    opt.reset(cfg.joint_lr, cfg.weight_decay);
  ok = run_phase(tower, opt, ds, cfg, steps, /*use_quantizer=*/true,
                 phase, 2, result, on_metrics, cfg.resume_joint_from);
  if (!result.history.empty()) {
    result.final_retrieval = tower.retrieval_eval(ds.eval_images, ds.eval_caps,
                                                  true);
    result.final_recon_mse = tower.mean_recon_mse(ds.eval_images);
  }
  return result;
}

}  // namespace rqunify
