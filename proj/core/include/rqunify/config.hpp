#pragma once

// Flat-JSON experiment configuration. Every key is optional with a default;
// unknown keys are rejected so typos cannot silently change a run.

#include <cstdint>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "rqunify/data.hpp"
#include "rqunify/errors.hpp"
#include "rqunify/generator.hpp"
#include "rqunify/quantizer.hpp"
#include "rqunify/recipes.hpp"
#include "rqunify/tower.hpp"

namespace rqunify {

struct ExperimentConfig {
  // data
  int64_t image_size = 32;
  uint64_t data_seed = 1;

  // tower
  int64_t patch_size = 4;
  int64_t embed_dim = 64;
  int64_t tower_heads = 4;
  // shallow stacks: at 64 train pairs, extra encoder depth only buys
  // memorization, and a zero-layer text stack (bag of token embeddings)
  // makes caption embeddings compositional by construction
  int64_t enc_layers = 1;
  int64_t dec_layers = 2;
  int64_t text_layers = 0;
  int64_t proj_dim = 32;
  double w_contra = 1.0;
  double w_recon = 1.0;
  bool sigmoid_contrastive = false;
  bool contrastive_enabled = true;

  // quantizer
  int64_t codebook_size = 64;
  int64_t depth = 4;
  double commit_beta = 0.25;
  double ema_decay = 0.99;

  // recipe
  std::string recipe = "final";
  int64_t stage_a_steps = 600;
  int64_t stage_b_steps = 600;
  int64_t tower_batch = 16;
  double tower_lr = 1e-3;
  double tower_joint_lr = 1e-4;
  double tower_joint_w_contra = 2.0;
  double tower_weight_decay = 0.0;
  double tower_lr_decay_frac = 0.4;
  double tower_aug_noise = 0.05;
  int64_t tower_aug_shift = 2;
  // contrastive temperature at init; the tower default (0.07) collapses
  // under augmented training at this scale, so the driver starts softer
  double tower_temperature = 0.5;
  bool stage_b_trainable_text = false;

  // backbone
  int64_t bb_layers = 4;
  int64_t bb_heads = 4;
  int64_t bb_model_dim = 128;
  int64_t bb_context_len = 512;
  int64_t depth_layers = 2;
  int64_t depth_heads = 4;

  // multimodal training
  int64_t mm_steps = 2000;
  int64_t mm_batch = 8;
  double mm_lr = 1e-3;
  double condition_dropout = 0.1;
  double mix_image_text = 3, mix_text_image = 3, mix_text_video = 1,
         mix_interleaved = 3;

  // sampling
  double cfg_scale = 3.0;
  double temperature = 1.0;
  int64_t top_k = 64;

  // run
  uint64_t seed = 0;
  int64_t eval_every = 100;
  bool deterministic = false;
  std::string out_dir = "out";

  void validate() const {
    if (image_size < 8 || image_size % patch_size != 0)
      throw ConfigError("image_size must be >= 8 and divisible by patch_size");
    if (codebook_size < 2 || depth < 1)
      throw ConfigError("codebook_size must be >= 2 and depth >= 1");
    if (tower_lr <= 0 || tower_joint_lr <= 0 || mm_lr <= 0)
      throw ConfigError("learning rates must be positive");
    if (stage_a_steps < 0 || stage_b_steps < 0 || mm_steps < 0)
      throw ConfigError("step counts must be non-negative");
    if (tower_weight_decay < 0 || tower_aug_noise < 0 || tower_aug_shift < 0)
      throw ConfigError("regularization settings must be non-negative");
    if (tower_joint_w_contra <= 0)
      throw ConfigError("tower_joint_w_contra must be positive");
    if (tower_lr_decay_frac < 0 || tower_lr_decay_frac > 1)
      throw ConfigError("tower_lr_decay_frac must be in [0, 1]");
    if (tower_temperature <= 0)
      throw ConfigError("tower_temperature must be positive");
    if (tower_batch < 2)
      throw ConfigError("tower_batch must be >= 2 (contrastive loss needs negatives)");
    if (mm_batch < 1) throw ConfigError("mm_batch must be >= 1");
    if (condition_dropout < 0 || condition_dropout > 1)
      throw ConfigError("condition_dropout must be in [0, 1]");
    if (mix_image_text < 0 || mix_text_image < 0 || mix_text_video < 0 ||
        mix_interleaved < 0)
      throw ConfigError("mixture weights must be non-negative");
    if (mix_image_text + mix_text_image + mix_text_video + mix_interleaved <=
        0)
      throw ConfigError("mixture weights must not all be zero");
    if (cfg_scale < 0) throw ConfigError("cfg_scale must be >= 0");
    if (temperature < 0) throw ConfigError("temperature must be >= 0");
    if (top_k < 1) throw ConfigError("top_k must be >= 1");
    RecipeMode mode = recipe_from_name(recipe);
    // a trainable text encoder in the joint stage is an ablation; it must be
    // requested through the matching recipe, never as a side effect
    bool recipe_trains_text = mode == RecipeMode::Failed2_RQVAEInit ||
                              mode == RecipeMode::Failed4_TrainableTextEnc;
    if (stage_b_trainable_text && !recipe_trains_text)
      throw ConfigError(
          "stage_b_trainable_text requires an ablation recipe that trains "
          "the text encoder (failed2_rqvae_init or "
          "failed4_trainable_text_enc)");
  }

  static ExperimentConfig from_json(const nlohmann::json& j);
  static ExperimentConfig from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file: " + path);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
    return from_json(j);
  }

  nlohmann::json to_json() const;
  std::string canonical() const { return to_json().dump(); }

  // derived module configurations
  TowerConfig tower_config(int64_t text_vocab) const {
    TowerConfig t;
    t.image_size = image_size;
    t.patch_size = patch_size;
    t.embed_dim = embed_dim;
    t.heads = tower_heads;
    t.enc_layers = enc_layers;
    t.dec_layers = dec_layers;
    t.text_layers = text_layers;
    t.text_vocab = text_vocab;
    t.proj_dim = proj_dim;
    t.w_contra = contrastive_enabled ? w_contra : 0.0;
    t.w_recon = w_recon;
    t.sigmoid_contrastive = sigmoid_contrastive;
    t.temperature_init = tower_temperature;
    return t;
  }

  QuantizerConfig quantizer_config() const {
    QuantizerConfig q;
    q.codebook_size = codebook_size;
    q.dim = embed_dim;
    q.depth = depth;
    q.beta = commit_beta;
    q.ema_decay = ema_decay;
    return q;
  }

  BackboneConfig backbone_config(int64_t unified_vocab) const {
    BackboneConfig b;
    b.layers = bb_layers;
    b.heads = bb_heads;
    b.model_dim = bb_model_dim;
    b.context_len = bb_context_len;
    b.vocab = unified_vocab;
    b.code_dim = embed_dim;
    b.codebook_size = codebook_size;
    b.depth = depth;
    b.depth_layers = depth_layers;
    b.depth_heads = depth_heads;
    return b;
  }

  RecipeConfig recipe_config() const {
    RecipeConfig r;
    r.stage_a_steps = int(stage_a_steps);
    r.stage_b_steps = int(stage_b_steps);
    r.batch_size = int(tower_batch);
    r.lr = tower_lr;
    r.joint_lr = tower_joint_lr;
    r.joint_w_contra = tower_joint_w_contra;
    r.weight_decay = tower_weight_decay;
    r.lr_decay_frac = tower_lr_decay_frac;
    r.aug_noise = tower_aug_noise;
    r.aug_shift = int(tower_aug_shift);
    r.seed = seed;
    r.eval_every = int(eval_every);
    r.contrastive_enabled = contrastive_enabled;
    return r;
  }

  SyntheticSpec synthetic_spec() const {
    SyntheticSpec s;
    s.image_size = image_size;
    s.seed = data_seed;
    return s;
  }
};

namespace detail {

#define RQ_CFG_FIELDS(X)                                                   \
  X(image_size) X(data_seed) X(patch_size) X(embed_dim) X(tower_heads)     \
  X(enc_layers) X(dec_layers) X(text_layers) X(proj_dim) X(w_contra)       \
  X(w_recon) X(sigmoid_contrastive) X(contrastive_enabled)                 \
  X(codebook_size) X(depth) X(commit_beta) X(ema_decay) X(recipe)          \
  X(stage_a_steps) X(stage_b_steps) X(tower_batch) X(tower_lr)             \
  X(tower_joint_lr) X(tower_joint_w_contra) X(tower_weight_decay)         \
  X(tower_lr_decay_frac)                                                  \
  X(tower_aug_noise) X(tower_aug_shift) X(tower_temperature)              \
  X(stage_b_trainable_text) X(bb_layers) X(bb_heads) X(bb_model_dim)       \
  X(bb_context_len) X(depth_layers) X(depth_heads) X(mm_steps) X(mm_batch) \
  X(mm_lr) X(condition_dropout) X(mix_image_text) X(mix_text_image)        \
  X(mix_text_video) X(mix_interleaved) X(cfg_scale) X(temperature)         \
  X(top_k) X(seed) X(eval_every) X(deterministic) X(out_dir)

}  // namespace detail

inline ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config root must be a JSON object");
  static const std::set<std::string> known = [] {
    std::set<std::string> k;
#define RQ_CFG_NAME(f) k.insert(#f);
    RQ_CFG_FIELDS(RQ_CFG_NAME)
#undef RQ_CFG_NAME
    return k;
  }();
  for (const auto& [key, _] : j.items()) {
    if (key == "mix_video_text")
      throw ConfigError(
          "the [video, text] form is excluded from pre-training; "
          "mix_video_text is not a valid key");
    if (!known.count(key))
      throw ConfigError("unknown config key: " + key);
  }
  ExperimentConfig c;
  try {
#define RQ_CFG_READ(f) \
  if (j.contains(#f)) j.at(#f).get_to(c.f);
    RQ_CFG_FIELDS(RQ_CFG_READ)
#undef RQ_CFG_READ
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("bad config value: " + std::string(e.what()));
  }
  c.validate();
  return c;
}

inline nlohmann::json ExperimentConfig::to_json() const {
  nlohmann::json j;
#define RQ_CFG_WRITE(f) j[#f] = f;
  RQ_CFG_FIELDS(RQ_CFG_WRITE)
#undef RQ_CFG_WRITE
  return j;
}

#undef RQ_CFG_FIELDS

}  // namespace rqunify
