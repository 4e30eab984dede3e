#pragma once

// Unified vision tower: patch-transformer encoder, residual quantizer,
// transformer decoder and a small text encoder, trained jointly with
// contrastive + reconstruction losses under a staged recipe. The failed
// recipes are runnable ablation modes.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "rqunify/data.hpp"
#include "rqunify/errors.hpp"
#include "rqunify/nn.hpp"
#include "rqunify/optim.hpp"
#include "rqunify/quantizer.hpp"
#include "rqunify/tensor.hpp"

namespace rqunify {

struct TowerConfig {
  int64_t image_size = 32;
  int64_t patch_size = 4;
  int64_t embed_dim = 64;
  int64_t heads = 4;
  int64_t enc_layers = 4;
  int64_t dec_layers = 4;
  int64_t text_layers = 2;
  int64_t text_vocab = 0;     // set from the corpus vocabulary
  int64_t max_text_len = 16;
  int64_t proj_dim = 32;      // shared contrastive embedding width
  double w_contra = 1.0;
  double w_recon = 1.0;
  double temperature_init = 0.07;
  bool sigmoid_contrastive = false;  // pairwise-sigmoid variant switch

  void validate() const {
    if (image_size % patch_size != 0)
      throw ConfigError("image_size must be divisible by patch_size");
    if (w_contra < 0 || w_recon < 0)
      throw ConfigError("loss weights must be non-negative");
    if (text_vocab <= 0) throw ConfigError("text_vocab not set");
  }

  int64_t grid_side() const { return image_size / patch_size; }
  int64_t patches() const { return grid_side() * grid_side(); }
  int64_t patch_dim() const { return patch_size * patch_size * 3; }
};

enum class RecipeStage { AlignPretrain, JointFrozenText };

enum class RecipeMode {
  Final,
  Failed1_TextCLIPOnly,
  Failed2_RQVAEInit,
  Failed3_FrozenVisionEnc,
  Failed4_TrainableTextEnc,
  JointFromScratch,
};

inline std::string recipe_name(RecipeMode m) {
  switch (m) {
    case RecipeMode::Final: return "final";
    case RecipeMode::Failed1_TextCLIPOnly: return "failed1_text_clip_only";
    case RecipeMode::Failed2_RQVAEInit: return "failed2_rqvae_init";
    case RecipeMode::Failed3_FrozenVisionEnc: return "failed3_frozen_vision_enc";
    case RecipeMode::Failed4_TrainableTextEnc: return "failed4_trainable_text_enc";
    default: return "joint_from_scratch";
  }
}

inline RecipeMode recipe_from_name(const std::string& s) {
  for (RecipeMode m :
       {RecipeMode::Final, RecipeMode::Failed1_TextCLIPOnly,
        RecipeMode::Failed2_RQVAEInit, RecipeMode::Failed3_FrozenVisionEnc,
        RecipeMode::Failed4_TrainableTextEnc, RecipeMode::JointFromScratch})
    if (recipe_name(m) == s) return m;
  throw ConfigError("unknown recipe mode: " + s);
}

template <typename S>
struct TowerLossesT {
  TensorT<S> contra, recon, commit, total;
};

template <typename S>
class TowerT {
 public:
  TowerT(const TowerConfig& cfg, const QuantizerConfig& qcfg,
         std::mt19937_64& rng)
      : cfg_(cfg), codebook_(qcfg, rng) {
    cfg_.validate();
    if (qcfg.dim != cfg.embed_dim)
      throw ConfigError("quantizer dim must equal tower embed_dim");
    patch_embed_ = LinearT<S>(cfg.patch_dim(), cfg.embed_dim, rng);
    encoder_ = TransformerT<S>(cfg.embed_dim, cfg.heads, cfg.enc_layers,
                               cfg.patches(), false, rng);
    decoder_ = TransformerT<S>(cfg.embed_dim, cfg.heads, cfg.dec_layers,
                               cfg.patches(), false, rng);
    unpatch_ = LinearT<S>(cfg.embed_dim, cfg.patch_dim(), rng);
    text_embed_ = EmbeddingT<S>(cfg.text_vocab, cfg.embed_dim, rng);
    text_encoder_ = TransformerT<S>(cfg.embed_dim, cfg.heads, cfg.text_layers,
                                    cfg.max_text_len, false, rng);
    img_proj_ = LinearT<S>(cfg.embed_dim, cfg.proj_dim, rng);
    txt_proj_ = LinearT<S>(cfg.embed_dim, cfg.proj_dim, rng);
    log_scale_ = TensorT<S>::scalar(S(std::log(1.0 / cfg.temperature_init)),
                                    true);
    params_ = ParamSetT<S>();
    patch_embed_.collect(params_, "vision_enc.patch_embed");
    encoder_.collect(params_, "vision_enc.blocks");
    decoder_.collect(params_, "vision_dec.blocks");
    unpatch_.collect(params_, "vision_dec.unpatch");
    text_embed_.collect(params_, "text_enc.embed");
    text_encoder_.collect(params_, "text_enc.blocks");
    img_proj_.collect(params_, "proj.img");
    txt_proj_.collect(params_, "proj.txt");
    params_.add("proj.log_scale", log_scale_);
  }

  const TowerConfig& config() const { return cfg_; }
  TowerConfig& mutable_config() { return cfg_; }
  ParamSetT<S>& params() { return params_; }
  CodebookT<S>& codebook() { return codebook_; }
  const CodebookT<S>& codebook() const { return codebook_; }

  RecipeStage stage() const { return stage_; }
  void set_temperature(double t) { log_scale_.data()[0] = S(std::log(1.0 / t)); }
  void set_stage(RecipeStage st) {
    stage_ = st;
    if (st == RecipeStage::JointFrozenText)
      params_.set_trainable_prefix("text_enc.", false);
  }

  // ---- forward pieces -----------------------------------------------------

  // [H*W*3] image -> [patches, patch_dim] row-major patch matrix.
  TensorT<S> image_to_patches(const Image& img) const {
    if (img.height != cfg_.image_size || img.width != cfg_.image_size)
      throw ContractError("image size " + std::to_string(img.height) + "x" +
                          std::to_string(img.width) + " vs configured " +
                          std::to_string(cfg_.image_size));
    const int64_t g = cfg_.grid_side(), p = cfg_.patch_size;
    std::vector<S> d(cfg_.patches() * cfg_.patch_dim());
    int64_t i = 0;
    for (int64_t pr = 0; pr < g; ++pr)
      for (int64_t pc = 0; pc < g; ++pc)
        for (int64_t r = 0; r < p; ++r)
          for (int64_t c = 0; c < p; ++c)
            for (int64_t ch = 0; ch < 3; ++ch)
              d[i++] = S(img.at(pr * p + r, pc * p + c, ch));
    return TensorT<S>::from_data({cfg_.patches(), cfg_.patch_dim()},
                                 std::move(d));
  }

  // Deterministic patch embedding + transformer stack -> feature grid
  // [patches, embed_dim].
  TensorT<S> encode_image(const Image& img) const {
    return encoder_.forward(patch_embed_.forward(image_to_patches(img)));
  }

  // Quantized feature grid -> image values; sigmoid keeps outputs in [0,1].
  TensorT<S> decode_features(const TensorT<S>& grid) const {
    if (grid.shape() != Shape{cfg_.patches(), cfg_.embed_dim})
      throw ContractError("decode_features: grid " + shape_str(grid.shape()) +
                          " vs expected [" + std::to_string(cfg_.patches()) +
                          "x" + std::to_string(cfg_.embed_dim) + "]");
    return sigmoid(unpatch_.forward(decoder_.forward(grid)));
  }

  Image patches_to_image(const std::vector<S>& patchvals) const {
    const int64_t g = cfg_.grid_side(), p = cfg_.patch_size;
    Image img;
    img.height = img.width = cfg_.image_size;
    img.rgb.resize(size_t(cfg_.image_size) * cfg_.image_size * 3);
    int64_t i = 0;
    for (int64_t pr = 0; pr < g; ++pr)
      for (int64_t pc = 0; pc < g; ++pc)
        for (int64_t r = 0; r < p; ++r)
          for (int64_t c = 0; c < p; ++c)
            for (int64_t ch = 0; ch < 3; ++ch)
              img.at(pr * p + r, pc * p + c, ch) = float(patchvals[i++]);
    return img;
  }

  TensorT<S> encode_text(const std::vector<int64_t>& tokens) const {
    if (tokens.empty()) throw ContractError("encode_text: empty caption");
    return text_encoder_.forward(text_embed_.forward(tokens));
  }

  // Mean-pooled, projected embeddings (rows not yet normalized).
  TensorT<S> project_image_features(const TensorT<S>& grid) const {
    return img_proj_.forward(reshape(mean_rows(grid), {1, cfg_.embed_dim}));
  }
  TensorT<S> project_text_features(const TensorT<S>& seq) const {
    return txt_proj_.forward(reshape(mean_rows(seq), {1, cfg_.embed_dim}));
  }

  // Symmetric InfoNCE over the B x B cosine-similarity matrix, mean of the
  // image->text and text->image directions. A config switch swaps in the
  // pairwise-sigmoid variant.
  TensorT<S> contrastive_loss(const TensorT<S>& img_emb,
                              const TensorT<S>& txt_emb) const {
    if (img_emb.shape() != txt_emb.shape() || img_emb.shape().size() != 2)
      throw ContractError("contrastive_loss: embedding shapes " +
                          shape_str(img_emb.shape()) + " vs " +
                          shape_str(txt_emb.shape()));
    const int64_t B = img_emb.dim(0);
    auto in = l2_normalize_rows(img_emb);
    auto tn = l2_normalize_rows(txt_emb);
    auto sim = matmul(in, transpose(tn));  // [B, B]
    auto logits = mul(sim, broadcast_scalar(exp_op(log_scale_), {B, B}));
    std::vector<int64_t> diag(B);
    for (int64_t i = 0; i < B; ++i) diag[i] = i;
    if (cfg_.sigmoid_contrastive) {
      // -mean log sigmoid(z_ij * logits_ij), z = +1 on the diagonal
      std::vector<S> sign(B * B, S(-1));
      for (int64_t i = 0; i < B; ++i) sign[i * B + i] = S(1);
      auto z = TensorT<S>::from_data({B, B}, sign);
      return scale(sum(neg_log(sigmoid(mul(logits, z)))), S(1) / S(B * B));
    }
    auto l_i2t = cross_entropy_rows(logits, diag);
    auto l_t2i = cross_entropy_rows(transpose(logits), diag);
    return scale(add(l_i2t, l_t2i), S(0.5 / double(B)));
  }

  // Full Eq.-style tower objective on a paired batch. With the quantizer in
  // the path (Stage B and the joint ablations): recon on
  // decode(quantize(encode(x))), contrastive on post-quantization features,
  // commitment added to the total. Without it (Stage A / CLIP stand-in):
  // contrastive on continuous features only.
  struct BatchResult {
    TowerLossesT<S> losses;
    AssignmentsT<S> assignments;  // empty when the quantizer is bypassed
    std::vector<std::vector<S>> encoder_outputs;  // reseeding pool
  };

  BatchResult tower_loss(const std::vector<Image>& images,
                         const std::vector<std::vector<int64_t>>& captions,
                         bool use_quantizer) {
    if (images.size() != captions.size() || images.empty())
      throw ContractError("tower_loss: batch size mismatch");
    const int64_t B = int64_t(images.size());
    BatchResult out;
    std::vector<TensorT<S>> img_embs, txt_embs;
    TensorT<S> recon_acc, commit_acc;
    for (int64_t b = 0; b < B; ++b) {
      auto feats = encode_image(images[b]);
      TensorT<S> vis_feats = feats;
      if (use_quantizer) {
        auto q = quantize_grid_ste(feats, cfg_.grid_side(), cfg_.grid_side(),
                                   codebook_);
        vis_feats = q.quantized;
        commit_acc = commit_acc.defined()
                         ? add(commit_acc, q.commitment_loss)
                         : q.commitment_loss;
        for (size_t i = 0; i < q.assignments.size(); ++i)
          out.assignments.add(q.assignments.codes[i], q.assignments.inputs[i]);
        for (int64_t p = 0; p < cfg_.patches(); ++p)
          out.encoder_outputs.emplace_back(
              feats.data().begin() + p * cfg_.embed_dim,
              feats.data().begin() + (p + 1) * cfg_.embed_dim);
        auto rec = decode_features(vis_feats);
        auto target = image_to_patches(images[b]);
        auto m = mse(rec, target);
        recon_acc = recon_acc.defined() ? add(recon_acc, m) : m;
      }
      img_embs.push_back(project_image_features(vis_feats));
      txt_embs.push_back(project_text_features(encode_text(captions[b])));
    }
    auto& L = out.losses;
    L.contra = contrastive_loss(concat_rows(img_embs), concat_rows(txt_embs));
    L.recon = use_quantizer ? scale(recon_acc, S(1) / S(B))
                            : TensorT<S>::scalar(S(0));
    L.commit = use_quantizer ? scale(commit_acc, S(1) / S(B))
                             : TensorT<S>::scalar(S(0));
    L.total = add(add(scale(L.contra, S(cfg_.w_contra)),
                      scale(L.recon, S(cfg_.w_recon))),
                  L.commit);
    return out;
  }

  // Caption-retrieval top-1 over an eval set: cosine similarity between the
  // current image and text embeddings, quantizer in the path iff requested.
  double retrieval_eval(const std::vector<Image>& images,
                        const std::vector<std::vector<int64_t>>& captions,
                        bool use_quantizer) {
    if (images.size() != captions.size() || images.size() < 2)
      throw ContractError("retrieval_eval needs >= 2 pairs");
    const int64_t B = int64_t(images.size());
    std::vector<TensorT<S>> img_embs, txt_embs;
    for (int64_t b = 0; b < B; ++b) {
      auto feats = encode_image(images[b]);
      if (use_quantizer) {
        auto q = quantize_grid_ste(feats, cfg_.grid_side(), cfg_.grid_side(),
                                   codebook_);
        feats = q.quantized;
      }
      img_embs.push_back(project_image_features(feats));
      txt_embs.push_back(project_text_features(encode_text(captions[b])));
    }
    auto in = l2_normalize_rows(concat_rows(img_embs));
    auto tn = l2_normalize_rows(concat_rows(txt_embs));
    auto sim = matmul(in, transpose(tn));
    int correct = 0;
    for (int64_t i = 0; i < B; ++i) {
      int64_t best = 0;
      S best_v = sim.data()[i * B];
      for (int64_t j = 1; j < B; ++j)
        if (sim.data()[i * B + j] > best_v) {
          best_v = sim.data()[i * B + j];
          best = j;
        }
      if (best == i) ++correct;
    }
    return double(correct) / double(B);
  }

  double mean_recon_mse(const std::vector<Image>& images) {
    double acc = 0;
    for (const auto& img : images) {
      auto feats = encode_image(img);
      auto q = quantize_grid_ste(feats, cfg_.grid_side(), cfg_.grid_side(),
                                 codebook_);
      acc += double(mse(decode_features(q.quantized),
                        image_to_patches(img)).item());
    }
    return acc / double(images.size());
  }

 private:
  static TensorT<S> broadcast_scalar(const TensorT<S>& s, const Shape& shape) {
    auto n = detail::make_node<S>("broadcast_scalar", shape, {s.node()});
    std::fill(n->value.begin(), n->value.end(), s.data()[0]);
    n->backward_fn = [](NodeT<S>& self) {
      auto& p = self.parents[0];
      if (!p->requires_grad) return;
      p->ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i) p->grad[0] += self.grad[i];
    };
    return TensorT<S>(n);
  }

  static TensorT<S> neg_log(const TensorT<S>& x) {
    auto n = detail::make_node<S>("neg_log", x.shape(), {x.node()});
    for (int64_t i = 0; i < n->numel(); ++i)
      n->value[i] = -std::log(double(x.data()[i]));
    n->backward_fn = [](NodeT<S>& self) {
      auto& p = self.parents[0];
      if (!p->requires_grad) return;
      p->ensure_grad();
      for (int64_t i = 0; i < self.numel(); ++i)
        p->grad[i] -= self.grad[i] / p->value[i];
    };
    detail::check_finite(*n);
    return TensorT<S>(n);
  }

  TowerConfig cfg_;
  CodebookT<S> codebook_;
  LinearT<S> patch_embed_, unpatch_, img_proj_, txt_proj_;
  TransformerT<S> encoder_, decoder_, text_encoder_;
  EmbeddingT<S> text_embed_;
  TensorT<S> log_scale_;
  ParamSetT<S> params_;
  RecipeStage stage_ = RecipeStage::AlignPretrain;
};

using Tower = TowerT<float>;

}  // namespace rqunify
