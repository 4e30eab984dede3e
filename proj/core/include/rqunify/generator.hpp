#pragma once

// Decoder-only autoregressive model over unified multimodal sequences.
// Text positions are predicted by a vocabulary head; visual positions hand
// their hidden state to a small causal depth transformer that emits one
// code per quantization depth, conditioned on the running sum of the code
// embeddings chosen so far. Sampling supports classifier-free guidance by
// running a conditional and an unconditional stream in lockstep.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rqunify/errors.hpp"
#include "rqunify/nn.hpp"
#include "rqunify/quantizer.hpp"
#include "rqunify/sequencer.hpp"
#include "rqunify/tensor.hpp"

namespace rqunify {

struct BackboneConfig {
  int64_t layers = 4;
  int64_t heads = 4;
  int64_t model_dim = 128;
  int64_t context_len = 512;
  int64_t vocab = 0;      // unified vocabulary size (text + specials)
  int64_t code_dim = 64;  // codebook embedding width, visual input source
  int64_t codebook_size = 64;
  int64_t depth = 4;
  int64_t depth_layers = 2;
  int64_t depth_heads = 4;

  void validate() const {
    if (model_dim % heads != 0)
      throw ConfigError("model_dim must be divisible by heads");
    if (code_dim % depth_heads != 0)
      throw ConfigError("code_dim must be divisible by depth_heads");
    if (vocab <= 0) throw ConfigError("vocab not set");
    if (depth < 1 || codebook_size < 1)
      throw ConfigError("depth and codebook_size must be positive");
  }
};

struct GenParams {
  double cfg_scale = 3.0;
  double temperature = 1.0;
  int64_t top_k = 64;
  int64_t grid_h = 8, grid_w = 8;
  uint64_t seed = 0;
  bool cfg_first_depth_only = false;  // guidance only at depth 1 (ablation)
};

// uncond + s * (cond - uncond), elementwise. s=1 returns cond exactly and
// s=0 returns uncond exactly (no arithmetic applied in those cases).
template <typename S>
std::vector<S> cfg_mix(const std::vector<S>& cond, const std::vector<S>& uncond,
                       double s) {
  if (cond.size() != uncond.size())
    throw ContractError("cfg_mix: logit sizes " + std::to_string(cond.size()) +
                        " vs " + std::to_string(uncond.size()));
  if (s < 0) throw ContractError("cfg_mix: negative guidance scale");
  if (s == 1.0) return cond;
  if (s == 0.0) return uncond;
  std::vector<S> out(cond.size());
  for (size_t i = 0; i < cond.size(); ++i)
    out[i] = uncond[i] + S(s) * (cond[i] - uncond[i]);
  return out;
}

// Deterministic categorical draw: restrict to the top_k logits, apply the
// temperature, sample by inverse CDF from a 53-bit uniform. temperature
// below 1e-6 degenerates to argmax (ties to the lowest index).
template <typename S>
int64_t sample_topk(const std::vector<S>& logits, double temperature,
                    int64_t top_k, std::mt19937_64& rng) {
  const int64_t n = int64_t(logits.size());
  if (n == 0) throw ContractError("sample_topk: empty logits");
  if (top_k < 1) throw ContractError("sample_topk: top_k must be >= 1");
  if (temperature < 1e-6) {
    int64_t best = 0;
    for (int64_t i = 1; i < n; ++i)
      if (logits[i] > logits[best]) best = i;
    return best;
  }
  std::vector<int64_t> idx(n);
  for (int64_t i = 0; i < n; ++i) idx[i] = i;
  int64_t k = std::min(top_k, n);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(),
                    [&](int64_t a, int64_t b) {
                      return logits[a] != logits[b] ? logits[a] > logits[b]
                                                    : a < b;
                    });
  double mx = double(logits[idx[0]]);
  std::vector<double> p(k);
  double z = 0;
  for (int64_t i = 0; i < k; ++i) {
    p[i] = std::exp((double(logits[idx[i]]) - mx) / temperature);
    z += p[i];
  }
  double u = double(rng() >> 11) * 0x1p-53 * z;
  double acc = 0;
  for (int64_t i = 0; i < k; ++i) {
    acc += p[i];
    if (u < acc) return idx[i];
  }
  return idx[k - 1];
}

struct GenResultMeta {
  bool empty = false;      // the model stopped before emitting any code
  bool truncated = false;  // stopped mid-grid; remaining stacks are code 0
  int64_t positions = 0;   // visual positions actually emitted
};

template <typename S>
class GeneratorT {
 public:
  struct TextLoss {
    TensorT<S> loss;
    bool empty = false;  // no supervised positions of this kind
    int64_t positions = 0;
  };

  GeneratorT(const BackboneConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    cfg_.validate();
    token_embed_ = EmbeddingT<S>(cfg.vocab, cfg.model_dim, rng);
    visual_in_w_ = randn_tensor<S>({cfg.code_dim, cfg.model_dim}, rng, S(0.02));
    backbone_ = TransformerT<S>(cfg.model_dim, cfg.heads, cfg.layers,
                                cfg.context_len, true, rng);
    text_head_ = LinearT<S>(cfg.model_dim, cfg.vocab, rng);
    h_proj_ = LinearT<S>(cfg.model_dim, cfg.code_dim, rng);
    depth_pos_ = randn_tensor<S>({cfg.depth, cfg.code_dim}, rng, S(0.02));
    for (int64_t i = 0; i < cfg.depth_layers; ++i)
      depth_blocks_.emplace_back(cfg.code_dim, cfg.depth_heads, true, rng);
    depth_ln_ = LayerNormT<S>(cfg.code_dim);
    depth_out_ = LinearT<S>(cfg.code_dim, cfg.codebook_size, rng);

    token_embed_.collect(params_, "bb.token_embed");
    params_.add("bb.visual_in.w", visual_in_w_);
    backbone_.collect(params_, "bb.stack");
    text_head_.collect(params_, "bb.text_head");
    h_proj_.collect(params_, "depth.h_proj");
    params_.add("depth.pos", depth_pos_);
    for (size_t i = 0; i < depth_blocks_.size(); ++i)
      depth_blocks_[i].collect(params_, "depth.block" + std::to_string(i));
    depth_ln_.collect(params_, "depth.ln_f");
    depth_out_.collect(params_, "depth.out");
  }

  const BackboneConfig& config() const { return cfg_; }
  ParamSetT<S>& params() { return params_; }
  LinearT<S>& text_head() { return text_head_; }
  LinearT<S>& h_proj() { return h_proj_; }
  LinearT<S>& depth_out() { return depth_out_; }
  TensorT<S>& depth_pos() { return depth_pos_; }

  // Causal hidden states [T, model_dim] over the unified sequence. Visual
  // slots enter as their dequantized code-embedding sums projected into the
  // model width; the codebook is an external constant, not a parameter.
  TensorT<S> forward(const MultimodalSample& sample,
                     const CodebookT<S>& cb) const {
    const int64_t T = sample.length();
    if (T == 0) throw ContractError("forward: empty sample");
    if (T > cfg_.context_len)
      throw ContractError("sample length " + std::to_string(T) +
                          " exceeds context " +
                          std::to_string(cfg_.context_len));
    std::vector<int64_t> ids(T);
    std::vector<S> vis(T * cfg_.code_dim, S(0));
    for (int64_t t = 0; t < T; ++t) {
      const auto& e = sample.elements[t];
      if (e.is_text()) {
        if (e.text_id < 0 || e.text_id >= cfg_.vocab)
          throw ContractError("text id out of vocabulary");
        ids[t] = e.text_id;
      } else {
        ids[t] = -1;  // gather_rows yields a zero row
        auto v = dequantize(e.stack, cb);
        if (int64_t(v.size()) != cfg_.code_dim)
          throw ContractError("codebook width does not match code_dim");
        std::copy(v.begin(), v.end(), vis.begin() + t * cfg_.code_dim);
      }
    }
    auto x = add(token_embed_.forward(ids),
                 matmul(TensorT<S>::from_data({T, cfg_.code_dim},
                                              std::move(vis), false),
                        visual_in_w_));
    return backbone_.forward(x);
  }

  // Summed next-token NLL over positions whose successor is a supervised
  // text element. All other rows are skipped and contribute exactly zero,
  // in value and in gradient.
  TextLoss text_loss(const TensorT<S>& hidden,
                     const MultimodalSample& sample) const {
    const int64_t T = sample.length();
    check_hidden(hidden, T);
    std::vector<int64_t> targets(T, -1);
    int64_t count = 0;
    for (int64_t t = 0; t + 1 < T; ++t)
      if (sample.elements[t + 1].is_text() && sample.loss_mask[t + 1]) {
        targets[t] = sample.elements[t + 1].text_id;
        ++count;
      }
    TextLoss out;
    out.positions = count;
    if (count == 0) {
      out.empty = true;
      out.loss = TensorT<S>::scalar(S(0));
      return out;
    }
    out.loss = cross_entropy_rows(text_head_.forward(hidden), targets);
    return out;
  }

  // Raw depth-head input rows before positional embeddings: row (p, 0) is the
  // projected hidden state hp[p], row (p, d > 0) is the running sum of the
  // first d teacher code embeddings for position p.
  TensorT<S> depth_input_rows(const TensorT<S>& hp,
                              const std::vector<CodeStack>& teachers,
                              const CodebookT<S>& cb) const {
    const int64_t P = int64_t(teachers.size());
    const int64_t D = cfg_.depth, C = cfg_.code_dim;
    std::vector<S> pre(P * D * C, S(0));
    for (int64_t p = 0; p < P; ++p) {
      std::vector<S> acc(C, S(0));
      for (int64_t d = 1; d < D; ++d) {
        const S* e = cb.raw_embeddings().data() + teachers[p][d - 1] * C;
        for (int64_t c = 0; c < C; ++c) acc[c] += e[c];
        std::copy(acc.begin(), acc.end(), pre.begin() + (p * D + d) * C);
      }
    }
    // selector placing hp row p at batched row p*D
    std::vector<S> sel(P * D * P, S(0));
    for (int64_t p = 0; p < P; ++p) sel[(p * D) * P + p] = S(1);
    return add(
        matmul(TensorT<S>::from_data({P * D, P}, std::move(sel), false), hp),
        TensorT<S>::from_data({P * D, C}, std::move(pre), false));
  }

  // Depth-head logits for a batch of visual positions under teacher forcing.
  // Input row (p, d) is the projected hidden state for d = 1 and the prefix
  // sum of the teacher code embeddings for d > 1; attention is causal within
  // each position's depth block and zero across positions.
  TensorT<S> depth_logits(const TensorT<S>& h_rows,
                          const std::vector<CodeStack>& teachers,
                          const CodebookT<S>& cb) const {
    const int64_t P = int64_t(teachers.size());
    const int64_t D = cfg_.depth, C = cfg_.code_dim;
    if (h_rows.shape() != Shape{P, cfg_.model_dim})
      throw ContractError("depth_logits: hidden rows " +
                          shape_str(h_rows.shape()));
    for (const auto& st : teachers)
      if (int64_t(st.size()) != D)
        throw ContractError("depth_logits: teacher depth " +
                            std::to_string(st.size()) + " vs configured " +
                            std::to_string(D));
    auto x = depth_input_rows(h_proj_.forward(h_rows), teachers, cb);
    std::vector<int64_t> pos_ids(P * D);
    for (int64_t p = 0; p < P; ++p)
      for (int64_t d = 0; d < D; ++d) pos_ids[p * D + d] = d;
    x = add(x, gather_rows(depth_pos_, pos_ids));

    // block-diagonal causal mask
    std::vector<S> m(P * D * P * D, S(-1e30));
    for (int64_t p = 0; p < P; ++p)
      for (int64_t d = 0; d < D; ++d)
        for (int64_t d2 = 0; d2 <= d; ++d2)
          m[(p * D + d) * (P * D) + p * D + d2] = S(0);
    auto mask = TensorT<S>::from_data({P * D, P * D}, std::move(m), false);
    for (const auto& b : depth_blocks_) x = b.forward(x, &mask);
    return depth_out_.forward(depth_ln_.forward(x));  // [P*D, K]
  }

  // Single-position teacher-forced form: D logit rows over K codes.
  TensorT<S> depth_forward(const TensorT<S>& h_row, const CodeStack& teacher,
                           const CodebookT<S>& cb) const {
    return depth_logits(h_row, {teacher}, cb);
  }

  // Summed depth NLL over supervised visual positions (teacher forcing).
  TextLoss visual_loss(const TensorT<S>& hidden, const MultimodalSample& sample,
                       const CodebookT<S>& cb) const {
    const int64_t T = sample.length();
    check_hidden(hidden, T);
    std::vector<int64_t> prev;
    std::vector<CodeStack> teachers;
    for (int64_t t = 1; t < T; ++t)
      if (sample.elements[t].is_visual() && sample.loss_mask[t]) {
        prev.push_back(t - 1);
        teachers.push_back(sample.elements[t].stack);
      }
    TextLoss out;
    out.positions = int64_t(teachers.size());
    if (teachers.empty()) {
      out.empty = true;
      out.loss = TensorT<S>::scalar(S(0));
      return out;
    }
    auto logits = depth_logits(gather_rows(hidden, prev), teachers, cb);
    std::vector<int64_t> targets;
    targets.reserve(teachers.size() * cfg_.depth);
    for (const auto& st : teachers)
      for (int64_t code : st) targets.push_back(code);
    out.loss = cross_entropy_rows(logits, targets);
    return out;
  }

  // Text-to-image sampling with classifier-free guidance. The conditional
  // stream sees [bos, prompt..., image_start]; the unconditional stream sees
  // the <null_cond> twin. Codes are drawn depth-by-depth from the guided
  // logits and fed back into both streams identically. Before each position
  // the vocabulary head may emit <image_end>, which stops generation.
  CodeGrid generate_visual(const std::vector<int64_t>& prompt,
                           const UnifiedVocab& vocab, const CodebookT<S>& cb,
                           const GenParams& gp, GenResultMeta* meta = nullptr) {
    if (gp.cfg_scale < 0) throw ContractError("negative guidance scale");
    if (gp.temperature < 0) throw ContractError("negative temperature");
    std::mt19937_64 rng(gp.seed ^ 0x9e3779b97f4a7c15ull);
    const int64_t D = cfg_.depth;

    MultimodalSample cond, uncond;
    cond.elements.push_back(SeqElement::text(vocab.bos));
    for (int64_t id : prompt) cond.elements.push_back(SeqElement::text(id));
    cond.elements.push_back(SeqElement::text(vocab.image_start));
    uncond.elements.push_back(SeqElement::text(vocab.bos));
    uncond.elements.push_back(SeqElement::text(vocab.null_cond));
    uncond.elements.push_back(SeqElement::text(vocab.image_start));

    const int64_t max_pos = gp.grid_h * gp.grid_w;
    CodeGrid grid;
    grid.height = gp.grid_h;
    grid.width = gp.grid_w;
    GenResultMeta m;
    for (int64_t j = 0; j < max_pos; ++j) {
      auto hc = forward(cond, cb);
      auto hu = forward(uncond, cb);
      auto last_c = slice_rows(hc, hc.dim(0) - 1, hc.dim(0));
      auto last_u = slice_rows(hu, hu.dim(0) - 1, hu.dim(0));

      // stop check on the guided vocabulary head
      auto tl = cfg_mix(text_head_.forward(last_c).data(),
                        text_head_.forward(last_u).data(), gp.cfg_scale);
      int64_t best = 0;
      for (size_t i = 1; i < tl.size(); ++i)
        if (tl[i] > tl[best]) best = int64_t(i);
      if (best == vocab.image_end) break;

      CodeStack stack;
      for (int64_t d = 0; d < D; ++d) {
        CodeStack probe = stack;
        probe.resize(D, 0);  // rows past d are ignored by the causal mask
        auto lc = row_values(depth_forward(last_c, probe, cb), d);
        auto lu = row_values(depth_forward(last_u, probe, cb), d);
        double s = gp.cfg_scale;
        if (gp.cfg_first_depth_only && d > 0) s = 1.0;
        stack.push_back(
            sample_topk(cfg_mix(lc, lu, s), gp.temperature, gp.top_k, rng));
      }
      grid.stacks.push_back(stack);
      cond.elements.push_back(SeqElement::visual(stack));
      uncond.elements.push_back(SeqElement::visual(stack));
      m.positions = j + 1;
    }
    m.empty = m.positions == 0;
    m.truncated = m.positions > 0 && m.positions < max_pos;
    grid.stacks.resize(max_pos, CodeStack(size_t(D), 0));
    if (meta) *meta = m;
    return grid;
  }

 private:
  void check_hidden(const TensorT<S>& hidden, int64_t T) const {
    if (hidden.shape() != Shape{T, cfg_.model_dim})
      throw ContractError("hidden states " + shape_str(hidden.shape()) +
                          " vs sample length " + std::to_string(T));
  }

  static std::vector<S> row_values(const TensorT<S>& t, int64_t r) {
    const int64_t C = t.dim(1);
    return std::vector<S>(t.data().begin() + r * C,
                          t.data().begin() + (r + 1) * C);
  }

  BackboneConfig cfg_;
  EmbeddingT<S> token_embed_;
  TensorT<S> visual_in_w_, depth_pos_;
  TransformerT<S> backbone_;
  LinearT<S> text_head_, h_proj_, depth_out_;
  std::vector<TransformerBlockT<S>> depth_blocks_;
  LayerNormT<S> depth_ln_;
  ParamSetT<S> params_;
};

using Generator = GeneratorT<float>;

}  // namespace rqunify
