#pragma once

// Small layer zoo on top of the tensor engine: linear, embedding,
// layer norm, causal/bidirectional transformer blocks. Parameters are
// persistent leaf tensors; each forward pass builds a fresh graph over
// them.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rqunify/errors.hpp"
#include "rqunify/tensor.hpp"

namespace rqunify {

// Named parameter list with per-parameter trainable flags. Order is the
// identity used by the optimizer and the checkpoint format.
template <typename S>
struct ParamSetT {
  std::vector<std::string> names;
  std::vector<TensorT<S>> tensors;
  std::vector<bool> trainable;

  void add(const std::string& name, TensorT<S> t, bool train = true) {
    names.push_back(name);
    tensors.push_back(std::move(t));
    trainable.push_back(train);
  }

  size_t size() const { return tensors.size(); }

  void zero_grad() {
    for (auto& t : tensors) t.zero_grad();
  }

  void set_trainable_prefix(const std::string& prefix, bool train) {
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i].rfind(prefix, 0) == 0) trainable[i] = train;
  }

  int64_t find(const std::string& name) const {
    for (size_t i = 0; i < names.size(); ++i)
      if (names[i] == name) return static_cast<int64_t>(i);
    return -1;
  }
};

template <typename S>
TensorT<S> randn_tensor(const Shape& shape, std::mt19937_64& rng, S stddev,
                        bool requires_grad = true) {
  std::normal_distribution<double> dist(0.0, double(stddev));
  std::vector<S> d(shape_numel(shape));
  for (auto& v : d) v = S(dist(rng));
  return TensorT<S>::from_data(shape, std::move(d), requires_grad);
}

template <typename S>
class LinearT {
 public:
  LinearT() = default;
  LinearT(int64_t in, int64_t out, std::mt19937_64& rng)
      : w_(randn_tensor<S>({in, out}, rng, S(0.02))),
        b_(TensorT<S>::zeros({out}, true)) {}

  TensorT<S> forward(const TensorT<S>& x) const {
    return add_rowvec(matmul(x, w_), b_);
  }

  void collect(ParamSetT<S>& ps, const std::string& prefix) {
    ps.add(prefix + ".w", w_);
    ps.add(prefix + ".b", b_);
  }

  TensorT<S>& weight() { return w_; }
  TensorT<S>& bias() { return b_; }

 private:
  TensorT<S> w_, b_;
};

template <typename S>
class EmbeddingT {
 public:
  EmbeddingT() = default;
  EmbeddingT(int64_t count, int64_t dim, std::mt19937_64& rng)
      : table_(randn_tensor<S>({count, dim}, rng, S(0.02))) {}

  TensorT<S> forward(const std::vector<int64_t>& ids) const {
    return gather_rows(table_, ids);
  }

  void collect(ParamSetT<S>& ps, const std::string& prefix) {
    ps.add(prefix + ".table", table_);
  }

  TensorT<S>& table() { return table_; }

 private:
  TensorT<S> table_;
};

template <typename S>
class LayerNormT {
 public:
  LayerNormT() = default;
  explicit LayerNormT(int64_t dim)
      : gain_(TensorT<S>::filled({dim}, S(1), true)),
        bias_(TensorT<S>::zeros({dim}, true)) {}

  TensorT<S> forward(const TensorT<S>& x) const {
    return layer_norm(x, gain_, bias_);
  }

  void collect(ParamSetT<S>& ps, const std::string& prefix) {
    ps.add(prefix + ".gain", gain_);
    ps.add(prefix + ".bias", bias_);
  }

 private:
  TensorT<S> gain_, bias_;
};

// Multi-head self-attention over a [T, d] sequence.
template <typename S>
class SelfAttentionT {
 public:
  SelfAttentionT() = default;
  SelfAttentionT(int64_t dim, int64_t heads, bool causal,
                 std::mt19937_64& rng)
      : dim_(dim), heads_(heads), causal_(causal),
        qkv_(dim, 3 * dim, rng), proj_(dim, dim, rng) {
    if (dim % heads != 0)
      throw ConfigError("attention dim not divisible by head count");
  }

  // `ext_mask`, when given, is an additive [T, T] score mask that replaces
  // the internally built causal mask.
  TensorT<S> forward(const TensorT<S>& x,
                     const TensorT<S>* ext_mask = nullptr) const {
    const int64_t T = x.dim(0);
    const int64_t hd = dim_ / heads_;
    auto qkv = qkv_.forward(x);  // [T, 3d]
    std::vector<TensorT<S>> outs;
    outs.reserve(heads_);
    TensorT<S> mask;  // additive mask, shared across heads
    if (ext_mask) {
      mask = *ext_mask;
    } else if (causal_) {
      std::vector<S> m(T * T, S(0));
      for (int64_t i = 0; i < T; ++i)
        for (int64_t j = i + 1; j < T; ++j) m[i * T + j] = S(-1e30);
      mask = TensorT<S>::from_data({T, T}, std::move(m));
    }
    const S inv_sqrt = S(1.0 / std::sqrt(double(hd)));
    for (int64_t h = 0; h < heads_; ++h) {
      auto q = slice_cols(qkv, h * hd, (h + 1) * hd);
      auto k = slice_cols(qkv, dim_ + h * hd, dim_ + (h + 1) * hd);
      auto v = slice_cols(qkv, 2 * dim_ + h * hd, 2 * dim_ + (h + 1) * hd);
      auto scores = scale(matmul(q, transpose(k)), inv_sqrt);
      if (mask.defined()) scores = add(scores, mask);
      outs.push_back(matmul(softmax(scores), v));
    }
    return proj_.forward(concat_cols(outs));
  }

  void collect(ParamSetT<S>& ps, const std::string& prefix) {
    qkv_.collect(ps, prefix + ".qkv");
    proj_.collect(ps, prefix + ".proj");
  }

 private:
  int64_t dim_ = 0, heads_ = 0;
  bool causal_ = false;
  LinearT<S> qkv_, proj_;
};

// Pre-norm transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
template <typename S>
class TransformerBlockT {
 public:
  TransformerBlockT() = default;
  TransformerBlockT(int64_t dim, int64_t heads, bool causal,
                    std::mt19937_64& rng)
      : ln1_(dim), ln2_(dim), attn_(dim, heads, causal, rng),
        fc1_(dim, 4 * dim, rng), fc2_(4 * dim, dim, rng) {}

  TensorT<S> forward(const TensorT<S>& x,
                     const TensorT<S>* ext_mask = nullptr) const {
    auto h = add(x, attn_.forward(ln1_.forward(x), ext_mask));
    return add(h, fc2_.forward(gelu(fc1_.forward(ln2_.forward(h)))));
  }

  void collect(ParamSetT<S>& ps, const std::string& prefix) {
    ln1_.collect(ps, prefix + ".ln1");
    ln2_.collect(ps, prefix + ".ln2");
    attn_.collect(ps, prefix + ".attn");
    fc1_.collect(ps, prefix + ".fc1");
    fc2_.collect(ps, prefix + ".fc2");
  }

 private:
  LayerNormT<S> ln1_, ln2_;
  SelfAttentionT<S> attn_;
  LinearT<S> fc1_, fc2_;
};

// Block stack with learned positional embeddings and a final layer norm.
template <typename S>
class TransformerT {
 public:
  TransformerT() = default;
  TransformerT(int64_t dim, int64_t heads, int64_t layers, int64_t max_len,
               bool causal, std::mt19937_64& rng)
      : dim_(dim), max_len_(max_len),
        pos_(randn_tensor<S>({max_len, dim}, rng, S(0.02))), ln_f_(dim) {
    for (int64_t i = 0; i < layers; ++i)
      blocks_.emplace_back(dim, heads, causal, rng);
  }

  TensorT<S> forward(const TensorT<S>& x) const {
    const int64_t T = x.dim(0);
    if (T > max_len_)
      throw ContractError("sequence length " + std::to_string(T) +
                          " exceeds context " + std::to_string(max_len_));
    std::vector<int64_t> ids(T);
    for (int64_t i = 0; i < T; ++i) ids[i] = i;
    auto h = add(x, gather_rows(pos_, ids));
    for (auto& b : blocks_) h = b.forward(h);
    return ln_f_.forward(h);
  }

  void collect(ParamSetT<S>& ps, const std::string& prefix) {
    ps.add(prefix + ".pos", pos_);
    for (size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].collect(ps, prefix + ".block" + std::to_string(i));
    ln_f_.collect(ps, prefix + ".ln_f");
  }

  int64_t max_len() const { return max_len_; }

 private:
  int64_t dim_ = 0, max_len_ = 0;
  TensorT<S> pos_;
  std::vector<TransformerBlockT<S>> blocks_;
  LayerNormT<S> ln_f_;
};

}  // namespace rqunify
