#pragma once

// Frozen evaluation probe: a small convolutional classifier with one output
// head per caption attribute (shape, color, size, position). It is trained
// once on ground-truth renders with light noise/shift augmentation, then
// used read-only to score generated images. Convolutions are valid (no
// padding) and built from im2col row gathers plus matmul.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "rqunify/data.hpp"
#include "rqunify/nn.hpp"
#include "rqunify/optim.hpp"
#include "rqunify/tensor.hpp"

namespace rqunify {

struct ProbeConfig {
  int64_t image_size = 32;
  int64_t channels = 16;
  int64_t kernel = 5;
  int64_t stride = 2;
  double lr = 2e-3;
  int steps = 500;
  int batch = 16;
  double noise = 0.05;   // augmentation pixel noise stddev
  int max_shift = 1;     // augmentation circular shift in pixels
  uint64_t seed = 0;

  int64_t out_side(int64_t in) const { return (in - kernel) / stride + 1; }
};

template <typename S>
class ProbeT {
 public:
  struct HeadLogits {
    TensorT<S> shape, color, size, position;
  };

  ProbeT() = default;
  ProbeT(const ProbeConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    const int64_t kk = cfg.kernel * cfg.kernel;
    conv1_ = LinearT<S>(kk * 3, cfg.channels, rng);
    conv2_ = LinearT<S>(kk * cfg.channels, cfg.channels, rng);
    const int64_t s2 = cfg.out_side(cfg.out_side(cfg.image_size));
    flat_ = s2 * s2 * cfg.channels;
    head_shape_ = LinearT<S>(flat_, 4, rng);
    head_color_ = LinearT<S>(flat_, 4, rng);
    head_size_ = LinearT<S>(flat_, 2, rng);
    head_pos_ = LinearT<S>(flat_, 2, rng);
    conv1_.collect(params_, "probe.conv1");
    conv2_.collect(params_, "probe.conv2");
    head_shape_.collect(params_, "probe.head_shape");
    head_color_.collect(params_, "probe.head_color");
    head_size_.collect(params_, "probe.head_size");
    head_pos_.collect(params_, "probe.head_pos");
  }

  const ProbeConfig& config() const { return cfg_; }
  ParamSetT<S>& params() { return params_; }

  HeadLogits forward(const Image& img) const {
    if (img.height != cfg_.image_size || img.width != cfg_.image_size)
      throw ContractError("probe: image size mismatch");
    std::vector<S> px(img.rgb.begin(), img.rgb.end());
    auto x0 = TensorT<S>::from_data({cfg_.image_size * cfg_.image_size, 3},
                                    std::move(px), false);
    const int64_t s1 = cfg_.out_side(cfg_.image_size);
    auto h1 = relu(conv1_.forward(im2col(x0, cfg_.image_size, s1)));
    const int64_t s2 = cfg_.out_side(s1);
    auto h2 = relu(conv2_.forward(im2col(h1, s1, s2)));
    auto flat = reshape(h2, {1, flat_});
    return {head_shape_.forward(flat), head_color_.forward(flat),
            head_size_.forward(flat), head_pos_.forward(flat)};
  }

  TensorT<S> loss(const Image& img, const Attributes& a) const {
    auto h = forward(img);
    auto ce = [](const TensorT<S>& logits, int64_t t) {
      return cross_entropy(reshape(logits, {logits.dim(1)}), t);
    };
    return add(add(ce(h.shape, a.shape), ce(h.color, a.color)),
               add(ce(h.size, a.size), ce(h.position, a.position)));
  }

  Attributes predict(const Image& img) const {
    auto h = forward(img);
    Attributes a;
    a.shape = int(argmax(h.shape));
    a.color = int(argmax(h.color));
    a.size = int(argmax(h.size));
    a.position = int(argmax(h.position));
    return a;
  }

  // fraction of images where every attribute head matches
  double accuracy(const std::vector<Image>& images,
                  const std::vector<Attributes>& labels) const {
    if (images.size() != labels.size() || images.empty())
      throw ContractError("probe accuracy: bad inputs");
    int ok = 0;
    for (size_t i = 0; i < images.size(); ++i)
      if (predict(images[i]) == labels[i]) ++ok;
    return double(ok) / double(images.size());
  }

 private:
  // [rows=in_side^2, C] feature map -> [out_side^2, k*k*C] patch matrix.
  // gather_rows keeps the graph differentiable through deeper layers.
  TensorT<S> im2col(const TensorT<S>& feat, int64_t in_side,
                    int64_t out_side) const {
    const int64_t k = cfg_.kernel, st = cfg_.stride;
    std::vector<int64_t> idx;
    idx.reserve(out_side * out_side * k * k);
    for (int64_t r = 0; r < out_side; ++r)
      for (int64_t c = 0; c < out_side; ++c)
        for (int64_t i = 0; i < k; ++i)
          for (int64_t j = 0; j < k; ++j)
            idx.push_back((r * st + i) * in_side + c * st + j);
    return reshape(gather_rows(feat, idx),
                   {out_side * out_side, k * k * feat.dim(1)});
  }

  static int64_t argmax(const TensorT<S>& row) {
    int64_t best = 0;
    for (int64_t i = 1; i < row.numel(); ++i)
      if (row.data()[i] > row.data()[best]) best = i;
    return best;
  }

  ProbeConfig cfg_;
  LinearT<S> conv1_, conv2_, head_shape_, head_color_, head_size_, head_pos_;
  int64_t flat_ = 0;
  ParamSetT<S> params_;
};

// Noise + circular-shift augmentation so the probe tolerates decoder blur.
inline Image augment_image(const Image& img, double noise, int max_shift,
                           std::mt19937_64& rng) {
  std::uniform_int_distribution<int> shift(-max_shift, max_shift);
  std::normal_distribution<double> jitter(0.0, noise);
  int dr = max_shift > 0 ? shift(rng) : 0;
  int dc = max_shift > 0 ? shift(rng) : 0;
  Image out = img;
  const int64_t N = img.height;
  for (int64_t r = 0; r < N; ++r)
    for (int64_t c = 0; c < N; ++c)
      for (int64_t ch = 0; ch < 3; ++ch) {
        int64_t sr = ((r - dr) % N + N) % N;
        int64_t sc = ((c - dc) % N + N) % N;
        double v = double(img.at(sr, sc, ch)) + jitter(rng);
        out.at(r, c, ch) = float(std::min(1.0, std::max(0.0, v)));
      }
  return out;
}

template <typename S>
ProbeT<S> train_probe(const ProbeConfig& cfg, const std::vector<Image>& images,
                      const std::vector<Attributes>& labels) {
  if (images.size() != labels.size() || images.empty())
    throw ContractError("train_probe: bad dataset");
  std::mt19937_64 rng(cfg.seed ^ 0x5eedull);
  ProbeT<S> probe(cfg, rng);
  AdamT<S> opt({.lr = cfg.lr});
  std::uniform_int_distribution<size_t> pick(0, images.size() - 1);
  for (int step = 0; step < cfg.steps; ++step) {
    probe.params().zero_grad();
    TensorT<S> total;
    for (int b = 0; b < cfg.batch; ++b) {
      size_t i = pick(rng);
      auto img = augment_image(images[i], cfg.noise, cfg.max_shift, rng);
      auto l = probe.loss(img, labels[i]);
      total = total.defined() ? add(total, l) : l;
    }
    total = scale(total, S(1.0 / cfg.batch));
    backward(total);
    opt.step(probe.params().tensors, &probe.params().trainable);
  }
  return probe;
}

}  // namespace rqunify
