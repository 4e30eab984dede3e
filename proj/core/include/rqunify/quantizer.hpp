#pragma once

// Residual vector quantization: greedy depth-wise nearest-code recursion
// over a shared codebook, straight-through training pass, and EMA codebook
// learning with dead-code reseeding.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "rqunify/errors.hpp"
#include "rqunify/tensor.hpp"

namespace rqunify {

struct QuantizerConfig {
  int64_t codebook_size = 64;   // K
  int64_t dim = 64;             // embedding width
  int64_t depth = 4;            // D
  double beta = 0.25;           // commitment weight
  double ema_decay = 0.99;
  double ema_eps = 1e-5;        // Laplace smoothing
  bool reserve_zero_code = true;  // index 0 frozen at the zero vector
  double dead_count_floor = 0.01;
  int dead_epochs_to_reseed = 5;
};

using CodeStack = std::vector<int64_t>;  // k_1 .. k_D, each in [0, K)

struct CodeGrid {
  int64_t height = 0, width = 0;
  std::vector<CodeStack> stacks;  // row-major, height*width entries

  int64_t positions() const { return height * width; }
  int64_t depth() const { return stacks.empty() ? 0 : int64_t(stacks[0].size()); }
  const CodeStack& at(int64_t r, int64_t c) const {
    return stacks[r * width + c];
  }
  bool operator==(const CodeGrid& o) const {
    return height == o.height && width == o.width && stacks == o.stacks;
  }
};

template <typename S>
struct QuantizeResultT {
  CodeStack stack;
  std::vector<S> quantized;               // sum of chosen embeddings
  std::vector<std::vector<S>> residuals;  // r_0 .. r_D
  S commitment_loss = 0;
};

// Assignment record for one quantization event: input residual vector and
// the code it mapped to. Collected per batch and fed to the EMA update.
template <typename S>
struct AssignmentsT {
  std::vector<int64_t> codes;
  std::vector<std::vector<S>> inputs;

  void add(int64_t code, const std::vector<S>& input) {
    codes.push_back(code);
    inputs.push_back(input);
  }
  size_t size() const { return codes.size(); }
};

template <typename S>
class CodebookT {
 public:
  CodebookT() = default;

  CodebookT(const QuantizerConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    if (cfg.codebook_size < 1) throw ConfigError("empty codebook");
    e_.assign(cfg.codebook_size * cfg.dim, S(0));
    std::normal_distribution<double> dist(0.0, 0.02);
    const int64_t first = cfg.reserve_zero_code ? 1 : 0;
    for (int64_t k = first; k < cfg.codebook_size; ++k)
      for (int64_t c = 0; c < cfg.dim; ++c)
        e_[k * cfg.dim + c] = S(dist(rng));
    ema_counts_.assign(cfg.codebook_size, S(0));
    ema_sums_.assign(cfg.codebook_size * cfg.dim, S(0));
    dead_epochs_.assign(cfg.codebook_size, 0);
  }

  const QuantizerConfig& config() const { return cfg_; }
  int64_t size() const { return cfg_.codebook_size; }
  int64_t dim() const { return cfg_.dim; }

  const S* embedding(int64_t k) const {
    if (k < 0 || k >= cfg_.codebook_size)
      throw ContractError("code index " + std::to_string(k) +
                          " out of range [0, " +
                          std::to_string(cfg_.codebook_size) + ")");
    return e_.data() + k * cfg_.dim;
  }

  std::vector<S>& raw_embeddings() { return e_; }
  const std::vector<S>& raw_embeddings() const { return e_; }
  std::vector<S>& raw_ema_counts() { return ema_counts_; }
  std::vector<S>& raw_ema_sums() { return ema_sums_; }
  std::vector<int>& raw_dead_epochs() { return dead_epochs_; }

  void set_embedding(int64_t k, const std::vector<S>& v) {
    if (int64_t(v.size()) != cfg_.dim)
      throw ContractError("embedding width mismatch");
    std::copy(v.begin(), v.end(), e_.begin() + k * cfg_.dim);
  }

  // Warm start from a pool of feature vectors: every non-reserved code is
  // seeded with a random pool sample. Without this, a 0.02-stddev random
  // codebook is degenerate next to unit-scale encoder features and every
  // input quantizes to nearly the same reconstruction.
  void init_from_data(const std::vector<std::vector<S>>& pool,
                      std::mt19937_64& rng) {
    if (pool.empty()) throw ContractError("init_from_data: empty pool");
    const int64_t first = cfg_.reserve_zero_code ? 1 : 0;
    std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
    for (int64_t k = first; k < cfg_.codebook_size; ++k) {
      set_embedding(k, pool[pick(rng)]);
      ema_counts_[k] = S(1);
      for (int64_t c = 0; c < cfg_.dim; ++c)
        ema_sums_[k * cfg_.dim + c] = e_[k * cfg_.dim + c];
      dead_epochs_[k] = 0;
    }
  }

  // argmin_k ||z - e(k)||^2, ties broken by lowest index.
  int64_t nearest_code(const S* z) const {
    int64_t best = 0;
    double best_d = -1;
    for (int64_t k = 0; k < cfg_.codebook_size; ++k) {
      const S* e = e_.data() + k * cfg_.dim;
      double d = 0;
      for (int64_t c = 0; c < cfg_.dim; ++c) {
        double diff = double(z[c]) - double(e[c]);
        d += diff * diff;
      }
      if (best_d < 0 || d < best_d) {  // strict '<' keeps the lowest index
        best_d = d;
        best = k;
      }
    }
    return best;
  }

  int64_t nearest_code(const std::vector<S>& z) const {
    if (int64_t(z.size()) != cfg_.dim)
      throw ContractError("nearest_code: vector width " +
                          std::to_string(z.size()) + " vs codebook dim " +
                          std::to_string(cfg_.dim));
    for (S v : z)
      if (!std::isfinite(v)) throw NumericError("nearest_code: non-finite input");
    return nearest_code(z.data());
  }

  // EMA update over one batch of assignments. Code 0 stays frozen when the
  // zero code is reserved; codes never assigned only decay.
  void ema_update(const AssignmentsT<S>& batch) {
    const int64_t K = cfg_.codebook_size, C = cfg_.dim;
    std::vector<double> n(K, 0.0);
    std::vector<double> s(K * C, 0.0);
    for (size_t i = 0; i < batch.size(); ++i) {
      int64_t k = batch.codes[i];
      if (k < 0 || k >= K) throw ContractError("ema_update: bad code");
      n[k] += 1.0;
      for (int64_t c = 0; c < C; ++c) s[k * C + c] += double(batch.inputs[i][c]);
    }
    const double d = cfg_.ema_decay;
    const int64_t first = cfg_.reserve_zero_code ? 1 : 0;
    for (int64_t k = first; k < K; ++k) {
      ema_counts_[k] = S(d * double(ema_counts_[k]) + (1.0 - d) * n[k]);
      for (int64_t c = 0; c < C; ++c)
        ema_sums_[k * C + c] =
            S(d * double(ema_sums_[k * C + c]) + (1.0 - d) * s[k * C + c]);
      if (n[k] > 0 || ema_counts_[k] > S(cfg_.ema_eps)) {
        double cnt = double(ema_counts_[k]) + cfg_.ema_eps;
        for (int64_t c = 0; c < C; ++c)
          e_[k * C + c] = S(double(ema_sums_[k * C + c]) / cnt);
      }
    }
  }

  // Called once per epoch: codes with persistently low usage are re-seeded
  // to a random vector drawn from `pool`.
  int reseed_dead_codes(const std::vector<std::vector<S>>& pool,
                        std::mt19937_64& rng) {
    if (pool.empty()) return 0;
    int reseeded = 0;
    const int64_t first = cfg_.reserve_zero_code ? 1 : 0;
    for (int64_t k = first; k < cfg_.codebook_size; ++k) {
      if (double(ema_counts_[k]) < cfg_.dead_count_floor)
        ++dead_epochs_[k];
      else
        dead_epochs_[k] = 0;
      if (dead_epochs_[k] >= cfg_.dead_epochs_to_reseed) {
        std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
        set_embedding(k, pool[pick(rng)]);
        ema_counts_[k] = S(1);
        for (int64_t c = 0; c < cfg_.dim; ++c)
          ema_sums_[k * cfg_.dim + c] = e_[k * cfg_.dim + c];
        dead_epochs_[k] = 0;
        ++reseeded;
      }
    }
    return reseeded;
  }

 private:
  QuantizerConfig cfg_;
  std::vector<S> e_;
  std::vector<S> ema_counts_;
  std::vector<S> ema_sums_;
  std::vector<int> dead_epochs_;
};

// Greedy residual quantization: k_d = argmin ||r_{d-1} - e(k)||, then
// r_d = r_{d-1} - e(k_d). Quantized vector is the depth sum of embeddings.
template <typename S>
QuantizeResultT<S> residual_quantize(const std::vector<S>& z,
                                     const CodebookT<S>& cb, int64_t depth) {
  if (depth < 1) throw ContractError("residual_quantize: depth must be >= 1");
  QuantizeResultT<S> out;
  out.residuals.push_back(z);
  std::vector<S> r = z;
  std::vector<S> zhat(cb.dim(), S(0));
  for (int64_t d = 0; d < depth; ++d) {
    int64_t k = cb.nearest_code(r);
    out.stack.push_back(k);
    const S* e = cb.embedding(k);
    for (int64_t c = 0; c < cb.dim(); ++c) {
      r[c] -= e[c];
      zhat[c] += e[c];
    }
    out.residuals.push_back(r);
  }
  out.quantized = zhat;
  double err = 0;
  for (int64_t c = 0; c < cb.dim(); ++c) {
    double diff = double(z[c]) - double(zhat[c]);
    err += diff * diff;
  }
  out.commitment_loss = S(cb.config().beta * err);
  return out;
}

// Sum of the stack's embeddings.
template <typename S>
std::vector<S> dequantize(const CodeStack& stack, const CodebookT<S>& cb) {
  std::vector<S> out(cb.dim(), S(0));
  for (int64_t k : stack) {
    const S* e = cb.embedding(k);  // throws on corrupt index
    for (int64_t c = 0; c < cb.dim(); ++c) out[c] += e[c];
  }
  return out;
}

template <typename S>
std::vector<S> dequantize_grid(const CodeGrid& grid, const CodebookT<S>& cb) {
  std::vector<S> out;
  out.reserve(grid.positions() * cb.dim());
  for (const auto& st : grid.stacks) {
    auto v = dequantize(st, cb);
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

template <typename S>
struct GridQuantizeResultT {
  CodeGrid grid;
  TensorT<S> quantized;        // [H*W, dim], straight-through to features
  TensorT<S> commitment_loss;  // scalar, beta * sum_p ||z_p - sg(zhat_p)||^2
  AssignmentsT<S> assignments; // for the EMA update
};

// Training-time pass over a [H*W, dim] feature tensor. Forward values equal
// per-position residual_quantize; backward is the straight-through identity
// into `features`.
template <typename S>
GridQuantizeResultT<S> quantize_grid_ste(const TensorT<S>& features,
                                         int64_t height, int64_t width,
                                         const CodebookT<S>& cb) {
  const int64_t D = cb.config().depth;
  if (features.shape().size() != 2 || features.dim(0) != height * width ||
      features.dim(1) != cb.dim())
    throw ContractError("quantize_grid_ste: features " +
                        shape_str(features.shape()) + " vs grid " +
                        std::to_string(height) + "x" + std::to_string(width) +
                        "x" + std::to_string(cb.dim()));
  GridQuantizeResultT<S> out;
  out.grid.height = height;
  out.grid.width = width;
  const int64_t P = height * width, C = cb.dim();
  std::vector<S> qvals(P * C);
  for (int64_t p = 0; p < P; ++p) {
    std::vector<S> z(features.data().begin() + p * C,
                     features.data().begin() + (p + 1) * C);
    auto r = residual_quantize(z, cb, D);
    out.grid.stacks.push_back(r.stack);
    std::copy(r.quantized.begin(), r.quantized.end(), qvals.begin() + p * C);
    for (int64_t d = 0; d < D; ++d)
      out.assignments.add(r.stack[d], r.residuals[d]);
  }
  auto zhat_const = TensorT<S>::from_data({P, C}, qvals);
  out.quantized = straight_through(features, qvals);
  auto diff = sub(features, zhat_const);
  out.commitment_loss = scale(sum(mul(diff, diff)), S(cb.config().beta));
  return out;
}

}  // namespace rqunify
