#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "rqunify/errors.hpp"
#include "rqunify/tensor.hpp"

namespace rqunify {

struct AdamConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled, applied before the moment update
};

// Bias-corrected adaptive-moment optimizer. Moment buffers are keyed by
// parameter slot, so the parameter list must stay stable across steps.
template <typename S>
class AdamT {
 public:
  explicit AdamT(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  int64_t step_count() const { return step_; }

  // Drops all moment state and restarts with a new learning rate. Used at
  // phase transitions: first moments estimated under a different objective
  // are stale and actively harmful to the next phase.
  void reset(double lr, double weight_decay) {
    set_hyper(lr, weight_decay);
    m_.clear();
    v_.clear();
    step_ = 0;
  }

  // Hyperparameters are not checkpointed; a resumed run must re-apply the
  // phase's values without touching the restored moments.
  void set_hyper(double lr, double weight_decay) {
    cfg_.lr = lr;
    cfg_.weight_decay = weight_decay;
  }

  // Applies one update to every parameter that has a gradient buffer.
  // Parameters flagged non-trainable by the caller should simply not be
  // passed in (or passed with trainable mask false via skip list).
  void step(std::vector<TensorT<S>>& params,
            const std::vector<bool>* trainable = nullptr) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params[i].numel(), S(0));
        v_[i].assign(params[i].numel(), S(0));
      }
    }
    if (m_.size() != params.size())
      throw ContractError("adam_step: parameter count changed");
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
    for (size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (static_cast<int64_t>(m_[i].size()) != p.numel())
        throw ContractError("adam_step: shape mismatch for parameter " +
                            std::to_string(i));
      if (trainable && !(*trainable)[i]) continue;
      if (!p.has_grad()) continue;
      auto& pd = p.data();
      auto& pg = p.grad();
      for (int64_t j = 0; j < p.numel(); ++j) {
        if (cfg_.weight_decay > 0)
          pd[j] = S(pd[j] * (1.0 - cfg_.lr * cfg_.weight_decay));
        double g = pg[j];
        double m = cfg_.beta1 * m_[i][j] + (1.0 - cfg_.beta1) * g;
        double v = cfg_.beta2 * v_[i][j] + (1.0 - cfg_.beta2) * g * g;
        m_[i][j] = S(m);
        v_[i][j] = S(v);
        double mhat = m / bc1;
        double vhat = v / bc2;
        pd[j] = S(pd[j] - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  // Checkpoint access.
  std::vector<std::vector<S>>& moment1() { return m_; }
  std::vector<std::vector<S>>& moment2() { return v_; }
  void set_step_count(int64_t s) { step_ = s; }

 private:
  AdamConfig cfg_;
  int64_t step_ = 0;
  std::vector<std::vector<S>> m_, v_;
};

using Adam = AdamT<float>;

}  // namespace rqunify
