#pragma once

// Central finite-difference gradient oracle used by the unit and
// acceptance suites. Independent of the autodiff path: it only calls the
// forward function and perturbs raw parameter storage.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "rqunify/tensor.hpp"

namespace rqtest {

struct GradCheckReport {
  double max_rel_err = 0.0;
  int checked = 0;
};

// f() must rebuild the forward graph from the (possibly perturbed) current
// parameter values and return a scalar. `params` are the leaves to check.
// When `sample_per_param` > 0, only that many randomly chosen entries of
// each parameter are probed (full sweep otherwise).
inline GradCheckReport gradcheck(
    const std::function<rqunify::Tensor64()>& f,
    std::vector<rqunify::Tensor64> params, double h = 1e-5,
    int sample_per_param = 0, uint64_t seed = 0) {
  using rqunify::Tensor64;
  GradCheckReport rep;
  for (auto& p : params) p.zero_grad();
  auto loss = f();
  rqunify::backward(loss);
  std::mt19937_64 rng(seed);
  for (auto& p : params) {
    std::vector<int64_t> idx;
    if (sample_per_param > 0 &&
        p.numel() > static_cast<int64_t>(sample_per_param)) {
      std::uniform_int_distribution<int64_t> pick(0, p.numel() - 1);
      for (int i = 0; i < sample_per_param; ++i) idx.push_back(pick(rng));
    } else {
      idx.resize(p.numel());
      for (int64_t i = 0; i < p.numel(); ++i) idx[i] = i;
    }
    for (int64_t i : idx) {
      double orig = p.data()[i];
      p.data()[i] = orig + h;
      double fp = f().item();
      p.data()[i] = orig - h;
      double fm = f().item();
      p.data()[i] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double ad = p.has_grad() ? p.grad()[i] : 0.0;
      double denom = std::max({std::abs(fd), std::abs(ad), 1e-8});
      rep.max_rel_err = std::max(rep.max_rel_err, std::abs(fd - ad) / denom);
      ++rep.checked;
    }
  }
  return rep;
}

}  // namespace rqtest
