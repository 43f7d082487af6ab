#pragma once

#include <cmath>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "mdctr/errors.hpp"
#include "mdctr/tensor.hpp"

namespace mdctr {

enum class OptKind { Sgd, AdamW };

/// Gradient-descent step over a set of parameters. AdamW keeps decoupled
/// weight decay; plain SGD is available so decoupling tests are not
/// confounded by moment state.
///
/// Updates are lazy: a parameter whose gradient is exactly zero this step is
/// skipped entirely (no moment update, no decay), matching the sparse-update
/// convention of CTR training and keeping untouched domain networks
/// bit-identical across steps.
template <class S>
class Optimizer {
 public:
  OptKind kind = OptKind::AdamW;
  double lr = 1e-3;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  struct Moments {
    std::vector<S> m, v;
    std::int64_t t = 0;
  };

  void step(const std::vector<Param<S>*>& params) {
    for (Param<S>* p : params) {
      bool any = false;
      for (S g : p->grad) {
        if (!std::isfinite(static_cast<double>(g)))
          throw NumericError("optimizer: non-finite gradient in parameter '" + p->name + "'");
        if (g != S(0)) any = true;
      }
      if (!any) continue;
      if (kind == OptKind::Sgd) {
        for (std::size_t i = 0; i < p->value.size(); ++i)
          p->value[i] -= static_cast<S>(lr) * (p->grad[i] + static_cast<S>(weight_decay) * p->value[i]);
      } else {
        Moments& st = state_[p];
        if (st.m.empty()) {
          st.m.assign(p->size(), S(0));
          st.v.assign(p->size(), S(0));
        }
        st.t += 1;
        double bc1 = 1.0 - std::pow(beta1, static_cast<double>(st.t));
        double bc2 = 1.0 - std::pow(beta2, static_cast<double>(st.t));
        for (std::size_t i = 0; i < p->value.size(); ++i) {
          double g = static_cast<double>(p->grad[i]);
          double m = beta1 * static_cast<double>(st.m[i]) + (1.0 - beta1) * g;
          double v = beta2 * static_cast<double>(st.v[i]) + (1.0 - beta2) * g * g;
          st.m[i] = static_cast<S>(m);
          st.v[i] = static_cast<S>(v);
          double mh = m / bc1;
          double vh = v / bc2;
          double upd = lr * (mh / (std::sqrt(vh) + eps) + weight_decay * static_cast<double>(p->value[i]));
          p->value[i] -= static_cast<S>(upd);
        }
      }
    }
  }

  const Moments* moments(const Param<S>* p) const {
    auto it = state_.find(const_cast<Param<S>*>(p));
    return it == state_.end() ? nullptr : &it->second;
  }

 private:
  std::unordered_map<Param<S>*, Moments> state_;
};

/// Triangular cyclic learning rate between [low, high]; hits low at cycle
/// start and high exactly at mid-cycle.
class CyclicLr {
 public:
  CyclicLr(double low, double high, std::size_t cycle_steps)
      : low_(low), high_(high), cycle_(cycle_steps < 2 ? 2 : cycle_steps) {
    if (low <= 0 || high <= 0 || low > high)
      throw ValidationError("cyclic lr: bounds must be positive with low <= high");
  }

  double at(std::size_t step) const {
    std::size_t x = step % cycle_;
    std::size_t half = cycle_ / 2;
    double frac = (x <= half) ? static_cast<double>(x) / static_cast<double>(half)
                              : static_cast<double>(cycle_ - x) / static_cast<double>(cycle_ - half);
    return low_ + (high_ - low_) * frac;
  }

 private:
  double low_, high_;
  std::size_t cycle_;
};

}  // namespace mdctr
