#pragma once

/// Domain-agnostic head: a tower over the pooled final backbone tap, and
/// nothing else. It never reads intermediate taps or any domain network
/// state, which is what makes it usable as the zero-shot predictor for
/// domains with no training data.

#include <string>
#include <vector>

#include "mdctr/backbone.hpp"
#include "mdctr/nn.hpp"

namespace mdctr {

struct GeneralConfig {
  std::vector<std::size_t> tower_dims = {64, 32, 16};
};

template <class S>
class GeneralHead {
 public:
  GeneralConfig cfg;
  Tower<S> tower;

  GeneralHead() = default;
  GeneralHead(GeneralConfig config, std::size_t backbone_hidden, Rng& rng)
      : cfg(std::move(config)), tower("general.tower", backbone_hidden, cfg.tower_dims, rng) {}

  std::vector<Param<S>*> params() {
    std::vector<Param<S>*> out;
    tower.collect(out);
    return out;
  }

  /// pooled h_L -> probability per sample, (batch,)
  Tensor<S> predict(Tape<S>& t, Tensor<S> pooled_h_last, double drop = 0.0, Rng* rng = nullptr) {
    return tower.forward(t, pooled_h_last, drop, rng);
  }
};

}  // namespace mdctr
