#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "mdctr/tensor.hpp"

namespace mdctr {

/// Result of a central-finite-difference audit of one tensor program.
struct FiniteDiffReport {
  struct Entry {
    std::string param;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
  };
  std::vector<Entry> entries;
  double worst_rel_err = 0.0;
  bool deterministic = true;

  bool pass(double tol) const { return deterministic && worst_rel_err < tol; }
};

/// Audit reverse-mode gradients of a scalar program against central finite
/// differences. The program is recorded once; perturbed evaluations reuse
/// tape replay, so any stored randomness (dropout masks) is held fixed.
/// Meant to run with S = double and the default step 1e-4.
template <class S>
FiniteDiffReport finite_diff_check(const std::function<Tensor<S>(Tape<S>&)>& build,
                                   const std::vector<Param<S>*>& params, double step = 1e-4) {
  Tape<S> tape;
  Tensor<S> loss = build(tape);
  if (numel(loss.shape()) != 1) throw ValidationError("finite_diff_check: program must end in a scalar");

  FiniteDiffReport report;

  // determinism audit: a replay must reproduce every recorded value bit-identically
  std::vector<std::vector<S>> snapshot;
  snapshot.reserve(tape.nodes.size());
  for (const auto& n : tape.nodes) snapshot.push_back(n.value);
  tape.replay();
  for (std::size_t i = 0; i < tape.nodes.size(); ++i)
    if (tape.nodes[i].value != snapshot[i]) report.deterministic = false;
  if (!report.deterministic) return report;

  for (Param<S>* p : params) p->zero_grad();
  backward(loss);

  for (Param<S>* p : params) {
    FiniteDiffReport::Entry entry;
    entry.param = p->name;
    double fd_norm = 0.0, an_norm = 0.0;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      S keep = p->value[i];
      p->value[i] = keep + static_cast<S>(step);
      tape.replay();
      double up = static_cast<double>(tape.nodes[loss.id].value[0]);
      p->value[i] = keep - static_cast<S>(step);
      tape.replay();
      double down = static_cast<double>(tape.nodes[loss.id].value[0]);
      p->value[i] = keep;
      double fd = (up - down) / (2.0 * step);
      double an = static_cast<double>(p->grad[i]);
      entry.max_abs_err = std::max(entry.max_abs_err, std::abs(fd - an));
      fd_norm = std::max(fd_norm, std::abs(fd));
      an_norm = std::max(an_norm, std::abs(an));
    }
    // per-parameter relative error: worst element error against the
    // tensor's gradient scale, so truncation noise on near-zero entries of
    // an otherwise healthy tensor does not read as a gradient defect
    entry.max_rel_err = entry.max_abs_err / std::max({fd_norm, an_norm, 1e-8});
    report.worst_rel_err = std::max(report.worst_rel_err, entry.max_rel_err);
    report.entries.push_back(std::move(entry));
  }
  tape.replay();  // leave recorded values consistent with unperturbed parameters
  return report;
}

}  // namespace mdctr
