#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdctr/errors.hpp"

namespace mdctr {

/// Area under the ROC curve by the Mann-Whitney rank statistic, ties
/// counting one half. Computed through an exact integer numerator
/// (2*wins + ties over all positive/negative pairs), so it equals the
/// pairwise definition bit for bit.
double auc(const std::vector<double>& scores, const std::vector<int>& labels);

/// relative improvement over a baseline, normalized by the 0.5 random floor:
/// ((measure - 0.5) / (base - 0.5) - 1) * 100
double rela_impr(double auc_measure, double auc_base);

struct DomainMetric {
  std::string domain;
  double auc = 0.0;
  double rela_impr_pct = 0.0;  // vs a named base run, when provided
  std::size_t samples = 0;
};

struct MetricsReport {
  std::vector<DomainMetric> per_domain;
  std::string base_run;  // empty when no comparison was requested
};

}  // namespace mdctr
