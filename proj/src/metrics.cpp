#include "mdctr/metrics.hpp"

#include <algorithm>
#include <cstdint>
#include <numeric>

namespace mdctr {

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size())
    throw ValidationError("auc: " + std::to_string(scores.size()) + " scores vs " +
                          std::to_string(labels.size()) + " labels");
  std::int64_t num_pos = 0, num_neg = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw ValidationError("auc: label outside {0,1}");
    (y == 1 ? num_pos : num_neg) += 1;
  }
  if (num_pos == 0 || num_neg == 0)
    throw NumericError("auc: undefined metric, only one class present (" + std::to_string(num_pos) +
                       " positive, " + std::to_string(num_neg) + " negative)");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // walk tie groups; a positive beats every negative strictly below it (2
  // units) and halves every negative tied with it (1 unit)
  std::int64_t numer = 0;  // in half-win units
  std::int64_t neg_below = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    std::int64_t pos_here = 0, neg_here = 0;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      (labels[order[j]] == 1 ? pos_here : neg_here) += 1;
      ++j;
    }
    numer += pos_here * (2 * neg_below + neg_here);
    neg_below += neg_here;
    i = j;
  }
  return static_cast<double>(numer) / static_cast<double>(2 * num_pos * num_neg);
}

double rela_impr(double auc_measure, double auc_base) {
  if (auc_base == 0.5)
    throw NumericError("rela_impr: undefined for a base AUC of exactly 0.5");
  return ((auc_measure - 0.5) / (auc_base - 0.5) - 1.0) * 100.0;
}

}  // namespace mdctr
