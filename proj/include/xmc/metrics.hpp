#pragma once

#include <span>
#include <vector>

namespace xmc {

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  int support = 0;  // gold count
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  double accuracy = 0.0;
};

// Per-class precision/recall/F1 with 0/0 -> 0; macro values are unweighted
// means over all classes.
MetricsReport compute_metrics(std::span<const int> predictions, std::span<const int> golds,
                              int classes);

}  // namespace xmc
