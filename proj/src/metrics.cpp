#include "xmc/metrics.hpp"

#include <string>

#include "xmc/error.hpp"

namespace xmc {

MetricsReport compute_metrics(std::span<const int> predictions, std::span<const int> golds,
                              int classes) {
  if (predictions.size() != golds.size()) {
    throw ArgumentError("metrics: prediction and gold counts differ");
  }
  if (predictions.empty()) throw ArgumentError("metrics: empty inputs");
  if (classes < 1) throw ArgumentError("metrics: class count must be positive");

  std::vector<int> tp(classes, 0), pred_count(classes, 0), gold_count(classes, 0);
  int correct = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const int p = predictions[i];
    const int y = golds[i];
    if (p < 0 || p >= classes || y < 0 || y >= classes) {
      throw ArgumentError("metrics: class index out of range at position " + std::to_string(i));
    }
    pred_count[p]++;
    gold_count[y]++;
    if (p == y) {
      tp[p]++;
      correct++;
    }
  }

  MetricsReport report;
  report.per_class.resize(classes);
  const auto ratio = [](int num, int den) { return den == 0 ? 0.0 : double(num) / den; };
  for (int c = 0; c < classes; ++c) {
    auto& m = report.per_class[c];
    m.support = gold_count[c];
    m.precision = ratio(tp[c], pred_count[c]);
    m.recall = ratio(tp[c], gold_count[c]);
    const double pr = m.precision + m.recall;
    m.f1 = pr == 0.0 ? 0.0 : 2.0 * m.precision * m.recall / pr;
    report.macro_precision += m.precision;
    report.macro_recall += m.recall;
    report.macro_f1 += m.f1;
  }
  report.macro_precision /= classes;
  report.macro_recall /= classes;
  report.macro_f1 /= classes;
  report.accuracy = double(correct) / predictions.size();
  return report;
}

}  // namespace xmc
