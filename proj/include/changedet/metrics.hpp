#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "changedet/tensor.hpp"

namespace changedet {

struct ConfusionCounts {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
};

struct MetricsReport {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  double iou = 0.0;
  ConfusionCounts counts;
  // Set when the evaluation was empty of positives on both sides, in which
  // case every metric is reported as 1.0 by convention.
  bool degenerate = false;
};

// Binarizes pred at >= threshold and tallies per-pixel agreement with the
// {0,1} ground truth. Shapes must match; threshold must lie in (0, 1).
ConfusionCounts confusion(const ag::Tensor& pred, const ag::Tensor& truth, double threshold);

// Same tally for already-binarized predictions stored as 0/1 floats.
ConfusionCounts confusion_binary(const ag::Tensor& pred, const ag::Tensor& truth);

// Precision, recall, F1, and IoU from pixel counts. A denominator of zero
// yields 1.0 when the problem is empty of positives entirely (flagged), 0.0
// otherwise.
MetricsReport report(const ConfusionCounts& counts);

// Fieldwise sum; report(accumulate(...)) is the micro-averaged dataset metric.
ConfusionCounts accumulate(const std::vector<ConfusionCounts>& counts);

std::string metrics_to_text(const MetricsReport& r);
std::string metrics_to_json(const MetricsReport& r);

}  // namespace changedet
