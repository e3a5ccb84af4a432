#include "changedet/metrics.hpp"

#include <sstream>

#include <nlohmann/json.hpp>

#include "changedet/errors.hpp"

namespace changedet {

namespace {

void check_pair(const ag::Tensor& pred, const ag::Tensor& truth) {
  if (!pred.same_shape(truth)) {
    throw ShapeError("prediction and ground truth shapes disagree: " + pred.shape_str() + " vs " +
                     truth.shape_str());
  }
}

bool truth_positive(float v, std::int64_t i) {
  if (v != 0.0f && v != 1.0f) {
    throw DomainError("ground truth must be binary, found " + std::to_string(v) + " at index " +
                      std::to_string(i));
  }
  return v == 1.0f;
}

}  // namespace

ConfusionCounts confusion(const ag::Tensor& pred, const ag::Tensor& truth, double threshold) {
  check_pair(pred, truth);
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw DomainError("threshold must lie strictly between 0 and 1, got " +
                      std::to_string(threshold));
  }
  ConfusionCounts c;
  const float t = static_cast<float>(threshold);
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    const bool hit = pred[i] >= t;
    const bool pos = truth_positive(truth[i], i);
    if (hit && pos) ++c.tp;
    else if (hit) ++c.fp;
    else if (pos) ++c.fn;
    else ++c.tn;
  }
  return c;
}

ConfusionCounts confusion_binary(const ag::Tensor& pred, const ag::Tensor& truth) {
  check_pair(pred, truth);
  ConfusionCounts c;
  for (std::int64_t i = 0; i < pred.numel(); ++i) {
    if (pred[i] != 0.0f && pred[i] != 1.0f) {
      throw DomainError("binary prediction expected, found " + std::to_string(pred[i]) +
                        " at index " + std::to_string(i));
    }
    const bool hit = pred[i] == 1.0f;
    const bool pos = truth_positive(truth[i], i);
    if (hit && pos) ++c.tp;
    else if (hit) ++c.fp;
    else if (pos) ++c.fn;
    else ++c.tn;
  }
  return c;
}

MetricsReport report(const ConfusionCounts& counts) {
  MetricsReport r;
  r.counts = counts;
  const auto tp = static_cast<double>(counts.tp);
  if (counts.tp + counts.fp + counts.fn == 0) {
    // No positives predicted and none present: perfect on an empty problem.
    r.degenerate = true;
    r.precision = r.recall = r.f1 = r.iou = 1.0;
    return r;
  }
  r.precision = (counts.tp + counts.fp) ? tp / static_cast<double>(counts.tp + counts.fp) : 0.0;
  r.recall = (counts.tp + counts.fn) ? tp / static_cast<double>(counts.tp + counts.fn) : 0.0;
  r.f1 = (r.precision + r.recall > 0.0) ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
                                        : 0.0;
  r.iou = tp / static_cast<double>(counts.tp + counts.fp + counts.fn);
  return r;
}

ConfusionCounts accumulate(const std::vector<ConfusionCounts>& counts) {
  ConfusionCounts total;
  for (const auto& c : counts) {
    total.tp += c.tp;
    total.fp += c.fp;
    total.fn += c.fn;
    total.tn += c.tn;
  }
  return total;
}

std::string metrics_to_text(const MetricsReport& r) {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(4);
  out << "precision " << r.precision << "  recall " << r.recall << "  f1 " << r.f1 << "  iou "
      << r.iou;
  out << "  (tp " << r.counts.tp << " fp " << r.counts.fp << " fn " << r.counts.fn << " tn "
      << r.counts.tn << ")";
  if (r.degenerate) out << "  [no positives in prediction or truth]";
  return out.str();
}

std::string metrics_to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["precision"] = r.precision;
  j["recall"] = r.recall;
  j["f1"] = r.f1;
  j["iou"] = r.iou;
  j["degenerate"] = r.degenerate;
  j["counts"] = {{"tp", r.counts.tp}, {"fp", r.counts.fp}, {"fn", r.counts.fn}, {"tn", r.counts.tn}};
  return j.dump(2);
}

}  // namespace changedet
