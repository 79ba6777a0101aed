#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "iam/error.hpp"
#include "iam/tensor.hpp"

namespace iam {

// Step excluded from the loss.
constexpr int kMaskedLabel = -1;

// Timed action segment. verb/noun are optional factorized ids, -1 if absent.
struct SegmentAnnotation {
  double start_s = 0.0;
  double stop_s = 0.0;
  int action = 0;
  int verb = -1;
  int noun = -1;
};

// Fixed-length training sequence: features row per timestep, label per
// timestep (kMaskedLabel for steps excluded from the loss).
struct LabeledWindow {
  Mat<float> features;      // T x F
  std::vector<int> labels;  // length T
  bool masked(size_t t) const { return labels[t] == kMaskedLabel; }
  size_t unmasked_count() const {
    size_t n = 0;
    for (int l : labels)
      if (l != kMaskedLabel) ++n;
    return n;
  }
};

// labels[t] = action of the first segment whose start lies in
// (frame_times[t], frame_times[t] + tau_a]; masked when no segment starts
// in that interval. Segments must be sorted and non-overlapping.
inline std::vector<int> anticipation_labels(std::span<const SegmentAnnotation> segments,
                                            std::span<const double> frame_times,
                                            double tau_a) {
  check(tau_a > 0.0, "anticipation_labels: tau_a must be > 0");
  for (size_t i = 0; i < segments.size(); ++i) {
    check(segments[i].stop_s > segments[i].start_s,
          "anticipation_labels: segment stop must be after start");
    if (i > 0) {
      check(segments[i].start_s >= segments[i - 1].start_s,
            "anticipation_labels: segments must be sorted by start");
      check(segments[i].start_s >= segments[i - 1].stop_s,
            "anticipation_labels: overlapping segments");
    }
  }
  for (size_t t = 1; t < frame_times.size(); ++t)
    check(frame_times[t] > frame_times[t - 1],
          "anticipation_labels: frame times must be increasing");

  std::vector<int> labels(frame_times.size(), kMaskedLabel);
  size_t seg = 0;
  for (size_t t = 0; t < frame_times.size(); ++t) {
    const double lo = frame_times[t];
    while (seg < segments.size() && segments[seg].start_s <= lo) ++seg;
    if (seg < segments.size() && segments[seg].start_s <= lo + tau_a)
      labels[t] = segments[seg].action;
  }
  return labels;
}

// w_c proportional to 1/max(count_c, 1), renormalized to mean 1.
inline std::vector<double> class_weights(std::span<const int64_t> counts) {
  check(!counts.empty(), "class_weights: empty counts");
  bool any = false;
  std::vector<double> w(counts.size());
  double sum = 0.0;
  for (size_t c = 0; c < counts.size(); ++c) {
    check(counts[c] >= 0, "class_weights: negative count");
    if (counts[c] > 0) any = true;
    w[c] = 1.0 / static_cast<double>(std::max<int64_t>(counts[c], 1));
    sum += w[c];
  }
  check(any, "class_weights: all counts are zero");
  const double scale = static_cast<double>(counts.size()) / sum;
  for (auto& v : w) v *= scale;
  return w;
}

}  // namespace iam
