#pragma once

namespace dyneval {

// Slot-level comparison of one predicted call against its gold label.
struct SlotMatchResult {
  int true_positives = 0;
  int predicted_count = 0;
  int gold_count = 1;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;

  bool operator==(const SlotMatchResult&) const = default;
};

}  // namespace dyneval
