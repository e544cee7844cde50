#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dyneval/corpus.hpp"
#include "dyneval/slot_match.hpp"

namespace dyneval {

// How slot values are compared. Matching is exact after normalization.
struct NormalizationPolicy {
  bool case_insensitive = true;
  bool trim_whitespace = true;
  bool numeric_equivalence = true;  // "5", 5 and 5.0 compare equal
};

SlotValue normalize_value(const SlotValue& value, const NormalizationPolicy& policy = {});
ApiCall normalize_call(const ApiCall& call, const NormalizationPolicy& policy = {});

// Canonical (name, value) pairs of a call, funcName included as one pair.
std::vector<std::pair<std::string, std::string>> call_pairs(
    const ApiCall& call, const NormalizationPolicy& policy = {});

SlotMatchResult match_call(const std::optional<ApiCall>& pred, const ApiCall& gold,
                           const NormalizationPolicy& policy = {});

struct MacroScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Mean of per-dialogue P, R and F1. Throws std::invalid_argument when empty.
MacroScore aggregate(std::span<const SlotMatchResult> results);

struct RepeatStats {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, n-1 denominator
};

RepeatStats repeat_stats(std::span<const double> per_run);

struct AggregateScore {
  double mean_p = 0.0;
  double mean_r = 0.0;
  double mean_f1 = 0.0;
  double std_f1 = 0.0;
  int run_count = 1;
  int dialogue_count = 1;
};

// Folds per-repeat macro scores into one result row.
AggregateScore combine_repeats(std::span<const MacroScore> per_repeat, int dialogue_count);

// Throws std::invalid_argument on length mismatch or fewer than 3 points,
// std::domain_error when either side has zero variance.
double pearson_r(std::span<const double> xs, std::span<const double> ys);

// n systems (rows) by k methods (columns), row-major.
class RatingMatrix {
 public:
  RatingMatrix(std::size_t rows, std::size_t cols);
  static RatingMatrix from_columns(std::span<const std::vector<double>> columns);

  double& at(std::size_t row, std::size_t col) { return cells_[row * cols_ + col]; }
  double at(std::size_t row, std::size_t col) const { return cells_[row * cols_ + col]; }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::vector<double> cells_;
};

// ICC(3,1): two-way mixed effects, consistency, single rater.
//   (MS_rows - MS_error) / (MS_rows + (k - 1) MS_error)
// Throws std::invalid_argument for n < 3 or k < 2, std::domain_error when
// the between-row variance is zero.
double icc3(const RatingMatrix& ratings);

struct MethodAgreement {
  double icc3 = 0.0;
  double pearson_r = 0.0;
  int n = 0;
};

using AgreementReport = std::map<std::string, MethodAgreement>;

Json to_json(const AgreementReport& report);

// "NN.NN" on a 0-100 scale.
std::string format_percent(double fraction);

}  // namespace dyneval
