#include "dyneval/metrics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <set>
#include <stdexcept>

namespace dyneval {

namespace {

std::string trim(std::string_view s) {
  auto first = s.find_first_not_of(" \t\r\n\f\v");
  if (first == std::string_view::npos) return {};
  auto last = s.find_last_not_of(" \t\r\n\f\v");
  return std::string(s.substr(first, last - first + 1));
}

std::string ascii_lower(std::string s) {
  for (char& c : s) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
  }
  return s;
}

constexpr double kInt64Bound = 9223372036854775808.0;  // 2^63

std::optional<SlotValue> integral_double(double d) {
  if (std::isfinite(d) && d == std::floor(d) && d >= -kInt64Bound && d < kInt64Bound) {
    return static_cast<std::int64_t>(d);
  }
  return std::nullopt;
}

// Whole-string numeric parse; no surrounding whitespace, finite only.
std::optional<SlotValue> parse_number(std::string_view s) {
  if (s.empty()) return std::nullopt;
  const char* begin = s.data();
  const char* end = s.data() + s.size();
  std::int64_t i = 0;
  auto [iend, iec] = std::from_chars(begin, end, i);
  if (iec == std::errc() && iend == end) return i;
  double d = 0.0;
  auto [dend, dec] = std::from_chars(begin, end, d);
  if (dec == std::errc() && dend == end && std::isfinite(d)) {
    if (auto as_int = integral_double(d)) return as_int;
    return d;
  }
  return std::nullopt;
}

std::string double_repr(double d) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, d);
  return ec == std::errc() ? std::string(buf, end) : std::to_string(d);
}

std::string canonical_key(const SlotValue& v) {
  struct Visitor {
    std::string operator()(const std::string& s) const { return "s:" + s; }
    std::string operator()(std::int64_t i) const { return "n:" + std::to_string(i); }
    std::string operator()(double d) const { return "n:" + double_repr(d); }
    std::string operator()(bool b) const { return b ? "b:true" : "b:false"; }
  };
  return std::visit(Visitor{}, v);
}

// Neumaier summation, so a mean of exact per-dialogue scores does not pick
// up order-dependent rounding.
class CompensatedSum {
 public:
  void add(double x) {
    const double t = sum_ + x;
    if (std::fabs(sum_) >= std::fabs(x)) {
      c_ += (sum_ - t) + x;
    } else {
      c_ += (x - t) + sum_;
    }
    sum_ = t;
  }
  double value() const { return sum_ + c_; }

 private:
  double sum_ = 0.0;
  double c_ = 0.0;
};

double checked_mean(std::span<const double> v) {
  CompensatedSum sum;
  for (double x : v) sum.add(x);
  return sum.value() / static_cast<double>(v.size());
}

}  // namespace

SlotValue normalize_value(const SlotValue& value, const NormalizationPolicy& policy) {
  if (const auto* s = std::get_if<std::string>(&value)) {
    std::string out = policy.trim_whitespace ? trim(*s) : *s;
    if (policy.case_insensitive) out = ascii_lower(std::move(out));
    if (policy.numeric_equivalence) {
      if (auto number = parse_number(out)) return *number;
    }
    return out;
  }
  if (const auto* d = std::get_if<double>(&value)) {
    if (policy.numeric_equivalence) {
      if (auto as_int = integral_double(*d)) return *as_int;
    }
  }
  return value;
}

ApiCall normalize_call(const ApiCall& call, const NormalizationPolicy& policy) {
  ApiCall out;
  NormalizationPolicy name_policy = policy;
  name_policy.numeric_equivalence = false;
  out.func_name = std::get<std::string>(normalize_value(call.func_name, name_policy));
  out.slots.reserve(call.slots.size());
  for (const auto& [name, value] : call.slots) {
    out.slots.emplace_back(name, normalize_value(value, policy));
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> call_pairs(const ApiCall& call,
                                                            const NormalizationPolicy& policy) {
  ApiCall normalized = normalize_call(call, policy);
  std::vector<std::pair<std::string, std::string>> pairs;
  pairs.reserve(normalized.slots.size() + 1);
  pairs.emplace_back(std::string(kFuncNameKey), canonical_key(normalized.func_name));
  for (const auto& [name, value] : normalized.slots) {
    pairs.emplace_back(name, canonical_key(value));
  }
  return pairs;
}

SlotMatchResult match_call(const std::optional<ApiCall>& pred, const ApiCall& gold,
                           const NormalizationPolicy& policy) {
  SlotMatchResult r;
  auto gold_pairs = call_pairs(gold, policy);
  r.gold_count = static_cast<int>(gold_pairs.size());
  if (!pred) return r;

  std::set<std::pair<std::string, std::string>> gold_set(gold_pairs.begin(), gold_pairs.end());
  auto pred_pairs = call_pairs(*pred, policy);
  std::set<std::pair<std::string, std::string>> pred_set(pred_pairs.begin(), pred_pairs.end());
  r.predicted_count = static_cast<int>(pred_set.size());
  for (const auto& p : pred_set) r.true_positives += gold_set.count(p) ? 1 : 0;

  r.precision = r.predicted_count > 0
                    ? static_cast<double>(r.true_positives) / r.predicted_count
                    : 0.0;
  r.recall = static_cast<double>(r.true_positives) / r.gold_count;
  // Harmonic mean of P and R, written over the counts.
  const int denom = r.predicted_count + r.gold_count;
  r.f1 = r.true_positives > 0 ? 2.0 * r.true_positives / denom : 0.0;
  return r;
}

MacroScore aggregate(std::span<const SlotMatchResult> results) {
  if (results.empty()) throw std::invalid_argument("aggregate: no results");
  CompensatedSum p, r, f;
  for (const auto& x : results) {
    p.add(x.precision);
    r.add(x.recall);
    f.add(x.f1);
  }
  const double n = static_cast<double>(results.size());
  return MacroScore{p.value() / n, r.value() / n, f.value() / n};
}

RepeatStats repeat_stats(std::span<const double> per_run) {
  if (per_run.empty()) throw std::invalid_argument("repeat_stats: no runs");
  RepeatStats s;
  s.mean = checked_mean(per_run);
  if (per_run.size() > 1) {
    double ss = 0.0;
    for (double x : per_run) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(per_run.size() - 1));
  }
  return s;
}

AggregateScore combine_repeats(std::span<const MacroScore> per_repeat, int dialogue_count) {
  if (per_repeat.empty()) throw std::invalid_argument("combine_repeats: no repeats");
  std::vector<double> p, r, f;
  for (const auto& m : per_repeat) {
    p.push_back(m.precision);
    r.push_back(m.recall);
    f.push_back(m.f1);
  }
  AggregateScore a;
  a.mean_p = checked_mean(p);
  a.mean_r = checked_mean(r);
  auto fs = repeat_stats(f);
  a.mean_f1 = fs.mean;
  a.std_f1 = fs.std;
  a.run_count = static_cast<int>(per_repeat.size());
  a.dialogue_count = dialogue_count;
  return a;
}

double pearson_r(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("pearson_r: length mismatch");
  if (xs.size() < 3) throw std::invalid_argument("pearson_r: need at least 3 points");
  double mx = checked_mean(xs);
  double my = checked_mean(ys);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    double dx = xs[i] - mx;
    double dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) throw std::domain_error("pearson_r: zero variance");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

RatingMatrix::RatingMatrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), cells_(rows * cols, 0.0) {}

RatingMatrix RatingMatrix::from_columns(std::span<const std::vector<double>> columns) {
  if (columns.empty()) return RatingMatrix(0, 0);
  std::size_t n = columns.front().size();
  for (const auto& c : columns) {
    if (c.size() != n) throw std::invalid_argument("RatingMatrix: ragged columns");
  }
  RatingMatrix m(n, columns.size());
  for (std::size_t j = 0; j < columns.size(); ++j) {
    for (std::size_t i = 0; i < n; ++i) m.at(i, j) = columns[j][i];
  }
  return m;
}

double icc3(const RatingMatrix& ratings) {
  const std::size_t n = ratings.rows();
  const std::size_t k = ratings.cols();
  if (n < 3 || k < 2) throw std::invalid_argument("icc3: need n >= 3 systems and k >= 2 methods");

  double grand = 0.0;
  std::vector<double> row_mean(n, 0.0), col_mean(k, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double x = ratings.at(i, j);
      if (!std::isfinite(x)) throw std::invalid_argument("icc3: non-finite rating");
      row_mean[i] += x;
      col_mean[j] += x;
      grand += x;
    }
  }
  for (auto& m : row_mean) m /= static_cast<double>(k);
  for (auto& m : col_mean) m /= static_cast<double>(n);
  grand /= static_cast<double>(n * k);

  double ss_rows = 0.0, ss_cols = 0.0, ss_total = 0.0;
  for (std::size_t i = 0; i < n; ++i) ss_rows += (row_mean[i] - grand) * (row_mean[i] - grand);
  ss_rows *= static_cast<double>(k);
  for (std::size_t j = 0; j < k; ++j) ss_cols += (col_mean[j] - grand) * (col_mean[j] - grand);
  ss_cols *= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      double d = ratings.at(i, j) - grand;
      ss_total += d * d;
    }
  }
  // Residual can dip a hair below zero through cancellation.
  double ss_error = std::max(0.0, ss_total - ss_rows - ss_cols);

  double ms_rows = ss_rows / static_cast<double>(n - 1);
  double ms_error = ss_error / static_cast<double>((n - 1) * (k - 1));
  double scale = std::max(1.0, ss_total);
  if (ms_rows <= 1e-12 * scale) throw std::domain_error("icc3: zero between-system variance");
  double denom = ms_rows + static_cast<double>(k - 1) * ms_error;
  return std::clamp((ms_rows - ms_error) / denom, -1.0, 1.0);
}

Json to_json(const AgreementReport& report) {
  Json j = Json::object();
  for (const auto& [method, a] : report) {
    j[method] = Json{{"icc3", a.icc3}, {"pearsonR", a.pearson_r}, {"n", a.n}};
  }
  return j;
}

std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", fraction * 100.0);
  return buf;
}

}  // namespace dyneval
