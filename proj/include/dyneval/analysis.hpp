#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dyneval/corpus.hpp"
#include "dyneval/metrics.hpp"

namespace dyneval {

struct OutcomeBreakdown {
  int total = 0;
  double call_made = 0.0;
  double no_call = 0.0;  // NoCallMaxTurns + NoCallTerminated
  double backend_error = 0.0;
};

// Throws std::invalid_argument on an empty record set.
OutcomeBreakdown outcome_breakdown(std::span<const SessionRecord> records);

// Fraction of sessions that ended without a call.
double reluctance_rate(std::span<const SessionRecord> records);

// Deterioration is ambiguous between a gap and a ratio, so both the absolute
// gap and the relative change are kept.
struct Degradation {
  double dynamic_rate = 0.0;
  double static_rate = 0.0;
  double absolute_gap = 0.0;     // dynamic - static
  double relative_change = 0.0;  // (dynamic - static) / max(static, epsilon)
};

Degradation degradation(double dynamic_rate, double static_rate, double epsilon = 1e-9);

struct IllusoryFlag {
  std::string session_id;
  std::string script_id;
  std::string func_name;
  std::vector<std::string> undeclared_slots;
  bool unknown_function = false;
  bool flagged = false;
};

struct IllusoryReport {
  double rate = 0.0;
  int calls = 0;  // records with a final call
  int flagged = 0;
  int unknown_function = 0;
  std::vector<IllusoryFlag> flags;  // one per record with a final call
};

// Records without a final call are left out of the denominator; an empty
// denominator yields rate 0.
IllusoryReport illusory_param_rate(std::span<const SessionRecord> records, const Corpus& corpus);

struct VerbosityDelta {
  double mean_dynamic = 0.0;
  double mean_static = 0.0;
  double delta = 0.0;  // mean_dynamic - mean_static; negative means shorter
  int matched_scripts = 0;
};

// Per-script user-turn counts; scripts present on only one side are
// ignored. Throws std::invalid_argument when nothing overlaps.
VerbosityDelta verbosity_delta(std::span<const std::pair<std::string, int>> dynamic_counts,
                               std::span<const std::pair<std::string, int>> static_counts);

// Dynamic user-turn counts from records (backend errors skipped) against
// the user turns of each static history.
VerbosityDelta verbosity_delta(std::span<const SessionRecord> records,
                               std::span<const StaticHistory> histories);

struct ScatterPoint {
  std::string method;
  std::string system;
  double method_f1 = 0.0;
  double reference_f1 = 0.0;
};

struct Correlation {
  AgreementReport report;
  std::vector<ScatterPoint> scatter;
};

// Pearson R and ICC(3,1) of each method's per-system F1 against the
// reference. Throws std::invalid_argument on length mismatch.
Correlation correlate_methods(const std::map<std::string, std::vector<double>>& scores,
                              std::span<const double> reference,
                              std::span<const std::string> systems = {});

void write_scatter_csv(std::span<const ScatterPoint> points, const std::filesystem::path& path);

// Macro P/R/F1 over scored records (backend errors excluded).
std::optional<MacroScore> score_records(std::span<const SessionRecord> records);

struct AnalysisInputs {
  std::span<const SessionRecord> records;
  std::span<const SessionRecord> static_records;  // optional comparison run
  const Corpus* corpus = nullptr;
  std::span<const StaticHistory> histories;
};

// Everything the `report` command writes to analysis.json.
Json build_analysis(const AnalysisInputs& inputs);

}  // namespace dyneval
