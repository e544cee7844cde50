#include "dyneval/analysis.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <set>
#include <stdexcept>
#include <unordered_map>

#include "dyneval/errors.hpp"

namespace dyneval {

namespace {

bool is_no_call(Outcome outcome) {
  return outcome == Outcome::kNoCallMaxTurns || outcome == Outcome::kNoCallTerminated;
}

// Per-script mean of counts, in first-seen order.
std::vector<std::pair<std::string, double>> mean_by_script(
    std::span<const std::pair<std::string, int>> counts) {
  std::vector<std::pair<std::string, double>> out;
  std::vector<int> n;
  std::unordered_map<std::string, std::size_t> at;
  for (const auto& [id, count] : counts) {
    auto [it, inserted] = at.emplace(id, out.size());
    if (inserted) {
      out.emplace_back(id, 0.0);
      n.push_back(0);
    }
    out[it->second].second += count;
    ++n[it->second];
  }
  for (std::size_t i = 0; i < out.size(); ++i) out[i].second /= n[i];
  return out;
}

std::string csv_field(const std::string& text) {
  if (text.find_first_of(",\"\n") == std::string::npos) return text;
  std::string out = "\"";
  for (char c : text) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

std::string fixed(double value) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", value);
  return buf;
}

Json breakdown_json(const OutcomeBreakdown& b) {
  return Json{{"total", b.total},
              {"callMade", b.call_made},
              {"noCall", b.no_call},
              {"backendError", b.backend_error}};
}

Json score_json(const std::optional<MacroScore>& score) {
  if (!score) return nullptr;
  return Json{{"precision", score->precision}, {"recall", score->recall}, {"f1", score->f1}};
}

}  // namespace

OutcomeBreakdown outcome_breakdown(std::span<const SessionRecord> records) {
  if (records.empty()) throw std::invalid_argument("no records to analyse");
  int made = 0, no_call = 0, errors = 0;
  for (const auto& r : records) {
    if (r.outcome == Outcome::kCallMade) {
      ++made;
    } else if (is_no_call(r.outcome)) {
      ++no_call;
    } else {
      ++errors;
    }
  }
  const double n = static_cast<double>(records.size());
  return {static_cast<int>(records.size()), made / n, no_call / n, errors / n};
}

double reluctance_rate(std::span<const SessionRecord> records) {
  return outcome_breakdown(records).no_call;
}

Degradation degradation(double dynamic_rate, double static_rate, double epsilon) {
  Degradation d;
  d.dynamic_rate = dynamic_rate;
  d.static_rate = static_rate;
  d.absolute_gap = dynamic_rate - static_rate;
  d.relative_change = d.absolute_gap / std::max(static_rate, epsilon);
  return d;
}

IllusoryReport illusory_param_rate(std::span<const SessionRecord> records, const Corpus& corpus) {
  IllusoryReport report;
  for (const auto& r : records) {
    if (!r.final_call) continue;
    IllusoryFlag flag;
    flag.session_id = r.session_id;
    flag.script_id = r.script_id;
    flag.func_name = r.final_call->func_name;
    const ApiDocument* doc = corpus.find(r.final_call->func_name);
    if (doc == nullptr) {
      flag.unknown_function = true;
      flag.flagged = true;
      ++report.unknown_function;
    } else {
      for (const auto& [slot, value] : r.final_call->slots) {
        if (!doc->declares(slot)) flag.undeclared_slots.push_back(slot);
      }
      flag.flagged = !flag.undeclared_slots.empty();
    }
    if (flag.flagged) ++report.flagged;
    ++report.calls;
    report.flags.push_back(std::move(flag));
  }
  report.rate = report.calls == 0 ? 0.0 : static_cast<double>(report.flagged) / report.calls;
  return report;
}

VerbosityDelta verbosity_delta(std::span<const std::pair<std::string, int>> dynamic_counts,
                               std::span<const std::pair<std::string, int>> static_counts) {
  const auto dyn = mean_by_script(dynamic_counts);
  const auto stat = mean_by_script(static_counts);
  std::unordered_map<std::string, double> stat_by_id(stat.begin(), stat.end());

  VerbosityDelta out;
  double dyn_sum = 0.0, stat_sum = 0.0;
  for (const auto& [id, mean] : dyn) {
    auto it = stat_by_id.find(id);
    if (it == stat_by_id.end()) continue;
    dyn_sum += mean;
    stat_sum += it->second;
    ++out.matched_scripts;
  }
  if (out.matched_scripts == 0) {
    throw std::invalid_argument("no scriptId appears in both record sets");
  }
  out.mean_dynamic = dyn_sum / out.matched_scripts;
  out.mean_static = stat_sum / out.matched_scripts;
  out.delta = out.mean_dynamic - out.mean_static;
  return out;
}

VerbosityDelta verbosity_delta(std::span<const SessionRecord> records,
                               std::span<const StaticHistory> histories) {
  std::vector<std::pair<std::string, int>> dyn;
  for (const auto& r : records) {
    if (r.outcome == Outcome::kBackendError) continue;
    dyn.emplace_back(r.script_id, r.user_turn_count);
  }
  std::vector<std::pair<std::string, int>> stat;
  for (const auto& h : histories) stat.emplace_back(h.script_id, count_user_turns(h.turns));
  return verbosity_delta(dyn, stat);
}

Correlation correlate_methods(const std::map<std::string, std::vector<double>>& scores,
                              std::span<const double> reference,
                              std::span<const std::string> systems) {
  if (!systems.empty() && systems.size() != reference.size()) {
    throw std::invalid_argument("system names do not match the reference length");
  }
  Correlation out;
  for (const auto& [method, values] : scores) {
    if (values.size() != reference.size()) {
      throw std::invalid_argument("method '" + method + "' has " +
                                  std::to_string(values.size()) + " systems, reference has " +
                                  std::to_string(reference.size()));
    }
    const std::vector<double> columns[] = {values,
                                           std::vector<double>(reference.begin(), reference.end())};
    MethodAgreement agreement;
    agreement.pearson_r = pearson_r(values, reference);
    agreement.icc3 = icc3(RatingMatrix::from_columns(columns));
    agreement.n = static_cast<int>(values.size());
    out.report.emplace(method, agreement);
    for (std::size_t i = 0; i < values.size(); ++i) {
      out.scatter.push_back({method, systems.empty() ? std::to_string(i + 1) : systems[i],
                             values[i], reference[i]});
    }
  }
  return out;
}

void write_scatter_csv(std::span<const ScatterPoint> points, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "method,system,methodF1,referenceF1\n";
  for (const auto& p : points) {
    out << csv_field(p.method) << ',' << csv_field(p.system) << ',' << fixed(p.method_f1) << ','
        << fixed(p.reference_f1) << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

std::optional<MacroScore> score_records(std::span<const SessionRecord> records) {
  std::vector<SlotMatchResult> results;
  for (const auto& r : records) {
    if (r.outcome == Outcome::kBackendError || !r.score) continue;
    results.push_back(*r.score);
  }
  if (results.empty()) return std::nullopt;
  return aggregate(results);
}

Json build_analysis(const AnalysisInputs& in) {
  Json out = Json::object();
  out["recordCount"] = in.records.size();
  const auto score = score_records(in.records);
  out["score"] = score_json(score);

  const OutcomeBreakdown dyn = outcome_breakdown(in.records);
  Json reluctance{{"rate", dyn.no_call}, {"breakdown", breakdown_json(dyn)}};
  if (!in.static_records.empty()) {
    const OutcomeBreakdown stat = outcome_breakdown(in.static_records);
    const Degradation d = degradation(dyn.no_call, stat.no_call);
    reluctance["staticBreakdown"] = breakdown_json(stat);
    reluctance["degradation"] = Json{{"dynamicNoCallRate", d.dynamic_rate},
                                     {"staticNoCallRate", d.static_rate},
                                     {"absoluteGap", d.absolute_gap},
                                     {"relativeChange", d.relative_change}};
  }
  out["reluctance"] = std::move(reluctance);

  if (in.corpus != nullptr) {
    const IllusoryReport ill = illusory_param_rate(in.records, *in.corpus);
    Json flags = Json::array();
    for (const auto& f : ill.flags) {
      flags.push_back(Json{{"sessionId", f.session_id},
                           {"scriptId", f.script_id},
                           {"funcName", f.func_name},
                           {"flagged", f.flagged},
                           {"unknownFunction", f.unknown_function},
                           {"undeclaredSlots", f.undeclared_slots}});
    }
    out["illusoryParameters"] = Json{{"rate", ill.rate},
                                     {"calls", ill.calls},
                                     {"flagged", ill.flagged},
                                     {"unknownFunction", ill.unknown_function},
                                     {"records", std::move(flags)}};
  } else {
    out["illusoryParameters"] = nullptr;
  }

  out["verbosity"] = nullptr;
  if (!in.histories.empty()) {
    try {
      const VerbosityDelta v = verbosity_delta(in.records, in.histories);
      out["verbosity"] = Json{{"meanDynamicTurns", v.mean_dynamic},
                              {"meanStaticTurns", v.mean_static},
                              {"delta", v.delta},
                              {"matchedScripts", v.matched_scripts}};
    } catch (const std::invalid_argument& e) {
      out["verbosity"] = Json{{"error", e.what()}};
    }
  }

  out["staticDynamicGap"] = nullptr;
  if (!in.static_records.empty()) {
    const auto stat_score = score_records(in.static_records);
    Json gap{{"dynamic", score_json(score)}, {"static", score_json(stat_score)}};
    if (score && stat_score) gap["f1Gap"] = stat_score->f1 - score->f1;
    out["staticDynamicGap"] = std::move(gap);
  }
  return out;
}

}  // namespace dyneval
