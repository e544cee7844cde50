// One PASS/FAIL line per acceptance criterion. Exit status is non-zero if
// any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dyneval/analysis.hpp"
#include "dyneval/datagen.hpp"
#include "dyneval/metrics.hpp"
#include "dyneval/orchestrator.hpp"

namespace fs = std::filesystem;
using namespace dyneval;

namespace {

// Tolerances and budgets.
constexpr double kPearsonTol = 0.002;
constexpr double kIccTol = 0.02;
constexpr double kAgreementBudgetSec = 1.0;
constexpr int kOracleTrials = 1000;
constexpr int kOracleMaxSlots = 6;
constexpr double kOracleBudgetSec = 5.0;
constexpr double kToyF1 = 0.96;
constexpr double kDivergenceMaxDynamicF1 = 0.8;
constexpr double kIllusoryRate = 0.1;
constexpr double kVerbosityDelta = 1.88;
constexpr double kArithmeticTol = 1e-9;
constexpr int kMaxUserTurns = 8;
constexpr int kDuplicateLimit = 2;
constexpr int kDatagenAttempts = 3;

const fs::path kData = DYNEVAL_TEST_DATA;

struct Check {
  bool ok = true;
  std::string detail;

  void require(bool cond, const std::string& what) {
    if (!cond && ok) {
      ok = false;
      detail = what;
    } else if (!cond) {
      detail += "; " + what;
    }
  }
};

int failures = 0;

void report(const char* name, const std::function<Check()>& body) {
  Check c;
  try {
    c = body();
  } catch (const std::exception& e) {
    c.ok = false;
    c.detail = std::string("exception: ") + e.what();
  }
  if (!c.ok) ++failures;
  std::printf("%s %s%s%s\n", c.ok ? "PASS" : "FAIL", name, c.detail.empty() ? "" : " | ",
              c.detail.c_str());
  std::fflush(stdout);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

AssistantReply say(std::string text) { return AssistantReply{std::move(text), std::nullopt}; }

// --- agreement -------------------------------------------------------------

std::vector<std::pair<std::string, double>> read_scores(const std::string& name) {
  std::ifstream in(kData / "agreement" / name);
  if (!in) throw std::runtime_error("missing " + name);
  std::string line;
  std::getline(in, line);
  std::vector<std::pair<std::string, double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto comma = line.rfind(',');
    rows.emplace_back(line.substr(0, comma), std::stod(line.substr(comma + 1)));
  }
  return rows;
}

Check agreement() {
  Check c;
  const auto t0 = std::chrono::steady_clock::now();
  const auto human = read_scores("human.csv");
  std::vector<std::string> systems;
  std::vector<double> ref;
  for (const auto& [s, v] : human) {
    systems.push_back(s);
    ref.push_back(v);
  }
  struct Expect {
    const char* method;
    const char* file;
    double pearson;
    double icc;
  };
  const Expect expected[] = {{"gpt35", "gpt35_agent.csv", 0.9923, 0.9869},
                             {"llama", "llama_agent.csv", 0.9930, 0.9923},
                             {"static", "static.csv", 0.8813, 0.8813}};
  std::map<std::string, std::vector<double>> methods;
  for (const auto& e : expected) {
    std::vector<double> col;
    for (const auto& [s, v] : read_scores(e.file)) col.push_back(v);
    methods[e.method] = col;
  }
  Correlation got = correlate_methods(methods, ref, systems);
  for (const auto& e : expected) {
    const auto& a = got.report.at(e.method);
    c.require(std::fabs(a.pearson_r - e.pearson) <= kPearsonTol,
              std::string(e.method) + " R " + fmt(a.pearson_r) + " vs " + fmt(e.pearson));
    c.require(std::fabs(a.icc3 - e.icc) <= kIccTol,
              std::string(e.method) + " ICC " + fmt(a.icc3) + " vs " + fmt(e.icc));
  }
  const double secs = seconds_since(t0);
  c.require(secs < kAgreementBudgetSec, "took " + fmt(secs) + "s");
  if (c.ok) {
    c.detail = "R " + fmt(got.report["gpt35"].pearson_r) + "/" + fmt(got.report["llama"].pearson_r) +
               "/" + fmt(got.report["static"].pearson_r) + " ICC " +
               fmt(got.report["gpt35"].icc3) + "/" + fmt(got.report["llama"].icc3) + "/" +
               fmt(got.report["static"].icc3);
  }
  return c;
}

// --- metric oracle ---------------------------------------------------------

// Independent canonical form: trim, lower-case, numbers by value, bools apart.
std::string oracle_key(const SlotValue& v, bool numeric) {
  if (const auto* b = std::get_if<bool>(&v)) return *b ? "B1" : "B0";
  double number = 0.0;
  bool is_number = false;
  if (const auto* i = std::get_if<std::int64_t>(&v)) {
    number = static_cast<double>(*i);
    is_number = true;
  } else if (const auto* d = std::get_if<double>(&v)) {
    number = *d;
    is_number = true;
  }
  std::string s;
  if (!is_number) {
    const std::string& raw = std::get<std::string>(v);
    std::size_t a = 0, b = raw.size();
    while (a < b && std::isspace(static_cast<unsigned char>(raw[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(raw[b - 1]))) --b;
    for (std::size_t k = a; k < b; ++k) s.push_back(static_cast<char>(std::tolower(raw[k])));
    if (numeric && !s.empty()) {
      char* end = nullptr;
      const double parsed = std::strtod(s.c_str(), &end);
      const bool plain = s.find_first_not_of("0123456789.-+e") == std::string::npos;
      if (end == s.c_str() + s.size() && plain && std::isfinite(parsed)) {
        number = parsed;
        is_number = true;
      }
    }
  }
  if (is_number) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "N%.17g", number);
    return buf;
  }
  return "S" + s;
}

struct OracleCounts {
  int tp = 0, pred = 0, gold = 0;
};

OracleCounts oracle(const std::optional<ApiCall>& pred, const ApiCall& gold) {
  auto pairs = [](const ApiCall& call) {
    std::vector<std::pair<std::string, std::string>> out;
    out.emplace_back("funcName", oracle_key(SlotValue{call.func_name}, false));
    for (const auto& [k, v] : call.slots) out.emplace_back(k, oracle_key(v, true));
    return out;
  };
  OracleCounts c;
  const auto g = pairs(gold);
  c.gold = static_cast<int>(g.size());
  if (!pred) return c;
  const auto p = pairs(*pred);
  for (std::size_t i = 0; i < p.size(); ++i) {
    bool seen = false;
    for (std::size_t j = 0; j < i; ++j) seen = seen || p[j] == p[i];
    if (seen) continue;
    ++c.pred;
    bool hit = false;
    for (const auto& q : g) hit = hit || q == p[i];
    c.tp += hit;
  }
  return c;
}

bool same(const SlotMatchResult& r, const OracleCounts& o) {
  if (r.true_positives != o.tp || r.predicted_count != o.pred || r.gold_count != o.gold) {
    return false;
  }
  const double p = o.pred > 0 ? static_cast<double>(o.tp) / o.pred : 0.0;
  const double rc = static_cast<double>(o.tp) / o.gold;
  const double f1 = o.tp > 0 ? 2.0 * o.tp / (o.pred + o.gold) : 0.0;
  const double harmonic = (p + rc) > 0 ? 2 * p * rc / (p + rc) : 0.0;
  return r.precision == p && r.recall == rc && r.f1 == f1 && std::fabs(r.f1 - harmonic) < 1e-15;
}

Check metric_oracle() {
  Check c;
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(20240611);
  const std::vector<SlotValue> values = {
      SlotValue{std::string("Monday")}, SlotValue{std::string(" monday ")},
      SlotValue{std::string("MONDAY")}, SlotValue{std::string("Friday")},
      SlotValue{std::string("5")},      SlotValue{std::int64_t{5}},
      SlotValue{5.0},                   SlotValue{std::string("5.0")},
      SlotValue{2.5},                   SlotValue{std::string("2.50")},
      SlotValue{true},                  SlotValue{std::string("true")},
      SlotValue{false},                 SlotValue{std::string("")}};
  const std::vector<std::string> names = {"time", "date", "room", "count", "flag", "city"};
  const std::vector<std::string> funcs = {"BookRoom", "bookroom", "SetAlarm"};
  auto pick = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  auto random_call = [&](bool allow_repeat_names) {
    ApiCall call{funcs[pick(funcs.size())], {}};
    const std::size_t n = pick(kOracleMaxSlots + 1);
    std::vector<std::string> pool = names;
    for (std::size_t i = 0; i < n; ++i) {
      std::string name;
      if (allow_repeat_names) {
        name = names[pick(names.size())];
      } else {
        const std::size_t k = pick(pool.size());
        name = pool[k];
        pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(k));
      }
      call.slots.emplace_back(name, values[pick(values.size())]);
    }
    return call;
  };
  int mismatches = 0;
  for (int t = 0; t < kOracleTrials; ++t) {
    ApiCall gold = random_call(false);
    std::optional<ApiCall> pred;
    if (pick(10) != 0) pred = random_call(pick(4) == 0);
    if (!same(match_call(pred, gold), oracle(pred, gold))) ++mismatches;
  }
  c.require(mismatches == 0, std::to_string(mismatches) + " oracle mismatches");

  // Boundary cases.
  const ApiCall gold2{"BookRoom", {{"time", std::string("9")}, {"room", std::string("A")}}};
  const SlotMatchResult absent = match_call(std::nullopt, gold2);
  c.require(absent.f1 == 0.0 && absent.precision == 0.0 && absent.recall == 0.0 &&
                absent.gold_count == 3,
            "absent prediction");
  const ApiCall bare{"BookRoom", {}};
  const SlotMatchResult empty = match_call(bare, bare);
  c.require(empty.f1 == 1.0 && empty.gold_count == 1, "empty slots");
  const SlotMatchResult name_only = match_call(bare, gold2);
  c.require(name_only.precision == 1.0 && name_only.recall == 1.0 / 3.0 && name_only.f1 == 0.5,
            "funcName-only prediction");
  const double secs = seconds_since(t0);
  c.require(secs < kOracleBudgetSec, "took " + fmt(secs) + "s");
  if (c.ok) c.detail = std::to_string(kOracleTrials) + " pairs, " + fmt(secs) + "s";
  return c;
}

// --- end to end ------------------------------------------------------------

BatchBackends toy_backends() {
  BatchBackends b;
  b.assistant = make_backend_factory(load_backend_config(kData / "toy" / "assistant.json"));
  b.user_agent = make_backend_factory(load_backend_config(kData / "toy" / "user_agent.json"));
  return b;
}

// records.jsonl content without the wall-clock fields.
std::string records_text(const RunReport& report) {
  std::string out;
  for (const auto& r : report.records) {
    Json j = to_json(r);
    j.erase("startedAt");
    j.erase("finishedAt");
    out += j.dump() + "\n";
  }
  return out;
}

Check end_to_end() {
  Check c;
  const Dataset toy = load_dataset(kData / "toy");
  RunConfig config;
  config.repeats = 3;
  config.base_seed = 7;
  std::string reference;
  for (int invocation = 0; invocation < 3; ++invocation) {
    for (int parallelism : {1, 4}) {
      config.parallelism = parallelism;
      RunReport report = run_batch(toy, toy_backends(), config);
      c.require(report.overall && report.overall->mean_f1 == kToyF1,
                "macro F1 " + (report.overall ? fmt(report.overall->mean_f1) : "none"));
      for (const auto& rep : report.per_repeat) {
        c.require(rep.score && rep.score->f1 == kToyF1, "repeat " + std::to_string(rep.repeat));
      }
      const std::string text = records_text(report);
      if (reference.empty()) {
        reference = text;
      } else {
        c.require(text == reference, "records differ at invocation " +
                                         std::to_string(invocation) + " parallelism " +
                                         std::to_string(parallelism));
      }
    }
  }
  if (c.ok) c.detail = "F1 0.96, records identical over 3 invocations x parallelism {1,4}";
  return c;
}

// --- divergence ------------------------------------------------------------

Check divergence() {
  Check c;
  const Dataset data = load_dataset(kData / "divergence");
  RunConfig config;
  config.repeats = 1;
  BatchBackends dyn_backends;
  dyn_backends.assistant =
      make_backend_factory(load_backend_config(kData / "divergence" / "assistant_dynamic.json"));
  dyn_backends.user_agent =
      make_backend_factory(load_backend_config(kData / "divergence" / "user_agent.json"));
  BatchBackends stat_backends;
  stat_backends.assistant =
      make_backend_factory(load_backend_config(kData / "divergence" / "assistant_static.json"));

  RunReport dyn = run_batch(data, dyn_backends, config);
  config.mode = Mode::kStatic;
  RunReport stat = run_batch(data, stat_backends, config);
  c.require(stat.overall && stat.overall->mean_f1 == 1.0, "static F1 not 1.0");
  c.require(dyn.overall && dyn.overall->mean_f1 <= kDivergenceMaxDynamicF1,
            "dynamic F1 " + (dyn.overall ? fmt(dyn.overall->mean_f1) : "none"));
  Json analysis = build_analysis({dyn.records, stat.records, &data.corpus, data.histories});
  const Json& gap = analysis["staticDynamicGap"];
  c.require(gap.is_object() && gap.contains("f1Gap") && gap["f1Gap"].get<double>() > 0.0,
            "gap not reported");
  if (c.ok) {
    c.detail = "static " + fmt(stat.overall->mean_f1) + " dynamic " + fmt(dyn.overall->mean_f1) +
               " gap " + fmt(gap["f1Gap"].get<double>());
  }
  return c;
}

// --- pathologies -----------------------------------------------------------

// Endless distinct replies, so neither the duplicate rule nor an empty
// queue ends the dialogue.
class ChattyBackend : public ChatBackend {
 public:
  explicit ChattyBackend(std::string stem) : stem_(std::move(stem)) {}
  AssistantReply complete(const CompletionRequest&) override {
    return say(stem_ + " (" + std::to_string(++n_) + ")");
  }

 private:
  std::string stem_;
  int n_ = 0;
};

BatchBackends never_calling() {
  BatchBackends b;
  b.assistant = [](const SessionContext&) {
    return std::make_unique<ChattyBackend>("Could you tell me more?");
  };
  b.user_agent = [](const SessionContext&) {
    return std::make_unique<ChattyBackend>("Just do it please.");
  };
  return b;
}

Check pathologies() {
  Check c;
  const Dataset toy = load_dataset(kData / "toy");
  RunConfig config;
  config.repeats = 1;

  // (a) never calls
  RunReport silent = run_batch(toy, never_calling(), config);
  const double reluctance = reluctance_rate(silent.records);
  c.require(reluctance == 1.0, "reluctance " + fmt(reluctance));

  // (b) one undeclared slot in 1 of 10 calls
  BatchBackends inject;
  inject.user_agent = toy_backends().user_agent;
  const Dataset* d = &toy;
  inject.assistant = [d](const SessionContext& ctx) -> std::unique_ptr<ChatBackend> {
    ApiCall call = d->find_script(ctx.script_id)->api_call_label;
    if (ctx.script_id == "toy-04") call.slots.emplace_back("movieName", std::string("Up"));
    return std::make_unique<ScriptedBackend>(ReplyQueue{say(to_json(call).dump())});
  };
  RunReport injected = run_batch(toy, inject, config);
  IllusoryReport ill = illusory_param_rate(injected.records, toy.corpus);
  c.require(std::fabs(ill.rate - kIllusoryRate) < kArithmeticTol, "illusory " + fmt(ill.rate));
  bool flagged = false;
  for (const auto& f : ill.flags) {
    if (f.flagged) {
      flagged = f.script_id == "toy-04" &&
                f.undeclared_slots == std::vector<std::string>{"movieName"};
    }
  }
  c.require(flagged && ill.flagged == 1, "movieName record not flagged");

  // (c) mean user turns 5.08 against 3.2 over 25 scripts
  std::vector<std::pair<std::string, int>> dyn, stat;
  for (int i = 0; i < 25; ++i) {
    dyn.emplace_back("s" + std::to_string(i), i == 0 ? 7 : 5);
    stat.emplace_back("s" + std::to_string(i), i < 5 ? 4 : 3);
  }
  VerbosityDelta v = verbosity_delta(dyn, stat);
  c.require(std::fabs(v.delta - kVerbosityDelta) < kArithmeticTol, "verbosity " + fmt(v.delta));
  if (c.ok) {
    c.detail = "reluctance " + fmt(reluctance) + " illusory " + fmt(ill.rate) + " verbosity +" +
               fmt(v.delta);
  }
  return c;
}

// --- orchestrator policy ---------------------------------------------------

class EchoBridge : public UserTurnSource {
 public:
  UserAction next_turn(const UserScript&, std::span<const DialogueTurn> history) override {
    return {UserAction::Kind::kSay, "answer " + std::to_string(history.size())};
  }
};

Check orchestrator_policy() {
  Check c;
  const Dataset toy = load_dataset(kData / "toy");
  RunConfig config;
  config.repeats = 1;

  RunReport dyn = run_batch(toy, toy_backends(), config);
  config.mode = Mode::kStatic;
  BatchBackends stat_b;
  stat_b.assistant = make_backend_factory(load_backend_config(kData / "toy" / "assistant_static.json"));
  RunReport stat = run_batch(toy, stat_b, config);
  config.mode = Mode::kManual;
  BatchBackends man_b = toy_backends();
  man_b.bridge = [](const UserScript&) { return std::make_unique<EchoBridge>(); };
  RunReport man = run_batch(toy, man_b, config);
  for (const RunReport* r : {&dyn, &stat, &man}) {
    c.require(r->records.size() == toy.scripts.size(), "missing records");
    for (const auto& rec : r->records) {
      const UserScript* s = toy.find_script(rec.script_id);
      c.require(!rec.turns.empty() && rec.turns.front().content == s->initial_query,
                std::string(to_string(rec.mode)) + " first turn of " + rec.session_id);
    }
  }

  // Turn cap.
  config.mode = Mode::kDynamic;
  RunReport capped = run_batch(toy, never_calling(), config);
  for (const auto& rec : capped.records) {
    c.require(rec.user_turn_count <= kMaxUserTurns, rec.session_id + " exceeds turn cap");
    c.require(rec.outcome == Outcome::kNoCallMaxTurns && rec.user_turn_count == kMaxUserTurns,
              rec.session_id + " did not stop at the cap");
  }

  // Ends at the first call, leaving later replies unused.
  const UserScript& script = toy.scripts[0];
  const ApiDocument& doc = *toy.corpus.find(script.api_call_label.func_name);
  ScriptedBackend user({say("Yes."), say("Again.")});
  ScriptedBackend first_call(
      {say("Which label?"), say(to_json(script.api_call_label).dump()), say("Unused.")});
  SessionMeta meta;
  meta.session_id = "policy";
  SessionRecord ended = run_dynamic(script, doc, user, first_call, {}, meta);
  c.require(ended.outcome == Outcome::kCallMade && ended.turns.size() == 4 &&
                first_call.calls() == 2,
            "session did not end at first call");

  // Duplicate replies.
  ScriptedBackend user2({say("a"), say("b"), say("c"), say("d")});
  ScriptedBackend dup({say("Sorry?"), say("Sorry?"), say("Sorry?"), say("Sorry?")});
  TerminationPolicy policy;
  policy.duplicate_assistant_limit = kDuplicateLimit;
  SessionRecord repeated = run_dynamic(script, doc, user2, dup, policy, meta);
  c.require(repeated.outcome == Outcome::kNoCallTerminated && dup.calls() == 2,
            "duplicate termination after " + std::to_string(dup.calls()) + " replies");
  if (c.ok) c.detail = "first turn, cap 8, first-call stop, duplicate stop";
  return c;
}

// --- datagen ---------------------------------------------------------------

Check datagen() {
  Check c;
  const Dataset toy = load_dataset(kData / "toy");
  auto user_f = make_backend_factory(load_backend_config(kData / "toy" / "user_agent.json"));
  auto asst_f = make_backend_factory(load_backend_config(kData / "toy" / "assistant.json"));
  // Provisional labels that differ from what self-play produces.
  int replaced = 0;
  for (UserScript script : toy.scripts) {
    script.api_call_label.slots.resize(1);
    script.api_call_label.slots[0].second = std::string("provisional");
    const ApiDocument& doc = *toy.corpus.find(script.api_call_label.func_name);
    auto user = user_f(SessionContext{script.script_id, 0});
    auto asst = asst_f(SessionContext{script.script_id, 0});
    auto r = generate_static_history(script, doc, *user, *asst, {}, kDatagenAttempts);
    if (!r.history) {
      c.require(false, script.script_id + " produced no history");
      continue;
    }
    c.require(r.finalized_script->api_call_label == r.history->gold_call,
              script.script_id + " label not replaced");
    c.require(r.finalized_script->api_call_label != script.api_call_label,
              script.script_id + " provisional label survived");
    c.require(validate_script(*r.finalized_script, toy.corpus).ok(),
              script.script_id + " fails validation");
    c.require(r.history->turns.front().content == script.initial_query,
              script.script_id + " history start");
    ++replaced;
  }

  // Persistent-invalid dialogue.
  const UserScript& s = toy.scripts[0];
  const ApiDocument& doc = *toy.corpus.find(s.api_call_label.func_name);
  ReplyQueue bad;
  for (int i = 0; i < 10; ++i) bad.push_back(say(R"({"funcName":"SetAlarm","movieName":"Up"})"));
  ScriptedBackend user({});
  ScriptedBackend asst(bad);
  auto dropped = generate_static_history(s, doc, user, asst, {}, kDatagenAttempts);
  c.require(!dropped.history && dropped.attempts == kDatagenAttempts &&
                asst.calls() == static_cast<std::size_t>(kDatagenAttempts),
            "invalid dialogue not dropped after 3 attempts");
  if (c.ok) c.detail = std::to_string(replaced) + " labels replaced by produced calls";
  return c;
}

}  // namespace

int main() {
  report("agreement-reproduction", agreement);
  report("metric-oracle", metric_oracle);
  report("end-to-end-deterministic", end_to_end);
  report("static-dynamic-divergence", divergence);
  report("pathology-analyzers", pathologies);
  report("orchestrator-policy", orchestrator_policy);
  report("datagen", datagen);
  return failures == 0 ? 0 : 1;
}
