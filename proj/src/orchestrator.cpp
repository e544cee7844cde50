#include "dyneval/orchestrator.hpp"

#include <atomic>
#include <cstdio>
#include <stdexcept>
#include <thread>

#include "dyneval/errors.hpp"
#include "dyneval/prompts.hpp"

namespace dyneval {

namespace {

constexpr std::string_view kRepeatedMessageReason = "assistant repeated an identical message";

SessionRecord error_record(Mode mode, const std::string& script_id, const SessionMeta& meta,
                           const std::string& detail) {
  SessionRecord r;
  r.session_id = meta.session_id;
  r.mode = mode;
  r.script_id = script_id;
  r.outcome = Outcome::kBackendError;
  r.seed = meta.seed;
  r.repeat = meta.repeat;
  r.error = detail;
  r.started_at = meta.clock();
  r.finished_at = r.started_at;
  return r;
}

// Returns false when the source disconnected before the session finished.
bool drive(DialogueSession& session, UserTurnSource& source) {
  while (!session.finished()) {
    UserAction action;
    try {
      action = source.next_turn(session.script(), session.turns());
    } catch (const BackendError& e) {
      session.finish_backend_error(std::string("user turn source: ") + e.what());
      break;
    }
    switch (action.kind) {
      case UserAction::Kind::kSay:
        try {
          session.submit_user_turn(std::move(action.text), /*retract_on_failure=*/false);
        } catch (const BackendError& e) {
          session.finish_backend_error(e.what());
        }
        break;
      case UserAction::Kind::kFinish:
        session.finish_terminated(action.text.empty() ? std::nullopt
                                                      : std::optional<std::string>(action.text));
        break;
      case UserAction::Kind::kDisconnect:
        return false;
    }
  }
  return true;
}

void start_or_fail(DialogueSession& session) {
  try {
    session.start();
  } catch (const BackendError& e) {
    session.finish_backend_error(e.what());
  }
}

std::uint64_t fnv1a(std::uint64_t h, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

TerminationPolicy policy_from_json(const Json& object) {
  TerminationPolicy p;
  if (!object.is_object()) throw UsageError("termination policy must be a JSON object");
  try {
    if (object.contains("maxUserTurns")) p.max_user_turns = object["maxUserTurns"].get<int>();
    if (object.contains("duplicateAssistantLimit")) {
      p.duplicate_assistant_limit = object["duplicateAssistantLimit"].get<int>();
    }
  } catch (const Json::exception& e) {
    throw UsageError(std::string("termination policy: ") + e.what());
  }
  if (p.max_user_turns < 1 || p.duplicate_assistant_limit < 1) {
    throw UsageError("termination policy limits must be >= 1");
  }
  return p;
}

std::vector<std::string_view> find_json_objects(std::string_view text) {
  std::vector<std::string_view> out;
  int depth = 0;
  bool in_string = false;
  bool escaped = false;
  std::size_t start = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    if (depth == 0) {
      if (c == '{') {
        depth = 1;
        start = i;
        in_string = false;
        escaped = false;
      }
      continue;
    }
    if (in_string) {
      if (escaped) {
        escaped = false;
      } else if (c == '\\') {
        escaped = true;
      } else if (c == '"') {
        in_string = false;
      }
      continue;
    }
    if (c == '"') {
      in_string = true;
    } else if (c == '{') {
      ++depth;
    } else if (c == '}') {
      if (--depth == 0) out.push_back(text.substr(start, i - start + 1));
    }
  }
  return out;
}

std::optional<ApiCall> extract_api_call(const AssistantReply& reply, const ApiDocument& /*doc*/) {
  if (reply.structured_call) return reply.structured_call;
  std::optional<ApiCall> last;
  for (auto candidate : find_json_objects(reply.content)) {
    try {
      Json j = parse_json_strict(candidate);
      if (!j.is_object() || !j.contains(std::string(kFuncNameKey))) continue;
      last = call_from_json(j);
    } catch (const std::exception&) {
      // Malformed or non-scalar candidate: skip it.
    }
  }
  return last;
}

DialogueSession::DialogueSession(Mode mode, const UserScript& script, const ApiDocument& doc,
                                 ChatBackend& assistant, TerminationPolicy policy,
                                 SessionMeta meta)
    : mode_(mode),
      script_(&script),
      doc_(&doc),
      assistant_(&assistant),
      policy_(policy),
      meta_(std::move(meta)) {
  if (!meta_.clock) meta_.clock = utc_timestamp;
}

DialogueSession DialogueSession::restore(Mode mode, const UserScript& script,
                                         const ApiDocument& doc, ChatBackend& assistant,
                                         TerminationPolicy policy, SessionMeta meta,
                                         std::vector<DialogueTurn> turns,
                                         std::string started_at) {
  check_alternation(turns);
  DialogueSession s(mode, script, doc, assistant, policy, std::move(meta));
  s.turns_ = std::move(turns);
  s.started_at_ = std::move(started_at);
  return s;
}

void DialogueSession::start() {
  if (started()) throw std::logic_error("session already started");
  started_at_ = meta_.clock();
  turns_.push_back(DialogueTurn{Role::kUser, script_->initial_query, std::nullopt, 1});
  ask_assistant();
  evaluate_reply();
}

void DialogueSession::submit_user_turn(std::string content, bool retract_on_failure) {
  if (finished()) throw ConflictError("session " + meta_.session_id + " is finished");
  if (!started()) throw std::logic_error("session not started");
  if (turns_.back().role != Role::kAssistant) {
    throw ConflictError("session " + meta_.session_id + " is waiting for the assistant");
  }
  turns_.push_back(DialogueTurn{Role::kUser, std::move(content), std::nullopt,
                                static_cast<int>(turns_.size() + 1)});
  try {
    ask_assistant();
  } catch (const BackendError&) {
    if (retract_on_failure) turns_.pop_back();
    throw;
  }
  evaluate_reply();
}

void DialogueSession::ask_assistant() {
  CompletionRequest request;
  request.messages = assistant_messages(*doc_, turns_);
  request.tools = build_tools(*doc_);
  request.seed = meta_.seed;
  AssistantReply reply = assistant_->complete(request);
  turns_.push_back(DialogueTurn{Role::kAssistant, std::move(reply.content),
                                std::move(reply.structured_call),
                                static_cast<int>(turns_.size() + 1)});
}

void DialogueSession::evaluate_reply() {
  const DialogueTurn& reply = turns_.back();
  if (auto call = extract_api_call(AssistantReply{reply.content, reply.structured_call}, *doc_)) {
    final_call_ = std::move(call);
    finish(Outcome::kCallMade);
    return;
  }
  int identical = 0;
  for (auto it = turns_.rbegin(); it != turns_.rend(); ++it) {
    if (it->role != Role::kAssistant) continue;
    if (it->content != reply.content) break;
    ++identical;
  }
  if (identical >= policy_.duplicate_assistant_limit) {
    reason_ = std::string(kRepeatedMessageReason);
    finish(Outcome::kNoCallTerminated);
    return;
  }
  if (user_turn_count() >= policy_.max_user_turns) finish(Outcome::kNoCallMaxTurns);
}

void DialogueSession::finish(Outcome outcome) {
  outcome_ = outcome;
  finished_at_ = meta_.clock();
  if (started_at_.empty()) started_at_ = finished_at_;
}

void DialogueSession::finish_terminated(std::optional<std::string> reason) {
  if (finished()) throw ConflictError("session " + meta_.session_id + " is already finished");
  reason_ = std::move(reason);
  finish(Outcome::kNoCallTerminated);
}

void DialogueSession::finish_backend_error(std::string detail) {
  if (finished()) throw ConflictError("session " + meta_.session_id + " is already finished");
  error_ = std::move(detail);
  finish(Outcome::kBackendError);
}

SessionRecord DialogueSession::record() const {
  if (!finished()) throw std::logic_error("session " + meta_.session_id + " not finished");
  SessionRecord r;
  r.session_id = meta_.session_id;
  r.mode = mode_;
  r.script_id = script_->script_id;
  r.turns = turns_;
  r.outcome = *outcome_;
  r.final_call = final_call_;
  r.user_turn_count = user_turn_count();
  r.seed = meta_.seed;
  r.repeat = meta_.repeat;
  r.started_at = started_at_;
  r.finished_at = finished_at_;
  r.reason = reason_;
  r.error = error_;
  if (*outcome_ != Outcome::kBackendError) {
    r.score = match_call(final_call_, script_->api_call_label, meta_.normalization);
  }
  return r;
}

UserAgentSource::UserAgentSource(ChatBackend& backend, std::uint64_t seed)
    : backend_(&backend), seed_(seed) {}

UserAction UserAgentSource::next_turn(const UserScript& script,
                                      std::span<const DialogueTurn> history) {
  CompletionRequest request;
  request.messages = user_agent_messages(script, history);
  request.seed = seed_;
  AssistantReply reply = backend_->complete(request);
  if (reply.content.empty()) throw BackendError("user agent returned an empty utterance");
  return UserAction{UserAction::Kind::kSay, std::move(reply.content)};
}

SessionRecord run_dynamic(const UserScript& script, const ApiDocument& doc,
                          ChatBackend& user_agent, ChatBackend& assistant,
                          const TerminationPolicy& policy, SessionMeta meta) {
  std::uint64_t seed = meta.seed;
  DialogueSession session(Mode::kDynamic, script, doc, assistant, policy, std::move(meta));
  start_or_fail(session);
  UserAgentSource source(user_agent, seed);
  drive(session, source);
  return session.record();
}

SessionRecord run_static(const StaticHistory& history, const ApiDocument& doc,
                         ChatBackend& assistant, SessionMeta meta) {
  if (!meta.clock) meta.clock = utc_timestamp;
  SessionRecord r;
  r.session_id = meta.session_id;
  r.mode = Mode::kStatic;
  r.script_id = history.script_id;
  r.seed = meta.seed;
  r.repeat = meta.repeat;
  r.started_at = meta.clock();
  r.turns = history.turns;
  renumber(r.turns);
  r.user_turn_count = count_user_turns(history.turns);

  std::vector<ChatMessage> messages = assistant_messages(doc, r.turns);
  if (r.turns.empty() || r.turns.back().role == Role::kAssistant) {
    r.turns.push_back(DialogueTurn{Role::kUser, std::string(kStaticInstruction), std::nullopt,
                                   static_cast<int>(r.turns.size() + 1)});
    messages.push_back(ChatMessage{ChatRole::kUser, std::string(kStaticInstruction), std::nullopt});
    r.extra["instructionPlacement"] = "turn";
  } else {
    // Keep the transcript alternating: the instruction rides on the final
    // user message sent to the backend and is noted on the record.
    messages.back().content += "\n\n";
    messages.back().content += kStaticInstruction;
    r.extra["instructionPlacement"] = "merged";
    r.extra["instruction"] = std::string(kStaticInstruction);
  }

  CompletionRequest request{std::move(messages), build_tools(doc), meta.seed};
  try {
    AssistantReply reply = assistant.complete(request);
    auto call = extract_api_call(reply, doc);
    r.turns.push_back(DialogueTurn{Role::kAssistant, std::move(reply.content),
                                   std::move(reply.structured_call),
                                   static_cast<int>(r.turns.size() + 1)});
    r.final_call = std::move(call);
    r.outcome = r.final_call ? Outcome::kCallMade : Outcome::kNoCallTerminated;
    r.score = match_call(r.final_call, history.gold_call, meta.normalization);
  } catch (const BackendError& e) {
    r.outcome = Outcome::kBackendError;
    r.error = e.what();
  }
  r.finished_at = meta.clock();
  return r;
}

void ParkedSessions::park(DialogueSession session) {
  std::lock_guard lock(mu_);
  std::string id = session.session_id();
  sessions_.insert_or_assign(std::move(id), std::move(session));
}

std::optional<DialogueSession> ParkedSessions::take(const std::string& session_id) {
  std::lock_guard lock(mu_);
  auto node = sessions_.extract(session_id);
  if (node.empty()) return std::nullopt;
  return std::move(node.mapped());
}

std::vector<std::string> ParkedSessions::ids() const {
  std::lock_guard lock(mu_);
  std::vector<std::string> out;
  for (const auto& [id, _] : sessions_) out.push_back(id);
  return out;
}

std::size_t ParkedSessions::size() const {
  std::lock_guard lock(mu_);
  return sessions_.size();
}

std::optional<SessionRecord> run_manual(const UserScript& script, const ApiDocument& doc,
                                        ChatBackend& assistant, UserTurnSource& bridge,
                                        const TerminationPolicy& policy, SessionMeta meta,
                                        ParkedSessions& parking) {
  DialogueSession session(Mode::kManual, script, doc, assistant, policy, std::move(meta));
  start_or_fail(session);
  if (!drive(session, bridge)) {
    parking.park(std::move(session));
    return std::nullopt;
  }
  return session.record();
}

std::optional<SessionRecord> resume_manual(const std::string& session_id, UserTurnSource& bridge,
                                           ParkedSessions& parking) {
  auto session = parking.take(session_id);
  if (!session) throw NotFoundError("no parked session " + session_id);
  if (!drive(*session, bridge)) {
    parking.park(std::move(*session));
    return std::nullopt;
  }
  return session->record();
}

const UserScript* Dataset::find_script(std::string_view script_id) const {
  for (const auto& s : scripts) {
    if (s.script_id == script_id) return &s;
  }
  return nullptr;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw UsageError("dataset is not a directory: " + dir.string());
  Dataset d;
  d.corpus = Corpus(load_corpus(dir / "apis.jsonl"));
  d.scripts = load_scripts(dir / "scripts.jsonl");
  if (std::filesystem::exists(dir / "static.jsonl")) {
    d.histories = load_static_histories(dir / "static.jsonl");
  }
  validate_dataset(d);
  return d;
}

void validate_dataset(const Dataset& dataset) {
  for (const auto& s : dataset.scripts) {
    auto report = validate_script(s, dataset.corpus);
    if (!report.ok()) {
      const auto& v = report.violations.front();
      throw ValidationError("script " + s.script_id + ": " +
                            (v.kind == Violation::Kind::kUnknownFunction ? "unknown function "
                                                                         : "undeclared slot ") +
                            v.detail);
    }
  }
  for (const auto& h : dataset.histories) {
    const UserScript* s = dataset.find_script(h.script_id);
    if (s == nullptr) throw ValidationError("static history for unknown script " + h.script_id);
    if (h.turns.empty() || h.turns.front().content != s->initial_query) {
      throw ValidationError("static history " + h.script_id +
                            ": first turn differs from the script's initial query");
    }
    if (dataset.corpus.find(h.gold_call.func_name) == nullptr) {
      throw ValidationError("static history " + h.script_id + ": unknown function " +
                            h.gold_call.func_name);
    }
  }
}

std::uint64_t session_seed(std::uint64_t base_seed, int repeat, std::string_view script_id) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>(base_seed >> (8 * i));
  h = fnv1a(h, buf, 8);
  auto r = static_cast<std::uint32_t>(repeat);
  for (int i = 0; i < 4; ++i) buf[i] = static_cast<unsigned char>(r >> (8 * i));
  h = fnv1a(h, buf, 4);
  return fnv1a(h, script_id.data(), script_id.size());
}

RunReport run_batch(const Dataset& dataset, const BatchBackends& backends,
                    const RunConfig& config) {
  if (config.repeats < 1) throw UsageError("repeats must be >= 1");
  if (config.parallelism < 1) throw UsageError("parallelism must be >= 1");
  if (!backends.assistant) throw UsageError("no assistant backend configured");
  const bool is_static = config.mode == Mode::kStatic;
  if (is_static && dataset.histories.empty()) {
    throw UsageError("static mode needs a dataset with static histories");
  }
  if (config.mode == Mode::kDynamic && !backends.user_agent) {
    throw UsageError("dynamic mode needs a user-agent backend");
  }
  if (config.mode == Mode::kManual && !backends.bridge) {
    throw UsageError("manual mode needs a human turn bridge");
  }

  const std::size_t items = is_static ? dataset.histories.size() : dataset.scripts.size();
  const std::size_t tasks = items * static_cast<std::size_t>(config.repeats);
  std::vector<std::optional<SessionRecord>> results(tasks);
  ParkedSessions parking;

  auto run_one = [&](std::size_t task) {
    const int repeat = static_cast<int>(task / items);
    const std::size_t item = task % items;
    const std::string& script_id =
        is_static ? dataset.histories[item].script_id : dataset.scripts[item].script_id;
    SessionMeta meta;
    meta.session_id = std::string(to_string(config.mode)) + "-r" + std::to_string(repeat) + "-" +
                      script_id + (is_static ? "-h" + std::to_string(item) : "");
    meta.repeat = repeat;
    meta.seed = session_seed(config.base_seed, repeat, script_id);
    meta.normalization = config.normalization;
    meta.clock = config.clock;
    try {
      const UserScript* script = dataset.find_script(script_id);
      SessionContext ctx{script_id, meta.seed};
      auto assistant = backends.assistant(ctx);
      if (is_static) {
        const StaticHistory& h = dataset.histories[item];
        const ApiDocument* doc = dataset.corpus.find(h.gold_call.func_name);
        if (doc == nullptr) throw ValidationError("unknown function " + h.gold_call.func_name);
        results[task] = run_static(h, *doc, *assistant, meta);
        return;
      }
      const ApiDocument* doc = dataset.corpus.find(script->api_call_label.func_name);
      if (doc == nullptr) throw ValidationError("unknown function " + script->api_call_label.func_name);
      if (config.mode == Mode::kDynamic) {
        auto user_agent = backends.user_agent(ctx);
        results[task] = run_dynamic(*script, *doc, *user_agent, *assistant, config.policy, meta);
      } else {
        auto bridge = backends.bridge(*script);
        results[task] =
            run_manual(*script, *doc, *assistant, *bridge, config.policy, meta, parking);
      }
    } catch (const std::exception& e) {
      results[task] = error_record(config.mode, script_id, meta, e.what());
    }
  };

  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(config.parallelism),
                                                    tasks);
  if (workers <= 1) {
    for (std::size_t t = 0; t < tasks; ++t) run_one(t);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t t = next++; t < tasks; t = next++) run_one(t);
      });
    }
  }

  RunReport report;
  report.mode = config.mode;
  std::vector<MacroScore> repeat_scores;
  for (int repeat = 0; repeat < config.repeats; ++repeat) {
    RepeatSummary summary;
    summary.repeat = repeat;
    summary.seed = config.base_seed + static_cast<std::uint64_t>(repeat);
    summary.dialogue_count = static_cast<int>(items);
    std::vector<SlotMatchResult> scores;
    for (std::size_t item = 0; item < items; ++item) {
      auto& slot = results[static_cast<std::size_t>(repeat) * items + item];
      if (!slot) {
        ++report.parked_count;
        continue;
      }
      if (slot->outcome == Outcome::kBackendError) ++summary.error_count;
      if (slot->score) scores.push_back(*slot->score);
      report.records.push_back(std::move(*slot));
    }
    if (!scores.empty()) {
      summary.score = aggregate(scores);
      repeat_scores.push_back(*summary.score);
    }
    report.error_count += summary.error_count;
    report.per_repeat.push_back(summary);
  }
  if (!repeat_scores.empty()) {
    report.overall = combine_repeats(repeat_scores, static_cast<int>(items));
  }
  return report;
}

Json to_json(const RunReport& report) {
  Json j = Json::object();
  j["mode"] = std::string(to_string(report.mode));
  Json per = Json::array();
  for (const auto& r : report.per_repeat) {
    Json e = Json::object();
    e["repeat"] = r.repeat;
    e["seed"] = r.seed;
    if (r.score) {
      e["precision"] = r.score->precision;
      e["recall"] = r.score->recall;
      e["f1"] = r.score->f1;
    } else {
      e["precision"] = nullptr;
      e["recall"] = nullptr;
      e["f1"] = nullptr;
    }
    e["dialogueCount"] = r.dialogue_count;
    e["errorCount"] = r.error_count;
    per.push_back(std::move(e));
  }
  j["perRepeat"] = std::move(per);
  if (report.overall) {
    j["mean"] = Json{{"precision", report.overall->mean_p},
                     {"recall", report.overall->mean_r},
                     {"f1", report.overall->mean_f1}};
    j["std"] = report.overall->std_f1;
    j["runCount"] = report.overall->run_count;
    j["dialogueCount"] = report.overall->dialogue_count;
  } else {
    j["mean"] = nullptr;
    j["std"] = nullptr;
  }
  j["errorCount"] = report.error_count;
  j["parkedCount"] = report.parked_count;
  return j;
}

std::string format_table_row(const AggregateScore& score) {
  return "P " + format_percent(score.mean_p) + "  R " + format_percent(score.mean_r) + "  F1 " +
         format_percent(score.mean_f1) + " ± " + format_percent(score.std_f1);
}

}  // namespace dyneval
