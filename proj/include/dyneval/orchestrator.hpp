#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dyneval/backends.hpp"
#include "dyneval/corpus.hpp"
#include "dyneval/metrics.hpp"

namespace dyneval {

struct TerminationPolicy {
  int max_user_turns = 8;
  // End once this many consecutive assistant messages are byte-identical.
  int duplicate_assistant_limit = 2;
};

TerminationPolicy policy_from_json(const Json& object);

// Balanced top-level {...} spans of `text`, in order. Braces inside JSON
// strings are honoured; unmatched braces are ignored.
std::vector<std::string_view> find_json_objects(std::string_view text);

// Structured call if present, else the last top-level JSON object in the
// content that parses and carries "funcName". Not checked against `doc`.
std::optional<ApiCall> extract_api_call(const AssistantReply& reply, const ApiDocument& doc);

struct SessionMeta {
  std::string session_id;
  std::optional<int> repeat;
  std::uint64_t seed = 0;
  NormalizationPolicy normalization;
  std::function<std::string()> clock = utc_timestamp;
};

// Turn-by-turn state of one dynamic or manual dialogue. The caller keeps
// `script`, `doc` and `assistant` alive for the session's lifetime.
class DialogueSession {
 public:
  DialogueSession(Mode mode, const UserScript& script, const ApiDocument& doc,
                  ChatBackend& assistant, TerminationPolicy policy, SessionMeta meta);

  // Rebuilds a session from persisted turns without calling the backend.
  static DialogueSession restore(Mode mode, const UserScript& script, const ApiDocument& doc,
                                 ChatBackend& assistant, TerminationPolicy policy,
                                 SessionMeta meta, std::vector<DialogueTurn> turns,
                                 std::string started_at);

  // Applies the fixed initial query and asks the assistant for its reply.
  void start();

  // Appends a user turn and the assistant's reply, then applies the
  // termination policy. On BackendError the user turn is removed again when
  // `retract_on_failure`, otherwise it stays for the record; either way the
  // error propagates.
  void submit_user_turn(std::string content, bool retract_on_failure = true);

  void finish_terminated(std::optional<std::string> reason);
  void finish_backend_error(std::string detail);

  bool started() const { return !turns_.empty(); }
  bool finished() const { return outcome_.has_value(); }
  std::optional<Outcome> outcome() const { return outcome_; }
  const std::vector<DialogueTurn>& turns() const { return turns_; }
  int user_turn_count() const { return count_user_turns(turns_); }
  const UserScript& script() const { return *script_; }
  const std::string& session_id() const { return meta_.session_id; }
  const std::string& started_at() const { return started_at_; }

  // Throws std::logic_error unless finished.
  SessionRecord record() const;

 private:
  void ask_assistant();
  void evaluate_reply();
  void finish(Outcome outcome);

  Mode mode_;
  const UserScript* script_;
  const ApiDocument* doc_;
  ChatBackend* assistant_;
  TerminationPolicy policy_;
  SessionMeta meta_;
  std::vector<DialogueTurn> turns_;
  std::optional<Outcome> outcome_;
  std::optional<ApiCall> final_call_;
  std::optional<std::string> reason_;
  std::optional<std::string> error_;
  std::string started_at_;
  std::string finished_at_;
};

// Where the next user turn comes from.
struct UserAction {
  enum class Kind { kSay, kFinish, kDisconnect };
  Kind kind = Kind::kSay;
  std::string text;  // utterance for kSay, reason for kFinish
};

class UserTurnSource {
 public:
  virtual ~UserTurnSource() = default;
  virtual UserAction next_turn(const UserScript& script,
                               std::span<const DialogueTurn> history) = 0;
};

// Simulated user: a chat backend prompted with the user script.
class UserAgentSource : public UserTurnSource {
 public:
  UserAgentSource(ChatBackend& backend, std::uint64_t seed);
  UserAction next_turn(const UserScript& script, std::span<const DialogueTurn> history) override;

 private:
  ChatBackend* backend_;
  std::uint64_t seed_;
};

SessionRecord run_dynamic(const UserScript& script, const ApiDocument& doc,
                          ChatBackend& user_agent, ChatBackend& assistant,
                          const TerminationPolicy& policy, SessionMeta meta);

SessionRecord run_static(const StaticHistory& history, const ApiDocument& doc,
                         ChatBackend& assistant, SessionMeta meta);

// Sessions whose human bridge dropped, kept for resumption by id.
class ParkedSessions {
 public:
  void park(DialogueSession session);
  std::optional<DialogueSession> take(const std::string& session_id);
  std::vector<std::string> ids() const;
  std::size_t size() const;

 private:
  mutable std::mutex mu_;
  std::map<std::string, DialogueSession> sessions_;
};

// Same loop as run_dynamic with user turns from `bridge`. Returns nullopt
// when the bridge disconnects; the session is then in `parking`.
std::optional<SessionRecord> run_manual(const UserScript& script, const ApiDocument& doc,
                                        ChatBackend& assistant, UserTurnSource& bridge,
                                        const TerminationPolicy& policy, SessionMeta meta,
                                        ParkedSessions& parking);

// Continues a parked session. Throws NotFoundError for an unknown id.
std::optional<SessionRecord> resume_manual(const std::string& session_id, UserTurnSource& bridge,
                                           ParkedSessions& parking);

struct Dataset {
  Corpus corpus;
  std::vector<UserScript> scripts;
  std::vector<StaticHistory> histories;

  const UserScript* find_script(std::string_view script_id) const;
};

// Reads apis.jsonl, scripts.jsonl and, when present, static.jsonl from a
// directory, then validates their cross references.
Dataset load_dataset(const std::filesystem::path& dir);

// Throws ValidationError on the first broken reference: unknown function,
// undeclared slot, history without a script, or a history whose first turn
// differs from the script's initial query.
void validate_dataset(const Dataset& dataset);

std::uint64_t session_seed(std::uint64_t base_seed, int repeat, std::string_view script_id);

struct RunConfig {
  Mode mode = Mode::kDynamic;
  int repeats = 3;
  int parallelism = 1;
  std::uint64_t base_seed = 0;
  TerminationPolicy policy;  // ignored in static mode
  NormalizationPolicy normalization;
  std::function<std::string()> clock = utc_timestamp;
};

struct BatchBackends {
  BackendFactory assistant;
  BackendFactory user_agent;  // dynamic mode
  std::function<std::unique_ptr<UserTurnSource>(const UserScript&)> bridge;  // manual mode
};

struct RepeatSummary {
  int repeat = 0;
  std::uint64_t seed = 0;
  std::optional<MacroScore> score;  // absent when every session errored
  int dialogue_count = 0;
  int error_count = 0;
};

struct RunReport {
  Mode mode = Mode::kDynamic;
  std::vector<SessionRecord> records;  // repeat-major, dataset order within
  std::vector<RepeatSummary> per_repeat;
  std::optional<AggregateScore> overall;
  int error_count = 0;
  int parked_count = 0;
};

// Runs every script (dynamic, manual) or history (static) once per repeat
// with at most `parallelism` sessions in flight. Session failures become
// BackendError records and are left out of the scores.
RunReport run_batch(const Dataset& dataset, const BatchBackends& backends,
                    const RunConfig& config);

Json to_json(const RunReport& report);

// "P 100.00  R 93.33  F1 96.00 ± 0.00"
std::string format_table_row(const AggregateScore& score);

}  // namespace dyneval
