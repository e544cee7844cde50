#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "dyneval/slot_match.hpp"

namespace dyneval {

// Insertion-ordered JSON; slot and parameter order survives a round trip.
using Json = nlohmann::ordered_json;

inline constexpr std::string_view kFuncNameKey = "funcName";

// Flat scalar slot value. Integers and reals are kept apart so that a
// persisted value reads back with the same JSON number type.
using SlotValue = std::variant<std::string, std::int64_t, double, bool>;

template <typename V>
using OrderedMap = std::vector<std::pair<std::string, V>>;

struct ApiCall {
  std::string func_name;
  OrderedMap<SlotValue> slots;

  const SlotValue* find(std::string_view slot) const;
  bool operator==(const ApiCall&) const = default;
};

struct ApiDocument {
  std::string domain;
  std::string subdomain;
  std::string function;
  std::string api;
  std::string desp;
  OrderedMap<std::string> parameters;  // name -> description
  Json extra = Json::object();         // unknown keys, kept for round trip

  bool declares(std::string_view parameter) const;
  bool operator==(const ApiDocument&) const = default;
};

struct UserScript {
  std::string script_id;
  std::string character;
  std::string background;
  std::string purpose;
  ApiCall api_call_label;
  std::string initial_query;
  Json extra = Json::object();

  bool operator==(const UserScript&) const = default;
};

enum class Role { kUser, kAssistant };

struct DialogueTurn {
  Role role = Role::kUser;
  std::string content;
  std::optional<ApiCall> structured_call;  // assistant turns only
  int index = 1;                           // 1-based position in the dialogue

  bool operator==(const DialogueTurn&) const = default;
};

struct StaticHistory {
  std::string script_id;
  std::vector<DialogueTurn> turns;
  ApiCall gold_call;
  Json extra = Json::object();

  bool operator==(const StaticHistory&) const = default;
};

enum class Mode { kDynamic, kStatic, kManual };

enum class Outcome { kCallMade, kNoCallMaxTurns, kNoCallTerminated, kBackendError };

struct SessionRecord {
  std::string session_id;
  Mode mode = Mode::kDynamic;
  std::string script_id;
  std::vector<DialogueTurn> turns;
  Outcome outcome = Outcome::kNoCallTerminated;
  std::optional<ApiCall> final_call;
  int user_turn_count = 0;
  std::uint64_t seed = 0;
  std::string started_at;   // ISO-8601 UTC
  std::string finished_at;  // ISO-8601 UTC
  std::optional<int> repeat;
  std::optional<SlotMatchResult> score;
  std::optional<std::string> reason;  // annotator-supplied finish reason
  std::optional<std::string> error;   // backend failure detail
  Json extra = Json::object();

  bool operator==(const SessionRecord&) const = default;
};

std::string_view to_string(Role role);
std::string_view to_string(Mode mode);
std::string_view to_string(Outcome outcome);
Role role_from_string(std::string_view text);
Mode mode_from_string(std::string_view text);
Outcome outcome_from_string(std::string_view text);

// JSON conversion. The *_from_json functions throw ParseError on shape
// problems and ValidationError on broken invariants.
Json to_json(const SlotValue& value);
SlotValue slot_value_from_json(const Json& value);
Json to_json(const ApiCall& call);
ApiCall call_from_json(const Json& object);
Json to_json(const ApiDocument& doc);
ApiDocument document_from_json(const Json& object);
Json to_json(const UserScript& script);
UserScript script_from_json(const Json& object);
Json to_json(const DialogueTurn& turn);
DialogueTurn turn_from_json(const Json& object);
Json to_json(const StaticHistory& history);
StaticHistory static_history_from_json(const Json& object);
Json to_json(const SessionRecord& record);
SessionRecord record_from_json(const Json& object);

// Parses one JSON text, rejecting duplicate keys at any depth.
Json parse_json_strict(std::string_view text);

// Throws ValidationError unless roles alternate user/assistant starting with
// user and indices run 1..n.
void check_alternation(std::span<const DialogueTurn> turns);

// Renumbers indices 1..n in place.
void renumber(std::vector<DialogueTurn>& turns);

int count_user_turns(std::span<const DialogueTurn> turns);

// Read-only lookup over a validated document list.
class Corpus {
 public:
  Corpus() = default;
  explicit Corpus(std::vector<ApiDocument> docs);

  const ApiDocument* find(std::string_view api) const;
  const std::vector<ApiDocument>& documents() const { return docs_; }
  std::size_t size() const { return docs_.size(); }

 private:
  std::vector<ApiDocument> docs_;
  std::unordered_map<std::string, std::size_t> by_api_;
};

struct Violation {
  enum class Kind { kUnknownFunction, kUndeclaredSlot };
  Kind kind;
  std::string detail;

  bool operator==(const Violation&) const = default;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool ok() const { return violations.empty(); }
};

ValidationReport validate_call(const ApiCall& call, const Corpus& corpus);
ValidationReport validate_script(const UserScript& script, const Corpus& corpus);

// JSONL persistence. Blank lines are skipped; errors carry line numbers.
std::vector<ApiDocument> load_corpus(const std::filesystem::path& path);
std::vector<UserScript> load_scripts(const std::filesystem::path& path);
std::vector<StaticHistory> load_static_histories(const std::filesystem::path& path);
std::vector<SessionRecord> load_records(const std::filesystem::path& path);

std::size_t persist_records(std::span<const SessionRecord> records,
                            const std::filesystem::path& path);
std::size_t persist_scripts(std::span<const UserScript> scripts,
                            const std::filesystem::path& path);
std::size_t persist_static_histories(std::span<const StaticHistory> histories,
                                     const std::filesystem::path& path);
std::size_t persist_corpus(std::span<const ApiDocument> docs,
                           const std::filesystem::path& path);

// Lower-level helpers shared by the loaders.
std::vector<std::pair<std::size_t, Json>> read_jsonl(const std::filesystem::path& path);
void write_jsonl(std::span<const Json> lines, const std::filesystem::path& path);

// Current UTC time as "YYYY-MM-DDTHH:MM:SS.mmmZ".
std::string utc_timestamp();

}  // namespace dyneval
