#include "dyneval/corpus.hpp"

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "dyneval/errors.hpp"

namespace dyneval {

namespace {

const Json* member(const Json& object, std::string_view key) {
  auto it = object.find(std::string(key));
  return it == object.end() ? nullptr : &*it;
}

std::string required_string(const Json& object, std::string_view key) {
  const Json* value = member(object, key);
  if (value == nullptr) throw ParseError("missing key \"" + std::string(key) + "\"");
  if (!value->is_string()) throw ParseError("\"" + std::string(key) + "\" must be a string");
  return value->get<std::string>();
}

std::string optional_string(const Json& object, std::string_view key) {
  const Json* value = member(object, key);
  if (value == nullptr || value->is_null()) return {};
  if (!value->is_string()) throw ParseError("\"" + std::string(key) + "\" must be a string");
  return value->get<std::string>();
}

const Json& required_member(const Json& object, std::string_view key) {
  const Json* value = member(object, key);
  if (value == nullptr) throw ParseError("missing key \"" + std::string(key) + "\"");
  return *value;
}

void require_object(const Json& value, std::string_view what) {
  if (!value.is_object()) throw ParseError(std::string(what) + " must be a JSON object");
}

Json collect_extra(const Json& object, std::initializer_list<std::string_view> known) {
  Json extra = Json::object();
  for (auto it = object.begin(); it != object.end(); ++it) {
    bool is_known = false;
    for (auto k : known) {
      if (it.key() == k) {
        is_known = true;
        break;
      }
    }
    if (!is_known) extra[it.key()] = it.value();
  }
  return extra;
}

void append_extra(Json& out, const Json& extra) {
  if (!extra.is_object()) return;
  for (auto it = extra.begin(); it != extra.end(); ++it) {
    if (!out.contains(it.key())) out[it.key()] = it.value();
  }
}

std::vector<DialogueTurn> turns_from_json(const Json& array) {
  if (!array.is_array()) throw ParseError("\"turns\" must be an array");
  std::vector<DialogueTurn> turns;
  turns.reserve(array.size());
  for (const auto& item : array) turns.push_back(turn_from_json(item));
  // Indices are optional in hand-written fixtures; when given they must
  // match the position.
  for (std::size_t i = 0; i < turns.size(); ++i) {
    if (turns[i].index == 0) turns[i].index = static_cast<int>(i + 1);
  }
  check_alternation(turns);
  return turns;
}

Json turns_to_json(std::span<const DialogueTurn> turns) {
  Json array = Json::array();
  for (const auto& t : turns) array.push_back(to_json(t));
  return array;
}

Json score_to_json(const SlotMatchResult& s) {
  Json j = Json::object();
  j["truePositives"] = s.true_positives;
  j["predictedCount"] = s.predicted_count;
  j["goldCount"] = s.gold_count;
  j["precision"] = s.precision;
  j["recall"] = s.recall;
  j["f1"] = s.f1;
  return j;
}

int required_int(const Json& object, std::string_view key) {
  const Json& v = required_member(object, key);
  if (!v.is_number_integer()) throw ParseError("\"" + std::string(key) + "\" must be an integer");
  return v.get<int>();
}

double required_number(const Json& object, std::string_view key) {
  const Json& v = required_member(object, key);
  if (!v.is_number()) throw ParseError("\"" + std::string(key) + "\" must be a number");
  return v.get<double>();
}

SlotMatchResult score_from_json(const Json& j) {
  require_object(j, "\"score\"");
  SlotMatchResult s;
  s.true_positives = required_int(j, "truePositives");
  s.predicted_count = required_int(j, "predictedCount");
  s.gold_count = required_int(j, "goldCount");
  s.precision = required_number(j, "precision");
  s.recall = required_number(j, "recall");
  s.f1 = required_number(j, "f1");
  return s;
}

template <typename T, typename Parse>
std::vector<T> load_lines(const std::filesystem::path& path, Parse parse) {
  std::vector<T> out;
  for (auto& [line, json] : read_jsonl(path)) {
    try {
      out.push_back(parse(json));
    } catch (const ParseError& e) {
      if (e.line() != 0) throw;
      throw ParseError(e.what(), line);
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(line) + ": " + e.what());
    }
  }
  return out;
}

template <typename T>
std::size_t persist_lines(std::span<const T> items, const std::filesystem::path& path) {
  std::vector<Json> lines;
  lines.reserve(items.size());
  for (const auto& item : items) lines.push_back(to_json(item));
  write_jsonl(lines, path);
  return lines.size();
}

}  // namespace

const SlotValue* ApiCall::find(std::string_view slot) const {
  for (const auto& [name, value] : slots) {
    if (name == slot) return &value;
  }
  return nullptr;
}

bool ApiDocument::declares(std::string_view parameter) const {
  for (const auto& [name, _] : parameters) {
    if (name == parameter) return true;
  }
  return false;
}

std::string_view to_string(Role role) {
  return role == Role::kUser ? "user" : "assistant";
}

std::string_view to_string(Mode mode) {
  switch (mode) {
    case Mode::kDynamic: return "dynamic";
    case Mode::kStatic: return "static";
    case Mode::kManual: return "manual";
  }
  return "dynamic";
}

std::string_view to_string(Outcome outcome) {
  switch (outcome) {
    case Outcome::kCallMade: return "CallMade";
    case Outcome::kNoCallMaxTurns: return "NoCallMaxTurns";
    case Outcome::kNoCallTerminated: return "NoCallTerminated";
    case Outcome::kBackendError: return "BackendError";
  }
  return "BackendError";
}

Role role_from_string(std::string_view text) {
  if (text == "user") return Role::kUser;
  if (text == "assistant") return Role::kAssistant;
  throw ParseError("unknown role \"" + std::string(text) + "\"");
}

Mode mode_from_string(std::string_view text) {
  if (text == "dynamic") return Mode::kDynamic;
  if (text == "static") return Mode::kStatic;
  if (text == "manual") return Mode::kManual;
  throw ParseError("unknown mode \"" + std::string(text) + "\"");
}

Outcome outcome_from_string(std::string_view text) {
  if (text == "CallMade") return Outcome::kCallMade;
  if (text == "NoCallMaxTurns") return Outcome::kNoCallMaxTurns;
  if (text == "NoCallTerminated") return Outcome::kNoCallTerminated;
  if (text == "BackendError") return Outcome::kBackendError;
  throw ParseError("unknown outcome \"" + std::string(text) + "\"");
}

Json to_json(const SlotValue& value) {
  return std::visit([](const auto& v) { return Json(v); }, value);
}

SlotValue slot_value_from_json(const Json& value) {
  if (value.is_string()) return value.get<std::string>();
  if (value.is_boolean()) return value.get<bool>();
  if (value.is_number_unsigned()) {
    auto u = value.get<std::uint64_t>();
    if (u > static_cast<std::uint64_t>(std::numeric_limits<std::int64_t>::max())) {
      return static_cast<double>(u);
    }
    return static_cast<std::int64_t>(u);
  }
  if (value.is_number_integer()) return value.get<std::int64_t>();
  if (value.is_number_float()) return value.get<double>();
  throw ParseError("slot values must be scalars (string, number or boolean)");
}

Json to_json(const ApiCall& call) {
  Json j = Json::object();
  j[std::string(kFuncNameKey)] = call.func_name;
  for (const auto& [name, value] : call.slots) j[name] = to_json(value);
  return j;
}

ApiCall call_from_json(const Json& object) {
  require_object(object, "API call");
  ApiCall call;
  call.func_name = required_string(object, kFuncNameKey);
  if (call.func_name.empty()) throw ValidationError("funcName must be non-empty");
  std::set<std::string> seen;
  for (auto it = object.begin(); it != object.end(); ++it) {
    if (it.key() == kFuncNameKey) continue;
    if (!seen.insert(it.key()).second) throw ValidationError("duplicate slot \"" + it.key() + "\"");
    call.slots.emplace_back(it.key(), slot_value_from_json(it.value()));
  }
  return call;
}

Json to_json(const ApiDocument& doc) {
  Json j = Json::object();
  j["domain"] = doc.domain;
  j["subdomain"] = doc.subdomain;
  j["function"] = doc.function;
  j["api"] = doc.api;
  j["desp"] = doc.desp;
  Json params = Json::object();
  for (const auto& [name, desc] : doc.parameters) params[name] = desc;
  j["parameters"] = std::move(params);
  append_extra(j, doc.extra);
  return j;
}

ApiDocument document_from_json(const Json& object) {
  require_object(object, "API document");
  ApiDocument doc;
  doc.domain = optional_string(object, "domain");
  doc.subdomain = optional_string(object, "subdomain");
  doc.function = optional_string(object, "function");
  doc.api = required_string(object, "api");
  if (doc.api.empty()) throw ValidationError("\"api\" must be non-empty");
  doc.desp = optional_string(object, "desp");
  const Json* params = member(object, "parameters");
  if (params != nullptr && !params->is_null()) {
    require_object(*params, "\"parameters\"");
    for (auto it = params->begin(); it != params->end(); ++it) {
      if (it.key() == kFuncNameKey) {
        throw ValidationError("parameter name \"funcName\" is reserved (api " + doc.api + ")");
      }
      if (doc.declares(it.key())) {
        throw ValidationError("duplicate parameter \"" + it.key() + "\" in " + doc.api);
      }
      if (!it.value().is_string()) {
        throw ParseError("description of parameter \"" + it.key() + "\" must be a string");
      }
      doc.parameters.emplace_back(it.key(), it.value().get<std::string>());
    }
  }
  doc.extra = collect_extra(object, {"domain", "subdomain", "function", "api", "desp", "parameters"});
  return doc;
}

Json to_json(const UserScript& script) {
  Json j = Json::object();
  j["scriptId"] = script.script_id;
  j["character"] = script.character;
  j["background"] = script.background;
  j["purpose"] = script.purpose;
  j["apiCallLabel"] = to_json(script.api_call_label);
  j["initialQuery"] = script.initial_query;
  append_extra(j, script.extra);
  return j;
}

UserScript script_from_json(const Json& object) {
  require_object(object, "user script");
  UserScript s;
  s.script_id = required_string(object, "scriptId");
  if (s.script_id.empty()) throw ValidationError("\"scriptId\" must be non-empty");
  s.character = optional_string(object, "character");
  s.background = optional_string(object, "background");
  s.purpose = optional_string(object, "purpose");
  s.api_call_label = call_from_json(required_member(object, "apiCallLabel"));
  s.initial_query = required_string(object, "initialQuery");
  s.extra = collect_extra(object, {"scriptId", "character", "background", "purpose",
                                   "apiCallLabel", "initialQuery"});
  return s;
}

Json to_json(const DialogueTurn& turn) {
  Json j = Json::object();
  j["index"] = turn.index;
  j["role"] = std::string(to_string(turn.role));
  j["content"] = turn.content;
  if (turn.structured_call) j["structuredCall"] = to_json(*turn.structured_call);
  return j;
}

DialogueTurn turn_from_json(const Json& object) {
  require_object(object, "dialogue turn");
  DialogueTurn t;
  t.role = role_from_string(required_string(object, "role"));
  t.content = optional_string(object, "content");
  t.index = 0;
  if (const Json* idx = member(object, "index"); idx != nullptr) {
    if (!idx->is_number_integer() || idx->get<int>() < 1) {
      throw ParseError("turn \"index\" must be an integer >= 1");
    }
    t.index = idx->get<int>();
  }
  if (const Json* call = member(object, "structuredCall"); call != nullptr && !call->is_null()) {
    if (t.role != Role::kAssistant) throw ValidationError("only assistant turns carry a structuredCall");
    t.structured_call = call_from_json(*call);
  }
  return t;
}

Json to_json(const StaticHistory& history) {
  Json j = Json::object();
  j["scriptId"] = history.script_id;
  j["turns"] = turns_to_json(history.turns);
  j["goldCall"] = to_json(history.gold_call);
  append_extra(j, history.extra);
  return j;
}

StaticHistory static_history_from_json(const Json& object) {
  require_object(object, "static history");
  StaticHistory h;
  h.script_id = required_string(object, "scriptId");
  h.turns = turns_from_json(required_member(object, "turns"));
  if (h.turns.empty()) throw ValidationError("static history has no turns");
  h.gold_call = call_from_json(required_member(object, "goldCall"));
  h.extra = collect_extra(object, {"scriptId", "turns", "goldCall"});
  return h;
}

Json to_json(const SessionRecord& r) {
  Json j = Json::object();
  j["sessionId"] = r.session_id;
  j["mode"] = std::string(to_string(r.mode));
  j["scriptId"] = r.script_id;
  if (r.repeat) j["repeat"] = *r.repeat;
  j["seed"] = r.seed;
  j["outcome"] = std::string(to_string(r.outcome));
  if (r.final_call) j["finalCall"] = to_json(*r.final_call);
  j["userTurnCount"] = r.user_turn_count;
  if (r.score) j["score"] = score_to_json(*r.score);
  if (r.reason) j["reason"] = *r.reason;
  if (r.error) j["error"] = *r.error;
  j["turns"] = turns_to_json(r.turns);
  j["startedAt"] = r.started_at;
  j["finishedAt"] = r.finished_at;
  append_extra(j, r.extra);
  return j;
}

SessionRecord record_from_json(const Json& object) {
  require_object(object, "session record");
  SessionRecord r;
  r.session_id = required_string(object, "sessionId");
  r.mode = mode_from_string(required_string(object, "mode"));
  r.script_id = required_string(object, "scriptId");
  if (const Json* rep = member(object, "repeat"); rep != nullptr && !rep->is_null()) {
    if (!rep->is_number_integer()) throw ParseError("\"repeat\" must be an integer");
    r.repeat = rep->get<int>();
  }
  if (const Json* seed = member(object, "seed"); seed != nullptr) {
    if (!seed->is_number_integer()) throw ParseError("\"seed\" must be an integer");
    r.seed = seed->get<std::uint64_t>();
  }
  r.outcome = outcome_from_string(required_string(object, "outcome"));
  if (const Json* call = member(object, "finalCall"); call != nullptr && !call->is_null()) {
    r.final_call = call_from_json(*call);
  }
  if ((r.outcome == Outcome::kCallMade) != r.final_call.has_value()) {
    throw ValidationError("outcome CallMade requires a finalCall and vice versa (session " +
                          r.session_id + ")");
  }
  r.user_turn_count = required_int(object, "userTurnCount");
  if (r.user_turn_count < 0) throw ValidationError("\"userTurnCount\" must be >= 0");
  if (const Json* s = member(object, "score"); s != nullptr && !s->is_null()) {
    r.score = score_from_json(*s);
  }
  if (const Json* v = member(object, "reason"); v != nullptr && !v->is_null()) {
    r.reason = optional_string(object, "reason");
  }
  if (const Json* v = member(object, "error"); v != nullptr && !v->is_null()) {
    r.error = optional_string(object, "error");
  }
  r.turns = turns_from_json(required_member(object, "turns"));
  r.started_at = optional_string(object, "startedAt");
  r.finished_at = optional_string(object, "finishedAt");
  r.extra = collect_extra(object, {"sessionId", "mode", "scriptId", "repeat", "seed", "outcome",
                                   "finalCall", "userTurnCount", "score", "reason", "error",
                                   "turns", "startedAt", "finishedAt"});
  return r;
}

Json parse_json_strict(std::string_view text) {
  std::vector<std::set<std::string>> open_objects;
  Json::parser_callback_t check_keys = [&open_objects](int, Json::parse_event_t event,
                                                       Json& parsed) {
    switch (event) {
      case Json::parse_event_t::object_start:
        open_objects.emplace_back();
        break;
      case Json::parse_event_t::key: {
        auto key = parsed.get<std::string>();
        if (!open_objects.back().insert(key).second) {
          throw ParseError("duplicate key \"" + key + "\"");
        }
        break;
      }
      case Json::parse_event_t::object_end:
        open_objects.pop_back();
        break;
      default:
        break;
    }
    return true;
  };
  try {
    return Json::parse(text.begin(), text.end(), check_keys);
  } catch (const Json::parse_error& e) {
    throw ParseError(std::string("malformed JSON: ") + e.what());
  }
}

void check_alternation(std::span<const DialogueTurn> turns) {
  for (std::size_t i = 0; i < turns.size(); ++i) {
    Role expected = (i % 2 == 0) ? Role::kUser : Role::kAssistant;
    if (turns[i].role != expected) {
      throw ValidationError("turn " + std::to_string(i + 1) + " should have role " +
                            std::string(to_string(expected)));
    }
    if (turns[i].index != static_cast<int>(i + 1)) {
      throw ValidationError("turn at position " + std::to_string(i + 1) + " has index " +
                            std::to_string(turns[i].index));
    }
  }
}

void renumber(std::vector<DialogueTurn>& turns) {
  for (std::size_t i = 0; i < turns.size(); ++i) turns[i].index = static_cast<int>(i + 1);
}

int count_user_turns(std::span<const DialogueTurn> turns) {
  int n = 0;
  for (const auto& t : turns) n += t.role == Role::kUser ? 1 : 0;
  return n;
}

Corpus::Corpus(std::vector<ApiDocument> docs) : docs_(std::move(docs)) {
  for (std::size_t i = 0; i < docs_.size(); ++i) {
    if (!by_api_.emplace(docs_[i].api, i).second) {
      throw ValidationError("duplicate api name \"" + docs_[i].api + "\"");
    }
  }
}

const ApiDocument* Corpus::find(std::string_view api) const {
  auto it = by_api_.find(std::string(api));
  return it == by_api_.end() ? nullptr : &docs_[it->second];
}

ValidationReport validate_call(const ApiCall& call, const Corpus& corpus) {
  ValidationReport report;
  const ApiDocument* doc = corpus.find(call.func_name);
  if (doc == nullptr) {
    report.violations.push_back({Violation::Kind::kUnknownFunction, call.func_name});
    return report;
  }
  for (const auto& [slot, _] : call.slots) {
    if (!doc->declares(slot)) {
      report.violations.push_back({Violation::Kind::kUndeclaredSlot, slot});
    }
  }
  return report;
}

ValidationReport validate_script(const UserScript& script, const Corpus& corpus) {
  return validate_call(script.api_call_label, corpus);
}

std::vector<std::pair<std::size_t, Json>> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<std::pair<std::size_t, Json>> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    try {
      out.emplace_back(number, parse_json_strict(line));
    } catch (const ParseError& e) {
      throw ParseError(e.what(), number);
    }
  }
  if (in.bad()) throw IoError("read failed on " + path.string());
  return out;
}

void write_jsonl(std::span<const Json> lines, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& line : lines) {
    out << line.dump(-1, ' ', false, Json::error_handler_t::replace) << '\n';
  }
  out.flush();
  if (!out) throw IoError("write failed on " + path.string());
}

std::vector<ApiDocument> load_corpus(const std::filesystem::path& path) {
  std::vector<ApiDocument> docs;
  std::set<std::string> names;
  for (auto& [line, json] : read_jsonl(path)) {
    ApiDocument doc;
    try {
      doc = document_from_json(json);
    } catch (const ParseError& e) {
      throw ParseError(e.what(), line);
    } catch (const ValidationError& e) {
      throw ValidationError("line " + std::to_string(line) + ": " + e.what());
    }
    if (!names.insert(doc.api).second) {
      throw ValidationError("line " + std::to_string(line) + ": duplicate api name \"" +
                            doc.api + "\"");
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

std::vector<UserScript> load_scripts(const std::filesystem::path& path) {
  auto scripts = load_lines<UserScript>(path, script_from_json);
  std::set<std::string> ids;
  for (const auto& s : scripts) {
    if (!ids.insert(s.script_id).second) {
      throw ValidationError("duplicate scriptId \"" + s.script_id + "\"");
    }
  }
  return scripts;
}

std::vector<StaticHistory> load_static_histories(const std::filesystem::path& path) {
  return load_lines<StaticHistory>(path, static_history_from_json);
}

std::vector<SessionRecord> load_records(const std::filesystem::path& path) {
  return load_lines<SessionRecord>(path, record_from_json);
}

std::size_t persist_records(std::span<const SessionRecord> records,
                            const std::filesystem::path& path) {
  return persist_lines(records, path);
}

std::size_t persist_scripts(std::span<const UserScript> scripts,
                            const std::filesystem::path& path) {
  return persist_lines(scripts, path);
}

std::size_t persist_static_histories(std::span<const StaticHistory> histories,
                                     const std::filesystem::path& path) {
  return persist_lines(histories, path);
}

std::size_t persist_corpus(std::span<const ApiDocument> docs, const std::filesystem::path& path) {
  return persist_lines(docs, path);
}

std::string utc_timestamp() {
  using namespace std::chrono;
  auto now = system_clock::now();
  auto ms = duration_cast<milliseconds>(now.time_since_epoch()).count() % 1000;
  std::time_t t = system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900,
                tm.tm_mon + 1, tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec,
                static_cast<int>(ms));
  return buf;
}

}  // namespace dyneval
