#include "dyneval/annotation_service.hpp"

#include <charconv>
#include <set>
#include <unordered_map>

#include "dyneval/errors.hpp"
#include "dyneval/prompts.hpp"

namespace dyneval {

namespace {

constexpr std::string_view kIdPrefix = "manual-";

Json turns_json(std::span<const DialogueTurn> turns) {
  Json out = Json::array();
  for (const auto& t : turns) out.push_back(to_json(t));
  return out;
}

std::optional<std::uint64_t> id_number(std::string_view id) {
  if (!id.starts_with(kIdPrefix)) return std::nullopt;
  id.remove_prefix(kIdPrefix.size());
  std::uint64_t n = 0;
  auto [end, ec] = std::from_chars(id.data(), id.data() + id.size(), n);
  if (ec != std::errc() || end != id.data() + id.size()) return std::nullopt;
  return n;
}

std::size_t assistant_turns(std::span<const DialogueTurn> turns) {
  std::size_t n = 0;
  for (const auto& t : turns) n += t.role == Role::kAssistant;
  return n;
}

}  // namespace

std::string_view to_string(SessionState state) {
  switch (state) {
    case SessionState::kOpen:
      return "Open";
    case SessionState::kAwaitingAssistant:
      return "AwaitingAssistant";
    case SessionState::kAwaitingUser:
      return "AwaitingUser";
    case SessionState::kFinished:
      return "Finished";
  }
  return "Open";
}

Json to_json(const ManualSession& session) {
  Json out{{"sessionId", session.session_id},
           {"scriptId", session.script_id},
           {"state", to_string(session.state)},
           {"turns", turns_json(session.turns)},
           {"createdAt", session.created_at},
           {"updatedAt", session.updated_at}};
  if (session.last_error) out["lastError"] = *session.last_error;
  if (session.record) {
    out["outcome"] = to_string(session.record->outcome);
    out["record"] = to_json(*session.record);
  }
  return out;
}

struct AnnotationService::Entry {
  std::string session_id;
  const UserScript* script = nullptr;
  std::uint64_t seed = 0;

  // Guards everything below except `snapshot`. Never held across a
  // backend call: `state == kAwaitingAssistant` marks the one caller that
  // owns `session` while the assistant is thinking.
  std::mutex mu;
  SessionState state = SessionState::kOpen;
  std::unique_ptr<ChatBackend> backend;
  std::optional<DialogueSession> session;
  std::optional<SessionRecord> record;
  std::string created_at;
  std::string updated_at;

  mutable std::mutex snapshot_mu;
  std::shared_ptr<const ManualSession> snapshot;

  std::shared_ptr<const ManualSession> read() const {
    std::lock_guard lock(snapshot_mu);
    return snapshot;
  }
};

AnnotationService::AnnotationService(Dataset dataset, BackendFactory assistant,
                                     ServiceOptions options)
    : dataset_(std::move(dataset)), assistant_(std::move(assistant)), options_(std::move(options)) {
  if (!options_.clock) options_.clock = utc_timestamp;
  if (options_.event_log) {
    if (std::filesystem::exists(*options_.event_log)) replay(*options_.event_log);
    log_.open(*options_.event_log, std::ios::binary | std::ios::app);
    if (!log_) throw IoError("cannot open event log " + options_.event_log->string());
  }
}

AnnotationService::~AnnotationService() = default;

Json AnnotationService::list_scripts() const {
  Json out = Json::array();
  for (const auto& s : dataset_.scripts) {
    out.push_back(Json{{"scriptId", s.script_id},
                       {"character", s.character},
                       {"background", s.background},
                       {"purpose", s.purpose},
                       {"apiCall", to_json(s.api_call_label)},
                       {"initialQuery", s.initial_query},
                       {"userScript", render_user_script(s)}});
  }
  return out;
}

std::unique_ptr<ChatBackend> AnnotationService::make_backend(const std::string& script_id,
                                                             std::uint64_t seed) {
  auto backend = assistant_(SessionContext{script_id, seed});
  if (!backend) throw BackendError("no assistant backend for " + script_id);
  return backend;
}

std::shared_ptr<AnnotationService::Entry> AnnotationService::lookup(
    const std::string& session_id) const {
  std::shared_lock lock(registry_mu_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw NotFoundError("unknown session " + session_id);
  return it->second;
}

// Caller holds entry.mu.
void AnnotationService::publish(Entry& entry, SessionState state,
                                std::optional<std::string> error,
                                std::optional<std::string> pending) {
  entry.state = state;
  auto view = std::make_shared<ManualSession>();
  view->session_id = entry.session_id;
  view->script_id = entry.script->script_id;
  view->state = state;
  if (entry.record) {
    view->turns = entry.record->turns;
  } else if (entry.session) {
    view->turns = entry.session->turns();
  }
  if (pending) {
    view->turns.push_back(DialogueTurn{Role::kUser, std::move(*pending), std::nullopt,
                                       static_cast<int>(view->turns.size()) + 1});
  }
  view->created_at = entry.created_at;
  view->updated_at = entry.updated_at;
  view->record = entry.record;
  view->last_error = std::move(error);
  std::lock_guard lock(entry.snapshot_mu);
  entry.snapshot = std::move(view);
}

void AnnotationService::append_event(const Json& event) {
  if (!options_.event_log) return;
  std::lock_guard lock(log_mu_);
  log_ << event.dump() << '\n';
  log_.flush();
  if (!log_) throw IoError("event log write failed");
}

void AnnotationService::persist_record(const SessionRecord& record) {
  if (!options_.records) return;
  std::lock_guard lock(records_mu_);
  std::ofstream out(*options_.records, std::ios::binary | std::ios::app);
  out << to_json(record).dump() << '\n';
  if (!out) throw IoError("cannot append to " + options_.records->string());
}

// Caller holds entry.mu and the session has just finished.
void AnnotationService::finalize(Entry& entry) {
  entry.record = entry.session->record();
  entry.updated_at = entry.record->finished_at;
  persist_record(*entry.record);
  append_event(Json{{"event", "finished"},
                    {"sessionId", entry.session_id},
                    {"at", entry.updated_at},
                    {"record", to_json(*entry.record)}});
}

ManualSession AnnotationService::create_session(const std::string& script_id) {
  const UserScript* script = dataset_.find_script(script_id);
  if (script == nullptr) throw NotFoundError("unknown script " + script_id);
  const ApiDocument* doc = dataset_.corpus.find(script->api_call_label.func_name);
  if (doc == nullptr) throw ValidationError("no API document for script " + script_id);

  auto entry = std::make_shared<Entry>();
  entry->script = script;
  {
    std::unique_lock lock(registry_mu_);
    const std::uint64_t n = next_id_++;
    entry->session_id = std::string(kIdPrefix) + std::to_string(n);
    entry->seed = session_seed(options_.base_seed, static_cast<int>(n), script_id);
  }
  entry->backend = make_backend(script_id, entry->seed);

  SessionMeta meta;
  meta.session_id = entry->session_id;
  meta.seed = entry->seed;
  meta.normalization = options_.normalization;
  meta.clock = options_.clock;
  entry->session.emplace(Mode::kManual, *script, *doc, *entry->backend, options_.policy,
                         std::move(meta));
  // Not yet registered, so nobody else can see it while the first reply is
  // pending. A failure discards the session.
  entry->session->start();

  std::lock_guard lock(entry->mu);
  entry->created_at = entry->session->started_at();
  entry->updated_at = entry->created_at;
  append_event(Json{{"event", "created"},
                    {"sessionId", entry->session_id},
                    {"scriptId", script_id},
                    {"seed", entry->seed},
                    {"at", entry->created_at},
                    {"turns", turns_json(entry->session->turns())}});
  if (entry->session->finished()) {
    finalize(*entry);
    publish(*entry, SessionState::kFinished, std::nullopt);
  } else {
    publish(*entry, SessionState::kAwaitingUser, std::nullopt);
  }
  {
    std::unique_lock reg(registry_mu_);
    sessions_.emplace(entry->session_id, entry);
  }
  return *entry->read();
}

ManualSession AnnotationService::post_user_turn(const std::string& session_id,
                                                std::string content) {
  auto entry = lookup(session_id);
  {
    std::lock_guard lock(entry->mu);
    if (entry->state == SessionState::kFinished) {
      throw ConflictError("session " + session_id + " is finished");
    }
    if (entry->state != SessionState::kAwaitingUser) {
      throw ConflictError("session " + session_id + " is waiting for the assistant");
    }
    publish(*entry, SessionState::kAwaitingAssistant, std::nullopt, content);
  }

  try {
    entry->session->submit_user_turn(std::move(content), /*retract_on_failure=*/true);
  } catch (const BackendError& e) {
    std::lock_guard lock(entry->mu);
    publish(*entry, SessionState::kAwaitingUser, std::string(e.what()));
    throw;
  } catch (...) {
    std::lock_guard lock(entry->mu);
    publish(*entry, SessionState::kAwaitingUser, std::nullopt);
    throw;
  }

  std::lock_guard lock(entry->mu);
  const auto& turns = entry->session->turns();
  entry->updated_at = options_.clock();
  append_event(Json{{"event", "turn"},
                    {"sessionId", session_id},
                    {"at", entry->updated_at},
                    {"turns", turns_json(std::span(turns).last(2))}});
  if (entry->session->finished()) {
    finalize(*entry);
    publish(*entry, SessionState::kFinished, std::nullopt);
  } else {
    publish(*entry, SessionState::kAwaitingUser, std::nullopt);
  }
  return *entry->read();
}

SessionRecord AnnotationService::finish_session(const std::string& session_id,
                                                std::optional<std::string> reason) {
  auto entry = lookup(session_id);
  std::lock_guard lock(entry->mu);
  if (entry->state == SessionState::kFinished) {
    throw ConflictError("session " + session_id + " is already finished");
  }
  if (entry->state != SessionState::kAwaitingUser) {
    throw ConflictError("session " + session_id + " is waiting for the assistant");
  }
  entry->session->finish_terminated(std::move(reason));
  finalize(*entry);
  publish(*entry, SessionState::kFinished, std::nullopt);
  return *entry->record;
}

ManualSession AnnotationService::get_session(const std::string& session_id) const {
  return *lookup(session_id)->read();
}

std::vector<std::string> AnnotationService::session_ids() const {
  std::shared_lock lock(registry_mu_);
  std::vector<std::string> out;
  for (const auto& [id, entry] : sessions_) out.push_back(id);
  return out;
}

void AnnotationService::replay(const std::filesystem::path& path) {
  struct Pending {
    std::string script_id;
    std::uint64_t seed = 0;
    std::string created_at;
    std::string updated_at;
    std::vector<DialogueTurn> turns;
    std::optional<SessionRecord> record;
  };
  std::vector<std::string> order;
  std::unordered_map<std::string, Pending> pending;

  for (const auto& [line, event] : read_jsonl(path)) {
    try {
      const std::string kind = event.at("event").get<std::string>();
      const std::string id = event.at("sessionId").get<std::string>();
      if (kind == "created") {
        if (pending.contains(id)) throw ParseError("session " + id + " created twice", line);
        Pending p;
        p.script_id = event.at("scriptId").get<std::string>();
        p.seed = event.at("seed").get<std::uint64_t>();
        p.created_at = event.at("at").get<std::string>();
        p.updated_at = p.created_at;
        for (const auto& t : event.at("turns")) p.turns.push_back(turn_from_json(t));
        pending.emplace(id, std::move(p));
        order.push_back(id);
        continue;
      }
      auto it = pending.find(id);
      if (it == pending.end()) throw ParseError("event for unknown session " + id, line);
      Pending& p = it->second;
      if (p.record) throw ParseError("event after session " + id + " finished", line);
      p.updated_at = event.at("at").get<std::string>();
      if (kind == "turn") {
        for (const auto& t : event.at("turns")) p.turns.push_back(turn_from_json(t));
      } else if (kind == "finished") {
        p.record = record_from_json(event.at("record"));
      } else {
        throw ParseError("unknown event '" + kind + "'", line);
      }
    } catch (const ParseError&) {
      throw;
    } catch (const std::exception& e) {
      throw ParseError(std::string("bad event: ") + e.what(), line);
    }
  }

  for (const auto& id : order) {
    Pending& p = pending.at(id);
    const UserScript* script = dataset_.find_script(p.script_id);
    if (script == nullptr) throw ValidationError("event log names unknown script " + p.script_id);
    auto entry = std::make_shared<Entry>();
    entry->session_id = id;
    entry->script = script;
    entry->seed = p.seed;
    entry->created_at = p.created_at;
    entry->updated_at = p.updated_at;
    renumber(p.turns);
    std::lock_guard lock(entry->mu);
    if (p.record) {
      entry->record = std::move(p.record);
      publish(*entry, SessionState::kFinished, std::nullopt);
    } else {
      const ApiDocument* doc = dataset_.corpus.find(script->api_call_label.func_name);
      if (doc == nullptr) throw ValidationError("no API document for script " + p.script_id);
      entry->backend = make_backend(p.script_id, p.seed);
      entry->backend->fast_forward(assistant_turns(p.turns));
      SessionMeta meta;
      meta.session_id = id;
      meta.seed = p.seed;
      meta.normalization = options_.normalization;
      meta.clock = options_.clock;
      entry->session.emplace(DialogueSession::restore(Mode::kManual, *script, *doc,
                                                      *entry->backend, options_.policy,
                                                      std::move(meta), std::move(p.turns),
                                                      p.created_at));
      publish(*entry, SessionState::kAwaitingUser, std::nullopt);
    }
    if (auto n = id_number(id)) next_id_ = std::max(next_id_, *n + 1);
    sessions_.emplace(id, std::move(entry));
    ++replayed_;
  }
}

}  // namespace dyneval
