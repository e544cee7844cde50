#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include "dyneval/backends.hpp"
#include "dyneval/corpus.hpp"
#include "dyneval/orchestrator.hpp"

namespace dyneval {

enum class SessionState { kOpen, kAwaitingAssistant, kAwaitingUser, kFinished };

std::string_view to_string(SessionState state);

// Immutable view of a manual session handed to readers.
struct ManualSession {
  std::string session_id;
  std::string script_id;
  SessionState state = SessionState::kOpen;
  std::vector<DialogueTurn> turns;
  std::string created_at;
  std::string updated_at;
  std::optional<SessionRecord> record;   // set once Finished
  std::optional<std::string> last_error;  // most recent backend failure

  bool operator==(const ManualSession&) const = default;
};

Json to_json(const ManualSession& session);

struct ServiceOptions {
  TerminationPolicy policy;
  NormalizationPolicy normalization;
  std::uint64_t base_seed = 0;
  std::optional<std::filesystem::path> event_log;  // replayed on start, appended after
  std::optional<std::filesystem::path> records;    // one line per finished session
  std::function<std::string()> clock = utc_timestamp;
};

// Manual-evaluation sessions over a dataset. Turn handling is serialized
// per session; the assistant is called without holding any lock, and a
// request that arrives meanwhile is rejected with ConflictError.
class AnnotationService {
 public:
  AnnotationService(Dataset dataset, BackendFactory assistant, ServiceOptions options = {});
  ~AnnotationService();

  AnnotationService(const AnnotationService&) = delete;
  AnnotationService& operator=(const AnnotationService&) = delete;

  // Script summaries with character, background, purpose, the gold call and
  // the initial query, for the annotator.
  Json list_scripts() const;

  // Throws NotFoundError for an unknown script, BackendError if the first
  // assistant reply fails (no session is kept then).
  ManualSession create_session(const std::string& script_id);

  // Throws NotFoundError, ConflictError outside AwaitingUser, BackendError
  // with the session left in AwaitingUser and the error recorded.
  ManualSession post_user_turn(const std::string& session_id, std::string content);

  // Throws NotFoundError, ConflictError when finished or busy.
  SessionRecord finish_session(const std::string& session_id, std::optional<std::string> reason);

  ManualSession get_session(const std::string& session_id) const;
  std::vector<std::string> session_ids() const;

  // Sessions rebuilt from the event log at construction.
  std::size_t replayed() const { return replayed_; }

 private:
  struct Entry;

  std::shared_ptr<Entry> lookup(const std::string& session_id) const;
  // `pending` shows a user turn the assistant is still answering.
  void publish(Entry& entry, SessionState state, std::optional<std::string> error,
               std::optional<std::string> pending = std::nullopt);
  void append_event(const Json& event);
  void persist_record(const SessionRecord& record);
  void finalize(Entry& entry);
  void replay(const std::filesystem::path& path);
  std::unique_ptr<ChatBackend> make_backend(const std::string& script_id, std::uint64_t seed);

  Dataset dataset_;
  BackendFactory assistant_;
  ServiceOptions options_;

  mutable std::shared_mutex registry_mu_;
  std::map<std::string, std::shared_ptr<Entry>> sessions_;
  std::uint64_t next_id_ = 1;

  std::mutex log_mu_;
  std::ofstream log_;
  std::mutex records_mu_;
  std::size_t replayed_ = 0;
};

}  // namespace dyneval
