#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dyneval/corpus.hpp"

namespace dyneval {

enum class ChatRole { kSystem, kUser, kAssistant };

std::string_view to_string(ChatRole role);

struct ChatMessage {
  ChatRole role = ChatRole::kUser;
  std::string content;
  std::optional<ApiCall> call;  // assistant messages only; content may then be empty

  bool operator==(const ChatMessage&) const = default;
};

struct AssistantReply {
  std::string content;
  std::optional<ApiCall> structured_call;  // native tool/function call, when returned

  bool operator==(const AssistantReply&) const = default;
};

struct CompletionRequest {
  std::vector<ChatMessage> messages;
  std::optional<Json> tools;  // offered to backends configured to use them
  std::uint64_t seed = 0;
};

class ChatBackend {
 public:
  virtual ~ChatBackend() = default;
  // Throws BackendError when no reply can be produced.
  virtual AssistantReply complete(const CompletionRequest& request) = 0;
  // Skip ahead as if `calls` replies had already been consumed. Used when a
  // persisted session is restored; stateless backends ignore it.
  virtual void fast_forward(std::size_t /*calls*/) {}
};

using ReplyQueue = std::vector<AssistantReply>;

// Replays a fixed queue: the i-th call returns the i-th reply.
class ScriptedBackend : public ChatBackend {
 public:
  explicit ScriptedBackend(ReplyQueue queue);

  AssistantReply complete(const CompletionRequest& request) override;
  void fast_forward(std::size_t calls) override;

  std::size_t calls() const;
  // Every request seen so far, in order.
  std::vector<CompletionRequest> received() const;

 private:
  mutable std::mutex mu_;
  ReplyQueue queue_;
  std::size_t next_ = 0;
  std::vector<CompletionRequest> received_;
};

// Reply queues for scripted runs, optionally per script and with seed-picked
// variants: variant index = seed mod variant count.
struct ScriptedPlan {
  std::vector<ReplyQueue> default_variants;
  std::map<std::string, std::vector<ReplyQueue>> by_script;

  // Throws BackendError if nothing is scripted for `script_id`.
  const ReplyQueue& select(const std::string& script_id, std::uint64_t seed) const;
};

struct BackendConfig {
  enum class Kind { kRemote, kScripted };
  Kind kind = Kind::kScripted;
  std::optional<std::string> endpoint_url;
  std::optional<std::string> model_name;
  double timeout_seconds = 60.0;
  int max_retries = 2;
  std::uint64_t seed = 0;
  // Name of the environment variable holding the bearer token.
  std::string api_key_env = "DYNEVAL_API_KEY";
  // Send the API document as a provider-native tool definition.
  bool use_tools = false;
  double backoff_base_seconds = 0.5;
  // Extra request fields (sampling parameters etc.); empty by default so
  // provider defaults apply.
  Json request_params = Json::object();
  std::shared_ptr<const ScriptedPlan> plan;  // kScripted only
};

// Throws UsageError on invalid configuration.
BackendConfig backend_config_from_json(const Json& object);
BackendConfig load_backend_config(const std::filesystem::path& path);
AssistantReply reply_from_json(const Json& value);
Json to_json(const AssistantReply& reply);

struct SessionContext {
  std::string script_id;
  std::uint64_t seed = 0;
};

using BackendFactory = std::function<std::unique_ptr<ChatBackend>(const SessionContext&)>;

// Remote configs share one client; scripted configs build a fresh replay
// backend for each session.
BackendFactory make_backend_factory(const BackendConfig& config);

// One chat-completion exchange per attempt over HTTP(S), retried with
// exponential backoff and full jitter.
class RemoteBackend : public ChatBackend {
 public:
  explicit RemoteBackend(BackendConfig config);
  ~RemoteBackend() override;

  AssistantReply complete(const CompletionRequest& request) override;

  // Attempts made across all complete() calls.
  std::size_t attempts() const { return attempts_.load(); }

 private:
  BackendConfig config_;
  std::string origin_;  // scheme://host[:port]
  std::string path_;
  std::atomic<std::size_t> attempts_{0};
  std::mutex rng_mu_;
  std::uint64_t rng_state_;
};

// Request body: {"model", "messages": [{"role", "content"}...], "tools"?}
// followed by any configured request_params.
Json build_request_body(const std::string& model, std::span<const ChatMessage> messages,
                        const std::optional<Json>& tools, const Json& request_params = {});

// Reads choices[0].message: "content" and the first tool call (or legacy
// function_call). Throws BackendError on an unusable response.
AssistantReply parse_completion_response(const Json& response);

}  // namespace dyneval
