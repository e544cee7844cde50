#include "dyneval/backends.hpp"

#include <fstream>
#include <sstream>

#include "dyneval/errors.hpp"

namespace dyneval {

namespace {

std::vector<ReplyQueue> queues_from_json(const Json& value, const std::string& where) {
  auto one_queue = [&where](const Json& array) {
    if (!array.is_array()) throw UsageError(where + ": reply queue must be an array");
    ReplyQueue q;
    for (const auto& item : array) q.push_back(reply_from_json(item));
    return q;
  };
  if (value.is_array()) return {one_queue(value)};
  if (value.is_object() && value.contains("variants")) {
    const Json& variants = value["variants"];
    if (!variants.is_array() || variants.empty()) {
      throw UsageError(where + ": \"variants\" must be a non-empty array");
    }
    std::vector<ReplyQueue> out;
    for (const auto& v : variants) out.push_back(one_queue(v));
    return out;
  }
  throw UsageError(where + ": expected a reply array or {\"variants\": [...]}");
}

}  // namespace

std::string_view to_string(ChatRole role) {
  switch (role) {
    case ChatRole::kSystem: return "system";
    case ChatRole::kUser: return "user";
    case ChatRole::kAssistant: return "assistant";
  }
  return "user";
}

ScriptedBackend::ScriptedBackend(ReplyQueue queue) : queue_(std::move(queue)) {}

AssistantReply ScriptedBackend::complete(const CompletionRequest& request) {
  std::lock_guard lock(mu_);
  received_.push_back(request);
  if (next_ >= queue_.size()) {
    throw BackendError("scripted backend exhausted after " + std::to_string(queue_.size()) +
                       " replies");
  }
  return queue_[next_++];
}

void ScriptedBackend::fast_forward(std::size_t calls) {
  std::lock_guard lock(mu_);
  next_ += calls;
}

std::size_t ScriptedBackend::calls() const {
  std::lock_guard lock(mu_);
  return received_.size();
}

std::vector<CompletionRequest> ScriptedBackend::received() const {
  std::lock_guard lock(mu_);
  return received_;
}

const ReplyQueue& ScriptedPlan::select(const std::string& script_id, std::uint64_t seed) const {
  const std::vector<ReplyQueue>* variants = &default_variants;
  if (auto it = by_script.find(script_id); it != by_script.end()) variants = &it->second;
  if (variants->empty()) {
    throw BackendError("no scripted replies for script \"" + script_id + "\"");
  }
  return (*variants)[seed % variants->size()];
}

AssistantReply reply_from_json(const Json& value) {
  if (value.is_string()) return AssistantReply{value.get<std::string>(), std::nullopt};
  if (!value.is_object()) throw UsageError("scripted reply must be a string or an object");
  AssistantReply reply;
  if (auto it = value.find("content"); it != value.end() && !it->is_null()) {
    if (!it->is_string()) throw UsageError("scripted reply \"content\" must be a string");
    reply.content = it->get<std::string>();
  }
  if (auto it = value.find("call"); it != value.end() && !it->is_null()) {
    try {
      reply.structured_call = call_from_json(*it);
    } catch (const std::exception& e) {
      throw UsageError(std::string("scripted reply call: ") + e.what());
    }
  }
  return reply;
}

Json to_json(const AssistantReply& reply) {
  Json j = Json::object();
  j["content"] = reply.content;
  if (reply.structured_call) j["call"] = to_json(*reply.structured_call);
  return j;
}

BackendConfig backend_config_from_json(const Json& object) {
  if (!object.is_object()) throw UsageError("backend config must be a JSON object");
  for (const char* secret : {"apiKey", "api_key", "token", "bearer"}) {
    if (object.contains(secret)) {
      throw UsageError(std::string("backend config must not contain \"") + secret +
                       "\"; supply secrets through the environment");
    }
  }
  BackendConfig c;
  auto get = [&object](const char* key) -> const Json* {
    auto it = object.find(key);
    return it == object.end() || it->is_null() ? nullptr : &*it;
  };
  try {
    const Json* kind = get("kind");
    if (kind == nullptr) throw UsageError("backend config needs \"kind\"");
    std::string k = kind->get<std::string>();
    if (k == "remote") {
      c.kind = BackendConfig::Kind::kRemote;
    } else if (k == "scripted") {
      c.kind = BackendConfig::Kind::kScripted;
    } else {
      throw UsageError("unknown backend kind \"" + k + "\"");
    }
    if (const Json* v = get("endpointUrl")) c.endpoint_url = v->get<std::string>();
    if (const Json* v = get("modelName")) c.model_name = v->get<std::string>();
    if (const Json* v = get("timeoutSeconds")) c.timeout_seconds = v->get<double>();
    if (const Json* v = get("maxRetries")) c.max_retries = v->get<int>();
    if (const Json* v = get("seed")) c.seed = v->get<std::uint64_t>();
    if (const Json* v = get("apiKeyEnv")) c.api_key_env = v->get<std::string>();
    if (const Json* v = get("useTools")) c.use_tools = v->get<bool>();
    if (const Json* v = get("backoffBaseSeconds")) c.backoff_base_seconds = v->get<double>();
    if (const Json* v = get("requestParams")) {
      if (!v->is_object()) throw UsageError("\"requestParams\" must be an object");
      c.request_params = *v;
    }
  } catch (const Json::exception& e) {
    throw UsageError(std::string("backend config: ") + e.what());
  }
  if (!(c.timeout_seconds > 0.0)) throw UsageError("\"timeoutSeconds\" must be > 0");
  if (c.max_retries < 0) throw UsageError("\"maxRetries\" must be >= 0");
  if (c.kind == BackendConfig::Kind::kRemote) {
    if (!c.endpoint_url || c.endpoint_url->empty() || !c.model_name || c.model_name->empty()) {
      throw UsageError("remote backend needs \"endpointUrl\" and \"modelName\"");
    }
  } else {
    auto plan = std::make_shared<ScriptedPlan>();
    if (auto it = object.find("replies"); it != object.end()) {
      plan->default_variants = queues_from_json(*it, "replies");
    }
    if (auto it = object.find("byScript"); it != object.end()) {
      if (!it->is_object()) throw UsageError("\"byScript\" must be an object");
      for (auto s = it->begin(); s != it->end(); ++s) {
        plan->by_script[s.key()] = queues_from_json(s.value(), "byScript." + s.key());
      }
    }
    c.plan = std::move(plan);
  }
  return c;
}

BackendConfig load_backend_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open backend config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return backend_config_from_json(parse_json_strict(buf.str()));
  } catch (const ParseError& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

BackendFactory make_backend_factory(const BackendConfig& config) {
  if (config.kind == BackendConfig::Kind::kRemote) {
    auto shared = std::make_shared<RemoteBackend>(config);
    // Non-owning view of the shared client; it outlives every session.
    struct SharedRemote : ChatBackend {
      std::shared_ptr<RemoteBackend> inner;
      explicit SharedRemote(std::shared_ptr<RemoteBackend> r) : inner(std::move(r)) {}
      AssistantReply complete(const CompletionRequest& req) override {
        return inner->complete(req);
      }
    };
    return [shared](const SessionContext&) -> std::unique_ptr<ChatBackend> {
      return std::make_unique<SharedRemote>(shared);
    };
  }
  auto plan = config.plan ? config.plan : std::make_shared<const ScriptedPlan>();
  return [plan](const SessionContext& ctx) -> std::unique_ptr<ChatBackend> {
    return std::make_unique<ScriptedBackend>(plan->select(ctx.script_id, ctx.seed));
  };
}

}  // namespace dyneval
