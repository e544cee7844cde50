#include <chrono>
#include <cmath>
#include <cstdlib>
#include <random>
#include <thread>

#include "dyneval/backends.hpp"
#include "dyneval/errors.hpp"
#include "dyneval/prompts.hpp"
#include "httplib.h"

namespace dyneval {

namespace {

struct SplitUrl {
  std::string origin;
  std::string path;
};

SplitUrl split_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw UsageError("endpointUrl needs a scheme: " + url);
  std::string scheme = url.substr(0, scheme_end);
  if (scheme != "http" && scheme != "https") {
    throw UsageError("endpointUrl scheme must be http or https: " + url);
  }
#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
  if (scheme == "https") throw UsageError("built without TLS support; cannot reach " + url);
#endif
  auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

bool retryable_status(int status) { return status == 408 || status == 429 || status >= 500; }

// splitmix64; only drives backoff jitter.
std::uint64_t next_random(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

ApiCall call_from_tool(const std::string& name, const Json& arguments) {
  if (name.empty()) throw BackendError("tool call without a function name");
  Json args = arguments;
  if (args.is_string()) {
    try {
      args = parse_json_strict(args.get<std::string>());
    } catch (const ParseError& e) {
      throw BackendError(std::string("tool call arguments are not JSON: ") + e.what());
    }
  }
  ApiCall call;
  call.func_name = name;
  if (args.is_null()) return call;
  if (!args.is_object()) throw BackendError("tool call arguments must be a JSON object");
  for (auto it = args.begin(); it != args.end(); ++it) {
    if (it.key() == kFuncNameKey) continue;
    const Json& v = it.value();
    if (v.is_string() || v.is_number() || v.is_boolean()) {
      call.slots.emplace_back(it.key(), slot_value_from_json(v));
    } else {
      // Providers occasionally nest; keep the slot as its JSON text.
      call.slots.emplace_back(it.key(), v.dump());
    }
  }
  return call;
}

}  // namespace

Json build_request_body(const std::string& model, std::span<const ChatMessage> messages,
                        const std::optional<Json>& tools, const Json& request_params) {
  Json body = Json::object();
  body["model"] = model;
  Json msgs = Json::array();
  for (const auto& m : messages) {
    Json msg = Json::object();
    msg["role"] = std::string(to_string(m.role));
    if (m.content.empty() && m.call) {
      msg["content"] = to_json(*m.call).dump();
    } else {
      msg["content"] = m.content;
    }
    msgs.push_back(std::move(msg));
  }
  body["messages"] = std::move(msgs);
  if (tools) body["tools"] = *tools;
  if (request_params.is_object()) {
    for (auto it = request_params.begin(); it != request_params.end(); ++it) {
      if (!body.contains(it.key())) body[it.key()] = it.value();
    }
  }
  return body;
}

AssistantReply parse_completion_response(const Json& response) {
  if (!response.is_object() || !response.contains("choices") || !response["choices"].is_array() ||
      response["choices"].empty()) {
    throw BackendError("completion response has no choices");
  }
  const Json& choice = response["choices"][0];
  if (!choice.is_object() || !choice.contains("message") || !choice["message"].is_object()) {
    throw BackendError("completion response has no choices[0].message");
  }
  const Json& message = choice["message"];
  AssistantReply reply;
  if (auto it = message.find("content"); it != message.end() && it->is_string()) {
    reply.content = it->get<std::string>();
  }
  auto tool_calls = message.find("tool_calls");
  if (tool_calls != message.end() && tool_calls->is_array() && !tool_calls->empty()) {
    const Json& first = (*tool_calls)[0];
    const Json& fn = first.contains("function") ? first["function"] : first;
    reply.structured_call =
        call_from_tool(fn.value("name", std::string()), fn.value("arguments", Json()));
  } else if (auto fc = message.find("function_call"); fc != message.end() && fc->is_object()) {
    reply.structured_call =
        call_from_tool(fc->value("name", std::string()), fc->value("arguments", Json()));
  }
  if (reply.content.empty() && !reply.structured_call) {
    throw BackendError("completion response carries neither content nor a tool call");
  }
  return reply;
}

RemoteBackend::RemoteBackend(BackendConfig config)
    : config_(std::move(config)), rng_state_(config_.seed) {
  if (!config_.endpoint_url || !config_.model_name) {
    throw UsageError("remote backend needs endpointUrl and modelName");
  }
  auto split = split_url(*config_.endpoint_url);
  origin_ = split.origin;
  path_ = split.path;
}

RemoteBackend::~RemoteBackend() = default;

AssistantReply RemoteBackend::complete(const CompletionRequest& request) {
  if (request.messages.empty()) throw BackendError("no messages to send");
  if (request.messages.front().role == ChatRole::kAssistant) {
    throw BackendError("conversation must start with a system or user message");
  }
  std::optional<Json> tools = config_.use_tools ? request.tools : std::nullopt;
  const std::string body =
      build_request_body(*config_.model_name, request.messages, tools, config_.request_params)
          .dump(-1, ' ', false, Json::error_handler_t::replace);

  httplib::Headers headers;
  if (const char* token = std::getenv(config_.api_key_env.c_str()); token && *token) {
    headers.emplace("Authorization", std::string("Bearer ") + token);
  }

  const auto timeout = std::chrono::duration<double>(config_.timeout_seconds);
  const auto timeout_us = std::chrono::duration_cast<std::chrono::microseconds>(timeout);
  const auto secs = static_cast<time_t>(timeout_us.count() / 1000000);
  const auto usecs = static_cast<time_t>(timeout_us.count() % 1000000);

  std::string last_error;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) {
      double cap = std::min(config_.timeout_seconds,
                            config_.backoff_base_seconds * std::pow(2.0, attempt - 1));
      double u;
      {
        std::lock_guard lock(rng_mu_);
        u = static_cast<double>(next_random(rng_state_) >> 11) * 0x1.0p-53;
      }
      std::this_thread::sleep_for(std::chrono::duration<double>(cap * u));
    }
    ++attempts_;
    httplib::Client client(origin_);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    auto result = client.Post(path_, headers, body, "application/json");
    if (!result) {
      last_error = "request failed: " + httplib::to_string(result.error());
      continue;
    }
    if (result->status < 200 || result->status >= 300) {
      last_error = "HTTP " + std::to_string(result->status);
      if (retryable_status(result->status)) continue;
      throw BackendError(last_error + " from " + origin_ + path_);
    }
    Json parsed;
    try {
      parsed = Json::parse(result->body);
    } catch (const Json::parse_error&) {
      throw BackendError("completion response is not JSON");
    }
    return parse_completion_response(parsed);
  }
  throw BackendError(last_error + " after " + std::to_string(config_.max_retries + 1) +
                     " attempts to " + origin_ + path_);
}

}  // namespace dyneval
