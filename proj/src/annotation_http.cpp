#include "dyneval/annotation_http.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <httplib.h>

#include "dyneval/errors.hpp"

namespace dyneval {

namespace {

constexpr const char* kJsonType = "application/json";

constexpr const char* kPlaceholderPage = R"(<!doctype html>
<html>
<head><meta charset="utf-8"><title>dyneval annotation</title></head>
<body>
<h1>dyneval annotation service</h1>
<p>No UI build is configured. The JSON API is available under
<code>/scripts</code> and <code>/sessions</code>.</p>
</body>
</html>
)";

void send_json(httplib::Response& res, int status, const Json& body) {
  res.status = status;
  res.set_content(body.dump(), kJsonType);
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send_json(res, status, Json{{"error", message}, {"status", status}});
}

Json body_object(const httplib::Request& req) {
  if (req.body.empty()) return Json::object();
  Json body;
  try {
    body = parse_json_strict(req.body);
  } catch (const ParseError& e) {
    throw UsageError(std::string("request body: ") + e.what());
  }
  if (!body.is_object()) throw UsageError("request body must be a JSON object");
  return body;
}

std::string required_string(const Json& body, const char* key) {
  auto it = body.find(key);
  if (it == body.end() || !it->is_string()) {
    throw UsageError(std::string("\"") + key + "\" must be a string");
  }
  return it->get<std::string>();
}

// Runs a handler and maps domain errors onto status codes.
template <typename F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const NotFoundError& e) {
      send_error(res, 404, e.what());
    } catch (const ConflictError& e) {
      send_error(res, 409, e.what());
    } catch (const BackendError& e) {
      send_error(res, 502, e.what());
    } catch (const UsageError& e) {
      send_error(res, 400, e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, e.what());
    }
  };
}

std::optional<std::filesystem::path> optional_path(const Json& object, const char* key) {
  auto it = object.find(key);
  if (it == object.end() || it->is_null()) return std::nullopt;
  return std::filesystem::path(it->get<std::string>());
}

}  // namespace

ServerConfig server_config_from_json(const Json& object) {
  if (!object.is_object()) throw UsageError("server config must be a JSON object");
  static const char* const kKnown[] = {"host",    "port",    "assistant", "staticDir",
                                       "eventLog", "records", "seed",      "policy"};
  for (const auto& [key, value] : object.items()) {
    if (std::find(std::begin(kKnown), std::end(kKnown), key) == std::end(kKnown)) {
      throw UsageError("server config: unknown key \"" + key + "\"");
    }
  }
  ServerConfig c;
  try {
    if (object.contains("host")) c.host = object["host"].get<std::string>();
    if (object.contains("port")) c.port = object["port"].get<int>();
    if (object.contains("seed")) c.seed = object["seed"].get<std::uint64_t>();
    c.assistant_config = optional_path(object, "assistant");
    c.static_dir = optional_path(object, "staticDir");
    c.event_log = optional_path(object, "eventLog");
    c.records = optional_path(object, "records");
  } catch (const Json::exception& e) {
    throw UsageError(std::string("server config: ") + e.what());
  }
  if (object.contains("policy")) c.policy = policy_from_json(object["policy"]);
  if (c.port < 0 || c.port > 65535) throw UsageError("server config: port out of range");
  return c;
}

ServerConfig load_server_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open server config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  try {
    return server_config_from_json(parse_json_strict(buf.str()));
  } catch (const ParseError& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

struct AnnotationServer::Impl {
  AnnotationService* service;
  httplib::Server server;
  bool bound = false;
};

AnnotationServer::AnnotationServer(AnnotationService& service,
                                   std::optional<std::filesystem::path> static_dir)
    : impl_(std::make_unique<Impl>()) {
  impl_->service = &service;
  auto& srv = impl_->server;
  AnnotationService* svc = &service;

  srv.Get("/scripts", guarded([svc](const httplib::Request&, httplib::Response& res) {
            send_json(res, 200, svc->list_scripts());
          }));

  srv.Post("/sessions", guarded([svc](const httplib::Request& req, httplib::Response& res) {
             const Json body = body_object(req);
             send_json(res, 201, to_json(svc->create_session(required_string(body, "scriptId"))));
           }));

  srv.Get(R"(/sessions/([^/]+))",
          guarded([svc](const httplib::Request& req, httplib::Response& res) {
            send_json(res, 200, to_json(svc->get_session(req.matches[1])));
          }));

  srv.Post(R"(/sessions/([^/]+)/turns)",
           guarded([svc](const httplib::Request& req, httplib::Response& res) {
             const Json body = body_object(req);
             std::string content = required_string(body, "content");
             if (content.empty()) throw UsageError("\"content\" must not be empty");
             send_json(res, 200, to_json(svc->post_user_turn(req.matches[1], std::move(content))));
           }));

  srv.Post(R"(/sessions/([^/]+)/finish)",
           guarded([svc](const httplib::Request& req, httplib::Response& res) {
             const Json body = body_object(req);
             std::optional<std::string> reason;
             if (body.contains("reason") && !body["reason"].is_null()) {
               reason = required_string(body, "reason");
             }
             const std::string id = req.matches[1];
             svc->finish_session(id, std::move(reason));
             send_json(res, 200, to_json(svc->get_session(id)));
           }));

  bool mounted = false;
  if (static_dir) {
    if (!std::filesystem::is_directory(*static_dir)) {
      throw UsageError("static directory " + static_dir->string() + " does not exist");
    }
    mounted = srv.set_mount_point("/", static_dir->string());
  }
  if (!mounted) {
    srv.Get("/", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(kPlaceholderPage, "text/html; charset=utf-8");
    });
  }
}

AnnotationServer::~AnnotationServer() { stop(); }

int AnnotationServer::bind(const std::string& host, int port) {
  int bound_port = port;
  if (port == 0) {
    bound_port = impl_->server.bind_to_any_port(host);
    if (bound_port < 0) throw IoError("cannot bind " + host);
  } else if (!impl_->server.bind_to_port(host, port)) {
    throw IoError("cannot bind " + host + ":" + std::to_string(port));
  }
  impl_->bound = true;
  return bound_port;
}

void AnnotationServer::serve() {
  if (!impl_->bound) throw std::logic_error("serve() before bind()");
  impl_->server.listen_after_bind();
}

void AnnotationServer::stop() {
  if (impl_->server.is_running()) impl_->server.stop();
}

bool AnnotationServer::running() const { return impl_->server.is_running(); }

}  // namespace dyneval
