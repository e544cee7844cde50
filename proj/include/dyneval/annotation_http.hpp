#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "dyneval/annotation_service.hpp"
#include "dyneval/orchestrator.hpp"

namespace dyneval {

// Annotation server configuration file:
//   {"host": "127.0.0.1", "port": 8080, "assistant": "assistant.json",
//    "staticDir": "ui/dist", "eventLog": "events.jsonl",
//    "records": "records.jsonl", "seed": 0,
//    "policy": {"maxUserTurns": 8, "duplicateAssistantLimit": 2}}
struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::optional<std::filesystem::path> assistant_config;
  std::optional<std::filesystem::path> static_dir;
  std::optional<std::filesystem::path> event_log;
  std::optional<std::filesystem::path> records;
  std::uint64_t seed = 0;
  TerminationPolicy policy;
};

// Throws UsageError on unknown keys or wrong types.
ServerConfig server_config_from_json(const Json& object);
ServerConfig load_server_config(const std::filesystem::path& path);

// JSON-over-HTTP front end for an AnnotationService:
//   GET  /scripts
//   POST /sessions               {"scriptId"}
//   GET  /sessions/{id}
//   POST /sessions/{id}/turns    {"content"}
//   POST /sessions/{id}/finish   {"reason"}
// and the annotation UI's files (or a placeholder page) under "/".
class AnnotationServer {
 public:
  AnnotationServer(AnnotationService& service, std::optional<std::filesystem::path> static_dir);
  ~AnnotationServer();

  // Returns the bound port (useful with port 0). Throws IoError.
  int bind(const std::string& host, int port);
  // Blocks until stop().
  void serve();
  void stop();
  bool running() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace dyneval
