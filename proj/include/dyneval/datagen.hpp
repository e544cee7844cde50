#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dyneval/backends.hpp"
#include "dyneval/corpus.hpp"
#include "dyneval/orchestrator.hpp"

namespace dyneval {

// Not a single usable scenario came out of the generator for a document.
class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Fixed example block shown to the generator for every document.
std::string_view scenario_exemplar();

// System and first-round messages asking for `n` scenarios about `doc`.
std::vector<ChatMessage> generation_messages(const ApiDocument& doc, int n);

struct Scenario {
  std::string character;
  std::string background;
  std::string purpose;
  ApiCall api_call;
  std::string initial_query;
};

struct ScenarioParse {
  std::vector<Scenario> scenarios;
  std::vector<std::string> diagnostics;  // one per rejected block
};

// Splits on numbered headings ("1.", "2.", ...) and reads the five labelled
// fields of each block. Never throws.
ScenarioParse parse_scenarios(std::string_view text);

struct ScriptGeneration {
  std::vector<UserScript> scripts;
  std::vector<std::string> diagnostics;
  int requests = 0;
};

// Asks for `n` scenarios, then re-asks for the shortfall up to `max_retries`
// times. Scripts get ids "<api>-<k>" and carry the provisional label.
// Throws GenerationError if none survive, BackendError if the generator fails.
ScriptGeneration generate_user_scripts(const ApiDocument& doc, ChatBackend& generator, int n = 5,
                                       int max_retries = 3);

struct StaticHistoryResult {
  std::optional<StaticHistory> history;
  std::optional<UserScript> finalized_script;  // label replaced by the produced call
  int attempts = 0;
  std::vector<std::string> diagnostics;
};

// Self-play: `user_model` plays the user from the script, `assistant_model`
// plays the assistant from the document. The first valid produced call
// becomes the gold label and the turns before it the history.
StaticHistoryResult generate_static_history(const UserScript& script, const ApiDocument& doc,
                                            ChatBackend& user_model,
                                            ChatBackend& assistant_model,
                                            const TerminationPolicy& policy,
                                            int max_attempts = 3, std::uint64_t seed = 0);

enum class ReviewDecision { kKeep, kDrop };

// One JSONL line per history with an empty "decision" for the reviewer.
void export_for_review(std::span<const StaticHistory> histories,
                       const std::filesystem::path& path);

// Reads "keep"/"drop" decisions; lines without one are skipped (keep).
std::map<std::string, ReviewDecision> read_review_decisions(const std::filesystem::path& path);

// Throws ValidationError when a decision names an unknown scriptId.
std::vector<StaticHistory> apply_review(std::span<const StaticHistory> histories,
                                        const std::map<std::string, ReviewDecision>& decisions);

}  // namespace dyneval
