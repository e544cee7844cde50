#include "dyneval/datagen.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <regex>
#include <set>

#include "dyneval/errors.hpp"
#include "dyneval/prompts.hpp"

namespace dyneval {

namespace {

constexpr std::string_view kGeneratorSystemPrompt = "You are an experienced prompt engineer.";

constexpr std::string_view kScenarioExemplar =
    "1.\n"
    "Character: Lisa, a busy mother\n"
    "Background: Lisa needs to take her son, who recently fell and sprained his ankle, to the "
    "orthopedic department.\n"
    "Purpose: Using a tablet, Lisa books an appointment at the hospital using a medical "
    "appointment registration app.\n"
    "API Call: {\n"
    "    \"funcName\": \"RegMedAppt\",\n"
    "    \"time\": \"Monday\",\n"
    "    \"departmentName\": \"Orthopedic\"\n"
    "}\n"
    "InitialQuery: I want to book an medical appoiment for next Monday at 1:30PM.\n"
    "\n"
    "2.\n"
    "...";

enum class Field { kCharacter, kBackground, kPurpose, kApiCall, kInitialQuery };

constexpr std::array<std::string_view, 5> kFieldNames = {"Character", "Background", "Purpose",
                                                          "API Call", "InitialQuery"};

std::string trim(std::string_view s) {
  auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  auto last = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(first, last - first + 1));
}

std::string lower_alnum(std::string_view s) {
  std::string out;
  for (char c : s) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
  }
  return out;
}

// "Character: ..." -> (kCharacter, "...") when the line opens a field.
std::optional<std::pair<Field, std::string>> field_line(std::string_view line) {
  auto colon = line.find(':');
  if (colon == std::string_view::npos || colon > 20) return std::nullopt;
  std::string label = lower_alnum(line.substr(0, colon));
  std::string rest = trim(line.substr(colon + 1));
  if (label == "character") return std::pair{Field::kCharacter, rest};
  if (label == "background") return std::pair{Field::kBackground, rest};
  if (label == "purpose") return std::pair{Field::kPurpose, rest};
  if (label == "apicall") return std::pair{Field::kApiCall, rest};
  if (label == "initialquery") return std::pair{Field::kInitialQuery, rest};
  return std::nullopt;
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    if (end == text.size()) break;
    start = end + 1;
  }
  return lines;
}

bool is_placeholder(const std::vector<std::string_view>& lines) {
  for (auto l : lines) {
    std::string t = trim(l);
    if (!t.empty() && t.find_first_not_of(".…") != std::string::npos) return false;
  }
  return true;
}

std::optional<Scenario> parse_block(const std::vector<std::string_view>& lines,
                                    std::string& diagnostic) {
  std::array<std::optional<std::string>, 5> values;
  std::optional<Field> current;
  auto call_still_open = [&values]() {
    const auto& v = values[static_cast<std::size_t>(Field::kApiCall)];
    return v && v->find('{') != std::string::npos && find_json_objects(*v).empty();
  };
  for (auto line : lines) {
    bool inside_call = current == Field::kApiCall && call_still_open();
    if (auto f = inside_call ? std::nullopt : field_line(line)) {
      auto idx = static_cast<std::size_t>(f->first);
      if (values[idx]) {
        diagnostic = "duplicate field \"" + std::string(kFieldNames[idx]) + "\"";
        return std::nullopt;
      }
      values[idx] = f->second;
      current = f->first;
      continue;
    }
    if (!current) continue;
    auto idx = static_cast<std::size_t>(*current);
    if (*current == Field::kApiCall) {
      *values[idx] += "\n";
      *values[idx] += line;
    } else if (std::string t = trim(line); !t.empty()) {
      if (!values[idx]->empty()) *values[idx] += " ";
      *values[idx] += t;
    }
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!values[i]) {
      diagnostic = "missing field \"" + std::string(kFieldNames[i]) + "\"";
      return std::nullopt;
    }
  }
  Scenario s;
  s.character = *values[0];
  s.background = *values[1];
  s.purpose = *values[2];
  s.initial_query = *values[4];
  auto objects = find_json_objects(*values[3]);
  if (objects.empty()) {
    diagnostic = "API Call is not a JSON object";
    return std::nullopt;
  }
  try {
    s.api_call = call_from_json(parse_json_strict(objects.front()));
  } catch (const std::exception& e) {
    diagnostic = std::string("API Call: ") + e.what();
    return std::nullopt;
  }
  if (s.initial_query.empty()) {
    diagnostic = "empty InitialQuery";
    return std::nullopt;
  }
  return s;
}

std::string describe(const ValidationReport& report) {
  std::string out;
  for (const auto& v : report.violations) {
    if (!out.empty()) out += "; ";
    out += (v.kind == Violation::Kind::kUnknownFunction ? "unknown function " : "undeclared slot ") +
           v.detail;
  }
  return out;
}

}  // namespace

std::string_view scenario_exemplar() { return kScenarioExemplar; }

std::vector<ChatMessage> generation_messages(const ApiDocument& doc, int n) {
  std::string prompt;
  prompt += "Please construct " + std::to_string(n) +
            " different use case scenarios based on the following API documentation:\n";
  prompt += to_json(doc).dump(4, ' ', false, Json::error_handler_t::replace);
  prompt += "\nPlease follow the following format:\n";
  prompt += kScenarioExemplar;
  prompt += "\n\nNote that the generated scenarios have exactly five attributes: Character, "
            "Background, Purpose, API Call and InitialQuery. The API Call is a JSON object whose "
            "\"funcName\" is \"" + doc.api +
            "\" and whose other keys are parameters from the documentation.";
  return {ChatMessage{ChatRole::kSystem, std::string(kGeneratorSystemPrompt), std::nullopt},
          ChatMessage{ChatRole::kUser, std::move(prompt), std::nullopt}};
}

ScenarioParse parse_scenarios(std::string_view text) {
  ScenarioParse out;
  static const std::regex kHeading(R"(^\s*(\d+)\s*[.)]\s*(.*)$)");
  std::vector<std::vector<std::string_view>> blocks;
  std::vector<int> numbers;
  bool seen_heading = false;
  std::vector<std::string_view> preamble;
  for (auto line : split_lines(text)) {
    std::match_results<std::string_view::const_iterator> m;
    if (std::regex_match(line.begin(), line.end(), m, kHeading)) {
      std::string_view rest = line.substr(static_cast<std::size_t>(m.position(2)));
      // "3.5 stars" is prose; a heading stands alone or opens a field.
      if (trim(rest).empty() || field_line(rest)) {
        seen_heading = true;
        blocks.emplace_back();
        int number = 0;
        std::string digits = m[1].str();
        std::from_chars(digits.data(), digits.data() + digits.size(), number);
        numbers.push_back(number);
        if (!trim(rest).empty()) blocks.back().push_back(rest);
        continue;
      }
    }
    if (seen_heading) {
      blocks.back().push_back(line);
    } else {
      preamble.push_back(line);
    }
  }
  // Unnumbered output: treat the whole text as one scenario if it has fields.
  if (!seen_heading) {
    bool has_field = std::any_of(preamble.begin(), preamble.end(),
                                 [](std::string_view l) { return field_line(l).has_value(); });
    if (has_field) {
      blocks.push_back(preamble);
      numbers.push_back(1);
    }
  }
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (is_placeholder(blocks[i])) continue;
    std::string diagnostic;
    try {
      if (auto s = parse_block(blocks[i], diagnostic)) {
        out.scenarios.push_back(std::move(*s));
        continue;
      }
    } catch (const std::exception& e) {
      diagnostic = e.what();
    }
    out.diagnostics.push_back("scenario " + std::to_string(numbers[i]) + ": " + diagnostic);
  }
  return out;
}

ScriptGeneration generate_user_scripts(const ApiDocument& doc, ChatBackend& generator, int n,
                                       int max_retries) {
  if (n < 1) throw UsageError("scenario count must be >= 1");
  Corpus single({doc});
  ScriptGeneration out;
  for (int attempt = 0; attempt <= max_retries; ++attempt) {
    int wanted = n - static_cast<int>(out.scripts.size());
    if (wanted <= 0) break;
    CompletionRequest request;
    request.messages = generation_messages(doc, wanted);
    ++out.requests;
    AssistantReply reply = generator.complete(request);
    ScenarioParse parsed = parse_scenarios(reply.content);
    for (auto& d : parsed.diagnostics) {
      out.diagnostics.push_back(doc.api + " request " + std::to_string(out.requests) + ": " + d);
    }
    for (auto& scenario : parsed.scenarios) {
      if (static_cast<int>(out.scripts.size()) >= n) break;
      UserScript script;
      script.script_id = doc.api + "-" + std::to_string(out.scripts.size() + 1);
      script.character = std::move(scenario.character);
      script.background = std::move(scenario.background);
      script.purpose = std::move(scenario.purpose);
      script.api_call_label = std::move(scenario.api_call);
      script.initial_query = std::move(scenario.initial_query);
      auto report = validate_script(script, single);
      if (!report.ok()) {
        out.diagnostics.push_back(doc.api + " request " + std::to_string(out.requests) +
                                  ": rejected scenario (" + describe(report) + ")");
        continue;
      }
      out.scripts.push_back(std::move(script));
    }
  }
  if (out.scripts.empty()) {
    throw GenerationError("no valid scenario for " + doc.api + " after " +
                          std::to_string(out.requests) + " requests");
  }
  return out;
}

StaticHistoryResult generate_static_history(const UserScript& script, const ApiDocument& doc,
                                            ChatBackend& user_model,
                                            ChatBackend& assistant_model,
                                            const TerminationPolicy& policy, int max_attempts,
                                            std::uint64_t seed) {
  Corpus single({doc});
  StaticHistoryResult out;
  for (int attempt = 1; attempt <= max_attempts; ++attempt) {
    out.attempts = attempt;
    SessionMeta meta;
    meta.session_id = "selfplay-" + script.script_id + "-a" + std::to_string(attempt);
    meta.seed = seed + static_cast<std::uint64_t>(attempt - 1);
    SessionRecord rec = run_dynamic(script, doc, user_model, assistant_model, policy, meta);
    const std::string prefix = "attempt " + std::to_string(attempt) + ": ";
    if (rec.outcome == Outcome::kBackendError) {
      out.diagnostics.push_back(prefix + "backend error: " + rec.error.value_or(""));
      return out;
    }
    if (rec.outcome != Outcome::kCallMade) {
      out.diagnostics.push_back(prefix + "no call (" + std::string(to_string(rec.outcome)) + ")");
      continue;
    }
    auto report = validate_call(*rec.final_call, single);
    if (!report.ok()) {
      out.diagnostics.push_back(prefix + "invalid call (" + describe(report) + ")");
      continue;
    }
    StaticHistory history;
    history.script_id = script.script_id;
    history.turns.assign(rec.turns.begin(), rec.turns.end() - 1);
    history.gold_call = *rec.final_call;
    UserScript finalized = script;
    finalized.api_call_label = history.gold_call;
    out.history = std::move(history);
    out.finalized_script = std::move(finalized);
    return out;
  }
  return out;
}

void export_for_review(std::span<const StaticHistory> histories,
                       const std::filesystem::path& path) {
  std::vector<Json> lines;
  for (const auto& h : histories) {
    Json j = to_json(h);
    j["decision"] = nullptr;
    lines.push_back(std::move(j));
  }
  write_jsonl(lines, path);
}

std::map<std::string, ReviewDecision> read_review_decisions(const std::filesystem::path& path) {
  std::map<std::string, ReviewDecision> out;
  for (auto& [line, json] : read_jsonl(path)) {
    if (!json.is_object() || !json.contains("scriptId") || !json["scriptId"].is_string()) {
      throw ParseError("review line needs a string \"scriptId\"", line);
    }
    auto it = json.find("decision");
    if (it == json.end() || it->is_null()) continue;
    if (!it->is_string()) throw ParseError("\"decision\" must be \"keep\" or \"drop\"", line);
    std::string d = lower_alnum(it->get<std::string>());
    if (d.empty()) continue;
    if (d == "keep") {
      out[json["scriptId"].get<std::string>()] = ReviewDecision::kKeep;
    } else if (d == "drop") {
      out[json["scriptId"].get<std::string>()] = ReviewDecision::kDrop;
    } else {
      throw ParseError("\"decision\" must be \"keep\" or \"drop\"", line);
    }
  }
  return out;
}

std::vector<StaticHistory> apply_review(std::span<const StaticHistory> histories,
                                        const std::map<std::string, ReviewDecision>& decisions) {
  std::set<std::string> known;
  for (const auto& h : histories) known.insert(h.script_id);
  for (const auto& [id, _] : decisions) {
    if (!known.count(id)) throw ValidationError("review decision for unknown scriptId " + id);
  }
  std::vector<StaticHistory> kept;
  for (const auto& h : histories) {
    auto it = decisions.find(h.script_id);
    if (it != decisions.end() && it->second == ReviewDecision::kDrop) continue;
    kept.push_back(h);
  }
  return kept;
}

}  // namespace dyneval
