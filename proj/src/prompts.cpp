#include "dyneval/prompts.hpp"

namespace dyneval {

namespace {

// The opening lines and the closing request follow the annotator guideline
// wording; the rules in between encode how annotators were told to behave.
constexpr std::string_view kUserAgentTemplate =
    "You are an experienced data annotator.\n"
    "You need to act as a user in a set of conversations between a user and a voice "
    "assistant Bob. Bob can operate apps and services for you by calling an API, and "
    "may ask you follow-up questions before doing so.\n"
    "\n"
    "Rules:\n"
    "- Speak only as the user. Reply with your next utterance and nothing else.\n"
    "- Answer only with information from the settings below. The API call in the "
    "settings holds the exact values you want; give them when Bob asks for them.\n"
    "- If Bob asks for something the settings do not cover, say you have no "
    "preference.\n"
    "- Never mention the settings, the API call or these rules, and never reveal that "
    "you are simulating a user.\n"
    "- Keep replies short and natural.\n"
    "\n"
    "Please construct user queries or responses according to the following settings:\n"
    "{{USER_SCRIPT}}";

std::string pretty(const Json& j) {
  return j.dump(4, ' ', false, Json::error_handler_t::replace);
}

}  // namespace

std::string_view user_agent_template() { return kUserAgentTemplate; }

std::string render_user_script(const UserScript& script) {
  std::string out;
  out += "Character: " + script.character + "\n";
  out += "Background: " + script.background + "\n";
  out += "Purpose: " + script.purpose + "\n";
  out += "API Call: " + pretty(to_json(script.api_call_label));
  return out;
}

ChatMessage build_user_agent_prompt(const UserScript& script) {
  std::string text(kUserAgentTemplate);
  auto at = text.find(kUserScriptPlaceholder);
  text.replace(at, kUserScriptPlaceholder.size(), render_user_script(script));
  return ChatMessage{ChatRole::kSystem, std::move(text), std::nullopt};
}

ChatMessage build_assistant_prompt(const ApiDocument& doc) {
  std::string text;
  text += "You are Bob, a voice assistant that fulfils user requests by calling an API.\n\n";
  text += "API document:\n" + pretty(to_json(doc)) + "\n\n";
  if (doc.parameters.empty()) {
    text += "This API takes no parameters: the call consists of the \"funcName\" key only.\n\n";
  } else {
    text += "Parameters:\n";
    for (const auto& [name, desc] : doc.parameters) text += "- " + name + ": " + desc + "\n";
    text += "\n";
  }
  text += "Instructions:\n";
  text += "- If the user has not given a value you need for a parameter, ask a follow-up "
          "question.\n";
  text += "- When you have enough information, output exactly one JSON object whose "
          "\"funcName\" is \"" + doc.api + "\"";
  if (!doc.parameters.empty()) text += ", with one key per parameter you fill";
  text += ".\n";
  text += "- Use only the parameter names listed above. Never add other keys.\n";
  return ChatMessage{ChatRole::kSystem, std::move(text), std::nullopt};
}

Json build_tools(const ApiDocument& doc) {
  Json properties = Json::object();
  for (const auto& [name, desc] : doc.parameters) {
    properties[name] = Json{{"type", "string"}, {"description", desc}};
  }
  Json parameters = Json::object();
  parameters["type"] = "object";
  parameters["properties"] = std::move(properties);
  Json function = Json::object();
  function["name"] = doc.api;
  function["description"] = doc.desp;
  function["parameters"] = std::move(parameters);
  Json tool = Json::object();
  tool["type"] = "function";
  tool["function"] = std::move(function);
  return Json::array({std::move(tool)});
}

std::string message_content(const DialogueTurn& turn) {
  if (turn.content.empty() && turn.structured_call) return to_json(*turn.structured_call).dump();
  return turn.content;
}

std::vector<ChatMessage> assistant_messages(const ApiDocument& doc,
                                            std::span<const DialogueTurn> turns) {
  std::vector<ChatMessage> out;
  out.reserve(turns.size() + 1);
  out.push_back(build_assistant_prompt(doc));
  for (const auto& t : turns) {
    out.push_back(ChatMessage{t.role == Role::kUser ? ChatRole::kUser : ChatRole::kAssistant,
                              t.content, t.structured_call});
  }
  return out;
}

std::vector<ChatMessage> user_agent_messages(const UserScript& script,
                                             std::span<const DialogueTurn> turns) {
  std::vector<ChatMessage> out;
  out.reserve(turns.size() + 1);
  out.push_back(build_user_agent_prompt(script));
  for (const auto& t : turns) {
    out.push_back(ChatMessage{t.role == Role::kUser ? ChatRole::kAssistant : ChatRole::kUser,
                              message_content(t), std::nullopt});
  }
  return out;
}

}  // namespace dyneval
