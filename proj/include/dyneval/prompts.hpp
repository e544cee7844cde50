#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dyneval/backends.hpp"
#include "dyneval/corpus.hpp"

namespace dyneval {

inline constexpr std::string_view kUserScriptPlaceholder = "{{USER_SCRIPT}}";

// Sentence appended before the single assistant turn of a static session.
inline constexpr std::string_view kStaticInstruction =
    "Based on the conversation so far, output the API call now as a single JSON object.";

// User-agent system prompt with the placeholder left in.
std::string_view user_agent_template();

// Character, background and purpose followed by the gold API call.
std::string render_user_script(const UserScript& script);

ChatMessage build_user_agent_prompt(const UserScript& script);
ChatMessage build_assistant_prompt(const ApiDocument& doc);

// Provider-native tool list describing one API; every parameter is a
// string and none is required.
Json build_tools(const ApiDocument& doc);

// What the assistant under test sees: its system prompt then the turns.
std::vector<ChatMessage> assistant_messages(const ApiDocument& doc,
                                            std::span<const DialogueTurn> turns);

// What the user agent sees: its system prompt then the turns with roles
// swapped, so the agent's own utterances are "assistant" messages.
std::vector<ChatMessage> user_agent_messages(const UserScript& script,
                                             std::span<const DialogueTurn> turns);

// Text sent for an assistant turn that only carried a structured call.
std::string message_content(const DialogueTurn& turn);

}  // namespace dyneval
