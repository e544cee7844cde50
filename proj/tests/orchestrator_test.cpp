#include "dyneval/orchestrator.hpp"

#include <deque>

#include <gtest/gtest.h>

#include "dyneval/errors.hpp"
#include "dyneval/prompts.hpp"
#include "test_util.hpp"

namespace dyneval {
namespace {

using testing::fixed_clock;
using testing::make_call;
using testing::make_doc;
using testing::make_script;

AssistantReply say(std::string text) { return AssistantReply{std::move(text), std::nullopt}; }

ApiDocument reg_doc() { return make_doc("RegMedAppt", {"time", "departmentName"}); }

ApiCall reg_gold() {
  return make_call("RegMedAppt", {{"time", std::string("Monday")},
                                  {"departmentName", std::string("Orthopedic")}});
}

UserScript lisa() { return make_script("lisa-1", reg_gold(), "I need to see a doctor about my knee."); }

SessionMeta meta(std::string id = "s") {
  SessionMeta m;
  m.session_id = std::move(id);
  m.clock = fixed_clock;
  return m;
}

constexpr char kCallText[] =
    R"(Booking now: {"funcName":"RegMedAppt","time":"Monday","departmentName":"Orthopedic"})";

TEST(ExtractTest, EmbeddedCall) {
  auto call = extract_api_call(say(kCallText), reg_doc());
  ASSERT_TRUE(call);
  EXPECT_EQ(*call, reg_gold());
}

TEST(ExtractTest, ProseOnlyIsAbsent) {
  EXPECT_FALSE(extract_api_call(
      say("On your phone, go to the Settings app, then select Bluetooth."), reg_doc()));
}

TEST(ExtractTest, LastCandidateWins) {
  auto call = extract_api_call(
      say(R"(Schema: {"funcName":"SetLuminance","deviceType":"string"} so: )"
          R"({"funcName":"SetLuminance","targetValue":"80"})"),
      make_doc("SetLuminance", {"deviceType", "targetValue"}));
  ASSERT_TRUE(call);
  EXPECT_EQ(call->slots.size(), 1u);
  EXPECT_EQ(std::get<std::string>(*call->find("targetValue")), "80");
}

TEST(ExtractTest, StructuredCallPreferred) {
  AssistantReply r{R"({"funcName":"Other"})", make_call("RegMedAppt")};
  EXPECT_EQ(extract_api_call(r, reg_doc())->func_name, "RegMedAppt");
}

TEST(ExtractTest, MalformedCandidateSkipped) {
  auto call = extract_api_call(
      say(R"({"funcName":"RegMedAppt","time":"Monday"} then {"funcName": broken})"), reg_doc());
  ASSERT_TRUE(call);
  EXPECT_EQ(call->slots.size(), 1u);
  EXPECT_FALSE(extract_api_call(say(R"({"time":"Monday"})"), reg_doc()));
}

TEST(ExtractTest, UndeclaredSlotsSurvive) {
  auto call = extract_api_call(say(R"({"funcName":"RegMedAppt","movieName":"Up"})"), reg_doc());
  ASSERT_TRUE(call);
  EXPECT_NE(call->find("movieName"), nullptr);
}

TEST(FindJsonObjectsTest, BracesInStrings) {
  auto spans = find_json_objects(R"(a {"k":"}{"} b {"x":{"y":1}} } {unclosed)");
  ASSERT_EQ(spans.size(), 2u);
  EXPECT_EQ(spans[0], R"({"k":"}{"})");
  EXPECT_EQ(spans[1], R"({"x":{"y":1}})");
}

TEST(PolicyTest, Defaults) {
  TerminationPolicy p;
  EXPECT_EQ(p.max_user_turns, 8);
  EXPECT_EQ(p.duplicate_assistant_limit, 2);
  p = policy_from_json(Json{{"maxUserTurns", 3}});
  EXPECT_EQ(p.max_user_turns, 3);
  EXPECT_THROW(policy_from_json(Json{{"maxUserTurns", 0}}), UsageError);
}

TEST(RunDynamicTest, ImmediateCall) {
  ScriptedBackend user({});
  ScriptedBackend assistant({say(kCallText)});
  SessionRecord r = run_dynamic(lisa(), reg_doc(), user, assistant, {}, meta());
  EXPECT_EQ(r.outcome, Outcome::kCallMade);
  ASSERT_EQ(r.turns.size(), 2u);
  EXPECT_EQ(r.turns[0].content, lisa().initial_query);
  EXPECT_EQ(r.user_turn_count, 1);
  EXPECT_EQ(user.calls(), 0u);
  ASSERT_TRUE(r.score);
  EXPECT_DOUBLE_EQ(r.score->f1, 1.0);
}

TEST(RunDynamicTest, OneQuestionThenCall) {
  ScriptedBackend user({say("Monday, orthopedics please.")});
  ScriptedBackend assistant({say("Which day and department?"), say(kCallText)});
  SessionRecord r = run_dynamic(lisa(), reg_doc(), user, assistant, {}, meta());
  ASSERT_EQ(r.turns.size(), 4u);
  const std::vector<std::pair<Role, std::string>> expected = {
      {Role::kUser, lisa().initial_query},
      {Role::kAssistant, "Which day and department?"},
      {Role::kUser, "Monday, orthopedics please."},
      {Role::kAssistant, kCallText}};
  for (std::size_t i = 0; i < expected.size(); ++i) {
    EXPECT_EQ(r.turns[i].role, expected[i].first);
    EXPECT_EQ(r.turns[i].content, expected[i].second);
    EXPECT_EQ(r.turns[i].index, static_cast<int>(i + 1));
  }
  EXPECT_EQ(r.outcome, Outcome::kCallMade);
  EXPECT_EQ(r.user_turn_count, 2);

  // The user agent saw its own prompt and the swapped transcript.
  auto seen = user.received();
  ASSERT_EQ(seen.size(), 1u);
  EXPECT_EQ(seen[0].messages[0].content, build_user_agent_prompt(lisa()).content);
  EXPECT_EQ(seen[0].messages[1].role, ChatRole::kAssistant);
  EXPECT_EQ(seen[0].messages[2].role, ChatRole::kUser);
}

TEST(RunDynamicTest, NeverCallingHitsMaxTurns) {
  ReplyQueue assistant_q, user_q;
  for (int i = 0; i < 20; ++i) {
    assistant_q.push_back(say("Open settings, step " + std::to_string(i) + "."));
    user_q.push_back(say("Please just do it " + std::to_string(i)));
  }
  ScriptedBackend user(user_q);
  ScriptedBackend assistant(assistant_q);
  SessionRecord r = run_dynamic(lisa(), reg_doc(), user, assistant, {}, meta());
  EXPECT_EQ(r.outcome, Outcome::kNoCallMaxTurns);
  EXPECT_EQ(r.user_turn_count, 8);
  EXPECT_EQ(r.turns.size(), 16u);
  EXPECT_FALSE(r.final_call);
  EXPECT_EQ(r.score->f1, 0.0);
}

TEST(RunDynamicTest, DuplicateAssistantTerminates) {
  ScriptedBackend user({say("a"), say("b"), say("c")});
  ScriptedBackend assistant({say("Sorry?"), say("Sorry?"), say("Sorry?")});
  SessionRecord r = run_dynamic(lisa(), reg_doc(), user, assistant, {}, meta());
  EXPECT_EQ(r.outcome, Outcome::kNoCallTerminated);
  EXPECT_EQ(r.turns.size(), 4u);
  EXPECT_EQ(assistant.calls(), 2u);
  ASSERT_TRUE(r.reason);
}

TEST(RunDynamicTest, BackendFailureKeepsTranscript) {
  ScriptedBackend user({say("Monday.")});
  ScriptedBackend assistant({say("Which day?")});  // exhausted on the second call
  SessionRecord r = run_dynamic(lisa(), reg_doc(), user, assistant, {}, meta());
  EXPECT_EQ(r.outcome, Outcome::kBackendError);
  ASSERT_EQ(r.turns.size(), 3u);
  EXPECT_EQ(r.turns[2].content, "Monday.");
  EXPECT_TRUE(r.error);
  EXPECT_FALSE(r.score);
}

TEST(RunDynamicTest, AssistantNeverSeesGoldLabel) {
  UserScript s = lisa();
  s.api_call_label.slots.emplace_back("secretToken", std::string("zq-unique-9931"));
  ScriptedBackend user({say("Monday.")});
  ScriptedBackend assistant({say("Which day?"), say(kCallText)});
  run_dynamic(s, reg_doc(), user, assistant, {}, meta());
  for (const auto& req : assistant.received()) {
    for (const auto& m : req.messages) {
      EXPECT_EQ(m.content.find("zq-unique-9931"), std::string::npos);
    }
  }
}

StaticHistory three_exchanges() {
  StaticHistory h;
  h.script_id = "lisa-1";
  h.gold_call = reg_gold();
  h.turns = {{Role::kUser, lisa().initial_query, std::nullopt, 1},
             {Role::kAssistant, "Which department?", std::nullopt, 2},
             {Role::kUser, "Orthopedics.", std::nullopt, 3},
             {Role::kAssistant, "Which day?", std::nullopt, 4},
             {Role::kUser, "Monday.", std::nullopt, 5},
             {Role::kAssistant, "Morning or afternoon?", std::nullopt, 6}};
  return h;
}

TEST(RunStaticTest, GoldCallVerbatim) {
  ScriptedBackend assistant({say(kCallText)});
  SessionRecord r = run_static(three_exchanges(), reg_doc(), assistant, meta());
  EXPECT_EQ(r.outcome, Outcome::kCallMade);
  EXPECT_DOUBLE_EQ(r.score->f1, 1.0);
  EXPECT_EQ(r.mode, Mode::kStatic);
  EXPECT_EQ(assistant.calls(), 1u);
}

TEST(RunStaticTest, InstructionAppendedAsUserTurn) {
  ScriptedBackend assistant({say("Anything else?")});
  SessionRecord r = run_static(three_exchanges(), reg_doc(), assistant, meta());
  EXPECT_EQ(r.outcome, Outcome::kNoCallTerminated);
  ASSERT_EQ(r.turns.size(), 8u);
  EXPECT_EQ(r.turns[6].role, Role::kUser);
  EXPECT_EQ(r.turns[6].content, kStaticInstruction);
  EXPECT_EQ(r.turns[7].role, Role::kAssistant);
  EXPECT_EQ(r.user_turn_count, 3);
  EXPECT_EQ(r.extra["instructionPlacement"], "turn");
  EXPECT_NO_THROW(check_alternation(r.turns));
  // History turns are kept as-is.
  for (int i = 0; i < 6; ++i) EXPECT_EQ(r.turns[i], three_exchanges().turns[i]);
}

TEST(RunStaticTest, InstructionMergedWhenHistoryEndsWithUser) {
  StaticHistory h = three_exchanges();
  h.turns.pop_back();
  ScriptedBackend assistant({say(kCallText)});
  SessionRecord r = run_static(h, reg_doc(), assistant, meta());
  ASSERT_EQ(r.turns.size(), 6u);
  EXPECT_EQ(r.turns[4].content, "Monday.");
  EXPECT_EQ(r.extra["instructionPlacement"], "merged");
  const auto sent = assistant.received()[0].messages;
  EXPECT_NE(sent.back().content.find(kStaticInstruction), std::string::npos);
  EXPECT_EQ(sent.back().content.rfind("Monday.", 0), 0u);
}

TEST(RunStaticTest, BackendError) {
  ScriptedBackend assistant({});
  SessionRecord r = run_static(three_exchanges(), reg_doc(), assistant, meta());
  EXPECT_EQ(r.outcome, Outcome::kBackendError);
  EXPECT_FALSE(r.score);
}

// Human stand-in: replays queued actions, then disconnects.
class QueueBridge : public UserTurnSource {
 public:
  explicit QueueBridge(std::deque<UserAction> actions) : actions_(std::move(actions)) {}
  UserAction next_turn(const UserScript&, std::span<const DialogueTurn>) override {
    if (actions_.empty()) return {UserAction::Kind::kDisconnect, ""};
    UserAction a = actions_.front();
    actions_.pop_front();
    return a;
  }
  void push(UserAction a) { actions_.push_back(std::move(a)); }

 private:
  std::deque<UserAction> actions_;
};

TEST(RunManualTest, SameTurnsAsDynamic) {
  ScriptedBackend user({say("Monday, orthopedics please.")});
  ScriptedBackend a1({say("Which day and department?"), say(kCallText)});
  SessionRecord dyn = run_dynamic(lisa(), reg_doc(), user, a1, {}, meta());

  ScriptedBackend a2({say("Which day and department?"), say(kCallText)});
  QueueBridge bridge({{UserAction::Kind::kSay, "Monday, orthopedics please."}});
  ParkedSessions parking;
  auto man = run_manual(lisa(), reg_doc(), a2, bridge, {}, meta(), parking);
  ASSERT_TRUE(man);
  EXPECT_EQ(man->turns, dyn.turns);
  EXPECT_EQ(man->mode, Mode::kManual);
  EXPECT_EQ(man->user_turn_count, 2);
}

TEST(RunManualTest, FinishBeforeCall) {
  ScriptedBackend assistant({say("How can I help?")});
  QueueBridge bridge({{UserAction::Kind::kFinish, "assistant unhelpful"}});
  ParkedSessions parking;
  auto r = run_manual(lisa(), reg_doc(), assistant, bridge, {}, meta(), parking);
  ASSERT_TRUE(r);
  EXPECT_EQ(r->outcome, Outcome::kNoCallTerminated);
  EXPECT_EQ(r->reason, "assistant unhelpful");
}

TEST(RunManualTest, DisconnectParksAndResumes) {
  ScriptedBackend assistant({say("Which day?"), say(kCallText)});
  QueueBridge bridge({});
  ParkedSessions parking;
  const UserScript script = lisa();
  const ApiDocument doc = reg_doc();
  auto r = run_manual(script, doc, assistant, bridge, {}, meta("m-1"), parking);
  EXPECT_FALSE(r);
  ASSERT_EQ(parking.ids(), std::vector<std::string>{"m-1"});

  bridge.push({UserAction::Kind::kSay, "Monday"});
  auto resumed = resume_manual("m-1", bridge, parking);
  ASSERT_TRUE(resumed);
  EXPECT_EQ(resumed->outcome, Outcome::kCallMade);
  EXPECT_EQ(parking.size(), 0u);
  EXPECT_THROW(resume_manual("m-1", bridge, parking), NotFoundError);
}

TEST(DialogueSessionTest, SubmitRules) {
  ScriptedBackend assistant({say("Which day?"), say(kCallText)});
  const UserScript script = lisa();
  const ApiDocument doc = reg_doc();
  DialogueSession s(Mode::kManual, script, doc, assistant, {}, meta());
  s.start();
  s.submit_user_turn("Monday");
  EXPECT_TRUE(s.finished());
  EXPECT_THROW(s.submit_user_turn("more"), ConflictError);
  EXPECT_THROW(s.finish_terminated("late"), ConflictError);
}

TEST(DialogueSessionTest, RetractOnFailure) {
  ScriptedBackend assistant({say("Which day?")});
  const UserScript script = lisa();
  const ApiDocument doc = reg_doc();
  DialogueSession s(Mode::kManual, script, doc, assistant, {}, meta());
  s.start();
  EXPECT_THROW(s.submit_user_turn("Monday"), BackendError);
  EXPECT_EQ(s.turns().size(), 2u);
  EXPECT_FALSE(s.finished());
}

Dataset toy_dataset() { return load_dataset(testing::data_dir() / "toy"); }

BatchBackends toy_backends(const std::string& assistant_file = "assistant.json") {
  BatchBackends b;
  b.assistant = make_backend_factory(load_backend_config(testing::data_dir() / "toy" / assistant_file));
  b.user_agent = make_backend_factory(load_backend_config(testing::data_dir() / "toy" / "user_agent.json"));
  return b;
}

std::vector<std::string> record_lines(const RunReport& report) {
  std::vector<std::string> out;
  for (const auto& r : report.records) out.push_back(to_json(r).dump());
  return out;
}

TEST(RunBatchTest, ToyCorpusScores096) {
  RunConfig config;
  config.repeats = 3;
  config.clock = fixed_clock;
  RunReport report = run_batch(toy_dataset(), toy_backends(), config);
  ASSERT_TRUE(report.overall);
  EXPECT_EQ(report.overall->mean_f1, 0.96);
  EXPECT_EQ(report.overall->std_f1, 0.0);
  EXPECT_EQ(report.overall->run_count, 3);
  EXPECT_EQ(report.overall->dialogue_count, 10);
  EXPECT_EQ(report.records.size(), 30u);
  EXPECT_EQ(report.error_count, 0);
  EXPECT_EQ(format_table_row(*report.overall), "P 100.00  R 93.33  F1 96.00 ± 0.00");
  EXPECT_EQ(report.records[0].session_id, "dynamic-r0-toy-01");
  EXPECT_EQ(report.records[29].session_id, "dynamic-r2-toy-10");
  const Dataset data = toy_dataset();
  for (const auto& r : report.records) {
    const UserScript* s = data.find_script(r.script_id);
    EXPECT_EQ(r.turns.front().content, s->initial_query);
    EXPECT_LE(r.user_turn_count, 8);
  }
}

TEST(RunBatchTest, ParallelismDoesNotChangeRecords) {
  RunConfig config;
  config.repeats = 2;
  config.clock = fixed_clock;
  const Dataset data = toy_dataset();
  const auto serial = record_lines(run_batch(data, toy_backends(), config));
  config.parallelism = 4;
  EXPECT_EQ(record_lines(run_batch(data, toy_backends(), config)), serial);
  config.parallelism = 16;
  EXPECT_EQ(record_lines(run_batch(data, toy_backends(), config)), serial);
}

TEST(RunBatchTest, StaticMode) {
  RunConfig config;
  config.mode = Mode::kStatic;
  config.repeats = 1;
  config.clock = fixed_clock;
  RunReport report = run_batch(toy_dataset(), toy_backends("assistant_static.json"), config);
  ASSERT_TRUE(report.overall);
  EXPECT_EQ(report.overall->mean_f1, 1.0);
  EXPECT_EQ(report.overall->std_f1, 0.0);
  EXPECT_EQ(report.records[0].session_id, "static-r0-toy-01-h0");
  const Dataset data = toy_dataset();
  for (const auto& r : report.records) {
    EXPECT_EQ(r.turns.front().content, data.find_script(r.script_id)->initial_query);
  }
}

TEST(RunBatchTest, SessionErrorsDoNotAbortBatch) {
  BatchBackends b = toy_backends();
  b.assistant = [](const SessionContext& ctx) -> std::unique_ptr<ChatBackend> {
    if (ctx.script_id == "toy-03") return std::make_unique<ScriptedBackend>(ReplyQueue{});
    return std::make_unique<ScriptedBackend>(ReplyQueue{say("Which?"), say(R"({"funcName":"X"})")});
  };
  RunConfig config;
  config.repeats = 1;
  RunReport report = run_batch(toy_dataset(), b, config);
  EXPECT_EQ(report.error_count, 1);
  EXPECT_EQ(report.records.size(), 10u);
  EXPECT_EQ(report.records[2].outcome, Outcome::kBackendError);
  ASSERT_TRUE(report.overall);
  Json j = to_json(report);
  EXPECT_EQ(j["errorCount"], 1);
  EXPECT_EQ(j["perRepeat"][0]["errorCount"], 1);
}

TEST(RunBatchTest, ConfigErrors) {
  RunConfig config;
  config.mode = Mode::kDynamic;
  BatchBackends b = toy_backends();
  b.user_agent = nullptr;
  EXPECT_THROW(run_batch(toy_dataset(), b, config), UsageError);
  config.repeats = 0;
  EXPECT_THROW(run_batch(toy_dataset(), toy_backends(), config), UsageError);
}

TEST(RunBatchTest, ReportJsonShape) {
  RunConfig config;
  config.repeats = 2;
  Json j = to_json(run_batch(toy_dataset(), toy_backends(), config));
  EXPECT_EQ(j["mode"], "dynamic");
  EXPECT_EQ(j["perRepeat"].size(), 2u);
  EXPECT_EQ(j["perRepeat"][1]["seed"], 1);
  EXPECT_EQ(j["mean"]["f1"], 0.96);
  EXPECT_EQ(j["std"], 0.0);
  EXPECT_EQ(j["errorCount"], 0);
}

TEST(SeedTest, DependsOnAllInputs) {
  const auto a = session_seed(1, 0, "x");
  EXPECT_EQ(a, session_seed(1, 0, "x"));
  EXPECT_NE(a, session_seed(2, 0, "x"));
  EXPECT_NE(a, session_seed(1, 1, "x"));
  EXPECT_NE(a, session_seed(1, 0, "y"));
}

TEST(DatasetTest, ValidationCatchesBrokenReferences) {
  Dataset d = toy_dataset();
  EXPECT_NO_THROW(validate_dataset(d));
  Dataset bad = d;
  bad.histories[0].turns[0].content = "something else";
  EXPECT_THROW(validate_dataset(bad), ValidationError);
  bad = d;
  bad.scripts[0].api_call_label.slots.emplace_back("movieName", std::string("Up"));
  EXPECT_THROW(validate_dataset(bad), ValidationError);
  bad = d;
  bad.histories[0].script_id = "ghost";
  EXPECT_THROW(validate_dataset(bad), ValidationError);
  EXPECT_THROW(load_dataset(testing::data_dir() / "nope"), UsageError);
}

}  // namespace
}  // namespace dyneval
