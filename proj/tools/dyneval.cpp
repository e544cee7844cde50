// dyneval command line: dataset generation, batch evaluation, the manual
// annotation server and reporting.

#include <signal.h>

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "dyneval/analysis.hpp"
#include "dyneval/annotation_http.hpp"
#include "dyneval/annotation_service.hpp"
#include "dyneval/backends.hpp"
#include "dyneval/corpus.hpp"
#include "dyneval/datagen.hpp"
#include "dyneval/errors.hpp"
#include "dyneval/metrics.hpp"
#include "dyneval/orchestrator.hpp"

namespace fs = std::filesystem;
using namespace dyneval;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

void require_file(const fs::path& path, const char* what) {
  if (!fs::is_regular_file(path)) {
    throw UsageError(std::string(what) + " not found: " + path.string());
  }
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw UsageError("cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
}

BackendFactory factory_from(const fs::path& config_path) {
  return make_backend_factory(load_backend_config(config_path));
}

// gen-scripts ---------------------------------------------------------------

struct GenScriptsArgs {
  fs::path apis, out, generator_config;
  int n = 5;
  int max_retries = 3;
  bool json = false;
};

int gen_scripts(const GenScriptsArgs& a) {
  require_file(a.apis, "API corpus");
  if (a.n < 1) throw UsageError("--n must be >= 1");
  const auto docs = load_corpus(a.apis);
  const Corpus corpus(docs);
  auto factory = factory_from(a.generator_config);

  std::vector<UserScript> all;
  Json summary = Json::array();
  int failed = 0;
  for (const auto& doc : docs) {
    auto generator = factory(SessionContext{doc.api, 0});
    int count = 0;
    std::vector<std::string> diagnostics;
    try {
      auto gen = generate_user_scripts(doc, *generator, a.n, a.max_retries);
      count = static_cast<int>(gen.scripts.size());
      diagnostics = gen.diagnostics;
      for (auto& s : gen.scripts) all.push_back(std::move(s));
    } catch (const GenerationError& e) {
      diagnostics.push_back(e.what());
      ++failed;
    }
    summary.push_back(Json{{"api", doc.api}, {"scripts", count}, {"diagnostics", diagnostics}});
    if (!a.json) std::cout << doc.api << ": " << count << " scripts\n";
  }
  persist_scripts(all, a.out);
  if (a.json) {
    std::cout << Json{{"documents", summary}, {"scripts", all.size()}, {"failedDocuments", failed}}
                     .dump(2)
              << '\n';
  } else {
    std::cout << "wrote " << all.size() << " scripts to " << a.out.string() << '\n';
  }
  return failed == 0 ? kExitOk : kExitRuntime;
}

// gen-static ----------------------------------------------------------------

struct GenStaticArgs {
  fs::path scripts, apis, out, user_config, assistant_config;
  int max_attempts = 3;
  std::uint64_t seed = 0;
  int max_user_turns = TerminationPolicy{}.max_user_turns;
  bool json = false;
};

int gen_static(GenStaticArgs a) {
  require_file(a.scripts, "scripts file");
  if (a.apis.empty()) a.apis = a.scripts.parent_path() / "apis.jsonl";
  require_file(a.apis, "API corpus");
  const auto docs = load_corpus(a.apis);
  const Corpus corpus(docs);
  const auto scripts = load_scripts(a.scripts);
  auto user_factory = factory_from(a.user_config);
  auto assistant_factory = factory_from(a.assistant_config);
  TerminationPolicy policy;
  policy.max_user_turns = a.max_user_turns;

  std::vector<StaticHistory> kept;
  std::vector<UserScript> finalized;
  Json dropped = Json::array();
  for (const auto& script : scripts) {
    const ApiDocument* doc = corpus.find(script.api_call_label.func_name);
    if (doc == nullptr) {
      throw ValidationError("script " + script.script_id + ": unknown function " +
                            script.api_call_label.func_name);
    }
    const std::uint64_t seed = session_seed(a.seed, 0, script.script_id);
    auto user = user_factory(SessionContext{script.script_id, seed});
    auto assistant = assistant_factory(SessionContext{script.script_id, seed});
    auto result =
        generate_static_history(script, *doc, *user, *assistant, policy, a.max_attempts, seed);
    if (result.history) {
      kept.push_back(std::move(*result.history));
      finalized.push_back(std::move(*result.finalized_script));
    } else {
      dropped.push_back(Json{{"scriptId", script.script_id},
                             {"attempts", result.attempts},
                             {"diagnostics", result.diagnostics}});
    }
  }

  ensure_dir(a.out);
  persist_static_histories(kept, a.out / "static.jsonl");
  persist_scripts(finalized, a.out / "scripts.jsonl");
  persist_corpus(docs, a.out / "apis.jsonl");
  export_for_review(kept, a.out / "review.jsonl");

  if (a.json) {
    std::cout << Json{{"kept", kept.size()}, {"dropped", dropped.size()}, {"droppedScripts", dropped}}
                     .dump(2)
              << '\n';
  } else {
    std::cout << "kept " << kept.size() << " dropped " << dropped.size() << '\n';
  }
  if (!scripts.empty() && kept.empty()) return kExitValidation;
  return kExitOk;
}

// review --------------------------------------------------------------------

struct ReviewArgs {
  fs::path dataset, decisions;
  fs::path out;
};

int review(const ReviewArgs& a) {
  require_file(a.dataset / "static.jsonl", "static histories");
  require_file(a.decisions, "review file");
  const auto histories = load_static_histories(a.dataset / "static.jsonl");
  const auto decisions = read_review_decisions(a.decisions);
  const auto kept = apply_review(histories, decisions);
  const fs::path out = a.out.empty() ? a.dataset / "static.jsonl" : a.out;
  persist_static_histories(kept, out);
  std::cout << "kept " << kept.size() << " dropped " << histories.size() - kept.size() << '\n';
  return kExitOk;
}

// run -----------------------------------------------------------------------

struct RunArgs {
  std::string mode = "dynamic";
  fs::path dataset, assistant_config, user_agent_config, out;
  int repeats = 3;
  int parallelism = 1;
  std::uint64_t seed = 0;
  int max_user_turns = TerminationPolicy{}.max_user_turns;
  int duplicate_limit = TerminationPolicy{}.duplicate_assistant_limit;
  bool json = false;
};

int run(const RunArgs& a) {
  RunConfig config;
  config.mode = mode_from_string(a.mode);
  if (config.mode == Mode::kManual) throw UsageError("manual sessions run through `annotate`");
  if (a.repeats < 1) throw UsageError("--repeats must be >= 1");
  if (a.parallelism < 1) throw UsageError("--parallelism must be >= 1");
  config.repeats = a.repeats;
  config.parallelism = a.parallelism;
  config.base_seed = a.seed;
  config.policy.max_user_turns = a.max_user_turns;
  config.policy.duplicate_assistant_limit = a.duplicate_limit;

  const Dataset dataset = load_dataset(a.dataset);
  if (config.mode == Mode::kStatic && dataset.histories.empty()) {
    throw UsageError("static mode needs static.jsonl in " + a.dataset.string());
  }
  BatchBackends backends;
  backends.assistant = factory_from(a.assistant_config);
  if (config.mode == Mode::kDynamic) {
    if (a.user_agent_config.empty()) throw UsageError("dynamic mode needs --user-agent-config");
    backends.user_agent = factory_from(a.user_agent_config);
  }

  const RunReport report = run_batch(dataset, backends, config);
  ensure_dir(a.out);
  persist_records(report.records, a.out / "records.jsonl");
  const Json report_json = to_json(report);
  write_text(a.out / "report.json", report_json.dump(2) + "\n");

  if (a.json) {
    std::cout << report_json.dump(2) << '\n';
  } else if (report.overall) {
    std::cout << to_string(report.mode) << "  " << format_table_row(*report.overall) << "  ("
              << report.overall->dialogue_count << " dialogues x " << report.overall->run_count
              << " runs, " << report.error_count << " errors)\n";
  } else {
    std::cout << to_string(report.mode) << "  no scored sessions (" << report.error_count
              << " errors)\n";
  }
  return report.overall ? kExitOk : kExitRuntime;
}

// annotate ------------------------------------------------------------------

struct AnnotateArgs {
  fs::path dataset, assistant_config, config;
  std::optional<int> port;
  std::optional<std::string> host;
  std::optional<fs::path> static_dir, event_log, records;
};

int annotate(const AnnotateArgs& a) {
  ServerConfig cfg;
  if (!a.config.empty()) cfg = load_server_config(a.config);
  if (a.port) cfg.port = *a.port;
  if (a.host) cfg.host = *a.host;
  if (!a.assistant_config.empty()) cfg.assistant_config = a.assistant_config;
  if (a.static_dir) cfg.static_dir = a.static_dir;
  if (a.event_log) cfg.event_log = a.event_log;
  if (a.records) cfg.records = a.records;
  if (!cfg.assistant_config) throw UsageError("annotate needs an assistant backend config");
  if (!cfg.event_log) cfg.event_log = fs::path("annotation-events.jsonl");
  if (!cfg.records) cfg.records = fs::path("annotation-records.jsonl");

  Dataset dataset = load_dataset(a.dataset);
  ServiceOptions options;
  options.policy = cfg.policy;
  options.base_seed = cfg.seed;
  options.event_log = cfg.event_log;
  options.records = cfg.records;
  AnnotationService service(std::move(dataset), factory_from(*cfg.assistant_config), options);
  AnnotationServer server(service, cfg.static_dir);

  // Block the shutdown signals here so server threads inherit the mask; a
  // helper thread waits for them and stops the server.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  const int port = server.bind(cfg.host, cfg.port);
  std::cerr << "annotation service on http://" << cfg.host << ':' << port << " ("
            << service.replayed() << " sessions restored)\n";
  std::atomic<bool> done{false};
  std::jthread watcher([&] {
    timespec wait{0, 200'000'000};
    while (!done.load()) {
      if (sigtimedwait(&signals, nullptr, &wait) > 0) {
        server.stop();
        return;
      }
    }
  });
  server.serve();
  done = true;
  std::cerr << "shut down; " << service.session_ids().size()
            << " sessions kept in " << cfg.event_log->string() << '\n';
  return kExitOk;
}

// report --------------------------------------------------------------------

struct ReportArgs {
  fs::path records, static_records, apis, histories, out;
  bool json = false;
};

int report(const ReportArgs& a) {
  require_file(a.records, "records file");
  const auto records = load_records(a.records);
  if (records.empty()) throw ValidationError(a.records.string() + " holds no records");
  std::vector<SessionRecord> static_records;
  if (!a.static_records.empty()) {
    require_file(a.static_records, "static records file");
    static_records = load_records(a.static_records);
  }
  std::optional<Corpus> corpus;
  if (!a.apis.empty()) {
    require_file(a.apis, "API corpus");
    corpus.emplace(load_corpus(a.apis));
  }
  std::vector<StaticHistory> histories;
  if (!a.histories.empty()) {
    require_file(a.histories, "static histories");
    histories = load_static_histories(a.histories);
  }

  AnalysisInputs in;
  in.records = records;
  in.static_records = static_records;
  in.corpus = corpus ? &*corpus : nullptr;
  in.histories = histories;
  const Json analysis = build_analysis(in);
  if (!a.out.empty()) write_text(a.out, analysis.dump(2) + "\n");

  if (a.json) {
    std::cout << analysis.dump(2) << '\n';
    return kExitOk;
  }
  if (auto s = score_records(records)) {
    std::cout << "score        P " << format_percent(s->precision) << "  R "
              << format_percent(s->recall) << "  F1 " << format_percent(s->f1) << '\n';
  }
  const auto& rel = analysis["reluctance"];
  std::cout << "reluctance   " << format_percent(rel["rate"].get<double>()) << "% no-call\n";
  if (rel.contains("degradation")) {
    const auto& d = rel["degradation"];
    std::cout << "degradation  absolute " << format_percent(d["absoluteGap"].get<double>())
              << " pts, relative " << format_percent(d["relativeChange"].get<double>()) << "%\n";
  }
  if (!analysis["illusoryParameters"].is_null()) {
    const auto& ill = analysis["illusoryParameters"];
    std::cout << "illusory     " << format_percent(ill["rate"].get<double>()) << "% ("
              << ill["flagged"].get<int>() << " of " << ill["calls"].get<int>() << " calls)\n";
  }
  if (!analysis["verbosity"].is_null()) {
    const auto& v = analysis["verbosity"];
    if (v.contains("error")) {
      std::cout << "verbosity    " << v["error"].get<std::string>() << '\n';
    } else {
      char buf[96];
      std::snprintf(buf, sizeof buf, "verbosity    dynamic %.2f static %.2f delta %+.2f turns\n",
                    v["meanDynamicTurns"].get<double>(), v["meanStaticTurns"].get<double>(),
                    v["delta"].get<double>());
      std::cout << buf;
    }
  }
  const auto& gap = analysis["staticDynamicGap"];
  if (!gap.is_null() && gap.contains("f1Gap")) {
    std::cout << "static-dynamic F1 gap " << format_percent(gap["f1Gap"].get<double>())
              << " pts\n";
  }
  return kExitOk;
}

// correlate -----------------------------------------------------------------

// "system,f1" rows after a header line.
std::vector<std::pair<std::string, double>> read_score_csv(const fs::path& path) {
  require_file(path, "score file");
  std::ifstream in(path, std::ios::binary);
  std::vector<std::pair<std::string, double>> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (n == 1 && line.rfind("system", 0) == 0) continue;
    const auto comma = line.rfind(',');
    if (comma == std::string::npos) {
      throw ParseError(path.string() + ": expected \"system,f1\"", n);
    }
    const std::string value = line.substr(comma + 1);
    std::size_t used = 0;
    double f1 = 0;
    try {
      f1 = std::stod(value, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || value.find_first_not_of(" \t", used) != std::string::npos) {
      throw ParseError(path.string() + ": bad score \"" + value + "\"", n);
    }
    rows.emplace_back(line.substr(0, comma), f1);
  }
  return rows;
}

struct CorrelateArgs {
  std::vector<std::string> methods;
  fs::path reference, scatter_out;
  bool json = false;
};

int correlate(const CorrelateArgs& a) {
  const auto reference = read_score_csv(a.reference);
  std::vector<std::string> systems;
  std::vector<double> ref_values;
  for (const auto& [name, f1] : reference) {
    systems.push_back(name);
    ref_values.push_back(f1);
  }
  std::map<std::string, std::vector<double>> scores;
  for (const auto& spec : a.methods) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--method expects name=path");
    const std::string name = spec.substr(0, eq);
    auto rows = read_score_csv(spec.substr(eq + 1));
    if (rows.size() != systems.size()) {
      throw UsageError("method " + name + " has " + std::to_string(rows.size()) +
                       " systems, reference has " + std::to_string(systems.size()));
    }
    std::map<std::string, double> by_system(rows.begin(), rows.end());
    std::vector<double> aligned;
    for (const auto& sys : systems) {
      auto it = by_system.find(sys);
      if (it == by_system.end()) throw UsageError("method " + name + " lacks system " + sys);
      aligned.push_back(it->second);
    }
    if (!scores.emplace(name, std::move(aligned)).second) {
      throw UsageError("method " + name + " given twice");
    }
  }
  Correlation c;
  try {
    c = correlate_methods(scores, ref_values, systems);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  } catch (const std::domain_error& e) {
    throw ValidationError(e.what());
  }
  if (!a.scatter_out.empty()) write_scatter_csv(c.scatter, a.scatter_out);

  if (a.json) {
    std::cout << to_json(c.report).dump(2) << '\n';
  } else {
    for (const auto& [method, agreement] : c.report) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "%-24s ICC3 %.4f  Pearson R %.4f  (n=%d)\n", method.c_str(),
                    agreement.icc3, agreement.pearson_r, agreement.n);
      std::cout << buf;
    }
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic and static evaluation of API-calling assistants"};
  app.set_version_flag("--version", std::string("dyneval ") + DYNEVAL_VERSION);
  app.require_subcommand(1);

  GenScriptsArgs gs;
  auto* gen_scripts_cmd = app.add_subcommand("gen-scripts", "Generate user scripts per API");
  gen_scripts_cmd->add_option("--apis", gs.apis, "API corpus (JSONL)")->required();
  gen_scripts_cmd->add_option("--out", gs.out, "Output scripts.jsonl")->required();
  gen_scripts_cmd->add_option("--n", gs.n, "Scripts per document")->capture_default_str();
  gen_scripts_cmd->add_option("--generator-config", gs.generator_config, "Generator backend")
      ->required();
  gen_scripts_cmd->add_option("--max-retries", gs.max_retries, "Re-asks for missing scenarios")
      ->capture_default_str();
  gen_scripts_cmd->add_flag("--json", gs.json, "Machine-readable output");

  GenStaticArgs gst;
  auto* gen_static_cmd = app.add_subcommand("gen-static", "Build static histories by self-play");
  gen_static_cmd->add_option("--scripts", gst.scripts, "scripts.jsonl")->required();
  gen_static_cmd->add_option("--apis", gst.apis, "API corpus (default: next to --scripts)");
  gen_static_cmd->add_option("--out", gst.out, "Output dataset directory")->required();
  gen_static_cmd->add_option("--user-config", gst.user_config, "User-side backend")->required();
  gen_static_cmd->add_option("--assistant-config", gst.assistant_config, "Assistant backend")
      ->required();
  gen_static_cmd->add_option("--max-attempts", gst.max_attempts, "Self-play attempts per script")
      ->capture_default_str();
  gen_static_cmd->add_option("--seed", gst.seed, "Base seed")->capture_default_str();
  gen_static_cmd->add_option("--max-user-turns", gst.max_user_turns)->capture_default_str();
  gen_static_cmd->add_flag("--json", gst.json, "Machine-readable output");

  ReviewArgs rv;
  auto* review_cmd = app.add_subcommand("review", "Apply keep/drop review decisions");
  review_cmd->add_option("--dataset", rv.dataset, "Dataset directory")->required();
  review_cmd->add_option("--decisions", rv.decisions, "Edited review.jsonl")->required();
  review_cmd->add_option("--out", rv.out, "Output (default: overwrite static.jsonl)");

  RunArgs ra;
  auto* run_cmd = app.add_subcommand("run", "Batch evaluation");
  run_cmd->add_option("--mode", ra.mode, "dynamic or static")
      ->check(CLI::IsMember({"dynamic", "static"}))
      ->capture_default_str();
  run_cmd->add_option("--dataset", ra.dataset, "Dataset directory")->required();
  run_cmd->add_option("--assistant-config", ra.assistant_config, "Assistant backend")->required();
  run_cmd->add_option("--user-agent-config", ra.user_agent_config, "User agent backend");
  run_cmd->add_option("--repeats", ra.repeats)->capture_default_str();
  run_cmd->add_option("--parallelism", ra.parallelism)->capture_default_str();
  run_cmd->add_option("--seed", ra.seed)->capture_default_str();
  run_cmd->add_option("--max-user-turns", ra.max_user_turns)->capture_default_str();
  run_cmd->add_option("--duplicate-limit", ra.duplicate_limit)->capture_default_str();
  run_cmd->add_option("--out", ra.out, "Output directory")->required();
  run_cmd->add_flag("--json", ra.json, "Print report.json instead of the table row");

  AnnotateArgs an;
  auto* annotate_cmd = app.add_subcommand("annotate", "Serve the manual annotation API");
  annotate_cmd->add_option("--dataset", an.dataset, "Dataset directory")->required();
  annotate_cmd->add_option("--assistant-config", an.assistant_config, "Assistant backend");
  annotate_cmd->add_option("--config", an.config, "Server config file");
  annotate_cmd->add_option("--port", an.port);
  annotate_cmd->add_option("--host", an.host);
  annotate_cmd->add_option("--static-dir", an.static_dir, "Annotation UI build");
  annotate_cmd->add_option("--event-log", an.event_log);
  annotate_cmd->add_option("--records", an.records);

  ReportArgs rp;
  auto* report_cmd = app.add_subcommand("report", "Run the record analyzers");
  report_cmd->add_option("--records", rp.records, "records.jsonl")->required();
  report_cmd->add_option("--static-records", rp.static_records, "Static-mode records.jsonl");
  report_cmd->add_option("--apis", rp.apis, "API corpus for illusory-parameter checks");
  report_cmd->add_option("--histories", rp.histories, "static.jsonl for verbosity");
  report_cmd->add_option("--out", rp.out, "Write analysis.json");
  report_cmd->add_flag("--json", rp.json, "Print analysis.json");

  CorrelateArgs co;
  auto* correlate_cmd = app.add_subcommand("correlate", "Agreement with a reference method");
  correlate_cmd->add_option("--method", co.methods, "name=scores.csv")->required();
  correlate_cmd->add_option("--reference", co.reference, "Reference scores.csv")->required();
  correlate_cmd->add_option("--scatter", co.scatter_out, "Write scatter CSV");
  correlate_cmd->add_flag("--json", co.json, "Print the agreement report as JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen_scripts_cmd) return gen_scripts(gs);
    if (*gen_static_cmd) return gen_static(gst);
    if (*review_cmd) return review(rv);
    if (*run_cmd) return run(ra);
    if (*annotate_cmd) return annotate(an);
    if (*report_cmd) return report(rp);
    if (*correlate_cmd) return correlate(co);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ParseError& e) {
    std::cerr << "invalid data: " << e.what() << '\n';
    return kExitValidation;
  } catch (const ValidationError& e) {
    std::cerr << "invalid data: " << e.what() << '\n';
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}
