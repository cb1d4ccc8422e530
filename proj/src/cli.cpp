#include "campaignd/cli.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <memory>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "campaignd/engine.hpp"
#include "campaignd/local_backend.hpp"
#include "campaignd/report.hpp"
#include "campaignd/scanner.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace campaignd {

namespace {

constexpr int kExitOk = 0;
constexpr int kExitIncomplete = 1;
constexpr int kExitUsage = 2;

constexpr const char* kConfigFile = "config";

json engine_to_json(const EngineConfig& e) {
    return json{
        {"max_live", e.max_live},
        {"wall_limit", e.wall_limit},
        {"poll_interval", e.poll_interval},
        {"max_retries", e.max_retries ? json(*e.max_retries) : json(nullptr)},
        {"required_rte", e.required_rte},
        {"ship_executable", e.ship_executable ? json(e.ship_executable->string()) : json(nullptr)},
        {"lost_after", e.lost_after ? json(*e.lost_after) : json(nullptr)},
        {"retry_backoff", e.retry_backoff},
        {"max_transfer_failures", e.max_transfer_failures},
    };
}

EngineConfig engine_from_json(const json& j) {
    EngineConfig e;
    e.max_live = j.at("max_live").get<int>();
    e.wall_limit = j.at("wall_limit").get<double>();
    e.poll_interval = j.at("poll_interval").get<double>();
    if (!j.at("max_retries").is_null()) e.max_retries = j["max_retries"].get<int>();
    e.required_rte = j.at("required_rte").get<std::string>();
    if (!j.at("ship_executable").is_null()) e.ship_executable = j["ship_executable"].get<std::string>();
    if (!j.at("lost_after").is_null()) e.lost_after = j["lost_after"].get<double>();
    e.retry_backoff = j.at("retry_backoff").get<double>();
    e.max_transfer_failures = j.at("max_transfer_failures").get<int>();
    return e;
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error(fmt::format("cannot read {}", p.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", p.string()));
    out << text;
}

fs::path session_dir_from(const std::string& flag, const std::optional<fs::path>& fallback) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("CAMPAIGND_SESSION"); env && *env) return env;
    return fallback.value_or(fs::path());
}

std::unique_ptr<Backend> make_backend(const SessionConfig& cfg, const fs::path& session) {
    ExecutionOptions opts{cfg.engine.required_rte, cfg.engine.ship_executable};
    const auto sandbox_root = session / "remote";
    if (cfg.backend == BackendKind::Sim) return std::make_unique<SimBackend>(cfg.sim, sandbox_root, opts);
    return std::make_unique<LocalBackend>(sandbox_root, opts, cfg.parallelism, cfg.worker);
}

std::unique_ptr<Clock> make_clock(const SessionConfig& cfg, Timestamp resume_at) {
    if (cfg.backend == BackendKind::Sim) return std::make_unique<VirtualClock>(resume_at);
    return std::make_unique<WallClock>();
}

Session read_session(const fs::path& dir, StoreKind kind) {
    auto store = open_store(kind, dir, OpenMode::ReadOnly);
    LoadedSession loaded = store->load();
    if (!loaded.meta) throw StoreError(StoreError::Kind::CorruptRecord, "session has no metadata record");
    Session s;
    s.meta = *loaded.meta;
    for (auto& job : loaded.jobs) {
        std::string id = job.id;
        s.jobs.emplace(std::move(id), std::move(job));
    }
    return s;
}

void write_lrt_file(const Session& s, double threshold, const fs::path& path) {
    try {
        const auto rows = collect_lrt(s, threshold);
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        write_lrt_csv(rows, out);
    } catch (const NoCompletedJobs&) {
    }
}

/// Runs the engine until terminal (or the tick budget) and reports.
int drive(Engine& engine, const SessionConfig& cfg, const fs::path& session, std::optional<std::uint64_t> max_ticks,
          const CliStreams& io) {
    RunLimits limits;
    limits.max_ticks = max_ticks;
    const CampaignReport report = engine.run(limits);
    io.out << format_summary(report);
    write_job_csv(report, session / "report.csv");
    write_lrt_file(engine.session(), cfg.lrt_threshold, cfg.output_dir / "lrt.csv");
    return report.complete() ? kExitOk : kExitIncomplete;
}

struct RunArgs {
    std::string input;
    std::string output;
    int max_live = 50;
    std::string walltime = "8h";
    double poll = 60;
    std::string ship;
    std::string backend = "sim";
    std::string sim_config;
    std::optional<std::uint64_t> seed;
    std::string session;
    std::optional<int> max_retries;
    double lrt_threshold = kDefaultLrtThreshold;
    std::string store = "sqlite";
    int parallelism = std::max(1u, std::thread::hardware_concurrency());
    std::optional<std::uint64_t> max_ticks;
};

int cmd_run(const RunArgs& a, const CliStreams& io) {
    SessionConfig cfg;
    cfg.input_dir = fs::absolute(a.input);
    cfg.output_dir = fs::absolute(a.output);
    cfg.backend = a.backend == "local" ? BackendKind::Local : BackendKind::Sim;
    cfg.store = *parse_store_kind(a.store);
    cfg.lrt_threshold = a.lrt_threshold;
    cfg.parallelism = a.parallelism;
    cfg.worker = io.default_worker;

    auto wall = parse_duration(a.walltime);
    if (!wall) {
        io.err << fmt::format("error: cannot parse wall-time `{}`\n", a.walltime);
        return kExitUsage;
    }
    cfg.engine.max_live = a.max_live;
    cfg.engine.wall_limit = *wall;
    cfg.engine.poll_interval = a.poll;
    cfg.engine.max_retries = a.max_retries;
    if (!a.ship.empty()) {
        if (!fs::is_regular_file(a.ship)) {
            io.err << fmt::format("error: worker executable `{}` not found\n", a.ship);
            return kExitUsage;
        }
        cfg.engine.ship_executable = fs::absolute(a.ship);
    }
    try {
        cfg.engine.validate(cfg.backend == BackendKind::Sim);
        if (cfg.backend == BackendKind::Sim) {
            cfg.sim = a.sim_config.empty() ? default_sim_config() : SimConfig::load(a.sim_config);
            if (a.seed) cfg.sim.faults.seed = *a.seed;
            cfg.sim.validate();
        }
    } catch (const ConfigError& e) {
        io.err << "error: " << e.what() << "\n";
        return kExitUsage;
    }

    std::vector<InputBundle> bundles;
    try {
        bundles = scan(cfg.input_dir);
    } catch (const ScanError& e) {
        io.err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    if (bundles.empty()) {
        io.err << fmt::format("error: no control-file pairs under {}\n", cfg.input_dir.string());
        return kExitUsage;
    }

    const fs::path session = fs::absolute(session_dir_from(a.session, cfg.output_dir));
    if (detect_store(session)) {
        io.err << fmt::format("error: {} already holds a session; use `resume`\n", session.string());
        return kExitUsage;
    }
    fs::create_directories(session);
    fs::create_directories(cfg.output_dir);
    write_text(session / kConfigFile, cfg.to_json_text());

    auto store = open_store(cfg.store, session);
    auto backend = make_backend(cfg, session);
    auto clock = make_clock(cfg, 0);
    Engine engine(cfg.engine, *backend, *store, *clock, session);
    if (fs::weakly_canonical(cfg.output_dir) != fs::weakly_canonical(session)) {
        engine.set_export_dir(cfg.output_dir);
    }
    engine.start(bundles);
    io.out << fmt::format("{} bundles, session {}\n", bundles.size(), session.string());
    return drive(engine, cfg, session, a.max_ticks, io);
}

int cmd_resume(const std::string& session_flag, std::optional<std::uint64_t> max_ticks, const CliStreams& io) {
    const fs::path session = session_dir_from(session_flag, std::nullopt);
    if (session.empty() || !fs::exists(session / kConfigFile)) {
        io.err << fmt::format("error: no session at `{}`\n", session.string());
        return kExitUsage;
    }
    const SessionConfig cfg = SessionConfig::from_json_text(read_text(session / kConfigFile));
    // A directory store whose start was interrupted has no metadata yet.
    const StoreKind kind = detect_store(session).value_or(cfg.store);

    if (open_store(kind, session, OpenMode::ReadOnly)->load().meta) {
        const Session peek = read_session(session, kind);
        if (peek.terminal()) {
            const auto report = make_report(peek);
            io.out << format_summary(report);
            return report.complete() ? kExitOk : kExitIncomplete;
        }
    }

    auto store = open_store(kind, session);
    const Timestamp resume_at = store->load().meta.value_or(SessionMeta{}).now;
    auto backend = make_backend(cfg, session);
    auto clock = make_clock(cfg, resume_at);
    Engine engine(cfg.engine, *backend, *store, *clock, fs::absolute(session));
    if (fs::weakly_canonical(cfg.output_dir) != fs::weakly_canonical(session)) {
        engine.set_export_dir(cfg.output_dir);
    }
    std::vector<InputBundle> rescanned;
    try {
        rescanned = scan(cfg.input_dir);
    } catch (const ScanError& e) {
        spdlog::warn("rescan of {} failed: {}", cfg.input_dir.string(), e.what());
    }
    const auto recovery = engine.resume(rescanned.empty() ? nullptr : &rescanned);
    if (recovery.restarted) {
        io.out << fmt::format("restarted: the campaign had not finished starting, {} bundles\n", rescanned.size());
    } else if (recovery.revalidated + recovery.reset_to_retry + recovery.repromoted > 0 ||
               !recovery.recreated.empty()) {
        io.out << fmt::format("recovered: {} revalidated, {} reset for retry, {} outputs re-promoted, {} rebuilt\n",
                              recovery.revalidated, recovery.reset_to_retry, recovery.repromoted,
                              recovery.recreated.size());
    }
    return drive(engine, cfg, fs::absolute(session), max_ticks, io);
}

int cmd_report(const std::string& session_flag, const std::string& csv, const CliStreams& io) {
    const fs::path session = session_dir_from(session_flag, std::nullopt);
    const auto kind = session.empty() ? std::nullopt : detect_store(session);
    if (!kind) {
        io.err << fmt::format("error: no session at `{}`\n", session.string());
        return kExitUsage;
    }
    const auto report = make_report(read_session(session, *kind));
    io.out << format_summary(report);
    write_job_csv(report, csv.empty() ? session / "report.csv" : fs::path(csv));
    return kExitOk;
}

int cmd_lrt(const std::string& session_flag, std::optional<double> threshold, const std::string& csv,
            const CliStreams& io) {
    const fs::path session = session_dir_from(session_flag, std::nullopt);
    const auto kind = session.empty() ? std::nullopt : detect_store(session);
    if (!kind) {
        io.err << fmt::format("error: no session at `{}`\n", session.string());
        return kExitUsage;
    }
    double x = kDefaultLrtThreshold;
    if (threshold) {
        x = *threshold;
    } else if (fs::exists(session / kConfigFile)) {
        x = SessionConfig::from_json_text(read_text(session / kConfigFile)).lrt_threshold;
    }
    try {
        const auto rows = collect_lrt(read_session(session, *kind), x);
        if (csv.empty()) {
            write_lrt_csv(rows, io.out);
        } else {
            std::ofstream out(csv, std::ios::binary | std::ios::trunc);
            write_lrt_csv(rows, out);
        }
    } catch (const NoCompletedJobs& e) {
        io.err << "error: " << e.what() << "\n";
        return kExitIncomplete;
    }
    return kExitOk;
}

}  // namespace

std::string SessionConfig::to_json_text() const {
    json j{
        {"input_dir", input_dir.string()},
        {"output_dir", output_dir.string()},
        {"backend", backend == BackendKind::Sim ? "sim" : "local"},
        {"sim", json::parse(sim.to_json_text())},
        {"engine", engine_to_json(engine)},
        {"store", to_string(store)},
        {"worker", worker.string()},
        {"lrt_threshold", lrt_threshold},
        {"parallelism", parallelism},
    };
    return j.dump(2) + "\n";
}

SessionConfig SessionConfig::from_json_text(const std::string& text) {
    try {
        const json j = json::parse(text);
        SessionConfig c;
        c.input_dir = j.at("input_dir").get<std::string>();
        c.output_dir = j.at("output_dir").get<std::string>();
        c.backend = j.at("backend").get<std::string>() == "local" ? BackendKind::Local : BackendKind::Sim;
        c.sim = SimConfig::from_json_text(j.at("sim").dump());
        c.engine = engine_from_json(j.at("engine"));
        auto kind = parse_store_kind(j.at("store").get<std::string>());
        if (!kind) throw ConfigError("session config names an unknown store");
        c.store = *kind;
        c.worker = j.at("worker").get<std::string>();
        c.lrt_threshold = j.at("lrt_threshold").get<double>();
        c.parallelism = j.at("parallelism").get<int>();
        return c;
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("session config: {}", e.what()));
    }
}

std::optional<Seconds> parse_duration(std::string_view text) {
    if (text.empty()) return std::nullopt;
    double scale = 1;
    switch (text.back()) {
        case 's': scale = 1; text.remove_suffix(1); break;
        case 'm': scale = 60; text.remove_suffix(1); break;
        case 'h': scale = 3600; text.remove_suffix(1); break;
        case 'd': scale = 86400; text.remove_suffix(1); break;
        default: break;
    }
    double v = 0;
    auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
    if (ec != std::errc() || p != text.data() + text.size() || v <= 0) return std::nullopt;
    return v * scale;
}

SimConfig default_sim_config() {
    SimConfig c;
    SiteSpec site;
    site.site_id = "sim";
    site.cores = 64;
    site.rtes = {"CODEML"};
    site.queue_delay = 30;
    site.info_lag = 60;
    c.sites.push_back(site);
    return c;
}

int run_cli(const std::vector<std::string>& args, const CliStreams& io) {
    CLI::App app{"campaignd: run paired H0/H1 likelihood jobs as a fault-tolerant campaign", "campaignd"};
    app.require_subcommand(1);

    RunArgs ra;
    auto* run = app.add_subcommand("run", "scan INPUT_DIR and run every control-file pair as one job");
    run->add_option("-i,--input", ra.input, "input directory")->required();
    run->add_option("-o,--output", ra.output, "output directory")->required();
    run->add_option("-J,--max-live", ra.max_live, "maximum jobs submitted or running at once")
        ->check(CLI::PositiveNumber);
    run->add_option("-w,--walltime", ra.walltime, "per-job wall-time limit (s/m/h/d suffix)");
    run->add_option("-p,--poll", ra.poll, "seconds between polls (at least 60 unless simulated)");
    run->add_option("-x,--executable", ra.ship, "ship this worker with every job instead of relying on the RTE");
    run->add_option("--backend", ra.backend, "execution back-end")->check(CLI::IsMember({"sim", "local"}));
    run->add_option("--sim-config", ra.sim_config, "simulated grid description (JSON)");
    run->add_option("--seed", ra.seed, "fault-plan seed for the simulator");
    run->add_option("--session", ra.session, "session directory (default $CAMPAIGND_SESSION, then OUTPUT_DIR)");
    run->add_option("--max-retries", ra.max_retries, "give up on a job after this many retries")
        ->check(CLI::NonNegativeNumber);
    run->add_option("--lrt-threshold", ra.lrt_threshold, "chi-square cut-off for lrt.csv");
    run->add_option("--store", ra.store, "session store")->check(CLI::IsMember({"sqlite", "files"}));
    run->add_option("--parallelism", ra.parallelism, "worker processes for the local back-end")
        ->check(CLI::PositiveNumber);
    run->add_option("--max-ticks", ra.max_ticks, "stop after this many polling rounds");

    std::string session;
    std::optional<std::uint64_t> max_ticks;
    auto* resume = app.add_subcommand("resume", "continue an interrupted campaign");
    resume->add_option("--session", session, "session directory (default $CAMPAIGND_SESSION)");
    resume->add_option("--max-ticks", max_ticks, "stop after this many polling rounds");

    std::string csv;
    auto* report = app.add_subcommand("report", "summarise a session and write the per-job CSV");
    report->add_option("--session", session, "session directory (default $CAMPAIGND_SESSION)");
    report->add_option("--csv", csv, "per-job CSV path (default SESSION/report.csv)");

    std::optional<double> threshold;
    auto* lrt_cmd = app.add_subcommand("lrt", "likelihood-ratio tests over all completed jobs");
    lrt_cmd->add_option("--session", session, "session directory (default $CAMPAIGND_SESSION)");
    lrt_cmd->add_option("--threshold", threshold, "chi-square cut-off (default: the session's)");
    lrt_cmd->add_option("--csv", csv, "write the table here instead of stdout");

    std::vector<std::string> storage{"campaignd"};
    storage.insert(storage.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& s : storage) argv.push_back(s.data());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e, io.out, io.err);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*run) return cmd_run(ra, io);
        if (*resume) return cmd_resume(session, max_ticks, io);
        if (*report) return cmd_report(session, csv, io);
        if (*lrt_cmd) return cmd_lrt(session, threshold, csv, io);
    } catch (const StoreError& e) {
        io.err << "error: " << e.what() << "\n";
        return e.kind() == StoreError::Kind::Locked ? kExitUsage : kExitIncomplete;
    } catch (const BackendError& e) {
        io.err << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        io.err << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}

}  // namespace campaignd
