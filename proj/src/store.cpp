#include "campaignd/store.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include <fmt/format.h>
#include <json.hpp>

#include "store_internal.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace campaignd {

namespace {

json opt(const std::optional<Timestamp>& t) { return t ? json(*t) : json(nullptr); }

std::optional<Timestamp> opt_time(const json& j, const char* key) {
    const auto& v = j.at(key);
    if (v.is_null()) return std::nullopt;
    return v.get<double>();
}

[[noreturn]] void corrupt(const std::string& what) { throw StoreError(StoreError::Kind::CorruptRecord, what); }

json parse_record(std::string_view text, const char* what) {
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded() || !j.is_object()) corrupt(fmt::format("{} is not a JSON object", what));
    if (!j.contains("schema_version") || !j["schema_version"].is_number_integer()) {
        corrupt(fmt::format("{} lacks a schema_version", what));
    }
    const int v = j["schema_version"].get<int>();
    if (v != kSchemaVersion) {
        throw StoreError(StoreError::Kind::SchemaMismatch,
                         fmt::format("{} has schema_version {}, expected {}", what, v, kSchemaVersion));
    }
    return j;
}

template <class F>
auto guarded(const char* what, F&& f) {
    try {
        return f();
    } catch (const json::exception& e) {
        corrupt(fmt::format("{}: {}", what, e.what()));
    }
}

json attempt_to_json(const Attempt& a) {
    return json{
        {"index", a.index},
        {"site_id", a.site_id},
        {"remote_id", a.remote_id},
        {"sandbox", a.sandbox},
        {"submitted_at", a.submitted_at},
        {"started_at", opt(a.started_at)},
        {"ended_at", opt(a.ended_at)},
        {"reported_status", to_string(a.reported_status)},
        {"validation", to_string(a.validation)},
        {"corrected", a.corrected},
        {"detail", a.detail},
        {"h0_node", a.h0_node},
        {"h1_node", a.h1_node},
        {"transfer_failures", a.transfer_failures},
    };
}

Attempt attempt_from_json(const json& j) {
    Attempt a;
    a.index = j.at("index").get<int>();
    a.site_id = j.at("site_id").get<std::string>();
    a.remote_id = j.at("remote_id").get<std::string>();
    a.sandbox = j.at("sandbox").get<std::string>();
    a.submitted_at = j.at("submitted_at").get<double>();
    a.started_at = opt_time(j, "started_at");
    a.ended_at = opt_time(j, "ended_at");
    auto rs = parse_reported_status(j.at("reported_status").get<std::string>());
    auto val = parse_validation(j.at("validation").get<std::string>());
    if (!rs || !val) corrupt("attempt has an unknown status");
    a.reported_status = *rs;
    a.validation = *val;
    a.corrected = j.at("corrected").get<bool>();
    a.detail = j.at("detail").get<std::string>();
    a.h0_node = j.at("h0_node").get<std::string>();
    a.h1_node = j.at("h1_node").get<std::string>();
    a.transfer_failures = j.at("transfer_failures").get<int>();
    const bool expected = a.reported_status == ReportedStatus::Failed && a.validation == Validation::Passed;
    if (a.corrected != expected) corrupt("attempt `corrected` flag contradicts its outcome");
    return a;
}

json bundle_to_json(const InputBundle& b) {
    json refs = json::array();
    for (const auto& r : b.referenced_files) refs.push_back(r.string());
    return json{
        {"name", b.name},
        {"dir", b.dir.string()},
        {"h0_ctl", b.h0_ctl.string()},
        {"h1_ctl", b.h1_ctl.string()},
        {"referenced_files", std::move(refs)},
        {"h0_outfile", b.h0_outfile},
        {"h1_outfile", b.h1_outfile},
    };
}

InputBundle bundle_from_json(const json& j) {
    InputBundle b;
    b.name = j.at("name").get<std::string>();
    b.dir = j.at("dir").get<std::string>();
    b.h0_ctl = j.at("h0_ctl").get<std::string>();
    b.h1_ctl = j.at("h1_ctl").get<std::string>();
    for (const auto& r : j.at("referenced_files")) b.referenced_files.emplace_back(r.get<std::string>());
    b.h0_outfile = j.at("h0_outfile").get<std::string>();
    b.h1_outfile = j.at("h1_outfile").get<std::string>();
    return b;
}

}  // namespace

std::string encode_job_head(const Job& job) {
    json j{
        {"schema_version", kSchemaVersion},
        {"id", job.id},
        {"state", to_string(job.state)},
        {"bundle", bundle_to_json(job.bundle)},
        {"active", job.active ? attempt_to_json(*job.active) : json(nullptr)},
        {"result", job.result ? json{{"lnl0", job.result->lnl0}, {"lnl1", job.result->lnl1}} : json(nullptr)},
        {"output_dir", job.output_dir.string()},
        {"wall_limit", job.wall_limit},
    };
    return j.dump();
}

Job decode_job_head(std::string_view text) {
    const json j = parse_record(text, "job record");
    return guarded("job record", [&] {
        Job job;
        job.id = j.at("id").get<std::string>();
        auto st = parse_job_state(j.at("state").get<std::string>());
        if (!st) corrupt(fmt::format("job {} has an unknown state", job.id));
        job.state = *st;
        job.bundle = bundle_from_json(j.at("bundle"));
        if (!j.at("active").is_null()) job.active = attempt_from_json(j.at("active"));
        if (!j.at("result").is_null()) {
            job.result = LnlPair{j["result"].at("lnl0").get<double>(), j["result"].at("lnl1").get<double>()};
        }
        job.output_dir = j.at("output_dir").get<std::string>();
        job.wall_limit = j.at("wall_limit").get<double>();
        return job;
    });
}

std::string encode_attempt(const Attempt& attempt) {
    json j = attempt_to_json(attempt);
    j["schema_version"] = kSchemaVersion;
    return j.dump();
}

Attempt decode_attempt(std::string_view text) {
    const json j = parse_record(text, "attempt record");
    return guarded("attempt record", [&] { return attempt_from_json(j); });
}

std::string encode_meta(const SessionMeta& meta) {
    json j{
        {"schema_version", kSchemaVersion},
        {"started_at", meta.started_at},
        {"now", meta.now},
        {"finished_at", opt(meta.finished_at)},
        {"ticks", meta.ticks},
    };
    return j.dump();
}

SessionMeta decode_meta(std::string_view text) {
    const json j = parse_record(text, "session meta");
    return guarded("session meta", [&] {
        SessionMeta m;
        m.started_at = j.at("started_at").get<double>();
        m.now = j.at("now").get<double>();
        m.finished_at = opt_time(j, "finished_at");
        m.ticks = j.at("ticks").get<std::uint64_t>();
        return m;
    });
}

std::string_view to_string(StoreKind k) { return k == StoreKind::Sqlite ? "sqlite" : "files"; }

std::optional<StoreKind> parse_store_kind(std::string_view s) {
    if (s == "sqlite") return StoreKind::Sqlite;
    if (s == "files") return StoreKind::Files;
    return std::nullopt;
}

std::unique_ptr<Store> open_store(StoreKind kind, const fs::path& session_dir, OpenMode mode) {
    if (mode == OpenMode::ReadOnly) {
        if (!fs::is_directory(session_dir)) {
            throw StoreError(StoreError::Kind::IoFailure, fmt::format("no session at {}", session_dir.string()));
        }
        return kind == StoreKind::Sqlite ? detail::make_sqlite_store(session_dir, mode)
                                         : detail::make_file_store(session_dir, mode);
    }
    std::error_code ec;
    fs::create_directories(session_dir, ec);
    if (ec) {
        throw StoreError(StoreError::Kind::IoFailure,
                         fmt::format("cannot create session directory {}: {}", session_dir.string(), ec.message()));
    }
    return kind == StoreKind::Sqlite ? detail::make_sqlite_store(session_dir, mode)
                                     : detail::make_file_store(session_dir, mode);
}

std::optional<StoreKind> detect_store(const fs::path& session_dir) {
    if (fs::exists(session_dir / "state.db")) return StoreKind::Sqlite;
    if (fs::exists(session_dir / "jobs" ) && fs::exists(session_dir / "meta.json")) return StoreKind::Files;
    return std::nullopt;
}

namespace detail {

void read_only_write() { throw std::logic_error("store was opened read-only"); }

SessionLock::SessionLock(const fs::path& session_dir) {
    const auto path = session_dir / "lock";
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) {
        throw StoreError(StoreError::Kind::IoFailure,
                         fmt::format("cannot open {}: {}", path.string(), std::strerror(errno)));
    }
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
        ::close(fd_);
        fd_ = -1;
        throw StoreError(StoreError::Kind::Locked,
                         fmt::format("session {} is in use by another process", session_dir.string()));
    }
}

SessionLock::~SessionLock() {
    if (fd_ >= 0) ::close(fd_);
}

}  // namespace detail

}  // namespace campaignd
