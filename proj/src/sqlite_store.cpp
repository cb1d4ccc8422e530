#include <sqlite3.h>

#include <algorithm>
#include <map>
#include <optional>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "store_internal.hpp"

namespace fs = std::filesystem;

namespace campaignd::detail {

namespace {

constexpr const char* kSchema = R"sql(
CREATE TABLE IF NOT EXISTS meta (key TEXT PRIMARY KEY, value TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS jobs (id TEXT PRIMARY KEY, record TEXT NOT NULL);
CREATE TABLE IF NOT EXISTS attempts (
    job_id TEXT NOT NULL,
    idx INTEGER NOT NULL,
    record TEXT NOT NULL,
    PRIMARY KEY (job_id, idx)
);
CREATE TABLE IF NOT EXISTS quarantine (id TEXT NOT NULL, record TEXT NOT NULL);
)sql";

class Statement {
public:
    Statement(sqlite3* db, const char* sql) : db_(db) {
        if (sqlite3_prepare_v2(db, sql, -1, &stmt_, nullptr) != SQLITE_OK) {
            throw StoreError(StoreError::Kind::IoFailure, fmt::format("prepare: {}", sqlite3_errmsg(db)));
        }
    }
    ~Statement() { sqlite3_finalize(stmt_); }
    Statement(const Statement&) = delete;
    Statement& operator=(const Statement&) = delete;

    Statement& bind(int i, const std::string& s) {
        sqlite3_bind_text(stmt_, i, s.data(), static_cast<int>(s.size()), SQLITE_TRANSIENT);
        return *this;
    }
    Statement& bind(int i, int v) {
        sqlite3_bind_int(stmt_, i, v);
        return *this;
    }
    /// True while a row is available.
    bool step() {
        const int rc = sqlite3_step(stmt_);
        if (rc == SQLITE_ROW) return true;
        if (rc == SQLITE_DONE) return false;
        throw StoreError(StoreError::Kind::IoFailure, fmt::format("sqlite: {}", sqlite3_errmsg(db_)));
    }
    void reset() {
        sqlite3_reset(stmt_);
        sqlite3_clear_bindings(stmt_);
    }
    void run() {
        step();
        reset();
    }
    std::string text(int col) const {
        const auto* p = reinterpret_cast<const char*>(sqlite3_column_text(stmt_, col));
        return p ? std::string(p, static_cast<std::size_t>(sqlite3_column_bytes(stmt_, col))) : std::string();
    }
    int integer(int col) const { return sqlite3_column_int(stmt_, col); }

private:
    sqlite3* db_;
    sqlite3_stmt* stmt_ = nullptr;
};

/// All state in `<session>/state.db`; every commit is one transaction.
class SqliteStore final : public Store {
public:
    SqliteStore(const fs::path& session_dir, OpenMode mode) : read_only_(mode == OpenMode::ReadOnly) {
        if (!read_only_) lock_.emplace(session_dir);
        const auto path = session_dir / "state.db";
        const int flags = read_only_ ? SQLITE_OPEN_READONLY : SQLITE_OPEN_READWRITE | SQLITE_OPEN_CREATE;
        if (sqlite3_open_v2(path.c_str(), &db_, flags | SQLITE_OPEN_FULLMUTEX, nullptr) != SQLITE_OK) {
            std::string msg = db_ ? sqlite3_errmsg(db_) : "out of memory";
            sqlite3_close(db_);
            throw StoreError(StoreError::Kind::IoFailure, fmt::format("cannot open {}: {}", path.string(), msg));
        }
        sqlite3_busy_timeout(db_, 5000);
        if (!read_only_) {
            exec("PRAGMA journal_mode=WAL");
            exec("PRAGMA synchronous=FULL");
            exec(kSchema);
        }
        check_schema_version();
    }

    ~SqliteStore() override { sqlite3_close(db_); }

    std::string_view kind() const override { return "sqlite"; }

    void commit(const std::vector<const Job*>& heads, const std::vector<AttemptRecord>& attempts) override {
        if (read_only_) read_only_write();
        if (heads.empty() && attempts.empty()) return;
        Transaction tx(*this);
        if (!attempts.empty()) {
            Statement exists(db_, "SELECT 1 FROM jobs WHERE id = ?1");
            Statement insert(db_, "INSERT OR IGNORE INTO attempts (job_id, idx, record) VALUES (?1, ?2, ?3)");
            for (const auto& rec : attempts) {
                const bool head_pending = std::any_of(heads.begin(), heads.end(),
                                                      [&](const Job* j) { return j->id == rec.job_id; });
                if (!head_pending) {
                    exists.bind(1, rec.job_id);
                    const bool found = exists.step();
                    exists.reset();
                    if (!found) {
                        throw StoreError(StoreError::Kind::UnknownJob, fmt::format("no job {}", rec.job_id),
                                         rec.job_id);
                    }
                }
                insert.bind(1, rec.job_id).bind(2, rec.attempt.index).bind(3, encode_attempt(rec.attempt)).run();
            }
        }
        if (!heads.empty()) {
            Statement upsert(db_,
                             "INSERT INTO jobs (id, record) VALUES (?1, ?2) "
                             "ON CONFLICT(id) DO UPDATE SET record = excluded.record");
            for (const Job* job : heads) upsert.bind(1, job->id).bind(2, encode_job_head(*job)).run();
        }
        tx.commit();
    }

    void save_meta(const SessionMeta& meta) override {
        if (read_only_) read_only_write();
        Transaction tx(*this);
        Statement upsert(db_,
                         "INSERT INTO meta (key, value) VALUES ('session', ?1) "
                         "ON CONFLICT(key) DO UPDATE SET value = excluded.value");
        upsert.bind(1, encode_meta(meta)).run();
        tx.commit();
    }

    LoadedSession load() override {
        LoadedSession out;
        {
            Statement q(db_, "SELECT value FROM meta WHERE key = 'session'");
            if (q.step()) out.meta = decode_meta(q.text(0));
        }

        std::map<std::string, std::string> heads;
        {
            Statement q(db_, "SELECT id, record FROM jobs ORDER BY id");
            while (q.step()) heads.emplace(q.text(0), q.text(1));
        }
        std::map<std::string, std::map<int, std::string>> attempts;
        {
            Statement q(db_, "SELECT job_id, idx, record FROM attempts ORDER BY job_id, idx");
            while (q.step()) attempts[q.text(0)].emplace(q.integer(1), q.text(2));
        }

        for (const auto& [id, text] : heads) {
            try {
                Job job = decode_job_head(text);
                if (job.id != id) {
                    throw StoreError(StoreError::Kind::CorruptRecord, fmt::format("row {} names job {}", id, job.id),
                                     id);
                }
                for (const auto& [idx, rec] : attempts[id]) {
                    Attempt a = decode_attempt(rec);
                    if (a.index != idx) {
                        throw StoreError(StoreError::Kind::CorruptRecord,
                                         fmt::format("attempt row {}#{} holds index {}", id, idx, a.index), id);
                    }
                    job.attempts.push_back(std::move(a));
                }
                out.jobs.push_back(std::move(job));
            } catch (const StoreError& e) {
                if (e.kind() != StoreError::Kind::CorruptRecord) throw;
                if (read_only_) {
                    spdlog::error("job {} is corrupt: {}", id, e.what());
                } else {
                    spdlog::error("quarantining job {}: {}", id, e.what());
                    quarantine(id, text);
                }
                out.corrupt.push_back(id);
            }
        }
        // Quarantined earlier and not rebuilt since.
        Statement q(db_, "SELECT DISTINCT id FROM quarantine ORDER BY id");
        while (q.step()) {
            const std::string id = q.text(0);
            if (!heads.contains(id)) out.corrupt.push_back(id);
        }
        std::sort(out.corrupt.begin(), out.corrupt.end());
        out.corrupt.erase(std::unique(out.corrupt.begin(), out.corrupt.end()), out.corrupt.end());
        return out;
    }

private:
    class Transaction {
    public:
        explicit Transaction(SqliteStore& s) : s_(s) { s_.exec("BEGIN IMMEDIATE"); }
        ~Transaction() {
            if (!done_) sqlite3_exec(s_.db_, "ROLLBACK", nullptr, nullptr, nullptr);
        }
        void commit() {
            try {
                s_.before_visible_write();
            } catch (const StoreError&) {
                throw;
            } catch (const std::exception& e) {
                throw StoreError(StoreError::Kind::IoFailure, fmt::format("commit: {}", e.what()));
            }
            s_.exec("COMMIT");
            done_ = true;
        }

    private:
        SqliteStore& s_;
        bool done_ = false;
    };

    void exec(const char* sql) {
        char* err = nullptr;
        if (sqlite3_exec(db_, sql, nullptr, nullptr, &err) != SQLITE_OK) {
            std::string msg = err ? err : "unknown error";
            sqlite3_free(err);
            throw StoreError(StoreError::Kind::IoFailure, fmt::format("sqlite: {}", msg));
        }
    }

    void check_schema_version() {
        Statement q(db_, "SELECT value FROM meta WHERE key = 'schema_version'");
        if (q.step()) {
            const std::string v = q.text(0);
            if (v != std::to_string(kSchemaVersion)) {
                throw StoreError(StoreError::Kind::SchemaMismatch,
                                 fmt::format("state.db has schema_version {}, expected {}", v, kSchemaVersion));
            }
            return;
        }
        if (read_only_) return;
        Statement ins(db_, "INSERT INTO meta (key, value) VALUES ('schema_version', ?1)");
        ins.bind(1, std::to_string(kSchemaVersion)).run();
    }

    void quarantine(const std::string& id, const std::string& text) {
        Transaction tx(*this);
        Statement ins(db_, "INSERT INTO quarantine (id, record) VALUES (?1, ?2)");
        ins.bind(1, id).bind(2, text).run();
        Statement del_job(db_, "DELETE FROM jobs WHERE id = ?1");
        del_job.bind(1, id).run();
        Statement del_att(db_, "DELETE FROM attempts WHERE job_id = ?1");
        del_att.bind(1, id).run();
        tx.commit();
    }

    bool read_only_;
    std::optional<SessionLock> lock_;
    sqlite3* db_ = nullptr;
};

}  // namespace

std::unique_ptr<Store> make_sqlite_store(const fs::path& session_dir, OpenMode mode) {
    return std::make_unique<SqliteStore>(session_dir, mode);
}

}  // namespace campaignd::detail
