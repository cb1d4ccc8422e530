#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "campaignd/model.hpp"

namespace campaignd {

inline constexpr int kSchemaVersion = 1;

class StoreError : public std::runtime_error {
public:
    enum class Kind { IoFailure, UnknownJob, CorruptRecord, SchemaMismatch, Locked };
    StoreError(Kind kind, std::string message, std::string job_id = {})
        : std::runtime_error(std::move(message)), kind_(kind), job_id_(std::move(job_id)) {}
    Kind kind() const noexcept { return kind_; }
    const std::string& job_id() const noexcept { return job_id_; }

private:
    Kind kind_;
    std::string job_id_;
};

struct SessionMeta {
    Timestamp started_at = 0;
    Timestamp now = 0;  ///< checkpointed at the start of every tick
    std::optional<Timestamp> finished_at;
    std::uint64_t ticks = 0;
    bool operator==(const SessionMeta&) const = default;
};

struct AttemptRecord {
    std::string job_id;
    Attempt attempt;
};

struct LoadedSession {
    std::vector<Job> jobs;  ///< sorted by id, settled attempts merged in index order
    std::optional<SessionMeta> meta;
    std::vector<std::string> corrupt;  ///< quarantined job ids
};

// Record codec. Self-describing JSON carrying schema_version. Job heads do not
// carry settled attempts; those are separate append-only records.
std::string encode_job_head(const Job& job);
Job decode_job_head(std::string_view text);
std::string encode_attempt(const Attempt& attempt);
Attempt decode_attempt(std::string_view text);
std::string encode_meta(const SessionMeta& meta);
SessionMeta decode_meta(std::string_view text);

/// Called at the point where a write becomes visible (before rename/commit).
/// Throwing from it simulates a failed device; the store must stay intact.
using WriteFaultHook = std::function<void()>;

/// Durable session state. Single writer, enforced by an exclusive lock on
/// `<session>/lock` held for the store's lifetime.
class Store {
public:
    virtual ~Store() = default;

    virtual std::string_view kind() const = 0;

    /// Persists job heads and appends settled attempts; durable on return.
    /// Attempts are deduplicated by (job id, index). Atomic as a unit in the
    /// indexed store; the directory store writes attempts before heads.
    virtual void commit(const std::vector<const Job*>& heads, const std::vector<AttemptRecord>& attempts) = 0;
    virtual void save_meta(const SessionMeta& meta) = 0;
    virtual LoadedSession load() = 0;

    void save_job(const Job& job) { commit({&job}, {}); }
    void record_attempt(const std::string& job_id, const Attempt& attempt) { commit({}, {{job_id, attempt}}); }

    void set_write_fault_hook(WriteFaultHook hook) { fault_hook_ = std::move(hook); }

protected:
    void before_visible_write() const {
        if (fault_hook_) fault_hook_();
    }

private:
    WriteFaultHook fault_hook_;
};

enum class StoreKind { Sqlite, Files };
std::string_view to_string(StoreKind k);
std::optional<StoreKind> parse_store_kind(std::string_view s);

/// ReadOnly skips the writer lock (readers may run beside the engine) and
/// never modifies the session: writes throw and corrupt records are reported
/// without being quarantined.
enum class OpenMode { ReadWrite, ReadOnly };

/// Opens (creating if needed, in ReadWrite mode) the session's store.
std::unique_ptr<Store> open_store(StoreKind kind, const std::filesystem::path& session_dir,
                                  OpenMode mode = OpenMode::ReadWrite);

/// Which store a session directory already holds, if any.
std::optional<StoreKind> detect_store(const std::filesystem::path& session_dir);

}  // namespace campaignd
