#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "campaignd/model.hpp"

namespace campaignd {

/// [start, end) in back-end time.
struct Interval {
    Timestamp start = 0;
    Timestamp end = 0;
    bool contains(Timestamp t) const { return t >= start && t < end; }
    bool operator==(const Interval&) const = default;
};

bool in_any(const std::vector<Interval>& windows, Timestamp t);

struct SiteSpec {
    std::string site_id;
    int cores = 1;
    std::set<std::string> rtes;
    Seconds queue_delay = 0;
    Seconds info_lag = 60;
    std::vector<Interval> downtime_windows;  ///< sorted, non-overlapping
    /// Per-site loss probability overriding FaultPlan::p_lost (desktop-grid sites).
    std::optional<double> p_lost;

    bool down_at(Timestamp t) const { return in_any(downtime_windows, t); }
};

enum class RemoteState : std::uint8_t { Queued, Running, FinishedOk, FinishedFailed, Unknown };
std::string_view to_string(RemoteState s);

struct RemoteStatus {
    RemoteState value = RemoteState::Unknown;
    Timestamp as_of = 0;
};

struct ManifestEntry {
    std::filesystem::path path;  ///< relative to the destination directory
    std::uintmax_t bytes = 0;
};
using Manifest = std::vector<ManifestEntry>;

enum class CancelAck : std::uint8_t { Cancelled, AlreadyTerminal };

class BackendError : public std::runtime_error {
public:
    enum class Kind {
        ConfigMissing,
        CredentialExpired,
        SiteDown,
        RteMissing,
        UnknownSite,
        UnknownRemoteId,
        NotFinished,
        TransferFailed,
        Io,
    };
    BackendError(Kind kind, std::string message) : std::runtime_error(std::move(message)), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

/// What every site needs to know about the application being run.
struct ExecutionOptions {
    std::string required_rte = "CODEML";
    std::optional<std::filesystem::path> ship_executable;
};

/// Deterministic per (site, job, attempt); the engine persists it before submitting.
std::string remote_id_for(const std::string& site_id, const std::string& job_id, int attempt_index);

/// `<root>/jobs/<job_id>/attempt_<n>`
std::filesystem::path sandbox_path(const std::filesystem::path& root, const std::string& job_id, int attempt_index);

/// Copies both control files and their inputs into `sandbox`. Referenced
/// files are staged by file name and the staged control files rewritten to
/// match, so the worker can run with the sandbox as its working directory.
/// Returns the staged control file names (H0, H1).
std::pair<std::string, std::string> stage_inputs(const InputBundle& bundle, const std::filesystem::path& sandbox);

/// Copies every regular file under `from` into `to`, returning the manifest.
Manifest copy_tree(const std::filesystem::path& from, const std::filesystem::path& to);

/// The execution back-end contract. Calls come from the engine's control
/// thread only. `now` is the engine clock; the simulator runs on it.
class Backend {
public:
    virtual ~Backend() = default;

    virtual bool simulated() const = 0;
    virtual std::vector<SiteSpec> list_sites() const = 0;
    /// Fresh credential as obtained at session start.
    virtual Credential credential(Timestamp now) = 0;

    /// Submits the job's active attempt. Throws BackendError.
    virtual std::string submit(const Job& job, const std::string& site_id, const Credential& credential,
                               Timestamp now) = 0;
    virtual RemoteStatus poll(const std::string& remote_id, Timestamp now) = 0;
    virtual Manifest fetch_outputs(const std::string& remote_id, const std::filesystem::path& dest,
                                   Timestamp now) = 0;
    virtual CancelAck cancel(const std::string& remote_id, Timestamp now) = 0;
};

}  // namespace campaignd
