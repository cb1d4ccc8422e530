#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <map>
#include <optional>
#include <queue>
#include <random>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "campaignd/backend.hpp"
#include "campaignd/worker.hpp"

namespace campaignd {

struct FaultPlan {
    struct DurationOverride {
        std::string job_id;
        int attempt = 1;
        Seconds seconds = 0;
    };

    std::uint64_t seed = 0;
    double p_spurious_fail = 0;  ///< outputs complete, status reported FAILED
    double p_lost = 0;           ///< attempt vanishes, never reaches a terminal remote status
    double p_node_crash = 0;     ///< attempt dies part-way, outputs incomplete
    double p_transfer_fail = 0;  ///< first fetch of the attempt fails
    std::vector<Interval> credential_outage_windows;
    std::vector<DurationOverride> duration_overrides;
};

/// Run time of one job: base_minutes * (1 + spread * u), u uniform in [-1, 1),
/// drawn per (seed, job id), rounded to whole seconds.
struct DurationModel {
    double base_minutes = 25;
    double spread = 0.3;

    Seconds sample(std::uint64_t seed, const std::string& job_id) const;
    Seconds max() const { return base_minutes * 60 * (1 + spread); }
};

struct CredentialSpec {
    Seconds lifetime = 12 * 3600;
    bool renewable = true;
};

struct SimConfig {
    std::vector<SiteSpec> sites;
    FaultPlan faults;
    DurationModel durations;
    CredentialSpec credential;

    /// Throws ConfigError on out-of-range probabilities, unsorted downtime, bad sites.
    void validate() const;

    static SimConfig from_json_text(const std::string& text);
    static SimConfig load(const std::filesystem::path& path);
    std::string to_json_text() const;
};

/// Uniform doubles in [0, 1) from a generator seeded by (seed, key, salt) only.
class SeededStream {
public:
    SeededStream(std::uint64_t seed, const std::string& key, std::uint64_t salt);
    double uniform();

private:
    std::mt19937_64 engine_;
};

enum class FaultKind : std::uint8_t { SpuriousFail, Lost, NodeCrash, DowntimeCrash, TransferFail };
std::string_view to_string(FaultKind k);

/// A fault as it actually happened (drawn faults pre-empted by a downtime or a
/// cancellation never appear).
struct FaultRecord {
    FaultKind kind;
    std::string job_id;
    int attempt = 0;
    std::string site_id;
    Timestamp at = 0;
};

enum class SimEventKind : std::uint8_t { Submit, Start, End, Crash, Cancel, Lost };

struct SimEvent {
    Timestamp t = 0;
    SimEventKind kind = SimEventKind::Submit;
    std::string remote_id;
    std::string site_id;
    int running_after = 0;  ///< jobs occupying a core at this site after the event
};

/// Discrete-event grid. Time only moves when the engine calls in with a later
/// `now`; all events up to that instant are processed first. Fault outcomes are
/// drawn at submission from (seed, job id, attempt index).
class SimBackend final : public Backend {
public:
    SimBackend(SimConfig config, std::filesystem::path session_root, ExecutionOptions options);

    bool simulated() const override { return true; }
    std::vector<SiteSpec> list_sites() const override;
    Credential credential(Timestamp now) override;
    std::string submit(const Job& job, const std::string& site_id, const Credential& credential,
                       Timestamp now) override;
    RemoteStatus poll(const std::string& remote_id, Timestamp now) override;
    Manifest fetch_outputs(const std::string& remote_id, const std::filesystem::path& dest, Timestamp now) override;
    CancelAck cancel(const std::string& remote_id, Timestamp now) override;

    /// Unlagged state at time t (t must not exceed the processed horizon).
    RemoteState true_state(const std::string& remote_id, Timestamp t) const;
    Timestamp horizon() const noexcept { return clock_; }

    const SimConfig& config() const noexcept { return config_; }
    const std::vector<FaultRecord>& fault_log() const noexcept { return faults_; }
    std::size_t fault_count(FaultKind kind) const;
    const std::vector<SimEvent>& trace() const noexcept { return trace_; }
    std::string trace_text() const;

private:
    enum class Outcome : std::uint8_t { Ok, SpuriousFail, NodeCrash, Lost };

    struct Run {
        std::string remote_id;
        std::string job_id;
        int attempt = 0;
        std::size_t site = 0;
        InputBundle bundle;
        std::filesystem::path sandbox;
        Outcome planned = Outcome::Ok;
        double crash_fraction = 0.5;
        bool transfer_fail_pending = false;
        Seconds duration = 0;
        Timestamp submitted_at = 0;
        std::optional<Timestamp> started_at;
        std::optional<Timestamp> ended_at;
        RemoteState end_state = RemoteState::FinishedFailed;
        bool cancelled = false;
        int core = -1;
    };

    enum class EvType : std::uint8_t { DowntimeStart, Arrive, End };
    struct Ev {
        Timestamp t;
        std::uint64_t seq;
        EvType type;
        std::size_t target;  ///< run index, or site index for downtime
        bool operator>(const Ev& o) const { return t != o.t ? t > o.t : seq > o.seq; }
    };

    struct SiteRuntime {
        std::vector<std::optional<std::size_t>> cores;
        std::deque<std::size_t> queue;
        int running = 0;
    };

    void advance_to(Timestamp t);
    void push(Timestamp t, EvType type, std::size_t target);
    void try_start(std::size_t site, Timestamp t);
    void finish(std::size_t run, Timestamp t);
    void crash_site(std::size_t site, Timestamp t);
    void release_core(Run& r);
    void write_outputs(const Run& r, bool complete);
    const std::pair<LikelihoodResult, LikelihoodResult>& results_for(const InputBundle& bundle);
    Run& lookup(const std::string& remote_id);
    const Run& lookup(const std::string& remote_id) const;
    static RemoteState state_at(const Run& r, Timestamp t);
    void record(SimEventKind kind, const Run& r, Timestamp t);

    SimConfig config_;
    std::filesystem::path root_;
    ExecutionOptions options_;
    Timestamp clock_ = 0;
    std::uint64_t seq_ = 0;
    std::priority_queue<Ev, std::vector<Ev>, std::greater<>> events_;
    std::vector<SiteRuntime> sites_;
    std::vector<Run> runs_;
    std::unordered_map<std::string, std::size_t> by_id_;
    std::vector<FaultRecord> faults_;
    std::vector<SimEvent> trace_;
    std::map<std::string, std::pair<LikelihoodResult, LikelihoodResult>> results_;
};

}  // namespace campaignd
