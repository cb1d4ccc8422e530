#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "campaignd/backend.hpp"
#include "campaignd/model.hpp"
#include "campaignd/store.hpp"

namespace campaignd {

class Clock {
public:
    virtual ~Clock() = default;
    virtual Timestamp now() const = 0;
    virtual void sleep_until(Timestamp t) = 0;
};

/// Jumps instead of sleeping.
class VirtualClock final : public Clock {
public:
    explicit VirtualClock(Timestamp start = 0) : now_(start) {}
    Timestamp now() const override { return now_; }
    void sleep_until(Timestamp t) override {
        if (t > now_) now_ = t;
    }

private:
    Timestamp now_;
};

class WallClock final : public Clock {
public:
    Timestamp now() const override {
        return std::chrono::duration<double>(std::chrono::system_clock::now().time_since_epoch()).count();
    }
    void sleep_until(Timestamp t) override;
};

// ---------------------------------------------------------------------------
// Output validation
// ---------------------------------------------------------------------------

enum class InvalidReason : std::uint8_t { None, MissingFile, MissingTag, UnparseableLnl, NestingViolated };
std::string_view to_string(InvalidReason r);

struct ValidationOutcome {
    bool valid = false;
    LnlPair lnl;
    InvalidReason reason = InvalidReason::None;
    std::string file;  ///< offending outfile, when the reason names one
    std::string h0_node;
    std::string h1_node;

    std::string describe() const;
};

/// Both outfiles must exist, hold exactly one parseable `lnL = <x>` line, end
/// with the terminal tag line, and satisfy lnL1 >= lnL0.
ValidationOutcome validate_outputs(const std::filesystem::path& job_dir, const InputBundle& bundle);

// ---------------------------------------------------------------------------
// Session and engine
// ---------------------------------------------------------------------------

struct SessionCounters {
    int submitted = 0;
    int done = 0;
    int failed = 0;
    int retries = 0;
    int corrected_errors = 0;
};

struct Session {
    EngineConfig config;
    std::map<std::string, Job> jobs;
    SessionMeta meta;

    SessionCounters counters() const;
    int live() const;
    bool terminal() const;
};

struct TraceEvent {
    enum class Kind : std::uint8_t { Transition, Submit, Cancel, Tick, SubmissionsSkipped, CredentialRenewed };
    Kind kind = Kind::Transition;
    Timestamp t = 0;
    std::string job_id;
    JobState from = JobState::New;
    JobState to = JobState::New;
    std::string site_id;
    std::string previous_site;  ///< Submit: site of the last failed attempt
    int eligible_sites = 0;     ///< Submit: eligible sites at planning time
    int attempt = 0;
    int live_after = 0;
};

struct Placement {
    std::string job_id;
    std::string site_id;
    std::string previous_site;
    int eligible_sites = 0;
};

/// Chooses jobs to (re)submit now and where. NEW jobs first, then retries, each
/// by job id; at most max_live - live picks; least-loaded eligible site, ties by
/// site id; a retry avoids its last site whenever another is eligible. Jobs with
/// no eligible site are skipped this round.
std::vector<Placement> plan_submissions(const Session& session, const std::vector<SiteSpec>& sites, Timestamp now);

struct TickOutcome {
    bool progressed = false;
    bool terminal = false;
};

struct RunLimits {
    std::optional<std::uint64_t> max_ticks;
    std::optional<Seconds> max_elapsed;  ///< clock budget measured from the first tick of this run
};

struct RecoveryReport {
    int revalidated = 0;
    int reset_to_retry = 0;
    int repromoted = 0;
    std::vector<std::string> recreated;  ///< corrupt records rebuilt as NEW from a rescan
    bool restarted = false;              ///< start had not completed; every job recreated
};

struct CampaignReport;

/// The single control loop. Owns the in-memory Session; every transition is
/// committed to the store before the action it implies is taken.
class Engine {
public:
    Engine(EngineConfig config, Backend& backend, Store& store, Clock& clock, std::filesystem::path session_root);

    /// New campaign: one job per bundle. Rejects an empty bundle list.
    void start(const std::vector<InputBundle>& bundles);
    /// Reloads from the store and repairs jobs caught mid-flight. Corrupt
    /// records are rebuilt from `rescanned` when given, otherwise reported.
    /// A session whose start never completed is started again from `rescanned`.
    RecoveryReport resume(const std::vector<InputBundle>* rescanned = nullptr);

    TickOutcome tick();
    /// Ticks every poll_interval until terminal or a limit is hit.
    CampaignReport run(RunLimits limits = {});

    const Session& session() const noexcept { return session_; }
    void set_trace(std::vector<TraceEvent>* trace) { trace_ = trace; }
    /// Also copy each promoted result to `<dir>/<bundle name>/`.
    void set_export_dir(std::filesystem::path dir) { export_dir_ = std::move(dir); }

    std::filesystem::path fetch_dir(const Job& job, int attempt) const;
    std::filesystem::path output_dir(const Job& job) const;

private:
    struct Batch {
        std::vector<const Job*> heads;
        std::vector<AttemptRecord> attempts;
        void touch(const Job& job);
    };

    void transition(Job& job, JobEvent event, Timestamp now);
    void settle_active(Job& job, Batch& batch);
    void persist(Batch& batch);
    void observe(Job& job, Timestamp now, Batch& batch);
    void fail_middleware(Job& job, ReportedStatus status, std::string why, Timestamp now, Batch& batch);
    void fetch(Job& job, Timestamp now, Batch& batch);
    void validate(Job& job, Timestamp now, Batch& batch, std::vector<Job*>& promoted);
    void promote(const Job& job);
    void submit_round(Timestamp now);
    Seconds lost_after(const std::string& site_id) const;
    const SiteSpec* site(const std::string& site_id) const;
    void emit(TraceEvent ev);

    Session session_;
    Backend& backend_;
    Store& store_;
    Clock& clock_;
    std::filesystem::path root_;
    std::optional<std::filesystem::path> export_dir_;
    std::vector<SiteSpec> sites_;
    Credential credential_;
    int live_ = 0;
    std::vector<TraceEvent>* trace_ = nullptr;
};

/// Creates the jobs and drives them to completion.
CampaignReport run_campaign(const EngineConfig& config, const std::vector<InputBundle>& bundles, Backend& backend,
                            Store& store, Clock& clock, const std::filesystem::path& session_root,
                            RunLimits limits = {});

}  // namespace campaignd
