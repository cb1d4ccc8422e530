#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace campaignd {

/// Seconds, either virtual (simulator) or since the Unix epoch (wall clock).
using Timestamp = double;
using Seconds = double;

enum class Hypothesis : std::uint8_t { H0, H1 };

/// Values of omega the H1 model searches; contains 1 so H0 (omega = 1) nests in H1.
inline constexpr double kOmegaGrid[] = {0.0, 0.5, 1.0, 2.0, 5.0};

std::string_view to_string(Hypothesis h);

/// One paired H0/H1 input set discovered on disk. Both control files live in
/// `dir`; the pair is always executed inside a single job.
struct InputBundle {
    std::string name;
    std::filesystem::path dir;
    std::filesystem::path h0_ctl;
    std::filesystem::path h1_ctl;
    std::vector<std::filesystem::path> referenced_files;
    std::string h0_outfile;
    std::string h1_outfile;

    const std::filesystem::path& ctl(Hypothesis h) const { return h == Hypothesis::H0 ? h0_ctl : h1_ctl; }
    const std::string& outfile(Hypothesis h) const { return h == Hypothesis::H0 ? h0_outfile : h1_outfile; }

    bool operator==(const InputBundle&) const = default;
};

// ---------------------------------------------------------------------------
// Job lifecycle
// ---------------------------------------------------------------------------

enum class JobState : std::uint8_t {
    New,
    Submitted,
    Running,
    Fetching,
    Validating,
    Done,
    FailedRetryable,
    FailedPermanent,
};

enum class JobEvent : std::uint8_t {
    Submitted,
    Started,
    Finished,
    MiddlewareFailed,
    Fetched,
    ValidationPassed,
    ValidationFailed,
    RetryScheduled,
    RetriesExhausted,
};

inline constexpr JobState kAllStates[] = {
    JobState::New,        JobState::Submitted, JobState::Running,         JobState::Fetching,
    JobState::Validating, JobState::Done,      JobState::FailedRetryable, JobState::FailedPermanent,
};

inline constexpr JobEvent kAllEvents[] = {
    JobEvent::Submitted,        JobEvent::Started,        JobEvent::Finished,
    JobEvent::MiddlewareFailed, JobEvent::Fetched,        JobEvent::ValidationPassed,
    JobEvent::ValidationFailed, JobEvent::RetryScheduled, JobEvent::RetriesExhausted,
};

std::string_view to_string(JobState s);
std::string_view to_string(JobEvent e);
std::optional<JobState> parse_job_state(std::string_view s);

constexpr bool is_terminal(JobState s) { return s == JobState::Done || s == JobState::FailedPermanent; }

/// A job counts against the concurrency cap while submitted/scheduled or running.
constexpr bool is_live(JobState s) { return s == JobState::Submitted || s == JobState::Running; }

class IllegalTransition : public std::logic_error {
public:
    IllegalTransition(JobState state, JobEvent event);
    JobState state() const noexcept { return state_; }
    JobEvent event() const noexcept { return event_; }

private:
    JobState state_;
    JobEvent event_;
};

/// Transition table lookup; nullopt for pairs the table does not contain.
std::optional<JobState> successor(JobState state, JobEvent event) noexcept;

/// Returns the unique successor, or throws IllegalTransition.
JobState advance(JobState state, JobEvent event);

// ---------------------------------------------------------------------------
// Attempts and jobs
// ---------------------------------------------------------------------------

enum class ReportedStatus : std::uint8_t { Ok, Failed, Lost };
enum class Validation : std::uint8_t { NotRun, Passed, Failed };

std::string_view to_string(ReportedStatus s);
std::string_view to_string(Validation v);
std::optional<ReportedStatus> parse_reported_status(std::string_view s);
std::optional<Validation> parse_validation(std::string_view s);

struct Attempt {
    int index = 0;
    std::string site_id;
    std::string remote_id;
    std::string sandbox;
    Timestamp submitted_at = 0;
    std::optional<Timestamp> started_at;
    std::optional<Timestamp> ended_at;
    ReportedStatus reported_status = ReportedStatus::Failed;
    Validation validation = Validation::NotRun;
    bool corrected = false;
    std::string detail;
    // Node identities read back from the two outfiles, empty when absent.
    std::string h0_node;
    std::string h1_node;
    int transfer_failures = 0;

    /// Fixes the outcome; `corrected` is derived, never set directly.
    void settle(ReportedStatus reported, Validation v, std::string why = {});

    bool operator==(const Attempt&) const = default;
};

struct LnlPair {
    double lnl0 = 0;
    double lnl1 = 0;
    bool operator==(const LnlPair&) const = default;
};

struct Job {
    std::string id;
    InputBundle bundle;
    JobState state = JobState::New;
    std::vector<Attempt> attempts;  ///< settled attempts, append-only
    std::optional<Attempt> active;  ///< attempt in flight, if any
    std::optional<LnlPair> result;
    std::filesystem::path output_dir;
    Seconds wall_limit = 8 * 3600;

    int attempt_count() const { return static_cast<int>(attempts.size()) + (active ? 1 : 0); }
    int next_attempt_index() const;
    /// Most recent attempt, in flight or settled.
    const Attempt* last_attempt() const;

    bool operator==(const Job&) const = default;
};

// ---------------------------------------------------------------------------
// Configuration and credentials
// ---------------------------------------------------------------------------

inline constexpr Seconds kMinPollInterval = 60;

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct EngineConfig {
    int max_live = 50;
    Seconds wall_limit = 8 * 3600;
    Seconds poll_interval = 60;
    std::optional<int> max_retries;
    std::string required_rte = "CODEML";
    std::optional<std::filesystem::path> ship_executable;
    /// Loss-detection timeout; unset means 3 * info_lag + queue_delay of the site.
    std::optional<Seconds> lost_after;
    /// Retry backoff hook; zero re-queues on the next tick.
    Seconds retry_backoff = 0;
    int max_transfer_failures = 3;

    /// Throws ConfigError. The 60 s poll floor only applies to non-simulated back-ends.
    void validate(bool simulated_backend) const;
};

struct Credential {
    Timestamp valid_until = 0;
    Seconds lifetime = 12 * 3600;
    bool renewable = true;
    std::function<bool(Timestamp)> renewal_service_available;

    bool valid_at(Timestamp now) const { return now < valid_until; }
    bool service_up(Timestamp now) const { return !renewal_service_available || renewal_service_available(now); }
    /// Renews when allowed at `now`; returns whether the proxy was refreshed.
    bool renew(Timestamp now);
};

}  // namespace campaignd
