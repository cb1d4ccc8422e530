#include "campaignd/model.hpp"

#include <fmt/format.h>

namespace campaignd {

std::string_view to_string(Hypothesis h) { return h == Hypothesis::H0 ? "H0" : "H1"; }

std::string_view to_string(JobState s) {
    switch (s) {
        case JobState::New: return "NEW";
        case JobState::Submitted: return "SUBMITTED";
        case JobState::Running: return "RUNNING";
        case JobState::Fetching: return "FETCHING";
        case JobState::Validating: return "VALIDATING";
        case JobState::Done: return "DONE";
        case JobState::FailedRetryable: return "FAILED_RETRYABLE";
        case JobState::FailedPermanent: return "FAILED_PERMANENT";
    }
    return "?";
}

std::string_view to_string(JobEvent e) {
    switch (e) {
        case JobEvent::Submitted: return "Submitted";
        case JobEvent::Started: return "Started";
        case JobEvent::Finished: return "Finished";
        case JobEvent::MiddlewareFailed: return "MiddlewareFailed";
        case JobEvent::Fetched: return "Fetched";
        case JobEvent::ValidationPassed: return "ValidationPassed";
        case JobEvent::ValidationFailed: return "ValidationFailed";
        case JobEvent::RetryScheduled: return "RetryScheduled";
        case JobEvent::RetriesExhausted: return "RetriesExhausted";
    }
    return "?";
}

std::optional<JobState> parse_job_state(std::string_view s) {
    for (JobState st : kAllStates) {
        if (to_string(st) == s) return st;
    }
    return std::nullopt;
}

IllegalTransition::IllegalTransition(JobState state, JobEvent event)
    : std::logic_error(fmt::format("illegal transition: {} on {}", to_string(event), to_string(state))),
      state_(state),
      event_(event) {}

std::optional<JobState> successor(JobState state, JobEvent event) noexcept {
    using S = JobState;
    using E = JobEvent;
    switch (state) {
        case S::New:
            if (event == E::Submitted) return S::Submitted;
            break;
        case S::Submitted:
            if (event == E::Started) return S::Running;
            if (event == E::MiddlewareFailed) return S::FailedRetryable;
            break;
        case S::Running:
            if (event == E::Finished) return S::Fetching;
            if (event == E::MiddlewareFailed) return S::FailedRetryable;
            break;
        case S::Fetching:
            if (event == E::Fetched) return S::Validating;
            break;
        case S::Validating:
            if (event == E::ValidationPassed) return S::Done;
            if (event == E::ValidationFailed) return S::FailedRetryable;
            break;
        case S::FailedRetryable:
            if (event == E::RetryScheduled) return S::Submitted;
            if (event == E::RetriesExhausted) return S::FailedPermanent;
            break;
        case S::Done:
        case S::FailedPermanent:
            break;
    }
    return std::nullopt;
}

JobState advance(JobState state, JobEvent event) {
    if (auto next = successor(state, event)) return *next;
    throw IllegalTransition(state, event);
}

std::string_view to_string(ReportedStatus s) {
    switch (s) {
        case ReportedStatus::Ok: return "OK";
        case ReportedStatus::Failed: return "FAILED";
        case ReportedStatus::Lost: return "LOST";
    }
    return "?";
}

std::string_view to_string(Validation v) {
    switch (v) {
        case Validation::NotRun: return "NOT_RUN";
        case Validation::Passed: return "PASSED";
        case Validation::Failed: return "FAILED";
    }
    return "?";
}

std::optional<ReportedStatus> parse_reported_status(std::string_view s) {
    for (auto v : {ReportedStatus::Ok, ReportedStatus::Failed, ReportedStatus::Lost}) {
        if (to_string(v) == s) return v;
    }
    return std::nullopt;
}

std::optional<Validation> parse_validation(std::string_view s) {
    for (auto v : {Validation::NotRun, Validation::Passed, Validation::Failed}) {
        if (to_string(v) == s) return v;
    }
    return std::nullopt;
}

void Attempt::settle(ReportedStatus reported, Validation v, std::string why) {
    reported_status = reported;
    validation = v;
    corrected = reported == ReportedStatus::Failed && v == Validation::Passed;
    if (!why.empty()) detail = std::move(why);
}

int Job::next_attempt_index() const {
    int last = 0;
    if (!attempts.empty()) last = attempts.back().index;
    if (active) last = std::max(last, active->index);
    return last + 1;
}

const Attempt* Job::last_attempt() const {
    if (active) return &*active;
    if (!attempts.empty()) return &attempts.back();
    return nullptr;
}

void EngineConfig::validate(bool simulated_backend) const {
    if (max_live < 1) throw ConfigError("max_live must be at least 1");
    if (wall_limit <= 0) throw ConfigError("wall-time limit must be positive");
    if (poll_interval <= 0) throw ConfigError("polling interval must be positive");
    if (!simulated_backend && poll_interval < kMinPollInterval) {
        throw ConfigError(fmt::format("polling interval below {}s", kMinPollInterval));
    }
    if (max_retries && *max_retries < 0) throw ConfigError("max_retries must be non-negative");
    if (required_rte.empty()) throw ConfigError("required RTE tag must not be empty");
    if (max_transfer_failures < 1) throw ConfigError("max_transfer_failures must be at least 1");
}

bool Credential::renew(Timestamp now) {
    if (!renewable || !service_up(now)) return false;
    valid_until = now + lifetime;
    return true;
}

}  // namespace campaignd
