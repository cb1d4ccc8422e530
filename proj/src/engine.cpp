#include "campaignd/engine.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>
#include <thread>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "campaignd/report.hpp"

namespace fs = std::filesystem;

namespace campaignd {

namespace {

constexpr const char* kMarkerFile = ".attempt";

std::string job_id_for(std::size_t ordinal) { return fmt::format("job-{:06d}", ordinal); }

/// `job-000042` -> 42
std::optional<std::size_t> job_ordinal(const std::string& id) {
    if (!id.starts_with("job-")) return std::nullopt;
    std::size_t n = 0;
    auto [p, ec] = std::from_chars(id.data() + 4, id.data() + id.size(), n);
    if (ec != std::errc() || p != id.data() + id.size() || n == 0) return std::nullopt;
    return n;
}

std::string marker_text(const Job& job, int attempt) { return fmt::format("{} {}\n", job.id, attempt); }

std::string read_small(const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

const Attempt* passing_attempt(const Job& job) {
    for (auto it = job.attempts.rbegin(); it != job.attempts.rend(); ++it) {
        if (it->validation == Validation::Passed) return &*it;
    }
    return nullptr;
}

}  // namespace

void WallClock::sleep_until(Timestamp t) {
    const Seconds d = t - now();
    if (d > 0) std::this_thread::sleep_for(std::chrono::duration<double>(d));
}

// ---------------------------------------------------------------------------
// Session
// ---------------------------------------------------------------------------

SessionCounters Session::counters() const {
    SessionCounters c;
    for (const auto& [id, job] : jobs) {
        c.submitted += job.attempt_count();
        c.retries += std::max(0, job.attempt_count() - 1);
        if (job.state == JobState::Done) ++c.done;
        if (job.state == JobState::FailedPermanent) ++c.failed;
        for (const auto& a : job.attempts) c.corrected_errors += a.corrected ? 1 : 0;
    }
    return c;
}

int Session::live() const {
    return static_cast<int>(std::count_if(jobs.begin(), jobs.end(), [](const auto& kv) { return is_live(kv.second.state); }));
}

bool Session::terminal() const {
    return !jobs.empty() &&
           std::all_of(jobs.begin(), jobs.end(), [](const auto& kv) { return is_terminal(kv.second.state); });
}

// ---------------------------------------------------------------------------
// Planning
// ---------------------------------------------------------------------------

std::vector<Placement> plan_submissions(const Session& session, const std::vector<SiteSpec>& sites, Timestamp now) {
    const EngineConfig& cfg = session.config;
    int capacity = cfg.max_live - session.live();
    if (capacity <= 0) return {};

    std::map<std::string, int> load;
    std::vector<const SiteSpec*> eligible;
    for (const auto& s : sites) {
        load[s.site_id] = 0;
        const bool has_app = cfg.ship_executable.has_value() || s.rtes.contains(cfg.required_rte);
        if (has_app && !s.down_at(now)) eligible.push_back(&s);
    }
    if (eligible.empty()) return {};
    for (const auto& [id, job] : session.jobs) {
        if (is_live(job.state) && job.active) ++load[job.active->site_id];
    }

    std::vector<const Job*> pending;
    for (const auto& [id, job] : session.jobs) {
        if (job.state == JobState::New) pending.push_back(&job);
    }
    for (const auto& [id, job] : session.jobs) {
        if (job.state != JobState::FailedRetryable) continue;
        const Attempt* last = job.last_attempt();
        const Timestamp since = last ? last->ended_at.value_or(last->submitted_at) : now;
        if (now - since >= cfg.retry_backoff) pending.push_back(&job);
    }

    std::vector<Placement> out;
    for (const Job* job : pending) {
        if (capacity == 0) break;
        std::string previous;
        if (job->state == JobState::FailedRetryable && job->last_attempt()) previous = job->last_attempt()->site_id;

        const SiteSpec* best = nullptr;
        for (const SiteSpec* s : eligible) {
            if (eligible.size() >= 2 && !previous.empty() && s->site_id == previous) continue;
            if (!best || load[s->site_id] < load[best->site_id] ||
                (load[s->site_id] == load[best->site_id] && s->site_id < best->site_id)) {
                best = s;
            }
        }
        if (!best) continue;
        ++load[best->site_id];
        --capacity;
        out.push_back({job->id, best->site_id, previous, static_cast<int>(eligible.size())});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

Engine::Engine(EngineConfig config, Backend& backend, Store& store, Clock& clock, fs::path session_root)
    : backend_(backend), store_(store), clock_(clock), root_(fs::absolute(std::move(session_root))) {
    config.validate(backend.simulated());
    session_.config = std::move(config);
    sites_ = backend_.list_sites();
}

fs::path Engine::fetch_dir(const Job& job, int attempt) const {
    return root_ / "fetched" / job.id / fmt::format("attempt_{}", attempt);
}

fs::path Engine::output_dir(const Job& job) const { return job.output_dir; }

void Engine::Batch::touch(const Job& job) {
    if (std::find(heads.begin(), heads.end(), &job) == heads.end()) heads.push_back(&job);
}

void Engine::persist(Batch& batch) {
    if (batch.heads.empty() && batch.attempts.empty()) return;
    store_.commit(batch.heads, batch.attempts);
    batch.heads.clear();
    batch.attempts.clear();
}

void Engine::emit(TraceEvent ev) {
    if (trace_) trace_->push_back(std::move(ev));
}

void Engine::transition(Job& job, JobEvent event, Timestamp now) {
    const JobState from = job.state;
    const JobState to = advance(from, event);
    job.state = to;
    live_ += (is_live(to) ? 1 : 0) - (is_live(from) ? 1 : 0);
    spdlog::debug("{}: {} -> {}", job.id, to_string(from), to_string(to));
    if (trace_) {
        TraceEvent ev;
        ev.kind = TraceEvent::Kind::Transition;
        ev.t = now;
        ev.job_id = job.id;
        ev.from = from;
        ev.to = to;
        ev.site_id = job.active ? job.active->site_id : std::string();
        ev.attempt = job.active ? job.active->index : 0;
        ev.live_after = live_;
        emit(std::move(ev));
    }
}

void Engine::settle_active(Job& job, Batch& batch) {
    batch.attempts.push_back({job.id, *job.active});
    job.attempts.push_back(std::move(*job.active));
    job.active.reset();
    batch.touch(job);
}

void Engine::start(const std::vector<InputBundle>& bundles) {
    if (bundles.empty()) throw ConfigError("empty campaign: no input bundles found");
    if (!session_.jobs.empty()) throw std::logic_error("engine already holds a session");
    const Timestamp now = clock_.now();

    Batch batch;
    for (std::size_t i = 0; i < bundles.size(); ++i) {
        Job job;
        job.id = job_id_for(i + 1);
        job.bundle = bundles[i];
        job.output_dir = root_ / "outputs" / job.bundle.name;
        job.wall_limit = session_.config.wall_limit;
        auto [it, inserted] = session_.jobs.emplace(job.id, std::move(job));
        batch.touch(it->second);
    }
    // Metadata goes last: a session without it never finished starting and
    // nothing in it was submitted.
    persist(batch);
    session_.meta = SessionMeta{};
    session_.meta.started_at = now;
    session_.meta.now = now;
    store_.save_meta(session_.meta);
    live_ = 0;
    credential_ = backend_.credential(now);
    spdlog::info("campaign started: {} jobs", bundles.size());
}

RecoveryReport Engine::resume(const std::vector<InputBundle>* rescanned) {
    RecoveryReport report;
    LoadedSession loaded = store_.load();
    if (!loaded.meta) {
        if (!rescanned || rescanned->empty()) {
            throw StoreError(StoreError::Kind::CorruptRecord, "session has no metadata record");
        }
        spdlog::warn("session never finished starting; starting it again from the rescan");
        session_.jobs.clear();
        start(*rescanned);
        report.restarted = true;
        return report;
    }
    session_.meta = *loaded.meta;
    session_.jobs.clear();
    for (auto& job : loaded.jobs) {
        std::string id = job.id;
        session_.jobs.emplace(std::move(id), std::move(job));
    }
    const Timestamp now = clock_.now();

    Batch batch;
    for (const auto& id : loaded.corrupt) {
        const auto n = job_ordinal(id);
        if (!rescanned || !n || *n > rescanned->size()) {
            throw StoreError(StoreError::Kind::CorruptRecord,
                             fmt::format("record of {} is corrupt and cannot be rebuilt", id), id);
        }
        Job job;
        job.id = id;
        job.bundle = (*rescanned)[*n - 1];
        job.output_dir = root_ / "outputs" / job.bundle.name;
        job.wall_limit = session_.config.wall_limit;
        auto [it, inserted] = session_.jobs.insert_or_assign(id, std::move(job));
        batch.touch(it->second);
        report.recreated.push_back(id);
        spdlog::warn("{} rebuilt as NEW from a rescan", id);
    }

    std::vector<Job*> repromote;
    for (auto& [id, job] : session_.jobs) {
        if (job.active) {
            const int idx = job.active->index;
            auto it = std::find_if(job.attempts.begin(), job.attempts.end(),
                                   [idx](const Attempt& a) { return a.index == idx; });
            if (it != job.attempts.end()) {
                // The settled record landed but the head did not.
                const bool passed = it->validation == Validation::Passed;
                job.active.reset();
                if (job.state == JobState::Validating && passed) {
                    auto v = validate_outputs(fetch_dir(job, idx), job.bundle);
                    if (v.valid) {
                        job.result = v.lnl;
                        job.state = advance(job.state, JobEvent::ValidationPassed);
                        repromote.push_back(&job);
                    } else {
                        spdlog::error("{}: attempt {} was recorded as passed but its outputs no longer validate",
                                      id, idx);
                        job.state = advance(job.state, JobEvent::ValidationFailed);
                    }
                } else if (job.state == JobState::Validating) {
                    job.state = advance(job.state, JobEvent::ValidationFailed);
                } else if (is_live(job.state)) {
                    job.state = advance(job.state, JobEvent::MiddlewareFailed);
                }
                ++report.reset_to_retry;
                batch.touch(job);
            }
        } else if (is_live(job.state) || job.state == JobState::Fetching || job.state == JobState::Validating) {
            spdlog::error("{}: {} without an active attempt; scheduling a retry", id, to_string(job.state));
            job.state = JobState::FailedRetryable;
            batch.touch(job);
        }

        if (job.state == JobState::Fetching) {
            // Never refetch after a crash: validate whatever made it to disk.
            job.state = advance(job.state, JobEvent::Fetched);
            ++report.revalidated;
            batch.touch(job);
        }
        if (job.state == JobState::Done &&
            std::find(repromote.begin(), repromote.end(), &job) == repromote.end()) {
            const Attempt* pass = passing_attempt(job);
            if (pass && read_small(job.output_dir / kMarkerFile) != marker_text(job, pass->index)) {
                repromote.push_back(&job);
            }
        }
    }
    persist(batch);
    for (Job* job : repromote) {
        promote(*job);
        ++report.repromoted;
    }

    live_ = session_.live();
    credential_ = backend_.credential(now);
    spdlog::info("session resumed: {} jobs, {} live", session_.jobs.size(), live_);
    return report;
}

Seconds Engine::lost_after(const std::string& site_id) const {
    if (session_.config.lost_after) return *session_.config.lost_after;
    if (const SiteSpec* s = site(site_id)) return 3 * s->info_lag + s->queue_delay;
    return 3 * kMinPollInterval;
}

const SiteSpec* Engine::site(const std::string& site_id) const {
    auto it = std::find_if(sites_.begin(), sites_.end(), [&](const SiteSpec& s) { return s.site_id == site_id; });
    return it == sites_.end() ? nullptr : &*it;
}

void Engine::fail_middleware(Job& job, ReportedStatus status, std::string why, Timestamp now, Batch& batch) {
    Attempt& a = *job.active;
    if (!a.ended_at) a.ended_at = now;
    a.settle(status, Validation::NotRun, std::move(why));
    spdlog::debug("{} attempt {} failed: {}", job.id, a.index, a.detail);
    transition(job, JobEvent::MiddlewareFailed, now);
    settle_active(job, batch);
}

void Engine::observe(Job& job, Timestamp now, Batch& batch) {
    Attempt& a = *job.active;
    RemoteStatus st;
    try {
        st = backend_.poll(a.remote_id, now);
    } catch (const BackendError& e) {
        if (e.kind() == BackendError::Kind::UnknownRemoteId) {
            fail_middleware(job, ReportedStatus::Lost, e.what(), now, batch);
        } else {
            spdlog::warn("poll {}: {}", a.remote_id, e.what());
        }
        return;
    }

    switch (st.value) {
        case RemoteState::Queued:
            return;
        case RemoteState::Unknown:
            if (now - a.submitted_at >= lost_after(a.site_id)) {
                try {
                    backend_.cancel(a.remote_id, now);
                } catch (const BackendError& e) {
                    spdlog::debug("cancel {}: {}", a.remote_id, e.what());
                }
                fail_middleware(job, ReportedStatus::Lost,
                                fmt::format("no status for {:.0f}s", now - a.submitted_at), now, batch);
            }
            return;
        case RemoteState::Running:
            if (job.state == JobState::Submitted) {
                a.started_at = st.as_of;
                transition(job, JobEvent::Started, now);
                batch.touch(job);
            }
            if (a.started_at && now - *a.started_at > job.wall_limit) {
                try {
                    backend_.cancel(a.remote_id, now);
                } catch (const BackendError& e) {
                    spdlog::warn("cancel {}: {}", a.remote_id, e.what());
                }
                emit({TraceEvent::Kind::Cancel, now, job.id, job.state, job.state, a.site_id, {}, 0, a.index, live_});
                fail_middleware(job, ReportedStatus::Failed,
                                fmt::format("wall-time limit of {:.0f}s exceeded", job.wall_limit), now, batch);
            }
            return;
        case RemoteState::FinishedOk:
        case RemoteState::FinishedFailed:
            if (job.state == JobState::Submitted) {
                if (!a.started_at) a.started_at = st.as_of;
                transition(job, JobEvent::Started, now);
            }
            a.ended_at = st.as_of;
            a.reported_status = st.value == RemoteState::FinishedOk ? ReportedStatus::Ok : ReportedStatus::Failed;
            transition(job, JobEvent::Finished, now);
            batch.touch(job);
            return;
    }
}

void Engine::fetch(Job& job, Timestamp now, Batch& batch) {
    Attempt& a = *job.active;
    const auto dest = fetch_dir(job, a.index);
    std::error_code ec;
    fs::remove_all(dest, ec);
    try {
        backend_.fetch_outputs(a.remote_id, dest, now);
    } catch (const BackendError& e) {
        switch (e.kind()) {
            case BackendError::Kind::NotFinished:
                return;
            case BackendError::Kind::UnknownRemoteId:
                a.detail = e.what();
                break;
            default:
                ++a.transfer_failures;
                batch.touch(job);
                if (a.transfer_failures < session_.config.max_transfer_failures) {
                    spdlog::debug("fetch {}: {} (will retry)", a.remote_id, e.what());
                    return;
                }
                a.detail = fmt::format("fetch failed {} times: {}", a.transfer_failures, e.what());
                break;
        }
    }
    transition(job, JobEvent::Fetched, now);
    batch.touch(job);
}

void Engine::validate(Job& job, Timestamp now, Batch& batch, std::vector<Job*>& promoted) {
    Attempt& a = *job.active;
    const auto v = validate_outputs(fetch_dir(job, a.index), job.bundle);
    a.h0_node = v.h0_node;
    a.h1_node = v.h1_node;
    if (v.valid) {
        a.settle(a.reported_status, Validation::Passed);
        if (a.corrected) spdlog::info("{}: reported failure overridden, outputs are complete", job.id);
        job.result = v.lnl;
        transition(job, JobEvent::ValidationPassed, now);
        promoted.push_back(&job);
    } else {
        a.settle(a.reported_status, Validation::Failed, v.describe());
        transition(job, JobEvent::ValidationFailed, now);
    }
    settle_active(job, batch);
}

void Engine::promote(const Job& job) {
    const Attempt* pass = passing_attempt(job);
    if (!pass) return;
    const auto src = fetch_dir(job, pass->index);
    const auto dst = output_dir(job);
    if (fs::exists(src)) {
        {
            std::ofstream marker(src / kMarkerFile, std::ios::trunc);
            marker << marker_text(job, pass->index);
        }
        fs::remove_all(dst);
        fs::create_directories(dst.parent_path());
        fs::rename(src, dst);
    } else if (read_small(dst / kMarkerFile) != marker_text(job, pass->index)) {
        spdlog::error("{}: outputs of attempt {} are missing", job.id, pass->index);
        return;
    }
    std::error_code ec;
    fs::remove_all(root_ / "fetched" / job.id, ec);

    if (export_dir_) {
        const auto target = *export_dir_ / job.bundle.name;
        if (fs::weakly_canonical(target) != fs::weakly_canonical(dst)) {
            fs::remove_all(target, ec);
            copy_tree(dst, target);
        }
    }
}

void Engine::submit_round(Timestamp now) {
    const auto placements = plan_submissions(session_, sites_, now);
    if (placements.empty()) return;

    Batch batch;
    std::vector<Job*> submitted;
    for (const auto& p : placements) {
        Job& job = session_.jobs.at(p.job_id);
        Attempt a;
        a.index = job.next_attempt_index();
        a.site_id = p.site_id;
        a.remote_id = remote_id_for(p.site_id, job.id, a.index);
        a.sandbox = sandbox_path(root_, job.id, a.index).string();
        a.submitted_at = now;
        job.active = std::move(a);
        transition(job, job.state == JobState::FailedRetryable ? JobEvent::RetryScheduled : JobEvent::Submitted, now);
        emit({TraceEvent::Kind::Submit, now, job.id, job.state, job.state, p.site_id, p.previous_site,
              p.eligible_sites, job.active->index, live_});
        batch.touch(job);
        submitted.push_back(&job);
    }
    persist(batch);

    for (Job* job : submitted) {
        try {
            const auto rid = backend_.submit(*job, job->active->site_id, credential_, now);
            if (rid != job->active->remote_id) {
                spdlog::warn("{}: back-end assigned {} instead of {}", job->id, rid, job->active->remote_id);
            }
        } catch (const BackendError& e) {
            fail_middleware(*job, ReportedStatus::Failed, fmt::format("submission failed: {}", e.what()), now, batch);
        }
    }
    persist(batch);
}

TickOutcome Engine::tick() {
    const Timestamp now = clock_.now();
    session_.meta.now = now;
    ++session_.meta.ticks;
    store_.save_meta(session_.meta);
    emit({TraceEvent::Kind::Tick, now, {}, {}, {}, {}, {}, 0, 0, live_});
    if (session_.terminal()) return {false, true};

    TickOutcome out;
    bool can_submit = credential_.valid_at(now);
    if (!can_submit && credential_.renew(now)) {
        can_submit = true;
        emit({TraceEvent::Kind::CredentialRenewed, now, {}, {}, {}, {}, {}, 0, 0, live_});
    }

    Batch batch;
    for (auto& [id, job] : session_.jobs) {
        if (is_live(job.state)) observe(job, now, batch);
    }
    out.progressed |= !batch.heads.empty();
    persist(batch);

    for (auto& [id, job] : session_.jobs) {
        if (job.state == JobState::Fetching) fetch(job, now, batch);
    }
    out.progressed |= !batch.heads.empty();
    persist(batch);

    std::vector<Job*> promoted;
    for (auto& [id, job] : session_.jobs) {
        if (job.state == JobState::Validating) validate(job, now, batch, promoted);
    }
    out.progressed |= !batch.heads.empty();
    persist(batch);
    for (Job* job : promoted) promote(*job);

    if (const auto& max = session_.config.max_retries) {
        for (auto& [id, job] : session_.jobs) {
            if (job.state == JobState::FailedRetryable && static_cast<int>(job.attempts.size()) > *max) {
                transition(job, JobEvent::RetriesExhausted, now);
                batch.touch(job);
            }
        }
        out.progressed |= !batch.heads.empty();
        persist(batch);
    }

    if (can_submit) {
        const int before = session_.counters().submitted;
        submit_round(now);
        out.progressed |= session_.counters().submitted != before;
    } else {
        const bool waiting = std::any_of(session_.jobs.begin(), session_.jobs.end(), [](const auto& kv) {
            return kv.second.state == JobState::New || kv.second.state == JobState::FailedRetryable;
        });
        if (waiting) {
            spdlog::warn("credential expired and renewal unavailable; submissions paused");
            emit({TraceEvent::Kind::SubmissionsSkipped, now, {}, {}, {}, {}, {}, 0, 0, live_});
        }
    }

    out.terminal = session_.terminal();
    if (out.terminal) {
        session_.meta.finished_at = now;
        store_.save_meta(session_.meta);
        spdlog::info("campaign finished");
    }
    return out;
}

CampaignReport Engine::run(RunLimits limits) {
    const Timestamp t0 = clock_.now();
    std::uint64_t ticks = 0;
    for (;;) {
        const Timestamp t = clock_.now();
        const auto out = tick();
        ++ticks;
        if (out.terminal) break;
        if (limits.max_ticks && ticks >= *limits.max_ticks) break;
        if (limits.max_elapsed && clock_.now() - t0 >= *limits.max_elapsed) break;
        clock_.sleep_until(t + session_.config.poll_interval);
    }
    return make_report(session_);
}

CampaignReport run_campaign(const EngineConfig& config, const std::vector<InputBundle>& bundles, Backend& backend,
                            Store& store, Clock& clock, const fs::path& session_root, RunLimits limits) {
    Engine engine(config, backend, store, clock, session_root);
    engine.start(bundles);
    return engine.run(limits);
}

}  // namespace campaignd
