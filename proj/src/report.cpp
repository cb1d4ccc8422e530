#include "campaignd/report.hpp"

#include <fstream>

#include <fmt/format.h>

namespace campaignd {

CampaignReport make_report(const Session& session) {
    CampaignReport r;
    const auto c = session.counters();
    const Timestamp end = session.meta.finished_at.value_or(session.meta.now);
    r.total_wall = std::max(0.0, end - session.meta.started_at);
    r.jobs_total = static_cast<int>(session.jobs.size());
    r.done = c.done;
    r.failed = r.jobs_total - r.done;
    r.retries = c.retries;
    r.corrected_errors = c.corrected_errors;

    for (const auto& [id, job] : session.jobs) {
        for (const auto& a : job.attempts) ++r.per_site_counts[a.site_id];
        if (job.active) ++r.per_site_counts[job.active->site_id];

        JobSummary s;
        s.job_id = id;
        s.bundle = job.bundle.name;
        s.attempts = job.attempt_count();
        s.state = job.state;
        if (const Attempt* last = job.last_attempt()) {
            s.final_site = last->site_id;
            if (last->started_at && last->ended_at) s.wall_seconds = std::max(0.0, *last->ended_at - *last->started_at);
            if (job.state != JobState::Done) s.reason = last->detail;
        }
        r.per_job.push_back(std::move(s));
    }
    return r;
}

std::string format_summary(const CampaignReport& r) {
    std::string out;
    out += fmt::format("jobs: {} total, {} done, {} not done\n", r.jobs_total, r.done, r.failed);
    out += fmt::format("total wall: {:.0f}s ({:.2f}h)\n", r.total_wall, r.total_wall / 3600);
    out += fmt::format("retries: {}\n", r.retries);
    out += fmt::format("corrected_errors: {}\n", r.corrected_errors);
    out += "attempts per site:\n";
    for (const auto& [site, n] : r.per_site_counts) out += fmt::format("  {}: {}\n", site, n);
    for (const auto& j : r.per_job) {
        if (j.state == JobState::Done) continue;
        out += fmt::format("  {} {} after {} attempt(s): {}\n", j.job_id, to_string(j.state), j.attempts,
                           j.reason.empty() ? "-" : j.reason);
    }
    return out;
}

void write_job_csv(const CampaignReport& r, std::ostream& out) {
    out << "job_id,attempts,final_site,wall_seconds,state\n";
    for (const auto& j : r.per_job) {
        out << fmt::format("{},{},{},{:.3f},{}\n", j.job_id, j.attempts, j.final_site, j.wall_seconds,
                           to_string(j.state));
    }
}

void write_job_csv(const CampaignReport& r, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", path.string()));
    write_job_csv(r, out);
}

std::vector<LrtRecord> collect_lrt(const Session& session, double threshold) {
    std::vector<LrtRecord> rows;
    for (const auto& [id, job] : session.jobs) {
        if (job.state != JobState::Done || !job.result) continue;
        rows.push_back(lrt(job.bundle.name, job.result->lnl0, job.result->lnl1, threshold));
    }
    if (rows.empty()) throw NoCompletedJobs();
    std::sort(rows.begin(), rows.end(),
              [](const LrtRecord& a, const LrtRecord& b) { return a.bundle_name < b.bundle_name; });
    return rows;
}

void write_lrt_csv(const std::vector<LrtRecord>& rows, std::ostream& out) {
    out << "bundle,lnL0,lnL1,lrt,significant\n";
    for (const auto& r : rows) {
        out << fmt::format("{},{:.6f},{:.6f},{:.6f},{}\n", r.bundle_name, r.lnl0, r.lnl1, r.lrt,
                           r.significant ? "true" : "false");
    }
}

}  // namespace campaignd
