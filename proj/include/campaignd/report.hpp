#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "campaignd/engine.hpp"
#include "campaignd/worker.hpp"

namespace campaignd {

struct JobSummary {
    std::string job_id;
    std::string bundle;
    int attempts = 0;
    std::string final_site;
    Seconds wall_seconds = 0;  ///< run time of the last attempt, 0 when it never started
    JobState state = JobState::New;
    std::string reason;  ///< why the last attempt failed, for jobs not DONE
};

struct CampaignReport {
    Seconds total_wall = 0;  ///< session start to finish (or to the last checkpoint)
    int jobs_total = 0;
    int done = 0;
    int failed = 0;  ///< jobs_total - done
    int retries = 0;
    int corrected_errors = 0;
    std::map<std::string, int> per_site_counts;  ///< attempts per site
    std::vector<JobSummary> per_job;             ///< sorted by job id

    bool complete() const { return jobs_total > 0 && done == jobs_total; }
};

CampaignReport make_report(const Session& session);

std::string format_summary(const CampaignReport& report);

/// `job_id,attempts,final_site,wall_seconds,state`
void write_job_csv(const CampaignReport& report, std::ostream& out);
void write_job_csv(const CampaignReport& report, const std::filesystem::path& path);

class NoCompletedJobs : public std::runtime_error {
public:
    NoCompletedJobs() : std::runtime_error("no completed jobs in session") {}
};

/// LRT rows over all DONE jobs, ordered by bundle name. Throws NoCompletedJobs.
std::vector<LrtRecord> collect_lrt(const Session& session, double threshold = kDefaultLrtThreshold);

/// `bundle,lnL0,lnL1,lrt,significant`
void write_lrt_csv(const std::vector<LrtRecord>& rows, std::ostream& out);

}  // namespace campaignd
