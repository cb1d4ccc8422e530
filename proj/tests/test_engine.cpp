#include <doctest.h>
#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <memory>

#include "campaignd/engine.hpp"
#include "campaignd/report.hpp"
#include "campaignd/scanner.hpp"
#include "campaignd/sim_backend.hpp"
#include "campaignd/worker.hpp"
#include "fixtures.hpp"

using namespace campaignd;
using campaignd::testing::TempDir;
using campaignd::testing::write_file;
namespace fs = std::filesystem;

namespace {

SiteSpec site(std::string id, int cores, Seconds queue_delay = 30, Seconds lag = 60) {
    SiteSpec s;
    s.site_id = std::move(id);
    s.cores = cores;
    s.rtes = {"CODEML"};
    s.queue_delay = queue_delay;
    s.info_lag = lag;
    return s;
}

/// A generated campaign on the simulator with a virtual clock.
struct Harness {
    TempDir dir{"engine"};
    testing::GeneratedCampaign campaign;
    std::vector<InputBundle> bundles;
    SimConfig sim;
    EngineConfig config;
    VirtualClock clock{1000};
    std::unique_ptr<SimBackend> backend;
    std::unique_ptr<Store> store;
    std::unique_ptr<Engine> engine;
    std::vector<TraceEvent> trace;

    explicit Harness(int jobs, int cores = 64) {
        campaign = testing::generate_campaign(dir / "in", jobs, 11);
        bundles = scan(dir / "in");
        sim.sites.push_back(site("s1", cores));
    }

    fs::path session() const { return dir / "session"; }

    Engine& make(StoreKind kind = StoreKind::Files) {
        engine.reset();
        store.reset();
        if (!backend) backend = std::make_unique<SimBackend>(sim, session() / "remote", ExecutionOptions{});
        store = open_store(kind, session());
        engine = std::make_unique<Engine>(config, *backend, *store, clock, session());
        engine->set_trace(&trace);
        return *engine;
    }

    CampaignReport run(RunLimits limits = {}) {
        auto& e = make();
        e.start(bundles);
        return e.run(limits);
    }
};

Job pending_job(int n, JobState state = JobState::New) {
    Job j;
    j.id = fmt::format("job-{:06d}", n);
    j.state = state;
    return j;
}

Job failed_on(int n, const std::string& site_id) {
    Job j = pending_job(n, JobState::FailedRetryable);
    Attempt a;
    a.index = 1;
    a.site_id = site_id;
    a.ended_at = 0;
    a.settle(ReportedStatus::Failed, Validation::NotRun);
    j.attempts.push_back(a);
    return j;
}

void write_pair(const fs::path& dir, const std::string& h0, const std::string& h1) {
    write_file(dir / "b.H0.out", h0);
    write_file(dir / "b.H1.out", h1);
}

InputBundle pair_bundle() {
    InputBundle b;
    b.name = "b";
    b.h0_outfile = "b.H0.out";
    b.h1_outfile = "b.H1.out";
    return b;
}

std::string outfile(Hypothesis h, double lnl, const std::string& node = "n1") {
    return format_outfile({h, lnl, h == Hypothesis::H0 ? 1.0 : 2.0}, node);
}

}  // namespace

TEST_CASE("validate_outputs") {
    TempDir d("validate");
    const auto b = pair_bundle();

    SUBCASE("valid pair") {
        write_pair(d.path(), outfile(Hypothesis::H0, -6), outfile(Hypothesis::H1, -4));
        const auto v = validate_outputs(d.path(), b);
        CHECK(v.valid);
        CHECK(v.lnl == LnlPair{-6, -4});
        CHECK(v.h0_node == "n1");
        CHECK(v.h1_node == "n1");
    }
    SUBCASE("missing H1") {
        write_file(d / "b.H0.out", outfile(Hypothesis::H0, -6));
        const auto v = validate_outputs(d.path(), b);
        CHECK(v.reason == InvalidReason::MissingFile);
        CHECK(v.file == "b.H1.out");
    }
    SUBCASE("no terminal tag") {
        write_pair(d.path(), outfile(Hypothesis::H0, -6), format_partial_outfile(Hypothesis::H1, "n1"));
        const auto v = validate_outputs(d.path(), b);
        CHECK(v.reason == InvalidReason::MissingTag);
        CHECK(v.file == "b.H1.out");
        CHECK(v.describe().find("b.H1.out") != std::string::npos);
    }
    SUBCASE("unparseable lnL") {
        std::string h0 = outfile(Hypothesis::H0, -6);
        h0.replace(h0.find("-6.000000"), 9, "minus six");
        write_pair(d.path(), h0, outfile(Hypothesis::H1, -4));
        CHECK(validate_outputs(d.path(), b).reason == InvalidReason::UnparseableLnl);
    }
    SUBCASE("two lnL lines") {
        std::string h1 = outfile(Hypothesis::H1, -4);
        h1.insert(0, "lnL = -3.0\n");
        write_pair(d.path(), outfile(Hypothesis::H0, -6), h1);
        CHECK(validate_outputs(d.path(), b).reason == InvalidReason::UnparseableLnl);
    }
    SUBCASE("H1 below H0") {
        write_pair(d.path(), outfile(Hypothesis::H0, -4), outfile(Hypothesis::H1, -6));
        CHECK(validate_outputs(d.path(), b).reason == InvalidReason::NestingViolated);
    }
}

TEST_CASE("plan_submissions") {
    Session s;
    s.config.max_live = 50;
    const std::vector<SiteSpec> two = {site("S", 64), site("T", 64)};

    SUBCASE("fills up to the live cap") {
        for (int i = 1; i <= 100; ++i) s.jobs.emplace(pending_job(i).id, pending_job(i));
        for (int i = 101; i <= 110; ++i) {
            Job j = pending_job(i, JobState::Running);
            j.active = Attempt{};
            j.active->index = 1;
            j.active->site_id = "S";
            s.jobs.emplace(j.id, j);
        }
        const auto picks = plan_submissions(s, two, 0);
        CHECK(picks.size() == 40);
        CHECK(picks.front().job_id == "job-000001");
        // Least loaded first: T starts empty, S holds ten.
        const auto on_s = std::count_if(picks.begin(), picks.end(), [](const Placement& p) { return p.site_id == "S"; });
        CHECK(on_s == 15);
    }
    SUBCASE("retry avoids its previous site") {
        const Job j = failed_on(1, "S");
        s.jobs.emplace(j.id, j);
        auto picks = plan_submissions(s, two, 0);
        REQUIRE(picks.size() == 1);
        CHECK(picks[0].site_id == "T");
        CHECK(picks[0].previous_site == "S");
        CHECK(picks[0].eligible_sites == 2);

        picks = plan_submissions(s, {site("S", 64)}, 0);
        REQUIRE(picks.size() == 1);
        CHECK(picks[0].site_id == "S");
    }
    SUBCASE("new jobs go before retries") {
        s.config.max_live = 1;
        const Job r = failed_on(1, "S");
        s.jobs.emplace(r.id, r);
        s.jobs.emplace("job-000002", pending_job(2));
        const auto picks = plan_submissions(s, two, 0);
        REQUIRE(picks.size() == 1);
        CHECK(picks[0].job_id == "job-000002");
    }
    SUBCASE("ineligible sites") {
        s.jobs.emplace("job-000001", pending_job(1));
        auto down = site("S", 64);
        down.downtime_windows = {{0, 100}};
        auto bare = site("T", 64);
        bare.rtes.clear();
        CHECK(plan_submissions(s, {down, bare}, 50).empty());
        CHECK(plan_submissions(s, {down, bare}, 100).size() == 1);
        s.config.ship_executable = "/bin/worker";
        CHECK(plan_submissions(s, {down, bare}, 50).at(0).site_id == "T");
    }
    SUBCASE("retry backoff") {
        s.config.retry_backoff = 600;
        const Job j = failed_on(1, "S");
        s.jobs.emplace(j.id, j);
        CHECK(plan_submissions(s, two, 599).empty());
        CHECK(plan_submissions(s, two, 600).size() == 1);
    }
}

TEST_CASE("empty campaign is rejected") {
    Harness h(1);
    auto& e = h.make();
    CHECK_THROWS_AS(e.start({}), ConfigError);
}

TEST_CASE("fault-free campaign of twelve jobs") {
    Harness h(12);
    const auto report = h.run();
    CHECK(report.complete());
    CHECK(report.retries == 0);
    CHECK(report.corrected_errors == 0);
    for (const auto& [id, job] : h.engine->session().jobs) {
        CHECK(job.state == JobState::Done);
        CHECK(job.attempts.size() == 1);
        const auto& want = h.campaign.expected.at(job.bundle.name);
        REQUIRE(job.result);
        CHECK(job.result->lnl0 == doctest::Approx(want.lnl0).epsilon(1e-9));
        CHECK(job.result->lnl1 == doctest::Approx(want.lnl1).epsilon(1e-9));
        CHECK(testing::read_file(job.output_dir / ".attempt") == id + " 1\n");
        CHECK(validate_outputs(job.output_dir, job.bundle).valid);
        CHECK(job.output_dir == h.session() / "outputs" / job.bundle.name);
    }
    CHECK_FALSE(fs::exists(h.session() / "fetched" / "job-000001"));
    CHECK(h.engine->session().meta.finished_at.has_value());

    SUBCASE("ticks after the end do nothing") {
        const auto before = h.trace.size();
        const auto meta = h.engine->session().meta;
        const auto t = h.engine->tick();
        CHECK(t.terminal);
        CHECK_FALSE(t.progressed);
        for (std::size_t i = before; i < h.trace.size(); ++i) CHECK(h.trace[i].kind == TraceEvent::Kind::Tick);
        CHECK(h.engine->session().meta.finished_at == meta.finished_at);
    }
}

TEST_CASE("reported failures with complete outputs are corrected") {
    Harness h(5);
    h.sim.faults.p_spurious_fail = 1;
    const auto report = h.run();
    CHECK(report.complete());
    CHECK(report.corrected_errors == 5);
    CHECK(report.retries == 0);
    for (const auto& [id, job] : h.engine->session().jobs) {
        REQUIRE(job.attempts.size() == 1);
        CHECK(job.attempts[0].reported_status == ReportedStatus::Failed);
        CHECK(job.attempts[0].corrected);
    }
}

TEST_CASE("retries run out") {
    Harness h(2);
    h.sim.faults.p_node_crash = 1;
    h.config.max_retries = 2;
    const auto report = h.run();
    CHECK(report.done == 0);
    CHECK(report.failed == 2);
    for (const auto& [id, job] : h.engine->session().jobs) {
        CHECK(job.state == JobState::FailedPermanent);
        CHECK(job.attempts.size() == 3);
        CHECK(job.attempts.back().validation == Validation::Failed);
    }
    CHECK(report.per_job.at(0).reason.find(h.bundles[0].h1_outfile) != std::string::npos);
}

TEST_CASE("a job past its wall-time limit is cancelled and retried") {
    Harness h(2);
    h.sim.durations.spread = 0;
    h.sim.faults.duration_overrides = {{"job-000001", 1, 10 * 3600}};
    const auto report = h.run();
    CHECK(report.complete());
    const auto& job = h.engine->session().jobs.at("job-000001");
    REQUIRE(job.attempts.size() == 2);
    const auto& first = job.attempts[0];
    CHECK(first.detail.find("wall-time limit") != std::string::npos);
    REQUIRE(first.started_at);

    const auto cancel = std::find_if(h.trace.begin(), h.trace.end(),
                                     [](const TraceEvent& e) { return e.kind == TraceEvent::Kind::Cancel; });
    REQUIRE(cancel != h.trace.end());
    // The attempt truly started when the site took it (start + queue delay).
    const Timestamp true_start = first.submitted_at + 30;
    CHECK(cancel->t >= true_start + 8 * 3600);
    CHECK(cancel->t <= true_start + 8 * 3600 + h.config.poll_interval + 60);
    CHECK(h.engine->session().jobs.at("job-000002").attempts.size() == 1);
}

TEST_CASE("no submissions during a credential outage") {
    Harness h(8, 2);
    h.config.max_live = 2;
    h.sim.credential.lifetime = 60;
    h.sim.faults.credential_outage_windows = {{1000 + 600, 1000 + 4200}};
    const auto report = h.run();
    CHECK(report.complete());
    int skipped = 0;
    for (const auto& e : h.trace) {
        if (e.kind == TraceEvent::Kind::Submit) CHECK_FALSE((e.t >= 1600 && e.t < 4200 + 1000));
        skipped += e.kind == TraceEvent::Kind::SubmissionsSkipped;
    }
    CHECK(skipped > 0);
}

TEST_CASE("a proxy still valid at outage onset keeps submitting until it expires") {
    Harness h(8, 2);
    h.config.max_live = 2;
    h.sim.faults.credential_outage_windows = {{1000 + 600, 1000 + 4200}};  // 12h default lifetime
    const auto report = h.run();
    CHECK(report.complete());
    int inside = 0;
    for (const auto& e : h.trace) inside += e.kind == TraceEvent::Kind::Submit && e.t >= 1600 && e.t < 5200;
    CHECK(inside > 0);
}

TEST_CASE("lost attempts are detected and retried") {
    Harness h(3);
    h.sim.sites.push_back(site("s2", 8));
    h.sim.sites[0].p_lost = 1;
    h.config.max_live = 3;
    const auto report = h.run();
    CHECK(report.complete());
    for (const auto& [id, job] : h.engine->session().jobs) {
        if (job.attempts.size() == 2) {
            CHECK(job.attempts[0].reported_status == ReportedStatus::Lost);
            CHECK(job.attempts[0].site_id == "s1");
            CHECK(job.attempts[1].site_id == "s2");
        } else {
            CHECK(job.attempts.at(0).site_id == "s2");
        }
    }
}

TEST_CASE_TEMPLATE_DEFINE("resume repairs jobs caught mid-flight", T, resume_repairs) {
    constexpr StoreKind kind = T::value;
    Harness h(4);
    {
        auto& e = h.make(kind);
        e.start(h.bundles);
        e.run({.max_ticks = std::nullopt, .max_elapsed = 300});
    }
    const Session before = h.engine->session();
    for (const auto& [id, job] : before.jobs) REQUIRE(job.state == JobState::Running);

    // Hand-edit the durable state into the shapes a crash can leave.
    h.engine.reset();
    {
        auto& s = *h.store;
        for (const char* id : {"job-000001", "job-000004"}) {
            Job fetching = before.jobs.at(id);
            fetching.state = JobState::Fetching;
            fetching.active->ended_at = h.clock.now();
            s.save_job(fetching);
        }

        Job no_attempt = before.jobs.at("job-000002");
        no_attempt.state = JobState::Submitted;
        no_attempt.active.reset();
        s.save_job(no_attempt);

        // Settled record written, head still VALIDATING.
        Job settled = before.jobs.at("job-000003");
        const auto& want = h.campaign.expected.at(settled.bundle.name);
        const auto fetched = h.session() / "fetched" / settled.id / "attempt_1";
        write_file(fetched / settled.bundle.h0_outfile, format_outfile({Hypothesis::H0, want.lnl0, 1}, "n"));
        write_file(fetched / settled.bundle.h1_outfile, format_outfile({Hypothesis::H1, want.lnl1, 1}, "n"));
        Attempt a = *settled.active;
        a.ended_at = h.clock.now();
        a.settle(ReportedStatus::Ok, Validation::Passed);
        settled.state = JobState::Validating;
        s.record_attempt(settled.id, a);
        s.save_job(settled);
    }

    auto& e = h.make(kind);
    const auto rec = e.resume();
    CHECK(rec.revalidated == 2);
    CHECK(rec.reset_to_retry == 1);
    CHECK(rec.repromoted == 1);
    const auto& jobs = e.session().jobs;
    CHECK(jobs.at("job-000001").state == JobState::Validating);
    CHECK(jobs.at("job-000002").state == JobState::FailedRetryable);
    CHECK(jobs.at("job-000003").state == JobState::Done);
    CHECK(testing::read_file(jobs.at("job-000003").output_dir / ".attempt") == "job-000003 1\n");

    const auto report = e.run();
    CHECK(report.complete());
    // Nothing was fetched for 1 and 4, so their revalidation fails and they retry.
    CHECK(jobs.at("job-000001").attempts.size() == 2);
    CHECK(jobs.at("job-000001").attempts[0].validation == Validation::Failed);
    CHECK(jobs.at("job-000002").attempts.size() == 1);
    CHECK(jobs.at("job-000003").attempts.size() == 1);
}

TEST_CASE_TEMPLATE_INVOKE(resume_repairs, std::integral_constant<StoreKind, StoreKind::Sqlite>,
                          std::integral_constant<StoreKind, StoreKind::Files>);

TEST_CASE("resume rebuilds corrupt records from a rescan") {
    Harness h(3);
    {
        auto& e = h.make();
        e.start(h.bundles);
        e.run({.max_ticks = 1, .max_elapsed = std::nullopt});
    }
    h.engine.reset();
    h.store.reset();
    write_file(h.session() / "jobs/job-000002/record.json", "{");

    {
        auto store = open_store(StoreKind::Files, h.session());
        Engine e(h.config, *h.backend, *store, h.clock, h.session());
        CHECK_THROWS_AS(e.resume(), StoreError);
    }
    // The failed attempt quarantined the record; the id stays owed a rebuild.
    auto& e = h.make();
    const auto rec = e.resume(&h.bundles);
    CHECK(rec.recreated == std::vector<std::string>{"job-000002"});
    CHECK(e.session().jobs.at("job-000002").state == JobState::New);
    CHECK(e.session().jobs.at("job-000002").bundle == h.bundles[1]);
    CHECK(e.run().complete());
}

TEST_CASE("a start cut short is started again on resume") {
    Harness h(5);
    {
        auto& e = h.make();
        int writes = 0;
        h.store->set_write_fault_hook([&] {
            if (++writes == 3) throw std::runtime_error("killed");
        });
        CHECK_THROWS_AS(e.start(h.bundles), StoreError);
    }
    {
        auto& e = h.make();
        CHECK_THROWS_AS(e.resume(), StoreError);
    }
    auto& e = h.make();
    const auto rec = e.resume(&h.bundles);
    CHECK(rec.restarted);
    CHECK(e.session().jobs.size() == 5);
    CHECK(e.run().complete());
}
