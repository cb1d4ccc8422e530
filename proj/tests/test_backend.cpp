#include <doctest.h>

#include <fmt/format.h>

#include <chrono>
#include <cstdlib>
#include <thread>

#include "campaignd/engine.hpp"
#include "campaignd/local_backend.hpp"
#include "campaignd/scanner.hpp"
#include "campaignd/sim_backend.hpp"
#include "fixtures.hpp"

using namespace campaignd;
using campaignd::testing::TempDir;
namespace fs = std::filesystem;

namespace {

SiteSpec site(std::string id, int cores, Seconds queue_delay = 0, Seconds lag = 60) {
    SiteSpec s;
    s.site_id = std::move(id);
    s.cores = cores;
    s.rtes = {"CODEML"};
    s.queue_delay = queue_delay;
    s.info_lag = lag;
    return s;
}

/// One-bundle input tree plus a job with an active attempt ready to submit.
struct Fixture {
    TempDir dir{"backend"};
    std::vector<InputBundle> bundles;

    explicit Fixture(int n = 1) {
        testing::generate_campaign(dir / "in", n, 7);
        bundles = scan(dir / "in");
    }

    Job job(std::size_t i, int attempt = 1) const {
        Job j;
        j.id = fmt::format("job-{:06d}", i + 1);
        j.bundle = bundles[i];
        Attempt a;
        a.index = attempt;
        j.active = a;
        return j;
    }
};

Credential forever() {
    Credential c;
    c.valid_until = 1e12;
    return c;
}

SimConfig one_site(int cores = 1, Seconds queue_delay = 0, Seconds lag = 60) {
    SimConfig c;
    c.sites.push_back(site("s1", cores, queue_delay, lag));
    c.durations.spread = 0;  // every job takes 1500 s
    return c;
}

RemoteState wait_local(LocalBackend& b, const std::string& rid) {
    for (int i = 0; i < 500; ++i) {
        const auto st = b.poll(rid, 0).value;
        if (st == RemoteState::FinishedOk || st == RemoteState::FinishedFailed) return st;
        std::this_thread::sleep_for(std::chrono::milliseconds(20));
    }
    return RemoteState::Unknown;
}

}  // namespace

TEST_CASE("sim lists configured sites in order") {
    SimConfig c;
    for (int i = 0; i < 5; ++i) c.sites.push_back(site(fmt::format("site{}", 5 - i), 4));
    SimBackend sim(c, "/tmp/unused", {});
    const auto sites = sim.list_sites();
    REQUIRE(sites.size() == 5);
    CHECK(sites[0].site_id == "site5");
    CHECK(sites[4].site_id == "site1");

    SimBackend empty(SimConfig{}, "/tmp/unused", {});
    try {
        empty.list_sites();
        FAIL("expected ConfigMissing");
    } catch (const BackendError& e) {
        CHECK(e.kind() == BackendError::Kind::ConfigMissing);
    }
}

TEST_CASE("sim submission preconditions") {
    Fixture f;
    SimConfig c = one_site();
    c.sites.push_back(site("bare", 1));
    c.sites.back().rtes.clear();
    SimBackend sim(c, f.dir / "remote", {});

    auto kind_of = [&](auto&& call) {
        try {
            call();
        } catch (const BackendError& e) {
            return e.kind();
        }
        FAIL("no error");
        return BackendError::Kind::Io;
    };
    CHECK(kind_of([&] { sim.submit(f.job(0), "bare", forever(), 0); }) == BackendError::Kind::RteMissing);
    CHECK(kind_of([&] { sim.submit(f.job(0), "nope", forever(), 0); }) == BackendError::Kind::UnknownSite);
    Credential expired;
    expired.valid_until = 10;
    CHECK(kind_of([&] { sim.submit(f.job(0), "s1", expired, 10); }) == BackendError::Kind::CredentialExpired);
    CHECK(kind_of([&] { sim.cancel("s1:job-000001:9", 0); }) == BackendError::Kind::UnknownRemoteId);

    SimBackend shipped(c, f.dir / "remote2", {"CODEML", fs::path("/bin/true")});
    CHECK_NOTHROW(shipped.submit(f.job(0), "bare", forever(), 0));
}

TEST_CASE("sim runs immediately on an idle site and reports with lag") {
    Fixture f;
    SimBackend sim(one_site(1, 0, 60), f.dir / "remote", {});
    const auto rid = sim.submit(f.job(0), "s1", forever(), 100);
    CHECK(rid == "s1:job-000001:1");
    CHECK(sim.true_state(rid, 100) == RemoteState::Running);
    CHECK(sim.poll(rid, 100 + 60 - 1).value == RemoteState::Queued);
    CHECK(sim.poll(rid, 100 + 60).value == RemoteState::Running);
    try {
        sim.fetch_outputs(rid, f.dir / "early", 200);
        FAIL("expected NotFinished");
    } catch (const BackendError& e) {
        CHECK(e.kind() == BackendError::Kind::NotFinished);
    }
    CHECK(sim.poll(rid, 100 + 1500 + 59).value == RemoteState::Running);
    const auto st = sim.poll(rid, 100 + 1500 + 60);
    CHECK(st.value == RemoteState::FinishedOk);
    CHECK(st.as_of == 1600);

    const auto manifest = sim.fetch_outputs(rid, f.dir / "got", 1700);
    std::set<std::string> names;
    for (const auto& m : manifest) names.insert(m.path.string());
    CHECK(names.contains(f.bundles[0].h0_outfile));
    CHECK(names.contains(f.bundles[0].h1_outfile));
    CHECK(validate_outputs(f.dir / "got", f.bundles[0]).valid);
}

TEST_CASE("sim queues FIFO on busy cores") {
    Fixture f(3);
    SimBackend sim(one_site(1, 0, 0), f.dir / "remote", {});
    const auto a = sim.submit(f.job(0), "s1", forever(), 0);
    const auto b = sim.submit(f.job(1), "s1", forever(), 0);
    const auto c = sim.submit(f.job(2), "s1", forever(), 0);
    CHECK(sim.true_state(a, 0) == RemoteState::Running);
    CHECK(sim.true_state(b, 0) == RemoteState::Queued);
    sim.poll(c, 3000);
    CHECK(sim.true_state(b, 1500) == RemoteState::Running);
    CHECK(sim.true_state(c, 1500) == RemoteState::Queued);
    CHECK(sim.true_state(c, 3000) == RemoteState::Running);
    for (const auto& e : sim.trace()) CHECK(e.running_after <= 1);
}

TEST_CASE("sim fault outcomes") {
    Fixture f;
    SUBCASE("spurious failure keeps complete outputs") {
        SimConfig c = one_site(1, 0, 0);
        c.faults.p_spurious_fail = 1;
        SimBackend sim(c, f.dir / "remote", {});
        const auto rid = sim.submit(f.job(0), "s1", forever(), 0);
        CHECK(sim.poll(rid, 2000).value == RemoteState::FinishedFailed);
        sim.fetch_outputs(rid, f.dir / "got", 2000);
        CHECK(validate_outputs(f.dir / "got", f.bundles[0]).valid);
        CHECK(sim.fault_count(FaultKind::SpuriousFail) == 1);
    }
    SUBCASE("node crash leaves H1 untagged") {
        SimConfig c = one_site(1, 0, 0);
        c.faults.p_node_crash = 1;
        SimBackend sim(c, f.dir / "remote", {});
        const auto rid = sim.submit(f.job(0), "s1", forever(), 0);
        CHECK(sim.poll(rid, 2000).value == RemoteState::FinishedFailed);
        sim.fetch_outputs(rid, f.dir / "got", 2000);
        const auto v = validate_outputs(f.dir / "got", f.bundles[0]);
        CHECK_FALSE(v.valid);
        CHECK(v.reason == InvalidReason::MissingTag);
        CHECK(v.file == f.bundles[0].h1_outfile);
        CHECK(v.h0_node == v.h1_node);
        CHECK(sim.fault_count(FaultKind::NodeCrash) == 1);
    }
    SUBCASE("lost attempt is never visible") {
        SimConfig c = one_site(1, 0, 0);
        c.faults.p_lost = 1;
        SimBackend sim(c, f.dir / "remote", {});
        const auto rid = sim.submit(f.job(0), "s1", forever(), 0);
        for (Timestamp t : {0.0, 100.0, 10000.0}) CHECK(sim.poll(rid, t).value == RemoteState::Unknown);
        CHECK(sim.fault_count(FaultKind::Lost) == 1);
    }
    SUBCASE("transfer failure happens once") {
        SimConfig c = one_site(1, 0, 0);
        c.faults.p_transfer_fail = 1;
        SimBackend sim(c, f.dir / "remote", {});
        const auto rid = sim.submit(f.job(0), "s1", forever(), 0);
        CHECK_THROWS_AS(sim.fetch_outputs(rid, f.dir / "got", 2000), BackendError);
        CHECK_NOTHROW(sim.fetch_outputs(rid, f.dir / "got", 2100));
    }
}

TEST_CASE("sim downtime crashes running and arriving work") {
    Fixture f(2);
    SimConfig c = one_site(1, 300, 0);
    c.sites[0].downtime_windows = {{1000, 2000}};
    SimBackend sim(c, f.dir / "remote", {});
    const auto a = sim.submit(f.job(0), "s1", forever(), 0);    // starts at 300
    const auto b = sim.submit(f.job(1), "s1", forever(), 800);  // arrives at 1100, inside the window
    CHECK(sim.poll(a, 1500).value == RemoteState::FinishedFailed);
    CHECK(sim.poll(b, 1500).value == RemoteState::FinishedFailed);
    CHECK(sim.fault_count(FaultKind::DowntimeCrash) == 2);
    try {
        sim.submit(f.job(0, 2), "s1", forever(), 1500);
        FAIL("expected SiteDown");
    } catch (const BackendError& e) {
        CHECK(e.kind() == BackendError::Kind::SiteDown);
    }
}

TEST_CASE("sim cancel") {
    Fixture f;
    SimBackend sim(one_site(1, 0, 60), f.dir / "remote", {});
    const auto rid = sim.submit(f.job(0), "s1", forever(), 0);
    CHECK(sim.cancel(rid, 100) == CancelAck::Cancelled);
    CHECK(sim.cancel(rid, 110) == CancelAck::AlreadyTerminal);
    CHECK(sim.poll(rid, 159).value == RemoteState::Running);
    CHECK(sim.poll(rid, 160).value == RemoteState::FinishedFailed);
}

TEST_CASE("sim fault draws depend only on seed, job and attempt") {
    Fixture f(20);
    SimConfig c = one_site(20, 0, 0);
    c.faults.seed = 42;
    c.faults.p_spurious_fail = 0.3;
    c.faults.p_node_crash = 0.3;
    auto outcomes = [&](bool reverse) {
        SimBackend sim(c, f.dir / (reverse ? "r" : "f"), {});
        std::vector<int> order(20);
        for (int i = 0; i < 20; ++i) order[static_cast<std::size_t>(i)] = reverse ? 19 - i : i;
        for (int i : order) sim.submit(f.job(static_cast<std::size_t>(i)), "s1", forever(), 0);
        std::map<std::string, RemoteState> out;
        for (int i = 0; i < 20; ++i) {
            const auto rid = remote_id_for("s1", f.job(static_cast<std::size_t>(i)).id, 1);
            out[rid] = sim.poll(rid, 5000).value;
        }
        return out;
    };
    const auto a = outcomes(false);
    const auto b = outcomes(true);
    CHECK(a == b);
    int failed = 0;
    for (const auto& [rid, st] : a) failed += st == RemoteState::FinishedFailed;
    CHECK(failed > 0);
    CHECK(failed < 20);
}

TEST_CASE("sim config json round trip") {
    SimConfig c = one_site(3, 30, 60);
    c.sites[0].downtime_windows = {{10, 20}};
    c.sites[0].p_lost = 0.25;
    c.faults.seed = 9;
    c.faults.p_spurious_fail = 0.01;
    c.faults.credential_outage_windows = {{100, 200}};
    c.faults.duration_overrides = {{"job-000001", 1, 36000}};
    c.credential.lifetime = 60;
    const SimConfig back = SimConfig::from_json_text(c.to_json_text());
    CHECK(back.to_json_text() == c.to_json_text());
    CHECK(back.sites[0].p_lost == 0.25);
    CHECK(back.faults.duration_overrides.at(0).seconds == 36000);
    CHECK_THROWS_AS(SimConfig::from_json_text(R"({"sites":[{"id":"a","cores":0}]})"), ConfigError);
}

TEST_CASE("local back-end runs the worker") {
    Fixture f(2);
    SUBCASE("single synthetic site") {
        LocalBackend b(f.dir / "remote", {}, 4, CAMPAIGND_TEST_WORKER);
        const auto sites = b.list_sites();
        REQUIRE(sites.size() == 1);
        CHECK(sites[0].cores == 4);
        CHECK(sites[0].site_id == "local");
    }
    SUBCASE("success path") {
        LocalBackend b(f.dir / "remote", {}, 2, CAMPAIGND_TEST_WORKER);
        const auto rid = b.submit(f.job(0), "local", forever(), 0);
        CHECK(wait_local(b, rid) == RemoteState::FinishedOk);
        b.fetch_outputs(rid, f.dir / "got", 0);
        const auto v = validate_outputs(f.dir / "got", f.bundles[0]);
        CHECK(v.valid);
        CHECK_FALSE(v.h0_node.empty());
        CHECK(v.h0_node == v.h1_node);
    }
    SUBCASE("worker failure leaves an untagged outfile") {
        ::setenv("CAMPAIGND_WORKER_FAIL", "H1", 1);
        LocalBackend b(f.dir / "remote", {}, 1, CAMPAIGND_TEST_WORKER);
        const auto rid = b.submit(f.job(1), "local", forever(), 0);
        const auto st = wait_local(b, rid);
        ::unsetenv("CAMPAIGND_WORKER_FAIL");
        CHECK(st == RemoteState::FinishedFailed);
        b.fetch_outputs(rid, f.dir / "got", 0);
        CHECK(validate_outputs(f.dir / "got", f.bundles[1]).reason == InvalidReason::MissingTag);
    }
    SUBCASE("cancel kills a running worker") {
        ::setenv("CAMPAIGND_WORKER_DELAY_MS", "5000", 1);
        LocalBackend b(f.dir / "remote", {}, 1, CAMPAIGND_TEST_WORKER);
        const auto rid = b.submit(f.job(0), "local", forever(), 0);
        const auto queued = b.submit(f.job(1), "local", forever(), 0);
        for (int i = 0; i < 100 && b.poll(rid, 0).value != RemoteState::Running; ++i) {
            std::this_thread::sleep_for(std::chrono::milliseconds(10));
        }
        CHECK(b.cancel(queued, 0) == CancelAck::Cancelled);
        CHECK(b.poll(queued, 0).value == RemoteState::FinishedFailed);
        const auto t0 = std::chrono::steady_clock::now();
        CHECK(b.cancel(rid, 0) == CancelAck::Cancelled);
        CHECK(wait_local(b, rid) == RemoteState::FinishedFailed);
        CHECK(std::chrono::steady_clock::now() - t0 < std::chrono::seconds(3));
        CHECK(b.cancel(rid, 0) == CancelAck::AlreadyTerminal);
        ::unsetenv("CAMPAIGND_WORKER_DELAY_MS");
    }
    SUBCASE("missing worker") {
        CHECK_THROWS_AS(LocalBackend(f.dir / "remote", {}, 1, f.dir / "no-such-worker"), BackendError);
    }
}
