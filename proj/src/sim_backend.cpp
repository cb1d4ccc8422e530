#include "campaignd/sim_backend.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <json.hpp>

#include "campaignd/scanner.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace campaignd {

namespace {

constexpr std::uint64_t kSaltFaults = 0x6661756c74ULL;
constexpr std::uint64_t kSaltDuration = 0x6475726174ULL;

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out.flush()) throw BackendError(BackendError::Kind::Io, fmt::format("cannot write {}", path.string()));
}

std::vector<Interval> windows_from_json(const json& j) {
    std::vector<Interval> out;
    for (const auto& w : j) out.push_back({w.at(0).get<double>(), w.at(1).get<double>()});
    return out;
}

json windows_to_json(const std::vector<Interval>& ws) {
    json out = json::array();
    for (const auto& w : ws) out.push_back({w.start, w.end});
    return out;
}

void check_windows(const std::vector<Interval>& ws, const std::string& what) {
    for (std::size_t i = 0; i < ws.size(); ++i) {
        if (!(ws[i].end > ws[i].start)) throw ConfigError(fmt::format("{}: empty or inverted window", what));
        if (i > 0 && ws[i].start < ws[i - 1].end) {
            throw ConfigError(fmt::format("{}: windows must be sorted and non-overlapping", what));
        }
    }
}

void check_probability(double p, const std::string& what) {
    if (!(p >= 0 && p <= 1)) throw ConfigError(fmt::format("{} must be in [0, 1]", what));
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

SeededStream::SeededStream(std::uint64_t seed, const std::string& key, std::uint64_t salt)
    : engine_(splitmix(splitmix(seed ^ salt) ^ fnv1a(key))) {}

double SeededStream::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

Seconds DurationModel::sample(std::uint64_t seed, const std::string& job_id) const {
    SeededStream rng(seed, job_id, kSaltDuration);
    const double u = 2 * rng.uniform() - 1;
    return std::max(1.0, std::round(base_minutes * 60 * (1 + spread * u)));
}

void SimConfig::validate() const {
    std::set<std::string> ids;
    for (const auto& s : sites) {
        if (s.site_id.empty()) throw ConfigError("site without an id");
        if (!ids.insert(s.site_id).second) throw ConfigError(fmt::format("site `{}` defined twice", s.site_id));
        if (s.cores < 1) throw ConfigError(fmt::format("site `{}`: cores must be >= 1", s.site_id));
        if (s.queue_delay < 0 || s.info_lag < 0) {
            throw ConfigError(fmt::format("site `{}`: negative delay", s.site_id));
        }
        check_windows(s.downtime_windows, fmt::format("site `{}` downtime", s.site_id));
        if (s.p_lost) check_probability(*s.p_lost, fmt::format("site `{}` p_lost", s.site_id));
    }
    check_probability(faults.p_spurious_fail, "p_spurious_fail");
    check_probability(faults.p_lost, "p_lost");
    check_probability(faults.p_node_crash, "p_node_crash");
    check_probability(faults.p_transfer_fail, "p_transfer_fail");
    if (faults.p_spurious_fail + faults.p_lost + faults.p_node_crash > 1) {
        throw ConfigError("fault probabilities sum above 1");
    }
    check_windows(faults.credential_outage_windows, "credential outage");
    if (durations.base_minutes <= 0 || durations.spread < 0 || durations.spread >= 1) {
        throw ConfigError("duration model needs base_minutes > 0 and 0 <= spread < 1");
    }
    if (credential.lifetime <= 0) throw ConfigError("credential lifetime must be positive");
}

SimConfig SimConfig::from_json_text(const std::string& text) {
    SimConfig c;
    try {
        const json j = json::parse(text);
        for (const auto& s : j.value("sites", json::array())) {
            SiteSpec site;
            site.site_id = s.at("id").get<std::string>();
            site.cores = s.value("cores", 1);
            for (const auto& r : s.value("rtes", json::array())) site.rtes.insert(r.get<std::string>());
            site.queue_delay = s.value("queue_delay", 0.0);
            site.info_lag = s.value("info_lag", 60.0);
            site.downtime_windows = windows_from_json(s.value("downtime", json::array()));
            if (s.contains("p_lost")) site.p_lost = s.at("p_lost").get<double>();
            c.sites.push_back(std::move(site));
        }
        c.faults.seed = j.value("seed", std::uint64_t{0});
        if (j.contains("faults")) {
            const json& f = j.at("faults");
            c.faults.p_spurious_fail = f.value("p_spurious_fail", 0.0);
            c.faults.p_lost = f.value("p_lost", 0.0);
            c.faults.p_node_crash = f.value("p_node_crash", 0.0);
            c.faults.p_transfer_fail = f.value("p_transfer_fail", 0.0);
            c.faults.credential_outage_windows = windows_from_json(f.value("credential_outage", json::array()));
            for (const auto& o : f.value("duration_overrides", json::array())) {
                c.faults.duration_overrides.push_back(
                    {o.at("job").get<std::string>(), o.value("attempt", 1), o.at("seconds").get<double>()});
            }
        }
        if (j.contains("durations")) {
            c.durations.base_minutes = j.at("durations").value("base_minutes", 25.0);
            c.durations.spread = j.at("durations").value("spread", 0.3);
        }
        if (j.contains("credential")) {
            c.credential.lifetime = j.at("credential").value("lifetime", 12.0 * 3600);
            c.credential.renewable = j.at("credential").value("renewable", true);
        }
    } catch (const json::exception& e) {
        throw ConfigError(fmt::format("simulator config: {}", e.what()));
    }
    c.validate();
    return c;
}

SimConfig SimConfig::load(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError(fmt::format("cannot read simulator config {}", path.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return from_json_text(ss.str());
}

std::string SimConfig::to_json_text() const {
    json j;
    j["seed"] = faults.seed;
    j["sites"] = json::array();
    for (const auto& s : sites) {
        json site = {{"id", s.site_id},
                     {"cores", s.cores},
                     {"rtes", std::vector<std::string>(s.rtes.begin(), s.rtes.end())},
                     {"queue_delay", s.queue_delay},
                     {"info_lag", s.info_lag},
                     {"downtime", windows_to_json(s.downtime_windows)}};
        if (s.p_lost) site["p_lost"] = *s.p_lost;
        j["sites"].push_back(std::move(site));
    }
    json overrides = json::array();
    for (const auto& o : faults.duration_overrides) {
        overrides.push_back({{"job", o.job_id}, {"attempt", o.attempt}, {"seconds", o.seconds}});
    }
    j["faults"] = {{"p_spurious_fail", faults.p_spurious_fail},
                   {"p_lost", faults.p_lost},
                   {"p_node_crash", faults.p_node_crash},
                   {"p_transfer_fail", faults.p_transfer_fail},
                   {"credential_outage", windows_to_json(faults.credential_outage_windows)},
                   {"duration_overrides", overrides}};
    j["durations"] = {{"base_minutes", durations.base_minutes}, {"spread", durations.spread}};
    j["credential"] = {{"lifetime", credential.lifetime}, {"renewable", credential.renewable}};
    return j.dump(2);
}

std::string_view to_string(FaultKind k) {
    switch (k) {
        case FaultKind::SpuriousFail: return "spurious_fail";
        case FaultKind::Lost: return "lost";
        case FaultKind::NodeCrash: return "node_crash";
        case FaultKind::DowntimeCrash: return "downtime_crash";
        case FaultKind::TransferFail: return "transfer_fail";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// Simulator
// ---------------------------------------------------------------------------

SimBackend::SimBackend(SimConfig config, fs::path session_root, ExecutionOptions options)
    : config_(std::move(config)), root_(std::move(session_root)), options_(std::move(options)) {
    config_.validate();
    sites_.resize(config_.sites.size());
    for (std::size_t i = 0; i < config_.sites.size(); ++i) {
        sites_[i].cores.resize(static_cast<std::size_t>(config_.sites[i].cores));
        for (const auto& w : config_.sites[i].downtime_windows) push(w.start, EvType::DowntimeStart, i);
    }
}

std::vector<SiteSpec> SimBackend::list_sites() const {
    if (config_.sites.empty()) throw BackendError(BackendError::Kind::ConfigMissing, "simulator has no sites");
    return config_.sites;
}

Credential SimBackend::credential(Timestamp now) {
    Credential c;
    c.lifetime = config_.credential.lifetime;
    c.renewable = config_.credential.renewable;
    auto outages = config_.faults.credential_outage_windows;
    c.renewal_service_available = [outages](Timestamp t) { return !in_any(outages, t); };
    c.valid_until = c.service_up(now) ? now + c.lifetime : now;
    return c;
}

std::string SimBackend::submit(const Job& job, const std::string& site_id, const Credential& credential,
                               Timestamp now) {
    if (!job.active) throw std::logic_error("submit without an active attempt");
    advance_to(now);
    const auto site_it = std::find_if(config_.sites.begin(), config_.sites.end(),
                                      [&](const SiteSpec& s) { return s.site_id == site_id; });
    if (site_it == config_.sites.end()) {
        throw BackendError(BackendError::Kind::UnknownSite, fmt::format("no site `{}`", site_id));
    }
    const auto site = static_cast<std::size_t>(site_it - config_.sites.begin());
    const SiteSpec& spec = *site_it;

    if (!credential.valid_at(now)) {
        throw BackendError(BackendError::Kind::CredentialExpired, "proxy certificate expired");
    }
    if (spec.down_at(now)) throw BackendError(BackendError::Kind::SiteDown, fmt::format("site `{}` is down", site_id));
    if (!spec.rtes.contains(options_.required_rte) && !options_.ship_executable) {
        throw BackendError(BackendError::Kind::RteMissing,
                           fmt::format("site `{}` does not provide {}", site_id, options_.required_rte));
    }

    const int attempt = job.active->index;
    std::string rid = remote_id_for(site_id, job.id, attempt);
    if (by_id_.contains(rid)) return rid;

    Run r;
    r.remote_id = rid;
    r.job_id = job.id;
    r.attempt = attempt;
    r.site = site;
    r.bundle = job.bundle;
    r.sandbox = sandbox_path(root_, job.id, attempt);
    r.submitted_at = now;

    const FaultPlan& plan = config_.faults;
    SeededStream rng(plan.seed, fmt::format("{}#{}", job.id, attempt), kSaltFaults);
    const double p_lost = spec.p_lost.value_or(plan.p_lost);
    const double u = rng.uniform();
    if (u < p_lost) {
        r.planned = Outcome::Lost;
    } else if (u < p_lost + plan.p_node_crash) {
        r.planned = Outcome::NodeCrash;
    } else if (u < p_lost + plan.p_node_crash + plan.p_spurious_fail) {
        r.planned = Outcome::SpuriousFail;
    }
    r.crash_fraction = 0.1 + 0.8 * rng.uniform();
    r.transfer_fail_pending = rng.uniform() < plan.p_transfer_fail;

    r.duration = config_.durations.sample(plan.seed, job.id);
    for (const auto& o : plan.duration_overrides) {
        if (o.job_id == job.id && o.attempt == attempt) r.duration = o.seconds;
    }

    const std::size_t idx = runs_.size();
    runs_.push_back(std::move(r));
    by_id_.emplace(rid, idx);
    record(SimEventKind::Submit, runs_[idx], now);

    if (runs_[idx].planned == Outcome::Lost) {
        faults_.push_back({FaultKind::Lost, job.id, attempt, site_id, now});
        record(SimEventKind::Lost, runs_[idx], now);
    } else {
        push(now + spec.queue_delay, EvType::Arrive, idx);
        advance_to(now);
    }
    return rid;
}

RemoteStatus SimBackend::poll(const std::string& remote_id, Timestamp now) {
    advance_to(now);
    const Run& r = lookup(remote_id);
    const Timestamp as_of = now - config_.sites[r.site].info_lag;
    return {state_at(r, as_of), as_of};
}

Manifest SimBackend::fetch_outputs(const std::string& remote_id, const fs::path& dest, Timestamp now) {
    advance_to(now);
    Run& r = lookup(remote_id);
    const RemoteState visible = state_at(r, now - config_.sites[r.site].info_lag);
    if (visible != RemoteState::FinishedOk && visible != RemoteState::FinishedFailed) {
        throw BackendError(BackendError::Kind::NotFinished, fmt::format("{} has not finished", remote_id));
    }
    if (r.transfer_fail_pending) {
        r.transfer_fail_pending = false;
        faults_.push_back({FaultKind::TransferFail, r.job_id, r.attempt, config_.sites[r.site].site_id, now});
        throw BackendError(BackendError::Kind::TransferFailed, fmt::format("transfer of {} failed", remote_id));
    }
    if (!fs::exists(r.sandbox)) {
        fs::create_directories(dest);
        return {};
    }
    return copy_tree(r.sandbox, dest);
}

CancelAck SimBackend::cancel(const std::string& remote_id, Timestamp now) {
    advance_to(now);
    Run& r = lookup(remote_id);
    if (r.planned == Outcome::Lost) {
        if (r.cancelled) return CancelAck::AlreadyTerminal;
        r.cancelled = true;
        record(SimEventKind::Cancel, r, now);
        return CancelAck::Cancelled;
    }
    if (r.ended_at) return CancelAck::AlreadyTerminal;
    r.cancelled = true;
    r.ended_at = now;
    r.end_state = RemoteState::FinishedFailed;
    const std::size_t site = r.site;
    release_core(r);
    record(SimEventKind::Cancel, r, now);
    try_start(site, now);
    return CancelAck::Cancelled;
}

RemoteState SimBackend::true_state(const std::string& remote_id, Timestamp t) const {
    return state_at(lookup(remote_id), t);
}

std::size_t SimBackend::fault_count(FaultKind kind) const {
    return static_cast<std::size_t>(
        std::count_if(faults_.begin(), faults_.end(), [kind](const FaultRecord& f) { return f.kind == kind; }));
}

std::string SimBackend::trace_text() const {
    static constexpr std::string_view names[] = {"submit", "start", "end", "crash", "cancel", "lost"};
    std::string out;
    for (const auto& e : trace_) {
        out += fmt::format("{:.3f} {} {} {} {}\n", e.t, names[static_cast<int>(e.kind)], e.remote_id, e.site_id,
                           e.running_after);
    }
    return out;
}

RemoteState SimBackend::state_at(const Run& r, Timestamp t) {
    if (r.planned == Outcome::Lost) return RemoteState::Unknown;
    if (r.ended_at && t >= *r.ended_at) return r.end_state;
    if (r.started_at && t >= *r.started_at) return RemoteState::Running;
    return RemoteState::Queued;
}

void SimBackend::advance_to(Timestamp t) {
    while (!events_.empty() && events_.top().t <= t) {
        const Ev ev = events_.top();
        events_.pop();
        clock_ = std::max(clock_, ev.t);
        switch (ev.type) {
            case EvType::DowntimeStart:
                crash_site(ev.target, ev.t);
                break;
            case EvType::Arrive: {
                Run& r = runs_[ev.target];
                if (r.ended_at) break;
                if (config_.sites[r.site].down_at(ev.t)) {
                    r.ended_at = ev.t;
                    r.end_state = RemoteState::FinishedFailed;
                    faults_.push_back({FaultKind::DowntimeCrash, r.job_id, r.attempt, config_.sites[r.site].site_id,
                                       ev.t});
                    record(SimEventKind::Crash, r, ev.t);
                    break;
                }
                sites_[r.site].queue.push_back(ev.target);
                try_start(r.site, ev.t);
                break;
            }
            case EvType::End:
                finish(ev.target, ev.t);
                break;
        }
    }
    clock_ = std::max(clock_, t);
}

void SimBackend::push(Timestamp t, EvType type, std::size_t target) { events_.push({t, seq_++, type, target}); }

void SimBackend::try_start(std::size_t site, Timestamp t) {
    SiteRuntime& rt = sites_[site];
    while (!rt.queue.empty()) {
        auto free_core = std::find(rt.cores.begin(), rt.cores.end(), std::nullopt);
        if (free_core == rt.cores.end()) return;
        const std::size_t idx = rt.queue.front();
        rt.queue.pop_front();
        Run& r = runs_[idx];
        if (r.ended_at) continue;
        *free_core = idx;
        r.core = static_cast<int>(free_core - rt.cores.begin());
        r.started_at = t;
        ++rt.running;
        record(SimEventKind::Start, r, t);
        const Seconds run_for = r.planned == Outcome::NodeCrash ? r.duration * r.crash_fraction : r.duration;
        push(t + run_for, EvType::End, idx);
    }
}

void SimBackend::finish(std::size_t idx, Timestamp t) {
    Run& r = runs_[idx];
    if (r.ended_at) return;
    r.ended_at = t;
    const std::string& site_id = config_.sites[r.site].site_id;
    switch (r.planned) {
        case Outcome::Ok:
            r.end_state = RemoteState::FinishedOk;
            write_outputs(r, true);
            break;
        case Outcome::SpuriousFail:
            r.end_state = RemoteState::FinishedFailed;
            write_outputs(r, true);
            faults_.push_back({FaultKind::SpuriousFail, r.job_id, r.attempt, site_id, t});
            break;
        case Outcome::NodeCrash:
            r.end_state = RemoteState::FinishedFailed;
            write_outputs(r, false);
            faults_.push_back({FaultKind::NodeCrash, r.job_id, r.attempt, site_id, t});
            break;
        case Outcome::Lost:
            break;
    }
    const std::size_t site = r.site;
    release_core(r);
    record(SimEventKind::End, r, t);
    try_start(site, t);
}

void SimBackend::crash_site(std::size_t site, Timestamp t) {
    for (std::size_t idx = 0; idx < runs_.size(); ++idx) {
        Run& r = runs_[idx];
        if (r.site != site || r.ended_at || r.planned == Outcome::Lost) continue;
        r.ended_at = t;
        r.end_state = RemoteState::FinishedFailed;
        if (r.started_at) write_outputs(r, false);
        release_core(r);
        faults_.push_back({FaultKind::DowntimeCrash, r.job_id, r.attempt, config_.sites[site].site_id, t});
        record(SimEventKind::Crash, r, t);
    }
    sites_[site].queue.clear();
}

void SimBackend::release_core(Run& r) {
    if (r.core < 0) return;
    SiteRuntime& rt = sites_[r.site];
    rt.cores[static_cast<std::size_t>(r.core)].reset();
    --rt.running;
}

void SimBackend::write_outputs(const Run& r, bool complete) {
    const std::string node = fmt::format("{}/node{:03}", config_.sites[r.site].site_id, r.core);
    fs::create_directories(r.sandbox);
    const std::pair<LikelihoodResult, LikelihoodResult>* results = nullptr;
    try {
        results = &results_for(r.bundle);
    } catch (const std::exception&) {
        // A real worker would have exited non-zero leaving only headers.
        complete = false;
    }
    if (complete) {
        write_text(r.sandbox / r.bundle.h0_outfile, format_outfile(results->first, node));
        write_text(r.sandbox / r.bundle.h1_outfile, format_outfile(results->second, node));
    } else {
        if (results != nullptr) {
            write_text(r.sandbox / r.bundle.h0_outfile, format_outfile(results->first, node));
        } else {
            write_text(r.sandbox / r.bundle.h0_outfile, format_partial_outfile(Hypothesis::H0, node));
        }
        write_text(r.sandbox / r.bundle.h1_outfile, format_partial_outfile(Hypothesis::H1, node));
    }
}

const std::pair<LikelihoodResult, LikelihoodResult>& SimBackend::results_for(const InputBundle& bundle) {
    auto it = results_.find(bundle.name);
    if (it != results_.end()) return it->second;
    LikelihoodResult h0 = evaluate(parse_ctl(bundle.h0_ctl), bundle.h0_ctl.parent_path());
    LikelihoodResult h1 = evaluate(parse_ctl(bundle.h1_ctl), bundle.h1_ctl.parent_path());
    return results_.emplace(bundle.name, std::make_pair(h0, h1)).first->second;
}

SimBackend::Run& SimBackend::lookup(const std::string& remote_id) {
    auto it = by_id_.find(remote_id);
    if (it == by_id_.end()) {
        throw BackendError(BackendError::Kind::UnknownRemoteId, fmt::format("unknown remote id {}", remote_id));
    }
    return runs_[it->second];
}

const SimBackend::Run& SimBackend::lookup(const std::string& remote_id) const {
    auto it = by_id_.find(remote_id);
    if (it == by_id_.end()) {
        throw BackendError(BackendError::Kind::UnknownRemoteId, fmt::format("unknown remote id {}", remote_id));
    }
    return runs_[it->second];
}

void SimBackend::record(SimEventKind kind, const Run& r, Timestamp t) {
    trace_.push_back({t, kind, r.remote_id, config_.sites[r.site].site_id, sites_[r.site].running});
}

}  // namespace campaignd
