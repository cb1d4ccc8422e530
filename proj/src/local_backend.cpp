#include "campaignd/local_backend.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include <fmt/format.h>

extern char** environ;

namespace fs = std::filesystem;

namespace campaignd {

namespace {

std::string host_name() {
    char buf[256] = {};
    if (::gethostname(buf, sizeof buf - 1) != 0) return "localhost";
    return buf;
}

}  // namespace

LocalBackend::LocalBackend(fs::path session_root, ExecutionOptions options, int parallelism, fs::path installed_worker)
    : root_(std::move(session_root)),
      options_(std::move(options)),
      parallelism_(parallelism),
      worker_(options_.ship_executable.value_or(std::move(installed_worker))),
      node_(host_name()) {
    if (parallelism_ < 1) throw ConfigError("local parallelism must be at least 1");
    if (worker_.empty() || ::access(worker_.c_str(), X_OK) != 0) {
        throw BackendError(BackendError::Kind::ConfigMissing,
                           fmt::format("worker executable `{}` not found or not executable", worker_.string()));
    }
    worker_ = fs::absolute(worker_);
    for (int i = 0; i < parallelism_; ++i) slots_.emplace_back([this] { run_slot(); });
}

LocalBackend::~LocalBackend() {
    {
        std::lock_guard lock(mu_);
        stopping_ = true;
        for (auto& [id, task] : tasks_) {
            if (task->pid > 0) ::kill(task->pid, SIGKILL);
        }
    }
    cv_.notify_all();
    for (auto& t : slots_) t.join();
}

std::vector<SiteSpec> LocalBackend::list_sites() const {
    SiteSpec site;
    site.site_id = kSiteId;
    site.cores = parallelism_;
    site.rtes = {options_.required_rte};
    site.queue_delay = 0;
    site.info_lag = 0;
    return {site};
}

Credential LocalBackend::credential(Timestamp now) {
    Credential c;
    c.valid_until = now + c.lifetime;
    return c;
}

std::string LocalBackend::submit(const Job& job, const std::string& site_id, const Credential& credential,
                                 Timestamp now) {
    if (!job.active) throw std::logic_error("submit without an active attempt");
    if (site_id != kSiteId) throw BackendError(BackendError::Kind::UnknownSite, fmt::format("no site `{}`", site_id));
    if (!credential.valid_at(now)) {
        throw BackendError(BackendError::Kind::CredentialExpired, "proxy certificate expired");
    }
    std::string rid = remote_id_for(site_id, job.id, job.active->index);
    {
        std::lock_guard lock(mu_);
        if (tasks_.contains(rid)) return rid;
    }

    auto task = std::make_unique<Task>();
    task->remote_id = rid;
    task->sandbox = sandbox_path(root_, job.id, job.active->index);
    std::error_code ec;
    fs::remove_all(task->sandbox, ec);
    try {
        auto [h0, h1] = stage_inputs(job.bundle, task->sandbox);
        task->h0_ctl = std::move(h0);
        task->h1_ctl = std::move(h1);
    } catch (const fs::filesystem_error& e) {
        throw BackendError(BackendError::Kind::Io, fmt::format("staging {}: {}", job.id, e.what()));
    } catch (const std::runtime_error& e) {
        throw BackendError(BackendError::Kind::Io, fmt::format("staging {}: {}", job.id, e.what()));
    }

    {
        std::lock_guard lock(mu_);
        Task* raw = task.get();
        tasks_.emplace(rid, std::move(task));
        queue_.push_back(raw);
    }
    cv_.notify_one();
    return rid;
}

RemoteStatus LocalBackend::poll(const std::string& remote_id, Timestamp now) {
    std::lock_guard lock(mu_);
    return {lookup(remote_id).state, now};
}

Manifest LocalBackend::fetch_outputs(const std::string& remote_id, const fs::path& dest, Timestamp) {
    fs::path sandbox;
    {
        std::lock_guard lock(mu_);
        const Task& t = lookup(remote_id);
        if (t.state != RemoteState::FinishedOk && t.state != RemoteState::FinishedFailed) {
            throw BackendError(BackendError::Kind::NotFinished, fmt::format("{} has not finished", remote_id));
        }
        sandbox = t.sandbox;
    }
    try {
        return copy_tree(sandbox, dest);
    } catch (const fs::filesystem_error& e) {
        throw BackendError(BackendError::Kind::TransferFailed, e.what());
    }
}

CancelAck LocalBackend::cancel(const std::string& remote_id, Timestamp) {
    std::lock_guard lock(mu_);
    Task& t = lookup(remote_id);
    if (t.state == RemoteState::FinishedOk || t.state == RemoteState::FinishedFailed) {
        return CancelAck::AlreadyTerminal;
    }
    t.cancelled = true;
    if (t.pid > 0) {
        ::kill(t.pid, SIGKILL);
    } else {
        // Still queued: the slot thread skips it.
        t.state = RemoteState::FinishedFailed;
    }
    return CancelAck::Cancelled;
}

LocalBackend::Task& LocalBackend::lookup(const std::string& remote_id) {
    auto it = tasks_.find(remote_id);
    if (it == tasks_.end()) {
        throw BackendError(BackendError::Kind::UnknownRemoteId, fmt::format("unknown remote id {}", remote_id));
    }
    return *it->second;
}

void LocalBackend::run_slot() {
    for (;;) {
        Task* task = nullptr;
        {
            std::unique_lock lock(mu_);
            cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
            if (stopping_) return;
            task = queue_.front();
            queue_.pop_front();
            if (task->cancelled) continue;
        }
        execute(*task);
    }
}

void LocalBackend::execute(Task& task) {
    // Everything the child needs is prepared before fork().
    const std::string worker = worker_.string();
    const std::string sandbox = task.sandbox.string();
    const std::string log = (task.sandbox / "worker.log").string();
    std::vector<char*> argv{const_cast<char*>(worker.c_str()), task.h0_ctl.data(), task.h1_ctl.data(), nullptr};
    std::vector<std::string> env_store;
    for (char** e = environ; *e != nullptr; ++e) {
        if (std::strncmp(*e, "CAMPAIGND_NODE=", 15) != 0) env_store.emplace_back(*e);
    }
    env_store.push_back("CAMPAIGND_NODE=" + node_);
    std::vector<char*> envp;
    for (auto& s : env_store) envp.push_back(s.data());
    envp.push_back(nullptr);

    std::unique_lock lock(mu_);
    if (task.cancelled || stopping_) {
        task.state = RemoteState::FinishedFailed;
        return;
    }
    const pid_t pid = ::fork();
    if (pid == 0) {
        if (::chdir(sandbox.c_str()) != 0) ::_exit(126);
        const int fd = ::open(log.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
        if (fd >= 0) {
            ::dup2(fd, STDOUT_FILENO);
            ::dup2(fd, STDERR_FILENO);
            ::close(fd);
        }
        ::execve(worker.c_str(), argv.data(), envp.data());
        ::_exit(127);
    }
    if (pid < 0) {
        task.state = RemoteState::FinishedFailed;
        return;
    }
    task.pid = pid;
    task.state = RemoteState::Running;
    lock.unlock();

    // Wait without reaping so the pid cannot be recycled while cancel() may still signal it.
    siginfo_t info{};
    while (::waitid(P_PID, static_cast<id_t>(pid), &info, WEXITED | WNOWAIT) != 0 && errno == EINTR) {
    }

    lock.lock();
    int status = 0;
    ::waitpid(pid, &status, 0);
    task.pid = -1;
    const bool ok = !task.cancelled && WIFEXITED(status) && WEXITSTATUS(status) == 0;
    task.state = ok ? RemoteState::FinishedOk : RemoteState::FinishedFailed;
}

}  // namespace campaignd
