#pragma once

#include <sys/types.h>

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include "campaignd/backend.hpp"

namespace campaignd {

/// Runs the worker executable as real child processes on this machine, at
/// most `parallelism` at a time, FIFO. Presents itself as a single site.
class LocalBackend final : public Backend {
public:
    static constexpr const char* kSiteId = "local";

    LocalBackend(std::filesystem::path session_root, ExecutionOptions options, int parallelism,
                 std::filesystem::path installed_worker);
    ~LocalBackend() override;

    LocalBackend(const LocalBackend&) = delete;
    LocalBackend& operator=(const LocalBackend&) = delete;

    bool simulated() const override { return false; }
    std::vector<SiteSpec> list_sites() const override;
    Credential credential(Timestamp now) override;
    std::string submit(const Job& job, const std::string& site_id, const Credential& credential,
                       Timestamp now) override;
    RemoteStatus poll(const std::string& remote_id, Timestamp now) override;
    Manifest fetch_outputs(const std::string& remote_id, const std::filesystem::path& dest, Timestamp now) override;
    CancelAck cancel(const std::string& remote_id, Timestamp now) override;

    const std::filesystem::path& worker_path() const noexcept { return worker_; }

private:
    struct Task {
        std::string remote_id;
        std::filesystem::path sandbox;
        std::string h0_ctl;
        std::string h1_ctl;
        RemoteState state = RemoteState::Queued;
        pid_t pid = -1;
        bool cancelled = false;
    };

    void run_slot();
    void execute(Task& task);
    Task& lookup(const std::string& remote_id);

    std::filesystem::path root_;
    ExecutionOptions options_;
    int parallelism_;
    std::filesystem::path worker_;
    std::string node_;

    std::mutex mu_;
    std::condition_variable cv_;
    std::deque<Task*> queue_;
    std::unordered_map<std::string, std::unique_ptr<Task>> tasks_;
    bool stopping_ = false;
    std::vector<std::thread> slots_;
};

}  // namespace campaignd
