#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "store_internal.hpp"

namespace fs = std::filesystem;

namespace campaignd::detail {

namespace {

[[noreturn]] void io_failure(const std::string& what) { throw StoreError(StoreError::Kind::IoFailure, what); }

void fsync_path(const fs::path& p, int flags) {
    const int fd = ::open(p.c_str(), flags | O_CLOEXEC);
    if (fd < 0) io_failure(fmt::format("open {}: {}", p.string(), std::strerror(errno)));
    const int rc = ::fsync(fd);
    ::close(fd);
    if (rc != 0) io_failure(fmt::format("fsync {}: {}", p.string(), std::strerror(errno)));
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) io_failure(fmt::format("cannot read {}", p.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// `attempt_<n>.json` -> n
std::optional<int> attempt_file_index(const std::string& name) {
    constexpr std::string_view prefix = "attempt_";
    constexpr std::string_view suffix = ".json";
    if (!name.starts_with(prefix) || !name.ends_with(suffix)) return std::nullopt;
    const char* b = name.data() + prefix.size();
    const char* e = name.data() + name.size() - suffix.size();
    int n = 0;
    auto [p, ec] = std::from_chars(b, e, n);
    if (ec != std::errc() || p != e) return std::nullopt;
    return n;
}

/// One directory per job, one file per record, each replaced atomically with
/// write-temp, fsync, rename, fsync(dir).
class FileStore final : public Store {
public:
    FileStore(const fs::path& session_dir, OpenMode mode) : root_(session_dir), read_only_(mode == OpenMode::ReadOnly) {
        if (read_only_) return;
        lock_.emplace(session_dir);
        std::error_code ec;
        fs::create_directories(root_ / "jobs", ec);
        if (ec) io_failure(fmt::format("cannot create {}: {}", (root_ / "jobs").string(), ec.message()));
    }

    std::string_view kind() const override { return "files"; }

    void commit(const std::vector<const Job*>& heads, const std::vector<AttemptRecord>& attempts) override {
        if (read_only_) read_only_write();
        for (const auto& rec : attempts) {
            const auto dir = job_dir(rec.job_id);
            const bool head_pending = std::any_of(heads.begin(), heads.end(),
                                                  [&](const Job* j) { return j->id == rec.job_id; });
            if (!head_pending && !fs::exists(dir / "record.json")) {
                throw StoreError(StoreError::Kind::UnknownJob, fmt::format("no job {}", rec.job_id), rec.job_id);
            }
            const auto file = dir / fmt::format("attempt_{}.json", rec.attempt.index);
            if (fs::exists(file)) continue;  // replay of an already recorded attempt
            write_atomic(dir, file, encode_attempt(rec.attempt));
        }
        for (const Job* job : heads) {
            const auto dir = job_dir(job->id);
            write_atomic(dir, dir / "record.json", encode_job_head(*job));
        }
    }

    void save_meta(const SessionMeta& meta) override {
        if (read_only_) read_only_write();
        write_atomic(root_, root_ / "meta.json", encode_meta(meta));
    }

    LoadedSession load() override {
        LoadedSession out;
        const auto meta_file = root_ / "meta.json";
        if (fs::exists(meta_file)) out.meta = decode_meta(read_file(meta_file));

        std::vector<fs::path> dirs;
        if (!fs::is_directory(root_ / "jobs")) return out;
        for (const auto& entry : fs::directory_iterator(root_ / "jobs")) {
            if (entry.is_directory()) dirs.push_back(entry.path());
        }
        std::sort(dirs.begin(), dirs.end());

        for (const auto& dir : dirs) {
            const std::string id = dir.filename().string();
            try {
                out.jobs.push_back(load_job(dir, id));
            } catch (const StoreError& e) {
                if (e.kind() != StoreError::Kind::CorruptRecord) throw;
                if (read_only_) {
                    spdlog::error("job {} is corrupt: {}", id, e.what());
                } else {
                    spdlog::error("quarantining job {}: {}", id, e.what());
                    quarantine(dir, id);
                }
                out.corrupt.push_back(id);
            }
        }
        // Quarantined earlier and not rebuilt since.
        std::error_code ec;
        for (const auto& entry : fs::directory_iterator(root_ / "quarantine", ec)) {
            std::string id = entry.path().filename().string();
            if (const auto dot = id.find('.'); dot != std::string::npos) id.resize(dot);
            if (!fs::exists(job_dir(id) / "record.json")) out.corrupt.push_back(id);
        }
        std::sort(out.corrupt.begin(), out.corrupt.end());
        out.corrupt.erase(std::unique(out.corrupt.begin(), out.corrupt.end()), out.corrupt.end());
        return out;
    }

private:
    fs::path job_dir(const std::string& id) const { return root_ / "jobs" / id; }

    Job load_job(const fs::path& dir, const std::string& id) {
        const auto head = dir / "record.json";
        if (!fs::exists(head)) {
            throw StoreError(StoreError::Kind::CorruptRecord, fmt::format("job {} has no record", id), id);
        }
        Job job = decode_job_head(read_file(head));
        if (job.id != id) {
            throw StoreError(StoreError::Kind::CorruptRecord,
                             fmt::format("record in {} names job {}", dir.string(), job.id), id);
        }
        std::map<int, Attempt> settled;
        for (const auto& entry : fs::directory_iterator(dir)) {
            auto n = attempt_file_index(entry.path().filename().string());
            if (!n) continue;
            Attempt a = decode_attempt(read_file(entry.path()));
            if (a.index != *n) {
                throw StoreError(StoreError::Kind::CorruptRecord,
                                 fmt::format("{} holds attempt {}", entry.path().string(), a.index), id);
            }
            settled.emplace(a.index, std::move(a));
        }
        for (auto& [n, a] : settled) job.attempts.push_back(std::move(a));
        return job;
    }

    void quarantine(const fs::path& dir, const std::string& id) {
        const auto qdir = root_ / "quarantine";
        fs::create_directories(qdir);
        auto target = qdir / id;
        for (int i = 1; fs::exists(target); ++i) target = qdir / fmt::format("{}.{}", id, i);
        fs::rename(dir, target);
    }

    void write_atomic(const fs::path& dir, const fs::path& file, const std::string& data) {
        std::error_code ec;
        fs::create_directories(dir, ec);
        if (ec) io_failure(fmt::format("cannot create {}: {}", dir.string(), ec.message()));
        auto tmp = file;
        tmp += ".tmp";
        {
            const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
            if (fd < 0) io_failure(fmt::format("open {}: {}", tmp.string(), std::strerror(errno)));
            const char* p = data.data();
            std::size_t left = data.size();
            while (left > 0) {
                const ssize_t n = ::write(fd, p, left);
                if (n < 0 && errno == EINTR) continue;
                if (n < 0) {
                    const int err = errno;
                    ::close(fd);
                    fs::remove(tmp, ec);
                    io_failure(fmt::format("write {}: {}", tmp.string(), std::strerror(err)));
                }
                p += n;
                left -= static_cast<std::size_t>(n);
            }
            if (::fsync(fd) != 0 || ::close(fd) != 0) {
                fs::remove(tmp, ec);
                io_failure(fmt::format("flush {}: {}", tmp.string(), std::strerror(errno)));
            }
        }
        try {
            before_visible_write();
        } catch (const StoreError&) {
            fs::remove(tmp, ec);
            throw;
        } catch (const std::exception& e) {
            fs::remove(tmp, ec);
            io_failure(fmt::format("write {}: {}", file.string(), e.what()));
        }
        if (::rename(tmp.c_str(), file.c_str()) != 0) {
            const int err = errno;
            fs::remove(tmp, ec);
            io_failure(fmt::format("rename {}: {}", file.string(), std::strerror(err)));
        }
        fsync_path(dir, O_RDONLY | O_DIRECTORY);
    }

    fs::path root_;
    bool read_only_;
    std::optional<SessionLock> lock_;
};

}  // namespace

std::unique_ptr<Store> make_file_store(const fs::path& session_dir, OpenMode mode) {
    return std::make_unique<FileStore>(session_dir, mode);
}

}  // namespace campaignd::detail
