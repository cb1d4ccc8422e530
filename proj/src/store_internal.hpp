#pragma once

#include <filesystem>
#include <memory>

#include "campaignd/store.hpp"

namespace campaignd::detail {

/// flock(LOCK_EX | LOCK_NB) on `<session>/lock`, released on destruction.
class SessionLock {
public:
    SessionLock() = default;
    explicit SessionLock(const std::filesystem::path& session_dir);
    ~SessionLock();
    SessionLock(const SessionLock&) = delete;
    SessionLock& operator=(const SessionLock&) = delete;

private:
    int fd_ = -1;
};

std::unique_ptr<Store> make_file_store(const std::filesystem::path& session_dir, OpenMode mode);
std::unique_ptr<Store> make_sqlite_store(const std::filesystem::path& session_dir, OpenMode mode);

[[noreturn]] void read_only_write();

}  // namespace campaignd::detail
