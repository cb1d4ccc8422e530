#include "campaignd/backend.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include <fmt/format.h>

#include "campaignd/scanner.hpp"

namespace fs = std::filesystem;

namespace campaignd {

bool in_any(const std::vector<Interval>& windows, Timestamp t) {
    return std::any_of(windows.begin(), windows.end(), [t](const Interval& w) { return w.contains(t); });
}

std::string_view to_string(RemoteState s) {
    switch (s) {
        case RemoteState::Queued: return "QUEUED";
        case RemoteState::Running: return "RUNNING";
        case RemoteState::FinishedOk: return "FINISHED_OK";
        case RemoteState::FinishedFailed: return "FINISHED_FAILED";
        case RemoteState::Unknown: return "UNKNOWN";
    }
    return "?";
}

std::string remote_id_for(const std::string& site_id, const std::string& job_id, int attempt_index) {
    return fmt::format("{}:{}:{}", site_id, job_id, attempt_index);
}

fs::path sandbox_path(const fs::path& root, const std::string& job_id, int attempt_index) {
    return root / "jobs" / job_id / fmt::format("attempt_{}", attempt_index);
}

std::pair<std::string, std::string> stage_inputs(const InputBundle& bundle, const fs::path& sandbox) {
    fs::create_directories(sandbox);
    std::map<std::string, fs::path> staged;  // file name -> source
    auto stage = [&](const fs::path& source) {
        const std::string name = source.filename().string();
        auto [it, inserted] = staged.emplace(name, source);
        if (!inserted && it->second != source) {
            throw BackendError(BackendError::Kind::Io,
                               fmt::format("bundle {}: two inputs named `{}`", bundle.name, name));
        }
        if (inserted) fs::copy_file(source, sandbox / name, fs::copy_options::overwrite_existing);
        return name;
    };

    std::string names[2];
    for (Hypothesis h : {Hypothesis::H0, Hypothesis::H1}) {
        const fs::path& ctl_path = bundle.ctl(h);
        ControlFile ctl = parse_ctl(ctl_path);
        for (std::string_view key : {"seqfile", "treefile"}) {
            ctl.set(key, stage((ctl_path.parent_path() / ctl.require(key)).lexically_normal()));
        }
        const std::string name = ctl_path.filename().string();
        std::ofstream out(sandbox / name, std::ios::binary | std::ios::trunc);
        out << ctl.to_text();
        if (!out.flush()) throw BackendError(BackendError::Kind::Io, fmt::format("cannot stage {}", name));
        names[h == Hypothesis::H0 ? 0 : 1] = name;
    }
    return {names[0], names[1]};
}

Manifest copy_tree(const fs::path& from, const fs::path& to) {
    Manifest manifest;
    fs::create_directories(to);
    std::vector<fs::path> files;
    for (const auto& entry : fs::recursive_directory_iterator(from)) {
        if (entry.is_regular_file()) files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
        const fs::path rel = file.lexically_relative(from);
        fs::create_directories((to / rel).parent_path());
        fs::copy_file(file, to / rel, fs::copy_options::overwrite_existing);
        manifest.push_back({rel, fs::file_size(file)});
    }
    return manifest;
}

}  // namespace campaignd
