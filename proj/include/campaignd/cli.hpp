#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "campaignd/model.hpp"
#include "campaignd/sim_backend.hpp"
#include "campaignd/store.hpp"

namespace campaignd {

enum class BackendKind { Sim, Local };

/// Everything needed to rebuild a campaign's engine and back-end on resume.
/// Written once to `<session>/config` by `run`.
struct SessionConfig {
    std::filesystem::path input_dir;
    std::filesystem::path output_dir;
    BackendKind backend = BackendKind::Sim;
    SimConfig sim;
    EngineConfig engine;
    StoreKind store = StoreKind::Sqlite;
    std::filesystem::path worker;
    double lrt_threshold = 3.841;
    int parallelism = 1;

    std::string to_json_text() const;
    static SessionConfig from_json_text(const std::string& text);
};

/// "8h", "30m", "90s", "1d" or plain seconds.
std::optional<Seconds> parse_duration(std::string_view text);

/// The simulator layout used when `run --backend sim` gets no --sim-config:
/// one fault-free site advertising the default RTE.
SimConfig default_sim_config();

struct CliStreams {
    std::ostream& out;
    std::ostream& err;
    /// Worker executable used by the local back-end unless -x is given.
    std::filesystem::path default_worker;
};

/// Exit codes: 0 every bundle DONE (or command succeeded), 1 campaign
/// incomplete or nothing to report, 2 usage or input error.
int run_cli(const std::vector<std::string>& args, const CliStreams& io);

}  // namespace campaignd
