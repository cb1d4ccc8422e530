#include <unistd.h>

#include <cstdlib>
#include <iostream>

#include <spdlog/cfg/env.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "campaignd/cli.hpp"

namespace fs = std::filesystem;

namespace {

/// $CAMPAIGND_WORKER, else the worker installed next to this binary.
fs::path installed_worker() {
    if (const char* env = std::getenv("CAMPAIGND_WORKER"); env && *env) return env;
    std::error_code ec;
    const auto self = fs::read_symlink("/proc/self/exe", ec);
    if (ec) return "campaignd-worker";
    return self.parent_path() / "campaignd-worker";
}

}  // namespace

int main(int argc, char** argv) {
    spdlog::set_default_logger(spdlog::stderr_color_mt("campaignd"));
    spdlog::cfg::load_env_levels();

    std::vector<std::string> args(argv + 1, argv + argc);
    campaignd::CliStreams io{std::cout, std::cerr, installed_worker()};
    try {
        return campaignd::run_cli(args, io);
    } catch (const std::exception& e) {
        std::cerr << "fatal: " << e.what() << "\n";
        return 1;
    }
}
