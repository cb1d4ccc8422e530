// campaignd-worker CTL [CTL...]
//
// Evaluates each control file in the current directory and writes its
// outfile there. Test hooks:
//   CAMPAIGND_WORKER_FAIL=H0|H1|all   leave a truncated outfile and exit 3
//   CAMPAIGND_WORKER_DELAY_MS=N       sleep before each control file

#include <unistd.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>

#include "campaignd/scanner.hpp"
#include "campaignd/worker.hpp"

namespace fs = std::filesystem;
using namespace campaignd;

namespace {

std::string node_name() {
    if (const char* env = std::getenv("CAMPAIGND_NODE"); env && *env) return env;
    char buf[256] = {};
    if (::gethostname(buf, sizeof buf - 1) != 0) return "localhost";
    return buf;
}

bool should_fail(Hypothesis h) {
    const char* env = std::getenv("CAMPAIGND_WORKER_FAIL");
    if (!env) return false;
    const std::string v = env;
    return v == "all" || v == to_string(h);
}

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cerr << "usage: campaignd-worker CTL [CTL...]\n";
        return 2;
    }
    const std::string node = node_name();
    const fs::path cwd = fs::current_path();
    for (int i = 1; i < argc; ++i) {
        if (const char* d = std::getenv("CAMPAIGND_WORKER_DELAY_MS")) {
            std::this_thread::sleep_for(std::chrono::milliseconds(std::atoi(d)));
        }
        try {
            const ControlFile ctl = parse_ctl(argv[i]);
            const Hypothesis h = ctl.hypothesis();
            if (should_fail(h)) {
                std::ofstream(cwd / ctl.require("outfile")) << format_partial_outfile(h, node);
                std::cerr << argv[i] << ": aborted by CAMPAIGND_WORKER_FAIL\n";
                return 3;
            }
            const auto r = run_task(ctl, cwd, node);
            std::cout << argv[i] << ": lnL = " << r.lnl << "\n";
        } catch (const std::exception& e) {
            std::cerr << argv[i] << ": " << e.what() << "\n";
            return 1;
        }
    }
    return 0;
}
