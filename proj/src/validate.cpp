#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "campaignd/engine.hpp"
#include "campaignd/worker.hpp"

namespace fs = std::filesystem;

namespace campaignd {

namespace {

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

/// `key = value` with `key` exactly matching; returns the trimmed value.
std::optional<std::string_view> keyed_value(std::string_view line, std::string_view key) {
    line = trim(line);
    if (!line.starts_with(key)) return std::nullopt;
    auto rest = trim(line.substr(key.size()));
    if (rest.empty() || rest.front() != '=') return std::nullopt;
    return trim(rest.substr(1));
}

struct OutfileScan {
    InvalidReason reason = InvalidReason::None;
    double lnl = 0;
    std::string node;
};

OutfileScan scan_outfile(const fs::path& path) {
    OutfileScan out;
    std::ifstream in(path);
    if (!in) {
        out.reason = InvalidReason::MissingFile;
        return out;
    }
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(std::move(line));

    int lnl_lines = 0;
    bool parsed = false;
    for (const auto& line : lines) {
        if (auto node = keyed_value(line, "node")) out.node = std::string(*node);
        auto v = keyed_value(line, "lnL");
        if (!v) continue;
        ++lnl_lines;
        double x = 0;
        auto [p, ec] = std::from_chars(v->data(), v->data() + v->size(), x);
        parsed = ec == std::errc() && p == v->data() + v->size();
        out.lnl = x;
    }

    std::string_view last;
    for (auto it = lines.rbegin(); it != lines.rend(); ++it) {
        if (!trim(*it).empty()) {
            last = trim(*it);
            break;
        }
    }
    if (!last.starts_with(kTerminalTag)) {
        out.reason = InvalidReason::MissingTag;
    } else if (lnl_lines != 1 || !parsed) {
        out.reason = InvalidReason::UnparseableLnl;
    }
    return out;
}

}  // namespace

std::string_view to_string(InvalidReason r) {
    switch (r) {
        case InvalidReason::None: return "none";
        case InvalidReason::MissingFile: return "missing file";
        case InvalidReason::MissingTag: return "missing terminal tag";
        case InvalidReason::UnparseableLnl: return "unparseable lnL";
        case InvalidReason::NestingViolated: return "lnL1 < lnL0";
    }
    return "?";
}

std::string ValidationOutcome::describe() const {
    if (valid) return "valid";
    if (file.empty()) return std::string(to_string(reason));
    return fmt::format("{}: {}", to_string(reason), file);
}

ValidationOutcome validate_outputs(const fs::path& job_dir, const InputBundle& bundle) {
    ValidationOutcome v;
    const auto h0 = scan_outfile(job_dir / bundle.h0_outfile);
    const auto h1 = scan_outfile(job_dir / bundle.h1_outfile);
    v.h0_node = h0.node;
    v.h1_node = h1.node;
    if (h0.reason != InvalidReason::None) {
        v.reason = h0.reason;
        v.file = bundle.h0_outfile;
        return v;
    }
    if (h1.reason != InvalidReason::None) {
        v.reason = h1.reason;
        v.file = bundle.h1_outfile;
        return v;
    }
    v.lnl = {h0.lnl, h1.lnl};
    if (h1.lnl < h0.lnl) {
        v.reason = InvalidReason::NestingViolated;
        return v;
    }
    v.valid = true;
    return v;
}

}  // namespace campaignd
