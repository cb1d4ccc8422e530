#include "campaignd/scanner.hpp"

#include <sys/stat.h>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <fmt/format.h>

namespace fs = std::filesystem;

namespace campaignd {

namespace {

constexpr std::string_view kH0Suffix = ".H0.ctl";
constexpr std::string_view kH1Suffix = ".H1.ctl";

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\f\v");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\f\v");
    return s.substr(first, last - first + 1);
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ScanError(ScanError::Kind::Io, fmt::format("cannot read {}", path.string()), path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

struct DirId {
    dev_t dev;
    ino_t ino;
    auto operator<=>(const DirId&) const = default;
};

DirId dir_identity(const fs::path& dir) {
    struct stat st {};
    if (::stat(dir.c_str(), &st) != 0) {
        throw ScanError(ScanError::Kind::Io, fmt::format("cannot stat {}", dir.string()), dir);
    }
    return {st.st_dev, st.st_ino};
}

struct PairSlot {
    fs::path h0;
    fs::path h1;
};

class Walker {
public:
    explicit Walker(std::vector<InputBundle>& out) : out_(out) {}

    void visit(const fs::path& dir, const std::string& rel) {
        const DirId id = dir_identity(dir);
        if (!ancestors_.insert(id).second) {
            throw ScanError(ScanError::Kind::SymlinkCycle, fmt::format("directory cycle at {}", dir.string()), dir);
        }

        std::vector<fs::directory_entry> entries;
        std::error_code ec;
        for (fs::directory_iterator it(dir, ec), end; !ec && it != end; it.increment(ec)) entries.push_back(*it);
        if (ec) throw ScanError(ScanError::Kind::Io, fmt::format("cannot list {}: {}", dir.string(), ec.message()), dir);
        std::sort(entries.begin(), entries.end(),
                  [](const auto& a, const auto& b) { return a.path().filename() < b.path().filename(); });

        std::map<std::string, PairSlot> stems;
        std::vector<fs::path> subdirs;
        for (const auto& entry : entries) {
            const std::string name = entry.path().filename().string();
            if (entry.is_directory()) {
                subdirs.push_back(entry.path());
            } else if (entry.is_regular_file()) {
                if (ends_with(name, kH0Suffix)) {
                    stems[name.substr(0, name.size() - kH0Suffix.size())].h0 = entry.path();
                } else if (ends_with(name, kH1Suffix)) {
                    stems[name.substr(0, name.size() - kH1Suffix.size())].h1 = entry.path();
                }
            }
        }

        for (const auto& [stem, slot] : stems) {
            if (slot.h0.empty() || slot.h1.empty()) {
                const fs::path& present = slot.h0.empty() ? slot.h1 : slot.h0;
                throw ScanError(ScanError::Kind::UnpairedControlFile,
                                fmt::format("{} has no matching {} control file", present.string(),
                                            slot.h0.empty() ? "H0" : "H1"),
                                present);
            }
            out_.push_back(make_bundle(dir, rel.empty() ? stem : rel + "/" + stem, slot));
        }

        for (const auto& sub : subdirs) {
            const std::string name = sub.filename().string();
            visit(sub, rel.empty() ? name : rel + "/" + name);
        }
        ancestors_.erase(id);
    }

private:
    static InputBundle make_bundle(const fs::path& dir, std::string name, const PairSlot& slot) {
        const ControlFile h0 = parse_ctl(slot.h0);
        const ControlFile h1 = parse_ctl(slot.h1);
        if (h0.hypothesis() != Hypothesis::H0) {
            throw ScanError(ScanError::Kind::HypothesisMismatch,
                            fmt::format("{}: file name says H0 but fix_omega selects H1", slot.h0.string()), slot.h0, 0,
                            "fix_omega");
        }
        if (h1.hypothesis() != Hypothesis::H1) {
            throw ScanError(ScanError::Kind::HypothesisMismatch,
                            fmt::format("{}: file name says H1 but fix_omega selects H0", slot.h1.string()), slot.h1, 0,
                            "fix_omega");
        }
        const double omega0 = h0.omega();
        if (std::find(std::begin(kOmegaGrid), std::end(kOmegaGrid), omega0) == std::end(kOmegaGrid)) {
            throw ScanError(ScanError::Kind::InvalidValue,
                            fmt::format("{}: fixed omega {} is not on the H1 grid, nesting would not hold",
                                        slot.h0.string(), omega0),
                            slot.h0, 0, "omega");
        }
        if (h0.require("outfile") == h1.require("outfile")) {
            throw ScanError(ScanError::Kind::DuplicateOutfile,
                            fmt::format("{} and {} write the same outfile", slot.h0.string(), slot.h1.string()),
                            slot.h1, 0, "outfile");
        }

        InputBundle b;
        b.name = std::move(name);
        b.dir = dir;
        b.h0_ctl = slot.h0;
        b.h1_ctl = slot.h1;
        b.h0_outfile = h0.require("outfile");
        b.h1_outfile = h1.require("outfile");
        for (const ControlFile* ctl : {&h0, &h1}) {
            for (std::string_view key : {"seqfile", "treefile"}) {
                fs::path p = (dir / ctl->require(key)).lexically_normal();
                if (std::find(b.referenced_files.begin(), b.referenced_files.end(), p) == b.referenced_files.end()) {
                    b.referenced_files.push_back(std::move(p));
                }
            }
        }
        return b;
    }

    std::vector<InputBundle>& out_;
    std::set<DirId> ancestors_;
};

}  // namespace

ScanError::ScanError(Kind kind, std::string message, fs::path file, int line, std::string key)
    : std::runtime_error(std::move(message)), kind_(kind), file_(std::move(file)), line_(line), key_(std::move(key)) {}

ControlFile ControlFile::parse(std::string_view text) {
    ControlFile ctl;
    int line_no = 0;
    while (!text.empty()) {
        ++line_no;
        const auto nl = text.find('\n');
        std::string_view line = text.substr(0, nl);
        text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);

        if (const auto star = line.find('*'); star != std::string_view::npos) line = line.substr(0, star);
        line = trim(line);
        if (line.empty()) continue;

        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ScanError(ScanError::Kind::MalformedLine, fmt::format("line {}: expected `key = value`", line_no), {},
                            line_no);
        }
        const std::string_view key = trim(line.substr(0, eq));
        if (key.empty()) {
            throw ScanError(ScanError::Kind::MalformedLine, fmt::format("line {}: empty key", line_no), {}, line_no);
        }
        ctl.set(key, std::string(trim(line.substr(eq + 1))));
    }
    return ctl;
}

const std::string* ControlFile::find(std::string_view key) const {
    for (const auto& [k, v] : entries_) {
        if (k == key) return &v;
    }
    return nullptr;
}

const std::string& ControlFile::require(std::string_view key) const {
    const std::string* v = find(key);
    if (v == nullptr || v->empty()) {
        throw ScanError(ScanError::Kind::MissingKey, fmt::format("missing required key `{}`", key), {}, 0,
                        std::string(key));
    }
    return *v;
}

void ControlFile::set(std::string_view key, std::string value) {
    for (auto& [k, v] : entries_) {
        if (k == key) {
            v = std::move(value);
            return;
        }
    }
    entries_.emplace_back(std::string(key), std::move(value));
}

Hypothesis ControlFile::hypothesis() const {
    const std::string& v = require("fix_omega");
    if (v == "1") return Hypothesis::H0;
    if (v == "0") return Hypothesis::H1;
    throw ScanError(ScanError::Kind::InvalidValue, fmt::format("fix_omega must be 0 or 1, got `{}`", v), {}, 0,
                    "fix_omega");
}

double ControlFile::omega() const {
    const std::string* v = find("omega");
    if (v == nullptr || v->empty()) return 1.0;
    double out = 0;
    const auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), out);
    if (ec != std::errc{} || ptr != v->data() + v->size() || out < 0) {
        throw ScanError(ScanError::Kind::InvalidValue, fmt::format("omega must be a non-negative number, got `{}`", *v),
                        {}, 0, "omega");
    }
    return out;
}

std::string ControlFile::to_text() const {
    std::string out;
    for (const auto& [k, v] : entries_) out += fmt::format("{} = {}\n", k, v);
    return out;
}

ControlFile parse_ctl(const fs::path& path) {
    const std::string text = read_file(path);
    try {
        ControlFile ctl = ControlFile::parse(text);
        for (std::string_view key : kRequiredCtlKeys) ctl.require(key);
        for (std::string_view key : {"seqfile", "treefile"}) {
            const fs::path ref = path.parent_path() / ctl.require(key);
            if (!fs::is_regular_file(ref)) {
                throw ScanError(ScanError::Kind::UnresolvedFile,
                                fmt::format("`{}` refers to missing file {}", key, ref.string()), {}, 0,
                                std::string(key));
            }
        }
        return ctl;
    } catch (const ScanError& e) {
        if (!e.file().empty()) throw;
        throw ScanError(e.kind(), fmt::format("{}: {}", path.string(), e.what()), path, e.line(), e.key());
    }
}

std::vector<InputBundle> scan(const fs::path& root) {
    std::error_code ec;
    if (!fs::is_directory(root, ec)) {
        throw ScanError(ScanError::Kind::NotADirectory, fmt::format("{} is not a directory", root.string()), root);
    }
    std::vector<InputBundle> bundles;
    Walker(bundles).visit(fs::absolute(root).lexically_normal(), "");
    std::sort(bundles.begin(), bundles.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    return bundles;
}

}  // namespace campaignd
