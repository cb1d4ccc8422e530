#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "campaignd/model.hpp"

namespace campaignd {

class ScanError : public std::runtime_error {
public:
    enum class Kind {
        MalformedLine,
        MissingKey,
        UnresolvedFile,
        UnpairedControlFile,
        HypothesisMismatch,
        InvalidValue,
        DuplicateOutfile,
        SymlinkCycle,
        NotADirectory,
        Io,
    };

    ScanError(Kind kind, std::string message, std::filesystem::path file = {}, int line = 0, std::string key = {});

    Kind kind() const noexcept { return kind_; }
    const std::filesystem::path& file() const noexcept { return file_; }
    int line() const noexcept { return line_; }
    const std::string& key() const noexcept { return key_; }

private:
    Kind kind_;
    std::filesystem::path file_;
    int line_;
    std::string key_;
};

/// PAML-style control file: `key = value` per line, `*` starts a comment.
/// Keys keep first-seen order; a repeated key overrides the earlier value.
class ControlFile {
public:
    using Entry = std::pair<std::string, std::string>;

    /// Grammar only; no required-key or file checks. Line numbers are 1-based.
    static ControlFile parse(std::string_view text);

    const std::vector<Entry>& entries() const noexcept { return entries_; }
    const std::string* find(std::string_view key) const;
    /// Throws ScanError(MissingKey) when absent or empty.
    const std::string& require(std::string_view key) const;
    void set(std::string_view key, std::string value);

    /// From fix_omega: 1 means H0 (omega fixed), 0 means H1.
    Hypothesis hypothesis() const;
    /// The `omega` entry, 1 when absent.
    double omega() const;

    std::string to_text() const;

    bool operator==(const ControlFile&) const = default;

private:
    std::vector<Entry> entries_;
};

inline constexpr std::string_view kRequiredCtlKeys[] = {"seqfile", "treefile", "outfile"};

/// Parses `path`, checks required keys and that seqfile/treefile resolve
/// relative to the control file's directory.
ControlFile parse_ctl(const std::filesystem::path& path);

/// Recursive discovery of `<stem>.H0.ctl` / `<stem>.H1.ctl` pairs under `root`,
/// sorted by bundle name. Symlinks are followed; directory cycles are errors.
std::vector<InputBundle> scan(const std::filesystem::path& root);

}  // namespace campaignd
