#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "campaignd/model.hpp"
#include "campaignd/scanner.hpp"

namespace campaignd {

class WorkerError : public std::runtime_error {
public:
    enum class Kind {
        NotDivisibleBy3,
        UnequalLengths,
        EmptyAlignment,
        IllegalCharacter,
        MissingHeader,
        DuplicateLabel,
        UnbalancedParens,
        DuplicateLeafLabel,
        MultipleForegroundMarks,
        NewickSyntax,
        LabelMismatch,
        IndexOutOfRange,
        InvalidArgument,
        NegativeLrt,
        Io,
    };

    WorkerError(Kind kind, std::string message) : std::runtime_error(std::move(message)), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

struct CodonAlignment {
    struct Taxon {
        std::string label;
        std::vector<std::string> codons;
    };
    std::vector<Taxon> taxa;

    std::size_t length() const { return taxa.empty() ? 0 : taxa.front().codons.size(); }
};

struct PhyloTree {
    std::string newick;
    std::set<std::string> leaf_labels;
    /// Leaves below the branch carrying the `#1` mark, sorted.
    std::optional<std::vector<std::string>> foreground_clade;
};

struct LikelihoodResult {
    Hypothesis hypothesis = Hypothesis::H0;
    double lnl = 0;
    double omega_hat = 0;
};

struct LrtRecord {
    std::string bundle_name;
    double lnl0 = 0;
    double lnl1 = 0;
    double lrt = 0;
    bool significant = false;
};

/// chi-square, 1 degree of freedom, alpha = 0.05
inline constexpr double kDefaultLrtThreshold = 3.841;

CodonAlignment parse_alignment_text(std::string_view fasta);
CodonAlignment parse_alignment(const std::filesystem::path& path);

PhyloTree parse_newick_text(std::string_view newick);
PhyloTree parse_newick(const std::filesystem::path& path);

/// Distinct non-gap codons in column `col`.
int column_distinct(const CodonAlignment& alignment, std::size_t col);

/// Surrogate log-likelihood: -sum over columns of d + |d - omega|, in column order.
double stub_lnl(const CodonAlignment& alignment, double omega);

/// Loads the alignment and tree named by `ctl` from `input_dir` and evaluates
/// its hypothesis: H0 at the fixed omega, H1 as the best point of kOmegaGrid
/// (ties go to the smaller omega).
LikelihoodResult evaluate(const ControlFile& ctl, const std::filesystem::path& input_dir);

/// Complete outfile: model, lnL, omega, optional node line, `Time used:` tag.
std::string format_outfile(const LikelihoodResult& result, std::string_view node = {});
/// What a run that died part-way leaves behind: header only, no terminal tag.
std::string format_partial_outfile(Hypothesis h, std::string_view node = {});

inline constexpr std::string_view kTerminalTag = "Time used:";

/// evaluate() in `workdir`, then write the ctl's outfile there. Nothing is
/// written when evaluation fails.
LikelihoodResult run_task(const ControlFile& ctl, const std::filesystem::path& workdir, std::string_view node = {});

/// Throws WorkerError(NegativeLrt) when lnl1 < lnl0.
LrtRecord lrt(std::string bundle_name, double lnl0, double lnl1, double threshold = kDefaultLrtThreshold);

}  // namespace campaignd
