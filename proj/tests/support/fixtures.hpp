#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace campaignd::testing {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag);
    ~TempDir();
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;

    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

private:
    std::filesystem::path path_;
};

void write_file(const std::filesystem::path& p, const std::string& text);
std::string read_file(const std::filesystem::path& p);

using Taxa = std::vector<std::pair<std::string, std::string>>;  ///< (label, codon sequence)

/// Writes `<root>/<family>/<stem>.{fa,nwk,H0.ctl,H1.ctl}`.
void write_bundle(const std::filesystem::path& root, const std::string& family, const std::string& stem,
                  const Taxa& taxa, double h0_omega = 1);

Taxa random_alignment(std::mt19937_64& rng, int taxa, int codons, double gap_prob = 0.05);

// Reference likelihoods, computed independently of the worker library.
double oracle_lnl(const Taxa& taxa, double omega);
/// Best value over the omega grid (first maximum wins).
std::pair<double, double> oracle_h1(const Taxa& taxa);

struct ExpectedLnl {
    double lnl0 = 0;
    double lnl1 = 0;
};

struct GeneratedCampaign {
    std::filesystem::path root;
    std::map<std::string, ExpectedLnl> expected;  ///< by bundle name
};

/// `n` random bundles in families of ten (`famNNN/ENSGTnnnnnn`).
GeneratedCampaign generate_campaign(const std::filesystem::path& root, int n, std::uint64_t seed);

}  // namespace campaignd::testing
