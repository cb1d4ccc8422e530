#include "fixtures.hpp"

#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

namespace fs = std::filesystem;

namespace campaignd::testing {

namespace {

constexpr double kGrid[] = {0.0, 0.5, 1.0, 2.0, 5.0};
constexpr const char* kBases = "ACGT";

}  // namespace

TempDir::TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() / fmt::format("campaignd-{}-{}-{}", tag, ::getpid(), counter++);
    fs::remove_all(path_);
    fs::create_directories(path_);
}

TempDir::~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
}

void write_file(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << text;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_bundle(const fs::path& root, const std::string& family, const std::string& stem, const Taxa& taxa,
                  double h0_omega) {
    const fs::path dir = family.empty() ? root : root / family;
    std::string fasta;
    for (const auto& [label, seq] : taxa) fasta += ">" + label + "\n" + seq + "\n";
    write_file(dir / (stem + ".fa"), fasta);

    // Caterpillar tree with the first two taxa marked as the foreground clade.
    std::string tree = "(" + taxa[0].first + "," + taxa[1].first + ")#1";
    for (std::size_t i = 2; i < taxa.size(); ++i) tree = "(" + tree + "," + taxa[i].first + ")";
    if (taxa.size() == 2) tree = "(" + tree + ")";
    write_file(dir / (stem + ".nwk"), tree + ";\n");

    write_file(dir / (stem + ".H0.ctl"),
               fmt::format("* null model\nseqfile = {0}.fa\ntreefile = {0}.nwk\noutfile = {0}.H0.out\n"
                           "model = 2\nfix_omega = 1\nomega = {1}\n",
                           stem, h0_omega));
    write_file(dir / (stem + ".H1.ctl"),
               fmt::format("* alternative model\nseqfile = {0}.fa\ntreefile = {0}.nwk\noutfile = {0}.H1.out\n"
                           "model = 2\nfix_omega = 0\nomega = 1.5\n",
                           stem));
}

Taxa random_alignment(std::mt19937_64& rng, int taxa, int codons, double gap_prob) {
    std::uniform_int_distribution<int> base(0, 3);
    std::uniform_real_distribution<double> u(0, 1);
    // A few variants per column keep d small enough for every omega to matter.
    std::vector<std::vector<std::string>> pool(static_cast<std::size_t>(codons));
    for (auto& col : pool) {
        const int variants = 1 + static_cast<int>(u(rng) * 4);
        for (int v = 0; v < variants; ++v) {
            std::string c;
            for (int k = 0; k < 3; ++k) c += kBases[base(rng)];
            col.push_back(c);
        }
    }
    Taxa out;
    for (int t = 0; t < taxa; ++t) {
        std::string seq;
        for (const auto& col : pool) {
            if (u(rng) < gap_prob) {
                seq += "---";
            } else {
                seq += col[static_cast<std::size_t>(u(rng) * static_cast<double>(col.size()))];
            }
        }
        out.emplace_back(fmt::format("T{}", t + 1), seq);
    }
    return out;
}

double oracle_lnl(const Taxa& taxa, double omega) {
    const std::size_t codons = taxa.front().second.size() / 3;
    double total = 0;
    for (std::size_t c = 0; c < codons; ++c) {
        std::vector<std::string> col;
        for (const auto& t : taxa) {
            std::string codon = t.second.substr(c * 3, 3);
            if (codon != "---") col.push_back(codon);
        }
        std::sort(col.begin(), col.end());
        const double d = static_cast<double>(std::unique(col.begin(), col.end()) - col.begin());
        total -= d + std::fabs(d - omega);
    }
    return total;
}

std::pair<double, double> oracle_h1(const Taxa& taxa) {
    double best = oracle_lnl(taxa, kGrid[0]);
    double arg = kGrid[0];
    for (double w : kGrid) {
        const double v = oracle_lnl(taxa, w);
        if (v > best) {
            best = v;
            arg = w;
        }
    }
    return {best, arg};
}

GeneratedCampaign generate_campaign(const fs::path& root, int n, std::uint64_t seed) {
    GeneratedCampaign g;
    g.root = root;
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> ntaxa(3, 6);
    std::uniform_int_distribution<int> ncodons(2, 12);
    for (int i = 0; i < n; ++i) {
        const std::string family = fmt::format("fam{:03d}", i / 10);
        const std::string stem = fmt::format("ENSGT{:06d}", i);
        const Taxa taxa = random_alignment(rng, ntaxa(rng), ncodons(rng));
        write_bundle(root, family, stem, taxa);
        g.expected[family + "/" + stem] = {oracle_lnl(taxa, 1.0), oracle_h1(taxa).first};
    }
    return g;
}

}  // namespace campaignd::testing
