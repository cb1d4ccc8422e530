#include "campaignd/worker.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

namespace fs = std::filesystem;

namespace campaignd {

namespace {

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw WorkerError(WorkerError::Kind::Io, fmt::format("cannot read {}", path.string()));
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string_view trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n\f\v");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n\f\v");
    return s.substr(first, last - first + 1);
}

bool is_base(char c) { return c == 'A' || c == 'C' || c == 'G' || c == 'T'; }

// Recursive-descent Newick reader. Grammar accepted:
//   tree    := node ';'
//   node    := '(' node (',' node)* ')' [label] suffix* | label suffix*
//   suffix  := ':' length | '#' digits
// with whitespace and [comments] allowed between tokens.
class NewickReader {
public:
    explicit NewickReader(std::string_view text) : s_(text) {}

    PhyloTree read() {
        PhyloTree tree;
        tree.newick = std::string(trim(s_));
        const bool root_marked = node(tree);
        if (root_marked) fail(WorkerError::Kind::NewickSyntax, "the root has no branch to mark");
        skip_ws();
        if (at_end()) fail(WorkerError::Kind::NewickSyntax, "missing terminating ';'");
        if (peek() == ')') fail(WorkerError::Kind::UnbalancedParens, "unmatched ')'");
        if (peek() != ';') fail(WorkerError::Kind::NewickSyntax, fmt::format("unexpected '{}'", peek()));
        ++pos_;
        skip_ws();
        if (!at_end()) fail(WorkerError::Kind::NewickSyntax, "trailing text after ';'");
        return tree;
    }

private:
    // Returns whether this node's branch carries the #1 mark; appends leaves to leaves_.
    bool node(PhyloTree& tree) {
        skip_ws();
        const std::size_t first_leaf = leaves_.size();
        if (!at_end() && peek() == '(') {
            ++pos_;
            ++depth_;
            for (;;) {
                if (node(tree)) mark(tree, first_leaf_of_last_child_);
                skip_ws();
                if (at_end() || peek() == ';') fail(WorkerError::Kind::UnbalancedParens, "unclosed '('");
                if (peek() == ',') {
                    ++pos_;
                    continue;
                }
                if (peek() == ')') {
                    ++pos_;
                    --depth_;
                    break;
                }
                fail(WorkerError::Kind::NewickSyntax, fmt::format("unexpected '{}'", peek()));
            }
            skip_ws();
            label();  // internal labels are ignored
        } else {
            std::string name = label();
            if (name.empty()) fail(WorkerError::Kind::NewickSyntax, "empty leaf label");
            if (!tree.leaf_labels.insert(name).second) {
                fail(WorkerError::Kind::DuplicateLeafLabel, fmt::format("leaf `{}` appears twice", name));
            }
            leaves_.push_back(std::move(name));
        }
        first_leaf_of_last_child_ = first_leaf;
        return suffixes();
    }

    void mark(PhyloTree& tree, std::size_t first_leaf) {
        if (tree.foreground_clade) fail(WorkerError::Kind::MultipleForegroundMarks, "more than one #1 mark");
        std::vector<std::string> clade(leaves_.begin() + static_cast<std::ptrdiff_t>(first_leaf), leaves_.end());
        std::sort(clade.begin(), clade.end());
        tree.foreground_clade = std::move(clade);
    }

    bool suffixes() {
        bool marked = false;
        for (;;) {
            skip_ws();
            if (at_end()) return marked;
            if (peek() == ':') {
                ++pos_;
                skip_ws();
                const std::size_t start = pos_;
                while (!at_end() && (std::isdigit(static_cast<unsigned char>(peek())) || peek() == '.' ||
                                     peek() == 'e' || peek() == 'E' || peek() == '-' || peek() == '+')) {
                    ++pos_;
                }
                if (start == pos_) fail(WorkerError::Kind::NewickSyntax, "empty branch length");
            } else if (peek() == '#') {
                ++pos_;
                const std::size_t start = pos_;
                while (!at_end() && std::isdigit(static_cast<unsigned char>(peek()))) ++pos_;
                const std::string_view tag = s_.substr(start, pos_ - start);
                if (tag != "1") fail(WorkerError::Kind::NewickSyntax, fmt::format("unsupported mark #{}", tag));
                if (marked) fail(WorkerError::Kind::MultipleForegroundMarks, "branch marked twice");
                marked = true;
            } else {
                return marked;
            }
        }
    }

    std::string label() {
        skip_ws();
        std::string out;
        if (!at_end() && peek() == '\'') {
            ++pos_;
            for (;;) {
                if (at_end()) fail(WorkerError::Kind::NewickSyntax, "unterminated quoted label");
                if (peek() == '\'') {
                    if (pos_ + 1 < s_.size() && s_[pos_ + 1] == '\'') {
                        out += '\'';
                        pos_ += 2;
                        continue;
                    }
                    ++pos_;
                    break;
                }
                out += s_[pos_++];
            }
            return out;
        }
        while (!at_end()) {
            const char c = peek();
            if (c == '(' || c == ')' || c == ',' || c == ':' || c == ';' || c == '#' || c == '[' || c == '\'' ||
                std::isspace(static_cast<unsigned char>(c))) {
                break;
            }
            out += c;
            ++pos_;
        }
        return out;
    }

    void skip_ws() {
        while (!at_end()) {
            if (std::isspace(static_cast<unsigned char>(peek()))) {
                ++pos_;
            } else if (peek() == '[') {
                const auto close = s_.find(']', pos_);
                if (close == std::string_view::npos) fail(WorkerError::Kind::NewickSyntax, "unterminated comment");
                pos_ = close + 1;
            } else {
                break;
            }
        }
    }

    bool at_end() const { return pos_ >= s_.size(); }
    char peek() const { return s_[pos_]; }

    [[noreturn]] void fail(WorkerError::Kind kind, const std::string& what) const {
        throw WorkerError(kind, fmt::format("newick, offset {}: {}", pos_, what));
    }

    std::string_view s_;
    std::size_t pos_ = 0;
    int depth_ = 0;
    std::vector<std::string> leaves_;
    std::size_t first_leaf_of_last_child_ = 0;
};

double positive_zero(double v) { return v == 0.0 ? 0.0 : v; }

}  // namespace

CodonAlignment parse_alignment_text(std::string_view fasta) {
    using K = WorkerError::Kind;
    struct Raw {
        std::string label;
        std::string seq;
    };
    std::vector<Raw> raw;
    while (!fasta.empty()) {
        const auto nl = fasta.find('\n');
        const std::string_view line = trim(fasta.substr(0, nl));
        fasta = nl == std::string_view::npos ? std::string_view{} : fasta.substr(nl + 1);
        if (line.empty()) continue;
        if (line.front() == '>') {
            std::string label(trim(line.substr(1)));
            if (label.empty()) throw WorkerError(K::MissingHeader, "empty sequence label");
            raw.push_back({std::move(label), {}});
            continue;
        }
        if (raw.empty()) throw WorkerError(K::MissingHeader, "sequence data before the first '>' header");
        for (char c : line) {
            if (!std::isspace(static_cast<unsigned char>(c))) {
                raw.back().seq += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
            }
        }
    }
    if (raw.empty()) throw WorkerError(K::EmptyAlignment, "alignment has no sequences");

    CodonAlignment out;
    std::set<std::string> seen;
    for (auto& [label, seq] : raw) {
        if (!seen.insert(label).second) throw WorkerError(K::DuplicateLabel, fmt::format("taxon `{}` repeated", label));
        for (std::size_t i = 0; i < seq.size(); ++i) {
            if (!is_base(seq[i]) && seq[i] != '-') {
                throw WorkerError(K::IllegalCharacter,
                                  fmt::format("taxon `{}`: illegal character '{}' at position {}", label, seq[i], i + 1));
            }
        }
        if (seq.size() % 3 != 0) {
            throw WorkerError(K::NotDivisibleBy3,
                              fmt::format("taxon `{}`: length {} is not a multiple of 3", label, seq.size()));
        }
        CodonAlignment::Taxon taxon{label, {}};
        taxon.codons.reserve(seq.size() / 3);
        for (std::size_t i = 0; i < seq.size(); i += 3) {
            std::string codon = seq.substr(i, 3);
            const auto gaps = std::count(codon.begin(), codon.end(), '-');
            if (gaps != 0 && gaps != 3) {
                throw WorkerError(K::IllegalCharacter,
                                  fmt::format("taxon `{}`: mixed gap codon `{}` at position {}", label, codon, i + 1));
            }
            taxon.codons.push_back(std::move(codon));
        }
        if (!out.taxa.empty() && taxon.codons.size() != out.taxa.front().codons.size()) {
            throw WorkerError(K::UnequalLengths,
                              fmt::format("taxa `{}` and `{}` differ in length", out.taxa.front().label, label));
        }
        out.taxa.push_back(std::move(taxon));
    }
    if (out.length() == 0) throw WorkerError(K::EmptyAlignment, "alignment has no codons");
    return out;
}

CodonAlignment parse_alignment(const fs::path& path) {
    try {
        return parse_alignment_text(slurp(path));
    } catch (const WorkerError& e) {
        throw WorkerError(e.kind(), fmt::format("{}: {}", path.string(), e.what()));
    }
}

PhyloTree parse_newick_text(std::string_view newick) { return NewickReader(newick).read(); }

PhyloTree parse_newick(const fs::path& path) {
    try {
        return parse_newick_text(slurp(path));
    } catch (const WorkerError& e) {
        throw WorkerError(e.kind(), fmt::format("{}: {}", path.string(), e.what()));
    }
}

int column_distinct(const CodonAlignment& alignment, std::size_t col) {
    if (col >= alignment.length()) {
        throw WorkerError(WorkerError::Kind::IndexOutOfRange,
                          fmt::format("column {} outside alignment of length {}", col, alignment.length()));
    }
    std::set<std::string_view> distinct;
    for (const auto& taxon : alignment.taxa) {
        const std::string& codon = taxon.codons[col];
        if (codon != "---") distinct.insert(codon);
    }
    return static_cast<int>(distinct.size());
}

double stub_lnl(const CodonAlignment& alignment, double omega) {
    if (!(omega >= 0)) {
        throw WorkerError(WorkerError::Kind::InvalidArgument, fmt::format("omega must be >= 0, got {}", omega));
    }
    double cost = 0;
    for (std::size_t col = 0; col < alignment.length(); ++col) {
        const double d = column_distinct(alignment, col);
        cost += d + std::fabs(d - omega);
    }
    return -cost;
}

LikelihoodResult evaluate(const ControlFile& ctl, const fs::path& input_dir) {
    const Hypothesis h = ctl.hypothesis();
    const CodonAlignment alignment = parse_alignment(input_dir / ctl.require("seqfile"));
    const PhyloTree tree = parse_newick(input_dir / ctl.require("treefile"));

    std::set<std::string> taxa;
    for (const auto& t : alignment.taxa) taxa.insert(t.label);
    if (taxa != tree.leaf_labels) {
        throw WorkerError(WorkerError::Kind::LabelMismatch, "tree leaves and alignment taxa differ");
    }

    if (h == Hypothesis::H0) {
        const double omega = ctl.omega();
        return {h, stub_lnl(alignment, omega), omega};
    }
    LikelihoodResult best{h, 0, 0};
    bool first = true;
    for (double omega : kOmegaGrid) {
        const double lnl = stub_lnl(alignment, omega);
        if (first || lnl > best.lnl) {
            best.lnl = lnl;
            best.omega_hat = omega;
            first = false;
        }
    }
    return best;
}

std::string format_outfile(const LikelihoodResult& result, std::string_view node) {
    std::string out = fmt::format("model = {}\nlnL = {:.6f}\nomega = {:.6f}\n", to_string(result.hypothesis),
                                  positive_zero(result.lnl), positive_zero(result.omega_hat));
    if (!node.empty()) out += fmt::format("node = {}\n", node);
    out += kTerminalTag;
    out += " 0:00\n";
    return out;
}

std::string format_partial_outfile(Hypothesis h, std::string_view node) {
    std::string out = fmt::format("model = {}\n", to_string(h));
    if (!node.empty()) out += fmt::format("node = {}\n", node);
    return out;
}

LikelihoodResult run_task(const ControlFile& ctl, const fs::path& workdir, std::string_view node) {
    const LikelihoodResult result = evaluate(ctl, workdir);
    const fs::path target = workdir / ctl.require("outfile");
    const fs::path tmp = target.string() + ".part";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        out << format_outfile(result, node);
        if (!out.flush()) throw WorkerError(WorkerError::Kind::Io, fmt::format("cannot write {}", tmp.string()));
    }
    fs::rename(tmp, target);
    return result;
}

LrtRecord lrt(std::string bundle_name, double lnl0, double lnl1, double threshold) {
    if (lnl1 < lnl0) {
        throw WorkerError(WorkerError::Kind::NegativeLrt,
                          fmt::format("{}: lnL1 {} below lnL0 {}, models are not nested", bundle_name, lnl1, lnl0));
    }
    const double stat = 2.0 * (lnl1 - lnl0);
    return {std::move(bundle_name), lnl0, lnl1, stat, stat > threshold};
}

}  // namespace campaignd
