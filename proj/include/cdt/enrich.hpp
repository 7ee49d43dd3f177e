#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "cdt/stats.hpp"

namespace cdt {

// Half-open [start,end) peak intervals for one mark over one locus window of
// B bins. Intervals may overlap; membership is the union.
using BinIntervals = std::vector<std::pair<std::size_t, std::size_t>>;

// Per-bin membership flags; validates 0 <= start < end <= B.
std::vector<bool> peak_mask(const BinIntervals& intervals, std::size_t n_bins);

// The floor(fraction*B) highest-attention bins, ties at the cut going to the
// lower bin index. Returned in ascending bin order.
std::vector<std::size_t> select_top_bins(const std::vector<double>& att, double fraction = 0.10);

struct MarkEnrichment {
    bool testable = false;  // false when the window has zero or full peak coverage
    std::size_t a = 0, b = 0, c = 0, d = 0;  // [top∩peak, top∖peak, peak∖top, neither]
    double odds_ratio = std::numeric_limits<double>::quiet_NaN();
    double ci_low = std::numeric_limits<double>::quiet_NaN();
    double ci_high = std::numeric_limits<double>::quiet_NaN();
    double p = std::numeric_limits<double>::quiet_NaN();
};

// Fisher's exact test of the 2x2 (high-attention x peak-membership) table.
// Zero peak coverage leaves the result untestable with NaN statistics; full
// coverage is also flagged untestable but still carries the degenerate-table
// Fisher numbers.
MarkEnrichment mark_enrichment(const std::vector<std::size_t>& top_bins,
                               const BinIntervals& intervals, std::size_t n_bins);

// att rotated right by `offset` bins (element b comes from b-offset mod B).
std::vector<double> circular_shift(const std::vector<double>& att, std::size_t offset);

struct PermutationTest {
    std::size_t observed = 0;  // top-bin/peak overlap count
    double p = 1;              // add-one estimator
    std::size_t n_perm = 0;
};

// Null distribution from circular shifts of the attention track by offsets
// drawn uniformly from [0,B) (with replacement, offset 0 allowed); each
// offset derives from (seed, perm index) so permutations are order-free.
PermutationTest circular_permutation_test(const std::vector<double>& att,
                                          const BinIntervals& intervals, double fraction,
                                          std::size_t n_perm = 1000, std::uint64_t seed = 1);

enum class BinClass : std::uint8_t { promoter, active_enhancer, ctcf_only, unannotated };

const char* bin_class_name(BinClass c);

// Priority labelling per bin: H3K4me3 -> promoter, else H3K27ac -> active
// enhancer, else CTCF alone -> ctcf_only, else unannotated. Marks absent
// from the map count as empty tracks.
std::vector<BinClass> classify_bins(const std::map<std::string, BinIntervals>& tracks,
                                    std::size_t n_bins);

struct ClassSummary {
    std::size_t count = 0;
    double mean = 0, median = 0;
};

struct BinClassEffects {
    std::map<std::string, ClassSummary> per_class;  // nonempty classes only
    KruskalResult kw;
    // Cohen's d (class minus unannotated); classes whose comparison is
    // undefined (either side < 2 bins, or zero pooled SD) are absent.
    std::map<std::string, double> d_vs_unannotated;
};

// Attention statistics per bin class, Kruskal-Wallis across the nonempty
// classes, and effect sizes of each annotated class against unannotated.
BinClassEffects bin_class_effect_sizes(const std::vector<double>& att,
                                       const std::vector<BinClass>& classes);

struct SweepRow {
    double fraction = 0;
    MarkEnrichment enrichment;
};

struct ThresholdSweep {
    std::vector<SweepRow> rows;
    // Largest |Δ log OR| between adjacent testable fractions; NaN when fewer
    // than two such rows exist.
    double max_log_or_jump = std::numeric_limits<double>::quiet_NaN();
};

std::vector<double> default_sweep_fractions();  // 0.05 .. 0.20 step 0.025

ThresholdSweep threshold_sweep(const std::vector<double>& att, const BinIntervals& intervals,
                               std::vector<double> fractions = default_sweep_fractions());

}  // namespace cdt
