#include "cdt/enrich.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cdt/error.hpp"
#include "cdt/rng.hpp"

namespace cdt {

std::vector<bool> peak_mask(const BinIntervals& intervals, std::size_t n_bins) {
    std::vector<bool> mask(n_bins, false);
    for (const auto& [start, end] : intervals) {
        if (start >= end || end > n_bins)
            throw ContractError("peak_mask: interval outside the bin grid");
        for (std::size_t b = start; b < end; ++b) mask[b] = true;
    }
    return mask;
}

std::vector<std::size_t> select_top_bins(const std::vector<double>& att, double fraction) {
    if (!(fraction > 0 && fraction < 1))
        throw ConfigError("select_top_bins: fraction must lie in (0,1)");
    const std::size_t B = att.size();
    const std::size_t k = std::size_t(std::floor(fraction * double(B)));
    std::vector<std::size_t> idx(B);
    std::iota(idx.begin(), idx.end(), std::size_t(0));
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        if (att[a] != att[b]) return att[a] > att[b];
        return a < b;
    });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

MarkEnrichment mark_enrichment(const std::vector<std::size_t>& top_bins,
                               const BinIntervals& intervals, std::size_t n_bins) {
    const auto mask = peak_mask(intervals, n_bins);
    std::vector<bool> top(n_bins, false);
    for (const std::size_t b : top_bins) {
        if (b >= n_bins) throw ContractError("mark_enrichment: top bin outside the grid");
        top[b] = true;
    }
    MarkEnrichment out;
    for (std::size_t b = 0; b < n_bins; ++b) {
        if (top[b] && mask[b]) out.a += 1;
        else if (top[b]) out.b += 1;
        else if (mask[b]) out.c += 1;
        else out.d += 1;
    }
    const std::size_t peaks = out.a + out.c;
    if (peaks == 0) return out;  // untestable: no peaks in the window
    const FisherResult f = fisher_exact_haldane(std::int64_t(out.a), std::int64_t(out.b),
                                                std::int64_t(out.c), std::int64_t(out.d));
    out.odds_ratio = f.odds_ratio;
    out.ci_low = f.ci_low;
    out.ci_high = f.ci_high;
    out.p = f.p;
    out.testable = peaks < n_bins;  // full coverage keeps the numbers but is flagged
    return out;
}

std::vector<double> circular_shift(const std::vector<double>& att, std::size_t offset) {
    const std::size_t B = att.size();
    if (B == 0) throw ContractError("circular_shift: empty track");
    std::vector<double> out(B);
    for (std::size_t b = 0; b < B; ++b) out[b] = att[(b + B - offset % B) % B];
    return out;
}

namespace {

std::size_t overlap_count(const std::vector<double>& att, const std::vector<bool>& mask,
                          double fraction) {
    std::size_t n = 0;
    for (const std::size_t b : select_top_bins(att, fraction)) n += mask[b];
    return n;
}

}  // namespace

PermutationTest circular_permutation_test(const std::vector<double>& att,
                                          const BinIntervals& intervals, double fraction,
                                          std::size_t n_perm, std::uint64_t seed) {
    if (n_perm == 0) throw ConfigError("circular_permutation_test: n_perm must be >= 1");
    const std::size_t B = att.size();
    const auto mask = peak_mask(intervals, B);
    PermutationTest out;
    out.n_perm = n_perm;
    out.observed = overlap_count(att, mask, fraction);
    RngStream root(seed);
    std::size_t ge = 0;
    for (std::size_t i = 0; i < n_perm; ++i) {
        const std::size_t offset = root.fork(i).below(B);
        if (overlap_count(circular_shift(att, offset), mask, fraction) >= out.observed) ++ge;
    }
    out.p = double(1 + ge) / double(1 + n_perm);
    return out;
}

const char* bin_class_name(BinClass c) {
    switch (c) {
        case BinClass::promoter: return "promoter";
        case BinClass::active_enhancer: return "active_enhancer";
        case BinClass::ctcf_only: return "ctcf_only";
        case BinClass::unannotated: return "unannotated";
    }
    throw ContractError("bin_class_name: bad label");
}

std::vector<BinClass> classify_bins(const std::map<std::string, BinIntervals>& tracks,
                                    std::size_t n_bins) {
    const auto mask_of = [&](const char* mark) -> std::vector<bool> {
        const auto it = tracks.find(mark);
        if (it == tracks.end()) return std::vector<bool>(n_bins, false);
        return peak_mask(it->second, n_bins);
    };
    const auto k4me3 = mask_of("H3K4me3");
    const auto k27ac = mask_of("H3K27ac");
    const auto ctcf = mask_of("CTCF");
    std::vector<BinClass> out(n_bins, BinClass::unannotated);
    for (std::size_t b = 0; b < n_bins; ++b) {
        if (k4me3[b]) out[b] = BinClass::promoter;
        else if (k27ac[b]) out[b] = BinClass::active_enhancer;
        else if (ctcf[b]) out[b] = BinClass::ctcf_only;
    }
    return out;
}

BinClassEffects bin_class_effect_sizes(const std::vector<double>& att,
                                       const std::vector<BinClass>& classes) {
    if (att.size() != classes.size())
        throw ShapeError("bin_class_effect_sizes: attention/label length mismatch");
    std::map<std::string, std::vector<double>> groups;
    for (std::size_t b = 0; b < att.size(); ++b) groups[bin_class_name(classes[b])].push_back(att[b]);
    if (groups.size() < 2)
        throw ContractError("bin_class_effect_sizes: need at least two nonempty classes");

    BinClassEffects out;
    std::vector<std::vector<double>> kw_groups;
    for (auto& [name, values] : groups) {
        ClassSummary s;
        s.count = values.size();
        for (const double v : values) s.mean += v;
        s.mean /= double(values.size());
        std::vector<double> sorted = values;
        std::sort(sorted.begin(), sorted.end());
        const std::size_t n = sorted.size();
        s.median = (n % 2) ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
        out.per_class[name] = s;
        kw_groups.push_back(values);
    }
    out.kw = kruskal_wallis(kw_groups);

    const auto un = groups.find("unannotated");
    if (un != groups.end() && un->second.size() >= 2) {
        for (const auto& [name, values] : groups) {
            if (name == "unannotated" || values.size() < 2) continue;
            try {
                out.d_vs_unannotated[name] = cohens_d(values, un->second);
            } catch (const ContractError&) {
                // zero pooled SD: comparison undefined, entry omitted
            }
        }
    }
    return out;
}

std::vector<double> default_sweep_fractions() {
    std::vector<double> f;
    for (int i = 0; i <= 6; ++i) f.push_back(0.05 + 0.025 * i);
    return f;
}

ThresholdSweep threshold_sweep(const std::vector<double>& att, const BinIntervals& intervals,
                               std::vector<double> fractions) {
    if (fractions.empty()) throw ConfigError("threshold_sweep: no fractions");
    ThresholdSweep out;
    for (const double f : fractions) {
        SweepRow row;
        row.fraction = f;
        row.enrichment = mark_enrichment(select_top_bins(att, f), intervals, att.size());
        out.rows.push_back(row);
    }
    double max_jump = std::numeric_limits<double>::quiet_NaN();
    const MarkEnrichment* prev = nullptr;
    for (const auto& row : out.rows) {
        const auto& e = row.enrichment;
        if (!e.testable || !(e.odds_ratio > 0) || !std::isfinite(e.odds_ratio)) continue;
        if (prev) {
            const double jump = std::abs(std::log(e.odds_ratio) - std::log(prev->odds_ratio));
            if (std::isnan(max_jump) || jump > max_jump) max_jump = jump;
        }
        prev = &e;
    }
    out.max_log_or_jump = max_jump;
    return out;
}

}  // namespace cdt
