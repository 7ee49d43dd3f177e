#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <vector>

namespace cdt {

// Pearson correlation, two-pass 64-bit accumulation. Throws ContractError on
// n < 2 or zero variance.
double pearson(const std::vector<double>& x, const std::vector<double>& y);

// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// Average ranks (1-based) with ties sharing the mean rank.
std::vector<double> average_ranks(const std::vector<double>& x);

struct FisherResult {
    double p;           // two-sided, probability-mass rule
    double odds_ratio;  // Haldane-corrected
    double ci_low;      // 95% CI on the Haldane OR (log scale, normal approx)
    double ci_high;
};

// Two-sided Fisher exact test on the 2x2 table [[a,b],[c,d]]: p sums the
// probabilities of all tables with the same margins whose probability is
// <= the observed one (with a 1+1e-7 relative tie guard). The Haldane +0.5
// correction is applied only to the odds ratio and its CI, never to p.
FisherResult fisher_exact_haldane(std::int64_t a, std::int64_t b, std::int64_t c,
                                  std::int64_t d);

// Hypergeometric upper tail P(X >= k) for k successes when drawing n from a
// universe of M containing K successes. Log-gamma based.
double hypergeom_sf(std::int64_t k, std::int64_t M, std::int64_t K, std::int64_t n);

// Benjamini-Hochberg step-up adjusted q-values, returned in input order.
std::vector<double> bh_adjust(const std::vector<double>& p);

struct KruskalResult {
    double h;        // tie-corrected statistic
    double p;        // chi-square upper tail, df = groups-1
    std::size_t df;
};

// Kruskal-Wallis across >= 2 nonempty groups. All-identical data yields
// h = 0, p = 1 (the tie correction removes all variation).
KruskalResult kruskal_wallis(const std::vector<std::vector<double>>& groups);

// Cohen's d with pooled standard deviation ((n-1)-weighted variances).
double cohens_d(const std::vector<double>& x, const std::vector<double>& y);

// Regularized upper incomplete gamma Q(a, x); exposed because the chi-square
// tail is reused by tests.
double gamma_q(double a, double x);

// Chi-square upper tail with df degrees of freedom.
double chi2_sf(double x, double df);

// One-sample Kolmogorov-Smirnov test against U(0,1); returns the asymptotic
// p-value. Used by calibration checks.
double ks_uniform_pvalue(std::vector<double> sample);

}  // namespace cdt
