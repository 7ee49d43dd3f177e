#include "cdt/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "cdt/error.hpp"

namespace cdt {

namespace {

void check_pair(const std::vector<double>& x, const std::vector<double>& y, const char* who) {
    if (x.size() != y.size())
        throw ContractError(std::string(who) + ": length mismatch " + std::to_string(x.size()) +
                            " vs " + std::to_string(y.size()));
    if (x.size() < 2) throw ContractError(std::string(who) + ": need at least 2 observations");
}

double lchoose(std::int64_t n, std::int64_t k) {
    if (k < 0 || k > n) return -std::numeric_limits<double>::infinity();
    return std::lgamma(double(n + 1)) - std::lgamma(double(k + 1)) - std::lgamma(double(n - k + 1));
}

}  // namespace

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
    check_pair(x, y, "pearson");
    const std::size_t n = x.size();
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= double(n);
    my /= double(n);
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0)
        throw ContractError("pearson: zero-variance input, correlation undefined");
    double r = sxy / std::sqrt(sxx * syy);
    return std::clamp(r, -1.0, 1.0);
}

std::vector<double> average_ranks(const std::vector<double>& x) {
    const std::size_t n = x.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(n);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && x[order[j + 1]] == x[order[i]]) ++j;
        const double avg = 0.5 * (double(i + 1) + double(j + 1));
        for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = avg;
        i = j + 1;
    }
    return ranks;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
    check_pair(x, y, "spearman");
    return pearson(average_ranks(x), average_ranks(y));
}

FisherResult fisher_exact_haldane(std::int64_t a, std::int64_t b, std::int64_t c,
                                  std::int64_t d) {
    if (a < 0 || b < 0 || c < 0 || d < 0)
        throw ContractError("fisher_exact_haldane: negative cell count");
    if (a + b + c + d == 0) throw ContractError("fisher_exact_haldane: empty table");
    const std::int64_t r1 = a + b, r2 = c + d, c1 = a + c, n = a + b + c + d;
    const std::int64_t kmin = std::max<std::int64_t>(0, c1 - r2);
    const std::int64_t kmax = std::min(r1, c1);
    const double denom = lchoose(n, c1);
    const auto lpmf = [&](std::int64_t k) { return lchoose(r1, k) + lchoose(r2, c1 - k) - denom; };
    const double l_obs = lpmf(a);
    // Probability-mass rule with a relative tie guard (R's convention).
    const double cutoff = l_obs + std::log1p(1e-7);
    double p = 0.0;
    for (std::int64_t k = kmin; k <= kmax; ++k) {
        const double lk = lpmf(k);
        if (lk <= cutoff) p += std::exp(lk);
    }
    p = std::min(p, 1.0);

    const double ah = a + 0.5, bh = b + 0.5, ch = c + 0.5, dh = d + 0.5;
    const double odds = (ah * dh) / (bh * ch);
    const double se = std::sqrt(1.0 / ah + 1.0 / bh + 1.0 / ch + 1.0 / dh);
    const double lo = std::log(odds);
    FisherResult res;
    res.p = p;
    res.odds_ratio = odds;
    res.ci_low = std::exp(lo - 1.959963984540054 * se);
    res.ci_high = std::exp(lo + 1.959963984540054 * se);
    return res;
}

double hypergeom_sf(std::int64_t k, std::int64_t M, std::int64_t K, std::int64_t n) {
    if (M < 0 || K < 0 || n < 0 || K > M || n > M)
        throw ContractError("hypergeom_sf: invalid parameters M=" + std::to_string(M) +
                            " K=" + std::to_string(K) + " n=" + std::to_string(n));
    const std::int64_t kmin = std::max<std::int64_t>(0, n + K - M);
    const std::int64_t kmax = std::min(n, K);
    if (k <= kmin) return 1.0;
    if (k > kmax) return 0.0;
    const double denom = lchoose(M, n);
    double p = 0.0;
    for (std::int64_t j = kmax; j >= k; --j)
        p += std::exp(lchoose(K, j) + lchoose(M - K, n - j) - denom);
    return std::min(p, 1.0);
}

std::vector<double> bh_adjust(const std::vector<double>& p) {
    const std::size_t m = p.size();
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
    std::vector<double> q(m);
    double running = 1.0;
    for (std::size_t i = m; i-- > 0;) {
        const double val = p[order[i]] * double(m) / double(i + 1);
        running = std::min(running, val);
        q[order[i]] = running;
    }
    return q;
}

KruskalResult kruskal_wallis(const std::vector<std::vector<double>>& groups) {
    std::size_t nonempty = 0;
    std::size_t N = 0;
    for (const auto& g : groups) {
        if (!g.empty()) ++nonempty;
        N += g.size();
    }
    if (nonempty < 2) throw ContractError("kruskal_wallis: need at least 2 nonempty groups");
    std::vector<double> pooled;
    pooled.reserve(N);
    for (const auto& g : groups) pooled.insert(pooled.end(), g.begin(), g.end());
    const std::vector<double> ranks = average_ranks(pooled);

    double h = 0.0;
    std::size_t off = 0;
    for (const auto& g : groups) {
        if (g.empty()) continue;
        double rsum = 0.0;
        for (std::size_t i = 0; i < g.size(); ++i) rsum += ranks[off + i];
        h += rsum * rsum / double(g.size());
        off += g.size();
    }
    h = 12.0 / (double(N) * double(N + 1)) * h - 3.0 * double(N + 1);

    // Tie correction over the pooled sample.
    std::vector<double> sorted = pooled;
    std::sort(sorted.begin(), sorted.end());
    double tie_sum = 0.0;
    std::size_t i = 0;
    while (i < sorted.size()) {
        std::size_t j = i;
        while (j + 1 < sorted.size() && sorted[j + 1] == sorted[i]) ++j;
        const double t = double(j - i + 1);
        tie_sum += t * t * t - t;
        i = j + 1;
    }
    const double corr = 1.0 - tie_sum / (double(N) * double(N) * double(N) - double(N));
    KruskalResult res;
    res.df = nonempty - 1;
    if (corr <= 0.0) {
        res.h = 0.0;
        res.p = 1.0;
        return res;
    }
    res.h = h / corr;
    res.p = chi2_sf(res.h, double(res.df));
    return res;
}

double cohens_d(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() < 2 || y.size() < 2)
        throw ContractError("cohens_d: each group needs at least 2 observations");
    const double nx = double(x.size()), ny = double(y.size());
    double mx = 0, my = 0;
    for (const double v : x) mx += v;
    for (const double v : y) my += v;
    mx /= nx;
    my /= ny;
    double vx = 0, vy = 0;
    for (const double v : x) vx += (v - mx) * (v - mx);
    for (const double v : y) vy += (v - my) * (v - my);
    const double sp2 = (vx + vy) / (nx + ny - 2.0);
    if (sp2 <= 0.0) throw ContractError("cohens_d: zero pooled variance");
    return (mx - my) / std::sqrt(sp2);
}

// Regularized incomplete gamma, series + continued fraction split at x = a+1.
double gamma_q(double a, double x) {
    if (x < 0.0 || a <= 0.0) throw ContractError("gamma_q: domain error");
    if (x == 0.0) return 1.0;
    const double gln = std::lgamma(a);
    if (x < a + 1.0) {
        // P(a,x) by series, return 1 - P.
        double ap = a, sum = 1.0 / a, del = sum;
        for (int i = 0; i < 500; ++i) {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if (std::fabs(del) < std::fabs(sum) * 1e-16) break;
        }
        const double p = sum * std::exp(-x + a * std::log(x) - gln);
        return std::clamp(1.0 - p, 0.0, 1.0);
    }
    // Q(a,x) by Lentz continued fraction.
    const double tiny = 1e-300;
    double b = x + 1.0 - a, c = 1.0 / tiny, d = 1.0 / b, h = d;
    for (int i = 1; i <= 500; ++i) {
        const double an = -double(i) * (double(i) - a);
        b += 2.0;
        d = an * d + b;
        if (std::fabs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::fabs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::fabs(del - 1.0) < 1e-16) break;
    }
    const double q = std::exp(-x + a * std::log(x) - gln) * h;
    return std::clamp(q, 0.0, 1.0);
}

double chi2_sf(double x, double df) {
    if (x <= 0.0) return 1.0;
    return gamma_q(0.5 * df, 0.5 * x);
}

double ks_uniform_pvalue(std::vector<double> sample) {
    if (sample.size() < 2) throw ContractError("ks_uniform_pvalue: need at least 2 samples");
    std::sort(sample.begin(), sample.end());
    const double n = double(sample.size());
    double d = 0.0;
    for (std::size_t i = 0; i < sample.size(); ++i) {
        const double cdf = std::clamp(sample[i], 0.0, 1.0);
        d = std::max(d, std::fabs(double(i + 1) / n - cdf));
        d = std::max(d, std::fabs(cdf - double(i) / n));
    }
    // Asymptotic Kolmogorov distribution with the Stephens small-sample
    // adjustment.
    const double lambda = (std::sqrt(n) + 0.12 + 0.11 / std::sqrt(n)) * d;
    double p = 0.0;
    for (int j = 1; j <= 100; ++j) {
        const double term = 2.0 * std::pow(-1.0, j - 1) * std::exp(-2.0 * j * j * lambda * lambda);
        p += term;
        if (std::fabs(term) < 1e-12) break;
    }
    return std::clamp(p, 0.0, 1.0);
}

}  // namespace cdt
