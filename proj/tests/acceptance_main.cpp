// Release acceptance gate. Runs the 13 acceptance criteria end to end at desk
// scale — including fresh trainings for the recovery, ablation, and
// determinism criteria — and prints one PASS/FAIL line per criterion.
// Exits nonzero if any criterion fails. Expect a wall time around two hours
// on one core; progress goes to stderr, the verdict table to stdout.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cdt/atlas.hpp"
#include "cdt/ops.hpp"
#include "cdt/pipeline.hpp"
#include "cdt/stats.hpp"

using namespace cdt;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void progress(const std::string& msg) {
    std::fprintf(stderr, "[acceptance] %s\n", msg.c_str());
    std::fflush(stderr);
}

struct Verdict {
    int id = 0;
    bool pass = false;
    std::string detail;
    double secs = 0;
};

std::vector<Verdict> verdicts;

void record(int id, bool pass, const std::string& detail, Clock::time_point t0) {
    verdicts.push_back({id, pass, detail, seconds_since(t0)});
    std::fprintf(stderr, "[acceptance] A%d %s  %s\n", id, pass ? "pass" : "FAIL",
                 detail.c_str());
    std::fflush(stderr);
}

std::string fmt(double x, int prec = 4) {
    std::ostringstream os;
    os.precision(prec);
    os << x;
    return os.str();
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot read " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// ---- criterion 1: gradient soundness --------------------------------------------

// |a - fd| <= atol + rtol*|fd|, reported as the normalized ratio so the worst
// case over a sweep can be printed (<= 1 passes).
double grad_ratio(double a, double f) {
    return std::abs(a - f) / (1e-7 + 1e-4 * std::abs(f));
}

using T64 = TensorPtr<double>;

T64 weighted_sum(Tape<double>* tape, const T64& x, RngStream rng) {
    auto w = randn<double>(x->shape, rng);
    return sum_all(tape, mul(tape, x, w));
}

// Worst normalized deviation between tape gradients and central differences
// for a scalar build over the given leaves.
double gradcheck(const std::function<T64(Tape<double>*)>& build, const std::vector<T64>& leaves) {
    Tape<double> tape;
    auto loss = build(&tape);
    tape.backward(loss);
    double worst = 0;
    for (const auto& leaf : leaves) {
        auto fd = finite_difference_gradient<double>(
            [&](const T64&) {
                Tape<double> t2;
                return build(&t2)->v[0];
            },
            leaf, 1e-5);
        for (std::size_t i = 0; i < leaf->numel(); ++i)
            worst = std::max(worst, grad_ratio(leaf->g[i], fd->v[i]));
    }
    return worst;
}

double op_sweep(std::uint64_t seed) {
    RngStream rng(seed);
    double worst = 0;
    const auto up = [&](double w) { worst = std::max(worst, w); };

    {
        auto a = randn<double>({3, 4}, rng, 0, 1, true);
        auto b = randn<double>({4}, rng, 0, 1, true);
        up(gradcheck([&](Tape<double>* t) {
            return weighted_sum(t, add(t, a, b), RngStream(seed * 100 + 1));
        }, {a, b}));
    }
    {
        auto a = randn<double>({2, 5}, rng, 0, 1, true);
        auto b = randn<double>({2, 5}, rng, 0, 1, true);
        up(gradcheck([&](Tape<double>* t) {
            auto m = mul(t, a, b);
            auto s = scale(t, m, 1.7);
            return weighted_sum(t, sub(t, s, a), RngStream(seed * 100 + 2));
        }, {a, b}));
    }
    {
        auto a = randn<double>({3, 4}, rng, 0, 1, true);
        auto b = randn<double>({4, 2}, rng, 0, 1, true);
        up(gradcheck([&](Tape<double>* t) {
            return weighted_sum(t, matmul(t, a, b), RngStream(seed * 100 + 3));
        }, {a, b}));
    }
    {
        auto a = randn<double>({2, 3, 4}, rng, 0, 1, true);
        auto b = randn<double>({2, 4, 2}, rng, 0, 1, true);
        up(gradcheck([&](Tape<double>* t) {
            return weighted_sum(t, matmul(t, a, b), RngStream(seed * 100 + 4));
        }, {a, b}));
    }
    {
        auto a = randn<double>({4, 6}, rng, 0, 1, true);
        up(gradcheck([&](Tape<double>* t) {
            auto tr = transpose2d(t, a);
            auto s1 = slice_cols(t, tr, 0, 2);
            auto s2 = slice_cols(t, tr, 2, 4);
            auto cc = concat_cols(t, {s1, s2});
            auto rs = reshape(t, cc, {4, 6});
            return weighted_sum(t, rs, RngStream(seed * 100 + 5));
        }, {a}));
    }
    {
        auto a = randn<double>({3, 5}, rng, 0, 2, true);
        up(gradcheck([&](Tape<double>* t) {
            return weighted_sum(t, softmax(t, a, 1), RngStream(seed * 100 + 6));
        }, {a}));
        auto b = randn<double>({2, 3, 2}, rng, 0, 2, true);
        up(gradcheck([&](Tape<double>* t) {
            return weighted_sum(t, softmax(t, b, 1), RngStream(seed * 100 + 7));
        }, {b}));
    }
    {
        auto x = randn<double>({3, 8}, rng, 0, 1.5, true);
        auto g = randn<double>({8}, rng, 1.0, 0.2, true);
        auto b = randn<double>({8}, rng, 0.0, 0.2, true);
        up(gradcheck([&](Tape<double>* t) {
            return weighted_sum(t, layer_norm(t, x, g, b), RngStream(seed * 100 + 8));
        }, {x, g, b}));
    }
    {
        auto a = randn<double>({4, 4}, rng, 0, 2, true);
        up(gradcheck([&](Tape<double>* t) {
            return weighted_sum(t, gelu(t, a), RngStream(seed * 100 + 9));
        }, {a}));
    }
    {
        auto a = randn<double>({5, 5}, rng, 0, 1, true);
        up(gradcheck([&](Tape<double>* t) {
            RngStream mask_rng(seed * 100 + 10);
            return weighted_sum(t, dropout(t, a, 0.3, true, &mask_rng),
                                RngStream(seed * 100 + 11));
        }, {a}));
    }
    {
        const std::size_t d = 6;
        MhaParams<double> p;
        p.wq = randn<double>({d, d}, rng, 0, 0.5, true);
        p.bq = randn<double>({d}, rng, 0, 0.1, true);
        p.wk = randn<double>({d, d}, rng, 0, 0.5, true);
        p.bk = randn<double>({d}, rng, 0, 0.1, true);
        p.wv = randn<double>({d, d}, rng, 0, 0.5, true);
        p.bv = randn<double>({d}, rng, 0, 0.1, true);
        p.wo = randn<double>({d, d}, rng, 0, 0.5, true);
        p.bo = randn<double>({d}, rng, 0, 0.1, true);
        auto q = randn<double>({3, d}, rng, 0, 1, true);
        auto k = randn<double>({4, d}, rng, 0, 1, true);
        auto v = randn<double>({4, d}, rng, 0, 1, true);
        up(gradcheck([&](Tape<double>* t) {
            auto res = multi_head_attention(t, q, k, v, p, 2, 0.0, false, nullptr);
            return weighted_sum(t, res.out, RngStream(seed * 100 + 12));
        }, {q, k, v, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo}));
    }
    return worst;
}

// Full desk-scale forward: analytic gradients versus central differences at
// sampled coordinates of the expression input, the DNA input, and parameters.
double desk_forward_check(std::uint64_t seed) {
    const ModelConfig cfg;  // desk scale
    auto p = init_model<double>(cfg, seed);
    p.set_requires_grad(true);
    RngStream rng(seed * 7 + 3);
    auto expr = uniform<double>({cfg.n_genes, 1}, rng, 0.0, 8.0, true);
    auto dna = randn<double>({cfg.n_bins, cfg.dna_embed_dim}, rng, 0.0, 0.5, true);
    dna->requires_grad = true;
    dna->ensure_grad();

    const auto build = [&](Tape<double>* t) {
        auto res = forward_predict<double>(t, expr, dna, p, false, nullptr);
        return weighted_sum(t, res.pred, RngStream(seed * 100 + 77));
    };
    Tape<double> tape;
    auto loss = build(&tape);
    tape.backward(loss);

    const auto eval = [&]() {
        Tape<double> t2;
        return build(&t2)->v[0];
    };
    const auto fd_at = [&](const T64& t, std::size_t i) {
        const double h = 1e-5, orig = t->v[i];
        t->v[i] = orig + h;
        const double fp = eval();
        t->v[i] = orig - h;
        const double fm = eval();
        t->v[i] = orig;
        return (fp - fm) / (2 * h);
    };

    double worst = 0;
    for (int k = 0; k < 10; ++k) {
        const std::size_t i = rng.below(expr->numel());
        worst = std::max(worst, grad_ratio(expr->g[i], fd_at(expr, i)));
    }
    for (int k = 0; k < 6; ++k) {
        const std::size_t i = rng.below(dna->numel());
        worst = std::max(worst, grad_ratio(dna->g[i], fd_at(dna, i)));
    }
    const auto named = p.named();
    for (int k = 0; k < 24; ++k) {
        const auto& [name, t] = named[rng.below(named.size())];
        const std::size_t i = rng.below(t->numel());
        worst = std::max(worst, grad_ratio(t->g[i], fd_at(t, i)));
    }
    return worst;
}

void criterion_1() {
    const auto t0 = Clock::now();
    double worst = 0;
    std::uint64_t n_seeds = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed, ++n_seeds) {
        worst = std::max(worst, op_sweep(seed));
        worst = std::max(worst, desk_forward_check(seed));
    }
    const double secs = seconds_since(t0);
    const bool pass = worst <= 1.0 && secs < 120.0;
    record(1, pass,
           "op + desk-forward gradients vs central differences (h=1e-5): worst deviation " +
               fmt(worst) + "x the 1e-4 relative bound over " + std::to_string(n_seeds) +
               " seeds in " + fmt(secs, 3) + " s (budget 120 s)",
           t0);
}

// ---- criterion 4 oracles ---------------------------------------------------------

long double fact(int n) {
    static std::vector<long double> table = {1.0L};
    while ((int)table.size() <= n) table.push_back(table.back() * (long double)table.size());
    return table[n];
}

long double choose(int n, int k) {
    if (k < 0 || k > n) return 0.0L;
    return fact(n) / (fact(k) * fact(n - k));
}

double fisher_p_oracle(int a, int b, int c, int d) {
    const int r1 = a + b, r2 = c + d, c1 = a + c;
    const long double denom = choose(r1 + r2, c1);
    const int kmin = std::max(0, c1 - r2), kmax = std::min(r1, c1);
    const long double p_obs = choose(r1, a) * choose(r2, c1 - a) / denom;
    long double p = 0.0L;
    for (int k = kmin; k <= kmax; ++k) {
        const long double pk = choose(r1, k) * choose(r2, c1 - k) / denom;
        if (pk <= p_obs * (1.0L + 1e-7L)) p += pk;
    }
    return (double)std::min(p, 1.0L);
}

// Direct tail summation in extended precision via log-gamma terms.
double hypergeom_sf_oracle(int k, int M, int K, int n) {
    const int lo = std::max(0, n - (M - K)), hi = std::min(K, n);
    if (k > hi) return 0.0;
    const auto lchoose = [](int nn, int kk) -> long double {
        if (kk < 0 || kk > nn) return -1e30L;
        return std::lgammal(nn + 1.0L) - std::lgammal(kk + 1.0L) - std::lgammal(nn - kk + 1.0L);
    };
    long double s = 0.0L;
    const long double ld = lchoose(M, n);
    for (int j = std::max(k, lo); j <= hi; ++j)
        s += expl(lchoose(K, j) + lchoose(M - K, n - j) - ld);
    return (double)std::min(s, 1.0L);
}

void criterion_4() {
    const auto t0 = Clock::now();
    RngStream rng(404);
    double worst_fisher = 0;
    for (int i = 0; i < 1000; ++i) {
        const int a = (int)rng.below(16), b = (int)rng.below(16), c = (int)rng.below(16),
                  d = (int)rng.below(16);
        if (a + b + c + d == 0) continue;
        const double got = fisher_exact_haldane(a, b, c, d).p;
        worst_fisher = std::max(worst_fisher, std::abs(got - fisher_p_oracle(a, b, c, d)));
    }
    double worst_hg = 0;
    for (int i = 0; i < 300; ++i) {
        const int M = 2 + (int)rng.below(4999);
        const int K = (int)rng.below(M + 1);
        const int n = (int)rng.below(M + 1);
        const int k = (int)rng.below(n + 1);
        const double got = hypergeom_sf(k, M, K, n);
        worst_hg = std::max(worst_hg, std::abs(got - hypergeom_sf_oracle(k, M, K, n)));
    }

    // Fold arithmetic on planted rankings: top-100 sets overlapping in
    // exactly 28 of 2361, and a 165-by-679 set overlap of 132.
    const std::size_t M = 2361;
    std::vector<double> att(M, 0.0), eff(M, 0.0);
    for (std::size_t i = 0; i < 100; ++i) att[i] = 1000.0 - double(i);
    for (std::size_t i = 72; i < 172; ++i) eff[i] = 1000.0 - double(i);
    const TopnOverlap ov = topn_overlap_enrichment(att, eff, 100);
    std::vector<std::string> sa, sb;
    for (int i = 0; i < 165; ++i) sa.push_back("g" + std::to_string(i));
    for (int i = 33; i < 712; ++i) sb.push_back("g" + std::to_string(i));  // overlap 132
    const OverlapStat cv = convergence_overlap(sa, sb, M);

    const double secs = seconds_since(t0);
    const bool pass = worst_fisher < 1e-10 && worst_hg < 1e-10 && ov.k == 28 &&
                      std::abs(ov.fold - 6.61) < 0.005 && cv.overlap == 132 &&
                      std::abs(cv.expected - 47.5) < 0.05 && std::abs(cv.fold - 2.8) < 0.05 &&
                      secs < 120.0;
    record(4, pass,
           "Fisher vs enumeration max |dp| " + fmt(worst_fisher, 3) +
               ", hypergeom_sf vs summation max |dp| " + fmt(worst_hg, 3) +
               "; k=28/N=100/M=2361 fold " + fmt(ov.fold, 4) + " (want 6.61), 165x679 overlap " +
               std::to_string(cv.overlap) + " expected " + fmt(cv.expected, 4) + " fold " +
               fmt(cv.fold, 4) + " (want 47.5 / 2.8); " + fmt(secs, 3) + " s (budget 120 s)",
           t0);
}

void criterion_5() {
    const auto t0 = Clock::now();
    RngStream rng(5);
    std::vector<double> att(896);
    for (auto& x : att) x = rng.normal();
    const auto top = select_top_bins(att, 0.10);
    record(5, top.size() == 89,
           "fraction 0.10 of 896 bins selects " + std::to_string(top.size()) + " (want 89)", t0);
}

void criterion_6() {
    const auto t0 = Clock::now();
    const std::size_t n = 40;
    std::vector<std::string> nodes;
    for (std::size_t i = 0; i < n; ++i) nodes.push_back("N" + std::to_string(i));
    Mat scores(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            if (i != j && (i / 20) == (j / 20)) scores.at(i, j) = 1.0;
    scores.at(19, 20) = scores.at(20, 19) = 1.0;  // single bridge
    const GeneGraph g = build_attention_graph(scores, nodes, 0.9);
    const CommunityPartition part = louvain_communities(g, 1.0, 11);
    const CommunityPartition again = louvain_communities(g, 1.0, 11);
    bool exact = part.community.size() == n;
    for (std::size_t i = 0; exact && i < n; ++i) {
        exact = part.community[i] == part.community[i / 20 * 20];
        if (i < 20) exact = exact && part.community[i] != part.community[39];
    }
    std::size_t n_comm = 0;
    for (const std::size_t c : part.community) n_comm = std::max(n_comm, c + 1);
    const double q = graph_modularity(g, part.community);
    const bool pass = exact && n_comm == 2 && q > 0.3 && again.community == part.community;
    record(6, pass,
           "two 20-cliques + bridge -> " + std::to_string(n_comm) + " communities" +
               (exact ? " (exact split)" : " (WRONG split)") + ", modularity " + fmt(q, 4) +
               " (want > 0.3), rerun identical: " + (again.community == part.community ? "yes" : "no"),
           t0);
}

void criterion_7() {
    const auto t0 = Clock::now();
    const std::size_t B = 896;
    RngStream root(777);
    std::vector<double> pvals;
    for (int wi = 0; wi < 200; ++wi) {
        RngStream rng = root.fork(std::uint64_t(wi));
        const std::size_t n_peaks = 150 + rng.below(301);
        std::vector<std::size_t> bins(B);
        for (std::size_t i = 0; i < B; ++i) bins[i] = i;
        shuffle(bins, rng);
        BinIntervals iv;
        for (std::size_t i = 0; i < n_peaks; ++i) iv.push_back({bins[i], bins[i] + 1});
        std::vector<double> att(B);
        for (auto& x : att) x = rng.normal();
        pvals.push_back(circular_permutation_test(att, iv, 0.10, 1000, rng.u64()).p);
    }
    const double ks_p = ks_uniform_pvalue(pvals);

    RngStream rng(778);
    std::vector<double> att(B);
    for (auto& x : att) x = rng.normal();
    const bool shift0 = circular_shift(att, 0) == att;

    record(7, ks_p > 0.01 && shift0,
           "null permutation p over 200 worlds: KS uniformity p " + fmt(ks_p, 4) +
               " (want > 0.01); shift-0 identity exact: " + (shift0 ? "yes" : "no"),
           t0);
}

// ---- shared desk-scale state -----------------------------------------------------

RunConfig desk_config(const fs::path& out, std::uint64_t seed) {
    RunConfig cfg;
    cfg.model.n_genes = cfg.world.n_genes;
    cfg.model.n_bins = cfg.world.n_bins;
    cfg.model.dna_embed_dim = cfg.world.embed_dim;
    cfg.out_dir = out.string();
    override_seed(cfg, seed);
    return cfg;
}

struct TrainedSeed {
    double train_secs = 0;
    double curated_r = 0;  // validation mean pseudo-bulk r, curated gene set
    AnalysisResult analysis;
};

}  // namespace

int main() {
    const auto wall0 = Clock::now();
    std::setvbuf(stdout, nullptr, _IONBF, 0);

    const fs::path scratch =
        fs::temp_directory_path() / ("cdt_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(scratch);
    fs::create_directories(scratch);

    try {
        // Cheap, self-contained criteria first.
        criterion_1();

        {  // A3: exact log2FC identities
            const auto t0 = Clock::now();
            const WorldConfig wc;
            progress("generating desk world (seed 1) for the exactness checks");
            GroundTruthWorld w = generate_world([&] {
                WorldConfig c = wc;
                c.seed = 1;
                return c;
            }());
            const auto z = compute_log2fc(w.ntc_mean_cpm, w.ntc_mean_cpm);
            bool all_zero = true;
            for (const double v : z) all_zero = all_zero && v == 0.0;
            const auto one = compute_log2fc({3.0}, {1.0});
            const bool unit = one.size() == 1 && one[0] == 1.0;
            record(3, all_zero && unit,
                   "log2FC(NTC mean vs itself) vectorwide zero over " + std::to_string(z.size()) +
                       " genes: " + (all_zero ? "yes" : "no") +
                       "; (3,1) -> " + fmt(one[0], 17) + " exactly",
                   t0);
        }

        criterion_4();
        criterion_5();
        criterion_6();
        criterion_7();

        // Desk-scale pipeline, twice, through the same entry points the CLI
        // uses: run 1 feeds the trained-model criteria, run 2 the
        // determinism comparison.
        const fs::path run1 = scratch / "run1", run2 = scratch / "run2";
        fs::create_directories(run1);
        fs::create_directories(run2);
        const RunConfig cfg1 = desk_config(run1, 1);

        progress("pipeline run 1/2: simulate + train + analyze + report (seed 1)");
        double seed1_train_secs = 0;
        {
            cmd_simulate(cfg1);
            const auto t0 = Clock::now();
            cmd_train(cfg1);
            seed1_train_secs = seconds_since(t0);
            cmd_analyze(cfg1);
            cmd_report(cfg1);
        }
        progress("pipeline run 2/2 for the determinism criterion");
        {
            const RunConfig cfg2 = desk_config(run2, 1);
            cmd_simulate(cfg2);
            cmd_train(cfg2);
            cmd_analyze(cfg2);
            cmd_report(cfg2);
        }

        {  // A13: byte-identical artifacts
            const auto t0 = Clock::now();
            std::size_t compared = 0, differing = 0;
            std::string first_diff;
            for (const auto& e : fs::recursive_directory_iterator(run1)) {
                if (!e.is_regular_file()) continue;
                const fs::path rel = fs::relative(e.path(), run1);
                ++compared;
                if (!fs::exists(run2 / rel) || slurp(run2 / rel) != slurp(e.path())) {
                    ++differing;
                    if (first_diff.empty()) first_diff = rel.string();
                }
            }
            std::size_t other = 0;
            for (const auto& e : fs::recursive_directory_iterator(run2))
                if (e.is_regular_file()) ++other;
            const bool pass = compared >= 25 && differing == 0 && other == compared;
            record(13, pass,
                   "identical config rerun: " + std::to_string(compared) + " artifacts, " +
                       std::to_string(differing) + " differ" +
                       (first_diff.empty() ? "" : " (first: " + first_diff + ")"),
                   t0);
        }

        // Rehydrate run 1 and analyze it in process; seeds 2..5 train fresh.
        progress("loading run-1 world and checkpoint for the trained-model criteria");
        std::map<std::uint64_t, TrainedSeed> seeds;
        std::vector<double> ablated_r;
        {
            std::vector<CellSample> cells;
            GroundTruthWorld w = load_world((run1 / "world").string(), &cells);
            const RunConfig& cfg = cfg1;
            ModelParams<double> trained =
                load_checkpoint<double>(run1 / "train" / "checkpoint.cdtt", cfg.model);

            {  // A2 on the trained model and an untrained one, all row kinds
                const auto t0 = Clock::now();
                const LocusMap<double> loci = world_locus_map(w);
                std::vector<CellSample> probe;
                for (std::size_t i = 0; i < cells.size(); i += cells.size() / 8) {
                    probe.push_back(cells[i]);
                    if (probe.size() == 8) break;
                }
                const AttentionChecks tr = check_attention_rows(trained, probe, loci);
                auto fresh = init_model<double>(cfg.model, 7);
                const AttentionChecks un = check_attention_rows(fresh, probe, loci);
                const bool pass = tr.max_row_dev <= 1e-5 && tr.min_entry >= 0.0 &&
                                  un.max_row_dev <= 1e-5 && un.min_entry >= 0.0 &&
                                  tr.rows_checked > 0 && un.rows_checked > 0;
                record(2, pass,
                       "row sums within 1e-5 of 1 and entries >= 0 over " +
                           std::to_string(tr.rows_checked) +
                           " rows x 4 map kinds: trained max dev " + fmt(tr.max_row_dev, 3) +
                           ", untrained max dev " + fmt(un.max_row_dev, 3),
                       t0);
            }

            progress("analyzing run-1 model in process (attention atlas + enrichment + attribution)");
            TrainedSeed s1;
            s1.train_secs = seed1_train_secs;
            s1.analysis = analyze_run(w, cells, trained, cfg.analysis);
            std::vector<CellSample> val;
            for (const auto& c : cells)
                if (c.split == Split::val) val.push_back(c);
            const std::vector<double> mask = curated_gene_mask(w);
            const LocusMap<double> loci = world_locus_map(w);
            s1.curated_r = evaluate_metrics(trained, val, loci, &mask).mean_pseudobulk_r;
            seeds.emplace(1, std::move(s1));
        }

        for (std::uint64_t seed = 2; seed <= 5; ++seed) {
            progress("training curated seed " + std::to_string(seed) + "/5");
            RunConfig cfg = desk_config(scratch, seed);
            GroundTruthWorld w = generate_world(cfg.world);
            std::vector<CellSample> cells = generate_cells(w);
            split_genes(w, w.holdout_genes, cells);
            std::vector<CellSample> train, val;
            for (const auto& c : cells)
                (c.split == Split::val ? val : train).push_back(c);
            const std::vector<double> mask = curated_gene_mask(w);
            const LocusMap<double> loci = world_locus_map(w);
            const auto init = init_model<double>(cfg.model, cfg.train.seed);

            TrainedSeed ts;
            const auto t0 = Clock::now();
            TrainResult res = train_loop(init, train, val, loci, cfg.train, &mask, {});
            ts.train_secs = seconds_since(t0);
            ts.curated_r = evaluate_metrics(res.best_params, val, loci, &mask).mean_pseudobulk_r;
            progress("analyzing curated seed " + std::to_string(seed));
            ts.analysis = analyze_run(w, cells, res.best_params, cfg.analysis);
            seeds.emplace(seed, std::move(ts));
        }

        {  // A8: held-out hub recovery across seeds
            const auto t0 = Clock::now();
            int hits = 0;
            double max_secs = 0;
            std::string per_seed;
            for (const auto& [seed, ts] : seeds) {
                const TopnOverlap& h = ts.analysis.hub_recovery;
                const bool ok = h.fold >= 3.0 && h.p < 1e-3;
                hits += ok;
                max_secs = std::max(max_secs, ts.train_secs);
                per_seed += (per_seed.empty() ? "" : ", ") + std::string("s") +
                            std::to_string(seed) + " fold " + fmt(h.fold, 3) + " p " +
                            fmt(h.p, 3) + (ok ? "" : " (miss)");
            }
            const bool budget = max_secs < 600.0 && cfg1.train.max_epochs <= 100;
            record(8, hits >= 4 && budget,
                   "top-50 hub-row recovery: " + std::to_string(hits) +
                       "/5 seeds at fold >= 3 and p < 1e-3 [" + per_seed +
                       "]; slowest training " + fmt(max_secs, 3) + " s of 600, <= " +
                       std::to_string(cfg1.train.max_epochs) + " epochs",
                   t0);
        }

        {  // A9: regulatory-element recovery on the trained model (seed 1)
            const auto t0 = Clock::now();
            const AnalysisResult& a = seeds.at(1).analysis;
            bool d_ok = !a.bin_class.d_vs_unannotated.empty();
            std::string d_txt;
            for (const auto& [cls, d] : a.bin_class.d_vs_unannotated) {
                d_ok = d_ok && d > 0.5;
                d_txt += (d_txt.empty() ? "" : ", ") + cls + " d " + fmt(d, 3);
            }
            const bool pass = a.frac_pass >= 0.8 && d_ok && a.bin_class.kw.p < 1e-6;
            record(9, pass,
                   fmt(100.0 * a.frac_pass, 3) + "% of " + std::to_string(a.n_testable) +
                       " testable (gene, mark) combos at OR > 2, Fisher p < 1e-3, perm p < 0.05 "
                       "(want >= 80%); " +
                       d_txt + " (want > 0.5); KW p " + fmt(a.bin_class.kw.p, 3) + " (want < 1e-6)",
                   t0);
        }

        // A10: ablation — retrain the same seeds with the noise-masked genes
        // folded into the loss and metrics.
        {
            const auto t0 = Clock::now();
            double curated_mean = 0, ablated_mean = 0;
            std::string per_seed;
            for (std::uint64_t seed = 1; seed <= 5; ++seed) {
                progress("training ablated seed " + std::to_string(seed) + "/5");
                RunConfig cfg = desk_config(scratch, seed);
                cfg.curated_gene_set = false;
                GroundTruthWorld w = generate_world(cfg.world);
                std::vector<CellSample> cells = generate_cells(w);
                split_genes(w, w.holdout_genes, cells);
                std::vector<CellSample> train, val;
                for (const auto& c : cells)
                    (c.split == Split::val ? val : train).push_back(c);
                const LocusMap<double> loci = world_locus_map(w);
                const auto init = init_model<double>(cfg.model, cfg.train.seed);
                TrainResult res = train_loop(init, train, val, loci, cfg.train, nullptr, {});
                const double r =
                    evaluate_metrics(res.best_params, val, loci, nullptr).mean_pseudobulk_r;
                ablated_r.push_back(r);
                ablated_mean += r / 5.0;
                curated_mean += seeds.at(seed).curated_r / 5.0;
                per_seed += (per_seed.empty() ? "" : ", ") + std::string("s") +
                            std::to_string(seed) + " " + fmt(seeds.at(seed).curated_r, 3) +
                            " vs " + fmt(r, 3);
            }
            const double drop = curated_mean - ablated_mean;
            record(10, drop >= 0.05,
                   "validation mean pseudo-bulk r, curated " + fmt(curated_mean, 4) +
                       " vs noise-gene-ablated " + fmt(ablated_mean, 4) + " (drop " +
                       fmt(drop, 4) + ", want >= 0.05) [" + per_seed + "]",
                   t0);
        }

        {  // A11: attribution vs planted GRN
            const auto t0 = Clock::now();
            const AnalysisResult& a = seeds.at(1).analysis;
            const bool pass = a.attrib_r > 0.3 && a.attrib_ratio > 5.0;
            record(11, pass,
                   "input-gradient matrix vs planted |GRN|: r " + fmt(a.attrib_r, 4) +
                       " (want > 0.3), " + fmt(a.attrib_ratio, 3) +
                       "x the median |r| of 20 entry-permuted nulls (want > 5x)",
                   t0);
        }

        {  // A12: convergent module recovery
            const auto t0 = Clock::now();
            const AnalysisResult& a = seeds.at(1).analysis;
            const bool pass = a.rna_module_q < 1e-3 && a.cross_module_q < 1e-3 &&
                              a.module_overlap.fold >= 2.0 && a.module_overlap.p < 1e-3;
            record(12, pass,
                   "module community q: RNA " + fmt(a.rna_module_q, 3) + ", cross " +
                       fmt(a.cross_module_q, 3) + " (want < 1e-3); overlap fold " +
                       fmt(a.module_overlap.fold, 3) + " p " + fmt(a.module_overlap.p, 3) +
                       " (want >= 2, < 1e-3)",
                   t0);
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "[acceptance] aborted: %s\n", e.what());
        std::printf("ACCEPTANCE ERROR: %s\n", e.what());
        fs::remove_all(scratch);
        return 2;
    }

    fs::remove_all(scratch);

    std::sort(verdicts.begin(), verdicts.end(),
              [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
    std::size_t passed = 0;
    for (const auto& v : verdicts) {
        std::printf("A%-3d %s  %s  (%.1f s)\n", v.id, v.pass ? "PASS" : "FAIL",
                    v.detail.c_str(), v.secs);
        passed += v.pass;
    }
    std::printf("ACCEPTANCE: %zu/%zu criteria passed in %.1f min\n", passed, verdicts.size(),
                seconds_since(wall0) / 60.0);
    return passed == verdicts.size() ? 0 : 1;
}
