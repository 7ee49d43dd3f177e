#include "cdt/world.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "cdt/blob.hpp"
#include "cdt/tensor.hpp"

namespace cdt {

using json = nlohmann::json;

namespace {

constexpr double kLn2 = 0.6931471805599453;
constexpr double kSelfEffect = -2.0;

std::string gene_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "G%03d", i);
    return std::string(buf);
}

std::string snp_name(int i) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "SNP%02d", i);
    return std::string(buf);
}

// Response-noise sd (log2) and the matching lognormal mean factor for gene g.
double noise_sigma(const GroundTruthWorld& w, int g) {
    return w.noise_gene_mask[g] ? w.cfg.sigma_noise : w.cfg.sigma_clean;
}

double noise_kappa(const GroundTruthWorld& w, int g) {
    const double s = noise_sigma(w, g) * kLn2;
    return std::exp(0.5 * s * s);
}

// Expected relative library-size change of a perturbed cell, minus one.
// Balancing drives this to ~0 per row so renormalization does not shift the
// realized log2FC of untargeted genes.
double renorm_excess(const GroundTruthWorld& w, const double* row, double pos_scale) {
    double acc = 0.0;
    const int G = w.cfg.n_genes;
    for (int g = 0; g < G; ++g) {
        const double wg = row[g] > 0.0 ? row[g] * pos_scale : row[g];
        acc += w.baseline_weight[g] * noise_kappa(w, g) * std::exp2(wg);
    }
    return acc - 1.0;
}

// Scale the positive entries of an effect row so a perturbed cell's expected
// total counts match the baseline. Deterministic bisection; rows without
// positive entries (or with negligible excess) are left untouched.
void balance_row(const GroundTruthWorld& w, double* row) {
    const int G = w.cfg.n_genes;
    bool has_pos = false;
    for (int g = 0; g < G; ++g)
        if (row[g] > 0.0) has_pos = true;
    if (!has_pos) return;
    const double f1 = renorm_excess(w, row, 1.0);
    if (std::abs(f1) <= 5e-3) return;
    if (renorm_excess(w, row, 0.0) > 0.0) return;  // no root; excess already small
    double lo = 0.0, hi = 1.0;
    if (f1 < 0.0) {
        hi = 2.0;
        while (hi < 16.0 && renorm_excess(w, row, hi) < 0.0) hi *= 2.0;
        if (renorm_excess(w, row, hi) < 0.0) return;
        lo = hi / 2.0;
    }
    for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + hi);
        (renorm_excess(w, row, mid) < 0.0 ? lo : hi) = mid;
    }
    const double s = 0.5 * (lo + hi);
    for (int g = 0; g < G; ++g)
        if (row[g] > 0.0) row[g] *= s;
}

// Strong + graded signed magnitudes for one hub program, with both signs
// guaranteed at least a quarter of the edges.
std::vector<double> draw_program_weights(const WorldConfig& cfg, RngStream& rng) {
    std::vector<double> ws;
    ws.reserve(static_cast<std::size_t>(cfg.targets_per_hub + cfg.graded_per_hub));
    for (int t = 0; t < cfg.targets_per_hub; ++t) ws.push_back(rng.uniform(1.2, 2.0));
    for (int t = 0; t < cfg.graded_per_hub; ++t) ws.push_back(rng.uniform(0.3, 1.1));
    std::vector<int> sign(ws.size());
    for (auto& s : sign) s = rng.uniform() < 0.5 ? -1 : 1;
    const int quota = static_cast<int>(ws.size()) / 4;
    for (const int want : {+1, -1}) {
        int have = 0;
        for (std::size_t i = 0; i < ws.size(); ++i)
            if (sign[i] == want) ++have;
        // Flip the smallest magnitudes of the majority sign until the quota
        // holds; iteration order over ascending magnitude is deterministic.
        std::vector<std::size_t> order(ws.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::sort(order.begin(), order.end(),
                  [&](std::size_t a, std::size_t b) { return ws[a] < ws[b]; });
        for (const std::size_t i : order) {
            if (have >= quota) break;
            if (sign[i] != want) {
                sign[i] = want;
                ++have;
            }
        }
    }
    for (std::size_t i = 0; i < ws.size(); ++i) ws[i] *= sign[i];
    return ws;
}

std::vector<int> pick_distinct(const std::vector<int>& pool, std::size_t n, RngStream& rng) {
    std::vector<int> p = pool;
    shuffle(p, rng);
    p.resize(n);
    return p;
}

const char* split_name(Split s) { return s == Split::val ? "val" : "train"; }

std::vector<std::string> ids_of(const GroundTruthWorld& w, const std::vector<int>& idx) {
    std::vector<std::string> out;
    out.reserve(idx.size());
    for (const int i : idx) out.push_back(w.genes[i]);
    return out;
}

}  // namespace

void WorldConfig::validate() const {
    if (n_genes < 2 || n_bins < 1 || embed_dim < 1)
        throw ConfigError("world dimensions must be positive (n_genes >= 2)");
    if (hub_count < 0 || targets_per_hub < 0 || graded_per_hub < 0)
        throw ConfigError("hub counts must be nonnegative");
    if (hub_count > 0 &&
        hub_count + module_size + targets_per_hub + graded_per_hub >= n_genes)
        throw ConfigError("hub/target/module counts infeasible for " +
                          std::to_string(n_genes) + " genes");
    if (module_perturbed > module_size)
        throw ConfigError("module_perturbed exceeds module_size");
    if (n_perturbed < hub_count + module_perturbed || n_perturbed > n_genes)
        throw ConfigError("n_perturbed must cover hubs and perturbed module genes");
    if (holdout_count < 1 || holdout_count > n_perturbed)
        throw ConfigError("holdout_count out of range");
    if (n_snp_loci > 0 && (snp_targets < 2 || snp_targets > n_genes))
        throw ConfigError("snp_targets must be in [2, n_genes]");
    if (cells_per_locus < 1 || ntc_cells < 2)
        throw ConfigError("cell counts too small (ntc_cells >= 2)");
    if (noise_gene_count < 0 || noise_gene_count > n_genes / 2)
        throw ConfigError("noise_gene_count must be <= n_genes/2");
    if (planted_bins_per_locus < 0 || planted_bins_per_locus > n_bins)
        throw ConfigError("planted_bins_per_locus out of range");
    for (const double s : {gene_profile_sigma, library_sigma, sigma_baseline_log2,
                           sigma_clean, sigma_noise, embed_noise, signal_amp})
        if (!(s >= 0.0) || !std::isfinite(s))
            throw ConfigError("world sigmas must be finite and nonnegative");
    if (!(gate_min > 0.0) || !(gate_max >= gate_min))
        throw ConfigError("gate range invalid");
    if (!(background_edge_prob >= 0.0) || !(background_edge_prob < 1.0))
        throw ConfigError("background_edge_prob must be in [0,1)");
}

int GroundTruthWorld::gene_id(const std::string& name) const {
    const auto it = gene_index.find(name);
    if (it == gene_index.end()) throw LookupError("unknown gene: " + name);
    return it->second;
}

const LocusRecord& GroundTruthWorld::locus(const std::string& id) const {
    const auto it = locus_index.find(id);
    if (it == locus_index.end()) throw LookupError("unknown locus: " + id);
    return loci[static_cast<std::size_t>(it->second)];
}

bool GroundTruthWorld::is_snp_tag(const std::string& id) const {
    for (const auto& s : snp_ids)
        if (s == id) return true;
    return false;
}

const double* GroundTruthWorld::effect_row(const std::string& perturbed_id) const {
    const auto it = gene_index.find(perturbed_id);
    if (it != gene_index.end()) return grn.row(static_cast<std::size_t>(it->second));
    for (std::size_t s = 0; s < snp_ids.size(); ++s)
        if (snp_ids[s] == perturbed_id) return snp_effects.row(s);
    throw LookupError("unknown perturbation target: " + perturbed_id);
}

const std::vector<std::string>& mark_names() {
    static const std::vector<std::string> marks = {"DNase", "H3K4me3", "H3K27ac",
                                                   "H3K4me1", "CTCF"};
    return marks;
}

void generate_regulatory_network(GroundTruthWorld& w) {
    const WorldConfig& cfg = w.cfg;
    const int G = cfg.n_genes;
    RngStream master(cfg.seed);

    w.genes.clear();
    w.gene_index.clear();
    for (int i = 0; i < G; ++i) {
        w.genes.push_back(gene_name(i));
        w.gene_index[w.genes.back()] = i;
    }

    // Across-gene lognormal baseline profile, normalized to mean-CPM shares.
    {
        RngStream rng = master.fork("profile");
        w.baseline_weight.assign(static_cast<std::size_t>(G), 0.0);
        double total = 0.0;
        for (int g = 0; g < G; ++g) {
            w.baseline_weight[static_cast<std::size_t>(g)] =
                std::exp(cfg.gene_profile_sigma * rng.normal());
            total += w.baseline_weight[static_cast<std::size_t>(g)];
        }
        for (double& x : w.baseline_weight) x /= total;
    }

    w.grn = Mat(static_cast<std::size_t>(G), static_cast<std::size_t>(G), 0.0);
    for (int i = 0; i < G; ++i) w.grn.at(i, i) = kSelfEffect;

    w.hub_genes.clear();
    w.module_genes.clear();
    w.perturbed.clear();
    w.holdout_genes.clear();
    w.gene_sets.clear();

    std::vector<int> others;  // non-hub, non-module gene pool
    if (cfg.hub_count > 0) {
        RngStream layout = master.fork("layout");
        std::vector<int> order(static_cast<std::size_t>(G));
        std::iota(order.begin(), order.end(), 0);
        shuffle(order, layout);
        w.hub_genes.assign(order.begin(), order.begin() + cfg.hub_count);
        w.module_genes.assign(order.begin() + cfg.hub_count,
                              order.begin() + cfg.hub_count + cfg.module_size);
        others.assign(order.begin() + cfg.hub_count + cfg.module_size, order.end());
        std::sort(w.module_genes.begin(), w.module_genes.end());

        // Perturbation roster: hubs, first module genes, then filler.
        w.perturbed = w.hub_genes;
        for (int k = 0; k < cfg.module_perturbed; ++k)
            w.perturbed.push_back(w.module_genes[static_cast<std::size_t>(k)]);
        std::vector<int> filler = others;
        shuffle(filler, layout);
        const int extra = cfg.n_perturbed - static_cast<int>(w.perturbed.size());
        for (int k = 0; k < extra; ++k)
            w.perturbed.push_back(filler[static_cast<std::size_t>(k)]);

        // Holdout: the held-out hub plus filler perturbations (never the
        // mediator hubs or module genes, so their programs stay trainable).
        w.holdout_genes.push_back(w.genes[static_cast<std::size_t>(w.hub_genes[0])]);
        for (int k = 0; k < cfg.holdout_count - 1 && k < extra; ++k)
            w.holdout_genes.push_back(
                w.genes[static_cast<std::size_t>(filler[static_cast<std::size_t>(k)])]);
    } else {
        w.perturbed.resize(static_cast<std::size_t>(std::min(cfg.n_perturbed, G)));
        std::iota(w.perturbed.begin(), w.perturbed.end(), 0);
        w.holdout_genes.push_back(w.genes[0]);
    }

    // Irreproducible-target mask: drawn from the low-expression half of the
    // profile, never hubs or module members.
    w.noise_gene_mask.assign(static_cast<std::size_t>(G), 0);
    {
        RngStream rng = master.fork("noisemask");
        std::vector<int> by_weight(static_cast<std::size_t>(G));
        std::iota(by_weight.begin(), by_weight.end(), 0);
        std::sort(by_weight.begin(), by_weight.end(), [&](int a, int b) {
            const double wa = w.baseline_weight[static_cast<std::size_t>(a)];
            const double wb = w.baseline_weight[static_cast<std::size_t>(b)];
            return wa != wb ? wa < wb : a < b;
        });
        std::vector<int> cand;
        for (int k = 0; k < G / 2; ++k) {
            const int g = by_weight[static_cast<std::size_t>(k)];
            const bool is_hub = std::find(w.hub_genes.begin(), w.hub_genes.end(), g) !=
                                w.hub_genes.end();
            const bool in_module = std::find(w.module_genes.begin(), w.module_genes.end(),
                                             g) != w.module_genes.end();
            if (!is_hub && !in_module) cand.push_back(g);
        }
        if (static_cast<int>(cand.size()) < cfg.noise_gene_count)
            throw ConfigError("not enough low-expression genes for the noise mask");
        shuffle(cand, rng);
        for (int k = 0; k < cfg.noise_gene_count; ++k)
            w.noise_gene_mask[static_cast<std::size_t>(cand[static_cast<std::size_t>(k)])] = 1;
    }

    if (cfg.hub_count > 0) {
        RngStream rng = master.fork("grn");
        const int program_size = cfg.targets_per_hub + cfg.graded_per_hub;

        // Held-out hub program, reused (scaled) by the mediator hubs.
        const std::vector<int> hub0_targets =
            pick_distinct(others, static_cast<std::size_t>(program_size), rng);
        const std::vector<double> hub0_w = draw_program_weights(cfg, rng);

        for (int h = 0; h < cfg.hub_count; ++h) {
            const int hub = w.hub_genes[static_cast<std::size_t>(h)];
            std::vector<int> targets;
            if (h == 0 || ((h == 1 || h == 2) && cfg.hub_count >= 3)) {
                const double scale = h == 0 ? 1.0 : (h == 1 ? 0.8 : 0.6);
                for (std::size_t t = 0; t < hub0_targets.size(); ++t)
                    w.grn.at(static_cast<std::size_t>(hub),
                             static_cast<std::size_t>(hub0_targets[t])) = scale * hub0_w[t];
                targets = hub0_targets;
            } else if ((h == 3 || h == 4) && cfg.module_size > 0 &&
                       cfg.module_size <= program_size) {
                // Module drivers: every module gene goes down on knockdown,
                // the rest of the program is generic.
                for (const int m : w.module_genes) {
                    w.grn.at(static_cast<std::size_t>(hub), static_cast<std::size_t>(m)) =
                        -rng.uniform(0.9, 1.8);
                    targets.push_back(m);
                }
                const std::vector<int> rest = pick_distinct(
                    others, static_cast<std::size_t>(program_size - cfg.module_size), rng);
                for (const int t : rest) {
                    double mag = rng.uniform(0.3, 1.1);
                    if (rng.uniform() < 0.5) mag = -mag;
                    w.grn.at(static_cast<std::size_t>(hub), static_cast<std::size_t>(t)) = mag;
                    targets.push_back(t);
                }
            } else {
                targets = pick_distinct(others, static_cast<std::size_t>(program_size), rng);
                const std::vector<double> ws = draw_program_weights(cfg, rng);
                for (std::size_t t = 0; t < targets.size(); ++t)
                    w.grn.at(static_cast<std::size_t>(hub),
                             static_cast<std::size_t>(targets[t])) = ws[t];
            }
            std::sort(targets.begin(), targets.end());
            w.gene_sets["targets_" + w.genes[static_cast<std::size_t>(hub)]] =
                ids_of(w, targets);
        }

        // The held-out hub also drives its mediators down.
        if (cfg.hub_count >= 3) {
            w.grn.at(static_cast<std::size_t>(w.hub_genes[0]),
                     static_cast<std::size_t>(w.hub_genes[1])) = -1.4;
            w.grn.at(static_cast<std::size_t>(w.hub_genes[0]),
                     static_cast<std::size_t>(w.hub_genes[2])) = -1.0;
        }

        // Mutual co-regulation inside the module.
        for (const int m : w.module_genes) {
            std::vector<int> peers;
            for (const int j : w.module_genes)
                if (j != m) peers.push_back(j);
            const std::vector<int> chosen =
                pick_distinct(peers, std::min<std::size_t>(4, peers.size()), rng);
            for (const int j : chosen)
                w.grn.at(static_cast<std::size_t>(m), static_cast<std::size_t>(j)) =
                    -rng.uniform(0.25, 0.6);
        }

        // Sparse background edges.
        for (int i = 0; i < G; ++i)
            for (int j = 0; j < G; ++j) {
                if (i == j || w.grn.at(i, j) != 0.0) continue;
                if (rng.uniform() >= cfg.background_edge_prob) continue;
                double mag = rng.uniform(0.1, 0.4);
                if (rng.uniform() < 0.5) mag = -mag;
                w.grn.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = mag;
            }

        // Every row keeps at least two positive edges so renormalization
        // balancing has room to work.
        for (int i = 0; i < G; ++i) {
            int pos = 0;
            for (int j = 0; j < G; ++j)
                if (w.grn.at(i, j) > 0.0) ++pos;
            while (pos < 2) {
                const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(G)));
                if (j == i || w.grn.at(i, j) != 0.0) continue;
                w.grn.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) =
                    rng.uniform(0.3, 0.6);
                ++pos;
            }
        }

        w.gene_sets["module_core"] = ids_of(w, w.module_genes);
        std::vector<int> noisy;
        for (int g = 0; g < G; ++g)
            if (w.noise_gene_mask[static_cast<std::size_t>(g)]) noisy.push_back(g);
        w.gene_sets["noise_genes"] = ids_of(w, noisy);
    }

    // SNP windows: weak multi-gene rows with both signs present.
    w.snp_ids.clear();
    w.snp_effects = Mat(static_cast<std::size_t>(cfg.n_snp_loci),
                        static_cast<std::size_t>(G), 0.0);
    if (cfg.n_snp_loci > 0) {
        RngStream rng = master.fork("snp");
        std::vector<int> all(static_cast<std::size_t>(G));
        std::iota(all.begin(), all.end(), 0);
        for (int s = 0; s < cfg.n_snp_loci; ++s) {
            w.snp_ids.push_back(snp_name(s));
            const std::vector<int> targets =
                pick_distinct(all, static_cast<std::size_t>(cfg.snp_targets), rng);
            for (std::size_t t = 0; t < targets.size(); ++t) {
                double mag = rng.uniform(0.15, 0.45);
                if (t == 0)
                    ;  // forced positive
                else if (t == 1)
                    mag = -mag;  // forced negative
                else if (rng.uniform() < 0.5)
                    mag = -mag;
                w.snp_effects.at(static_cast<std::size_t>(s),
                                 static_cast<std::size_t>(targets[t])) = mag;
            }
        }
    }
}

namespace {

// Builds one locus record (gate, planted bins, embedding) and appends its
// peaks. Role signature vectors are shared across loci.
LocusRecord build_locus(GroundTruthWorld& w, const std::string& id, bool is_snp,
                        const std::vector<std::vector<double>>& role_sigs) {
    const WorldConfig& cfg = w.cfg;
    const int B = cfg.n_bins, E = cfg.embed_dim;
    RngStream rng = RngStream(cfg.seed).fork("locus:" + id);

    LocusRecord rec;
    rec.id = id;
    rec.perturbed_gene = id;
    rec.is_snp = is_snp;
    rec.gate = rng.uniform(cfg.gate_min, cfg.gate_max);

    // Planted bins with roles assigned in draw order, then sorted by bin.
    static const char* kRoles[3] = {"promoter", "enhancer", "ctcf"};
    const int n_planted = cfg.planted_bins_per_locus;
    std::vector<int> bins(static_cast<std::size_t>(B));
    std::iota(bins.begin(), bins.end(), 0);
    shuffle(bins, rng);
    std::vector<std::pair<int, int>> planted;  // (bin, role)
    for (int k = 0; k < n_planted; ++k) {
        const int role = k < 5 ? 0 : (k < 8 ? 1 : 2);
        planted.emplace_back(bins[static_cast<std::size_t>(k)], role);
    }
    std::sort(planted.begin(), planted.end());
    for (const auto& [bin, role] : planted) {
        rec.planted_bins.push_back(bin);
        rec.planted_roles.push_back(kRoles[role]);
    }

    // Decoy bins carry only H3K4me1.
    std::vector<int> decoys;
    if (n_planted > 0) {
        for (int k = n_planted; k < B && decoys.size() < 3; ++k)
            decoys.push_back(bins[static_cast<std::size_t>(k)]);
        std::sort(decoys.begin(), decoys.end());
    }

    // Locus identity direction.
    std::vector<double> u_locus(static_cast<std::size_t>(E));
    double norm = 0.0;
    for (auto& x : u_locus) {
        x = rng.normal();
        norm += x * x;
    }
    norm = std::sqrt(norm);
    for (auto& x : u_locus) x /= norm;

    // Background noise plus planted signal rows.
    rec.embedding = Mat(static_cast<std::size_t>(B), static_cast<std::size_t>(E));
    for (int b = 0; b < B; ++b)
        for (int e = 0; e < E; ++e)
            rec.embedding.at(static_cast<std::size_t>(b), static_cast<std::size_t>(e)) =
                cfg.embed_noise * rng.normal();
    static const double kRoleMult[3] = {1.3, 1.0, 1.15};
    for (const auto& [bin, role] : planted) {
        std::vector<double> dir(static_cast<std::size_t>(E));
        double dn = 0.0;
        for (int e = 0; e < E; ++e) {
            dir[static_cast<std::size_t>(e)] =
                u_locus[static_cast<std::size_t>(e)] +
                role_sigs[static_cast<std::size_t>(role)][static_cast<std::size_t>(e)];
            dn += dir[static_cast<std::size_t>(e)] * dir[static_cast<std::size_t>(e)];
        }
        dn = std::sqrt(dn);
        const double amp =
            cfg.signal_amp * kRoleMult[role] * rec.gate * std::sqrt(double(E)) / dn;
        for (int e = 0; e < E; ++e)
            rec.embedding.at(static_cast<std::size_t>(bin), static_cast<std::size_t>(e)) +=
                amp * dir[static_cast<std::size_t>(e)];
    }

    // Peak tracks. Planted-bin membership per mark is fixed by role.
    const auto add_peaks = [&](const std::string& mark, const std::vector<int>& members) {
        auto& track = w.peak_tracks[mark];
        for (const int b : members) track.push_back(Peak{id, b, b + 1});
    };
    std::vector<int> all_planted, promoter, enhancer, ctcf;
    for (std::size_t k = 0; k < rec.planted_bins.size(); ++k) {
        all_planted.push_back(rec.planted_bins[k]);
        if (rec.planted_roles[k] == "promoter") promoter.push_back(rec.planted_bins[k]);
        if (rec.planted_roles[k] == "enhancer") enhancer.push_back(rec.planted_bins[k]);
        if (rec.planted_roles[k] == "ctcf") ctcf.push_back(rec.planted_bins[k]);
    }
    std::vector<int> k4me1 = promoter;
    k4me1.insert(k4me1.end(), enhancer.begin(), enhancer.end());
    k4me1.insert(k4me1.end(), decoys.begin(), decoys.end());
    std::sort(k4me1.begin(), k4me1.end());
    std::vector<int> k27ac = promoter;
    k27ac.insert(k27ac.end(), enhancer.begin(), enhancer.end());
    std::sort(k27ac.begin(), k27ac.end());
    std::vector<int> ctcf_track = promoter;
    ctcf_track.insert(ctcf_track.end(), ctcf.begin(), ctcf.end());
    std::sort(ctcf_track.begin(), ctcf_track.end());
    add_peaks("DNase", all_planted);
    add_peaks("H3K4me3", promoter);
    add_peaks("H3K27ac", k27ac);
    add_peaks("H3K4me1", k4me1);
    add_peaks("CTCF", ctcf_track);
    return rec;
}

}  // namespace

GroundTruthWorld generate_world(const WorldConfig& cfg) {
    cfg.validate();
    GroundTruthWorld w;
    w.cfg = cfg;
    generate_regulatory_network(w);

    // Shared role signatures.
    RngStream master(cfg.seed);
    RngStream role_rng = master.fork("rolesig");
    std::vector<std::vector<double>> role_sigs;
    for (int r = 0; r < 3; ++r) {
        std::vector<double> u(static_cast<std::size_t>(cfg.embed_dim));
        double norm = 0.0;
        for (auto& x : u) {
            x = role_rng.normal();
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (auto& x : u) x /= norm;
        role_sigs.push_back(std::move(u));
    }

    for (const auto& mark : mark_names()) w.peak_tracks[mark];  // stable mark order

    // Gene loci in roster order, then SNP loci. The locus gate scales the
    // effect row: stronger planted DNA signal means a stronger realized
    // perturbation, so effect magnitude is readable from the DNA branch.
    for (const int g : w.perturbed) {
        LocusRecord rec = build_locus(w, w.genes[static_cast<std::size_t>(g)], false,
                                      role_sigs);
        const std::size_t gi = static_cast<std::size_t>(g);
        for (int j = 0; j < cfg.n_genes; ++j)
            if (j != g) w.grn.at(gi, static_cast<std::size_t>(j)) *= rec.gate;
        w.locus_index[rec.id] = static_cast<int>(w.loci.size());
        w.loci.push_back(std::move(rec));
    }
    for (int s = 0; s < cfg.n_snp_loci; ++s) {
        LocusRecord rec = build_locus(w, w.snp_ids[static_cast<std::size_t>(s)], true,
                                      role_sigs);
        for (int j = 0; j < cfg.n_genes; ++j)
            w.snp_effects.at(static_cast<std::size_t>(s), static_cast<std::size_t>(j)) *=
                rec.gate;
        w.locus_index[rec.id] = static_cast<int>(w.loci.size());
        w.loci.push_back(std::move(rec));
    }

    // Balance every effect row after gating so renormalization stays neutral.
    for (int i = 0; i < cfg.n_genes; ++i)
        balance_row(w, w.grn.row(static_cast<std::size_t>(i)));
    for (int s = 0; s < cfg.n_snp_loci; ++s)
        balance_row(w, w.snp_effects.row(static_cast<std::size_t>(s)));

    // NTC baseline pool defines the log2FC denominator.
    const auto pool = simulate_cell_expression(w, cfg.ntc_cells, cfg.seed);
    w.ntc_mean_cpm.assign(static_cast<std::size_t>(cfg.n_genes), 0.0);
    for (const auto& cell : pool)
        for (int g = 0; g < cfg.n_genes; ++g)
            w.ntc_mean_cpm[static_cast<std::size_t>(g)] += cell[static_cast<std::size_t>(g)];
    for (double& x : w.ntc_mean_cpm) x /= double(pool.size());
    return w;
}

std::vector<double> sample_baseline_cpm(const GroundTruthWorld& w, RngStream& rng) {
    const int G = w.cfg.n_genes;
    std::vector<double> raw(static_cast<std::size_t>(G));
    double total = 0.0;
    for (int g = 0; g < G; ++g) {
        raw[static_cast<std::size_t>(g)] =
            w.baseline_weight[static_cast<std::size_t>(g)] *
            std::exp2(w.cfg.sigma_baseline_log2 * rng.normal());
        total += raw[static_cast<std::size_t>(g)];
    }
    const double lib = std::exp(w.cfg.library_sigma * rng.normal());
    total *= lib;
    for (double& x : raw) x = x * lib * 1e6 / total;
    return raw;
}

std::vector<std::vector<double>> simulate_cell_expression(const GroundTruthWorld& w,
                                                          int n_cells,
                                                          std::uint64_t seed) {
    if (n_cells < 2) throw ContractError("NTC pool needs at least 2 cells");
    std::vector<std::vector<double>> pool;
    pool.reserve(static_cast<std::size_t>(n_cells));
    const RngStream base(seed);
    for (int i = 0; i < n_cells; ++i) {
        RngStream rng = base.fork("ntc:" + std::to_string(i));
        pool.push_back(sample_baseline_cpm(w, rng));
    }
    return pool;
}

std::vector<double> apply_perturbation(const GroundTruthWorld& w,
                                       const std::string& perturbed_id,
                                       const std::vector<double>& baseline_cpm,
                                       RngStream& rng) {
    const int G = w.cfg.n_genes;
    const double* row = w.effect_row(perturbed_id);
    if (static_cast<int>(baseline_cpm.size()) != G)
        throw ContractError("baseline vector length " +
                            std::to_string(baseline_cpm.size()) + " != n_genes " +
                            std::to_string(G));
    std::vector<double> out(static_cast<std::size_t>(G));
    double total = 0.0;
    for (int g = 0; g < G; ++g) {
        const double eps = noise_sigma(w, g) * rng.normal();
        out[static_cast<std::size_t>(g)] =
            baseline_cpm[static_cast<std::size_t>(g)] * std::exp2(row[g] + eps);
        total += out[static_cast<std::size_t>(g)];
    }
    for (double& x : out) x = x * 1e6 / total;
    return out;
}

std::vector<double> compute_log2fc(const std::vector<double>& expr_cpm,
                                   const std::vector<double>& ntc_mean_cpm) {
    if (expr_cpm.size() != ntc_mean_cpm.size())
        throw ContractError("log2FC inputs differ in length: " +
                            std::to_string(expr_cpm.size()) + " vs " +
                            std::to_string(ntc_mean_cpm.size()));
    std::vector<double> out(expr_cpm.size());
    for (std::size_t g = 0; g < expr_cpm.size(); ++g) {
        const double x = expr_cpm[g], m = ntc_mean_cpm[g];
        if (!(x >= 0.0) || !(m >= 0.0))
            throw ContractError("log2FC inputs must be nonnegative");
        out[g] = std::log2((x + 1.0) / (m + 1.0));
    }
    return out;
}

std::vector<CellSample> generate_cells(const GroundTruthWorld& w) {
    std::vector<CellSample> cells;
    for (const auto& rec : w.loci) {
        if (rec.is_snp && !w.cfg.include_snp_cells) continue;
        const int n = rec.is_snp ? w.cfg.cells_per_snp : w.cfg.cells_per_locus;
        for (int i = 0; i < n; ++i) {
            RngStream rng =
                RngStream(w.cfg.seed).fork("cell:" + rec.id + ":" + std::to_string(i));
            const std::vector<double> base = sample_baseline_cpm(w, rng);
            const std::vector<double> pert =
                apply_perturbation(w, rec.perturbed_gene, base, rng);
            CellSample c;
            c.locus_id = rec.id;
            c.perturbed_gene = rec.perturbed_gene;
            c.expr.resize(pert.size());
            for (std::size_t g = 0; g < pert.size(); ++g)
                c.expr[g] = std::log1p(pert[g]);
            c.target = compute_log2fc(pert, w.ntc_mean_cpm);
            c.split = Split::train;
            cells.push_back(std::move(c));
        }
    }
    return cells;
}

void split_genes(const GroundTruthWorld& w, const std::vector<std::string>& holdout,
                 std::vector<CellSample>& cells) {
    if (holdout.empty()) throw ConfigError("holdout gene list is empty");
    for (const auto& h : holdout) {
        if (w.gene_index.count(h) == 0 && !w.is_snp_tag(h))
            throw LookupError("holdout gene not in world: " + h);
    }
    for (auto& c : cells) {
        const bool in_holdout =
            std::find(holdout.begin(), holdout.end(), c.perturbed_gene) != holdout.end();
        c.split = in_holdout ? Split::val : Split::train;
    }
}

namespace {

TensorPtr<double> mat_tensor(const Mat& m) {
    return make_tensor<double>({m.rows, m.cols}, m.v);
}

TensorPtr<double> vec_tensor(const std::vector<double>& v) {
    return make_tensor<double>({v.size()}, v);
}

Mat tensor_mat(const TensorPtr<double>& t, const std::string& what) {
    if (t->rank() != 2) throw MismatchError(what + " blob is not rank-2");
    Mat m(t->shape[0], t->shape[1]);
    std::copy(t->v.begin(), t->v.end(), m.v.begin());
    return m;
}

json config_json(const WorldConfig& c) {
    json j;
    j["n_genes"] = c.n_genes;
    j["n_bins"] = c.n_bins;
    j["embed_dim"] = c.embed_dim;
    j["hub_count"] = c.hub_count;
    j["targets_per_hub"] = c.targets_per_hub;
    j["graded_per_hub"] = c.graded_per_hub;
    j["module_size"] = c.module_size;
    j["module_perturbed"] = c.module_perturbed;
    j["background_edge_prob"] = c.background_edge_prob;
    j["n_perturbed"] = c.n_perturbed;
    j["n_snp_loci"] = c.n_snp_loci;
    j["snp_targets"] = c.snp_targets;
    j["holdout_count"] = c.holdout_count;
    j["cells_per_locus"] = c.cells_per_locus;
    j["cells_per_snp"] = c.cells_per_snp;
    j["ntc_cells"] = c.ntc_cells;
    j["include_snp_cells"] = c.include_snp_cells;
    j["gene_profile_sigma"] = c.gene_profile_sigma;
    j["library_sigma"] = c.library_sigma;
    j["sigma_baseline_log2"] = c.sigma_baseline_log2;
    j["sigma_clean"] = c.sigma_clean;
    j["sigma_noise"] = c.sigma_noise;
    j["noise_gene_count"] = c.noise_gene_count;
    j["planted_bins_per_locus"] = c.planted_bins_per_locus;
    j["embed_noise"] = c.embed_noise;
    j["signal_amp"] = c.signal_amp;
    j["gate_min"] = c.gate_min;
    j["gate_max"] = c.gate_max;
    j["seed"] = c.seed;
    return j;
}

WorldConfig config_from_json(const json& j) {
    WorldConfig c;
    try {
        c.n_genes = j.at("n_genes").get<int>();
        c.n_bins = j.at("n_bins").get<int>();
        c.embed_dim = j.at("embed_dim").get<int>();
        c.hub_count = j.at("hub_count").get<int>();
        c.targets_per_hub = j.at("targets_per_hub").get<int>();
        c.graded_per_hub = j.at("graded_per_hub").get<int>();
        c.module_size = j.at("module_size").get<int>();
        c.module_perturbed = j.at("module_perturbed").get<int>();
        c.background_edge_prob = j.at("background_edge_prob").get<double>();
        c.n_perturbed = j.at("n_perturbed").get<int>();
        c.n_snp_loci = j.at("n_snp_loci").get<int>();
        c.snp_targets = j.at("snp_targets").get<int>();
        c.holdout_count = j.at("holdout_count").get<int>();
        c.cells_per_locus = j.at("cells_per_locus").get<int>();
        c.cells_per_snp = j.at("cells_per_snp").get<int>();
        c.ntc_cells = j.at("ntc_cells").get<int>();
        c.include_snp_cells = j.at("include_snp_cells").get<bool>();
        c.gene_profile_sigma = j.at("gene_profile_sigma").get<double>();
        c.library_sigma = j.at("library_sigma").get<double>();
        c.sigma_baseline_log2 = j.at("sigma_baseline_log2").get<double>();
        c.sigma_clean = j.at("sigma_clean").get<double>();
        c.sigma_noise = j.at("sigma_noise").get<double>();
        c.noise_gene_count = j.at("noise_gene_count").get<int>();
        c.planted_bins_per_locus = j.at("planted_bins_per_locus").get<int>();
        c.embed_noise = j.at("embed_noise").get<double>();
        c.signal_amp = j.at("signal_amp").get<double>();
        c.gate_min = j.at("gate_min").get<double>();
        c.gate_max = j.at("gate_max").get<double>();
        c.seed = j.at("seed").get<std::uint64_t>();
    } catch (const json::exception& e) {
        throw IoError(std::string("world manifest config invalid: ") + e.what());
    }
    return c;
}

}  // namespace

void save_world(const GroundTruthWorld& w, const std::vector<CellSample>& cells,
                const std::string& dir) {
    const std::filesystem::path root(dir);

    json manifest;
    manifest["version"] = 1;
    manifest["config"] = config_json(w.cfg);
    manifest["genes"] = w.genes;
    manifest["hubs"] = ids_of(w, w.hub_genes);
    manifest["module"] = ids_of(w, w.module_genes);
    manifest["perturbed"] = ids_of(w, w.perturbed);
    manifest["holdout"] = w.holdout_genes;
    manifest["snp_ids"] = w.snp_ids;
    {
        std::vector<std::string> noisy;
        for (int g = 0; g < w.cfg.n_genes; ++g)
            if (w.noise_gene_mask[static_cast<std::size_t>(g)])
                noisy.push_back(w.genes[static_cast<std::size_t>(g)]);
        manifest["noise_genes"] = noisy;
    }
    manifest["gene_sets"] = w.gene_sets;
    json loci = json::array();
    for (const auto& rec : w.loci) {
        json r;
        r["id"] = rec.id;
        r["gene"] = rec.perturbed_gene;
        r["snp"] = rec.is_snp;
        r["gate"] = rec.gate;
        r["bins"] = rec.planted_bins;
        r["roles"] = rec.planted_roles;
        loci.push_back(r);
    }
    manifest["loci"] = loci;
    manifest["files"] = {"baseline_weight.cdtt", "cells.tsv", "embeddings.cdtc",
                         "grn.cdtt",             "ntc_mean.cdtt", "peaks.tsv",
                         "snp_effects.cdtt"};
    write_text_file(root / "manifest.json", manifest.dump(2) + "\n");

    write_blob_file(root / "grn.cdtt", mat_tensor(w.grn));
    write_blob_file(root / "snp_effects.cdtt", mat_tensor(w.snp_effects));
    write_blob_file(root / "ntc_mean.cdtt", vec_tensor(w.ntc_mean_cpm));
    write_blob_file(root / "baseline_weight.cdtt", vec_tensor(w.baseline_weight));

    CheckpointFile emb;
    emb.header_json = R"({"kind":"locus_embeddings","version":1})";
    for (const auto& rec : w.loci)
        emb.blobs.emplace_back(rec.id, encode_blob(mat_tensor(rec.embedding)));
    write_checkpoint_file(root / "embeddings.cdtc", emb);

    std::string peaks = "locus_id\tbin_start\tbin_end\tmark\n";
    for (const auto& [mark, track] : w.peak_tracks)
        for (const auto& p : track)
            peaks += p.locus_id + "\t" + std::to_string(p.bin_start) + "\t" +
                     std::to_string(p.bin_end) + "\t" + mark + "\n";
    write_text_file(root / "peaks.tsv", peaks);

    std::string tsv = "locus_id\tperturbed_gene\tsplit";
    for (int g = 0; g < w.cfg.n_genes; ++g) tsv += "\te" + std::to_string(g);
    for (int g = 0; g < w.cfg.n_genes; ++g) tsv += "\tt" + std::to_string(g);
    tsv += "\n";
    for (const auto& c : cells) {
        tsv += c.locus_id + "\t" + c.perturbed_gene + "\t" + split_name(c.split);
        for (const double x : c.expr) tsv += "\t" + fmt_double(x);
        for (const double x : c.target) tsv += "\t" + fmt_double(x);
        tsv += "\n";
    }
    write_text_file(root / "cells.tsv", tsv);
}

GroundTruthWorld load_world(const std::string& dir, std::vector<CellSample>* cells) {
    const std::filesystem::path root(dir);
    json manifest;
    try {
        manifest = json::parse(read_text_file(root / "manifest.json"));
    } catch (const json::exception& e) {
        throw IoError(std::string("world manifest unparsable: ") + e.what());
    }

    GroundTruthWorld w;
    try {
        w.cfg = config_from_json(manifest.at("config"));
        w.genes = manifest.at("genes").get<std::vector<std::string>>();
        w.holdout_genes = manifest.at("holdout").get<std::vector<std::string>>();
        w.snp_ids = manifest.at("snp_ids").get<std::vector<std::string>>();
        w.gene_sets = manifest.at("gene_sets")
                          .get<std::map<std::string, std::vector<std::string>>>();
        for (std::size_t i = 0; i < w.genes.size(); ++i)
            w.gene_index[w.genes[i]] = static_cast<int>(i);
        for (const auto& id : manifest.at("hubs").get<std::vector<std::string>>())
            w.hub_genes.push_back(w.gene_id(id));
        for (const auto& id : manifest.at("module").get<std::vector<std::string>>())
            w.module_genes.push_back(w.gene_id(id));
        for (const auto& id : manifest.at("perturbed").get<std::vector<std::string>>())
            w.perturbed.push_back(w.gene_id(id));
        w.noise_gene_mask.assign(w.genes.size(), 0);
        for (const auto& id : manifest.at("noise_genes").get<std::vector<std::string>>())
            w.noise_gene_mask[static_cast<std::size_t>(w.gene_id(id))] = 1;
        for (const auto& r : manifest.at("loci")) {
            LocusRecord rec;
            rec.id = r.at("id").get<std::string>();
            rec.perturbed_gene = r.at("gene").get<std::string>();
            rec.is_snp = r.at("snp").get<bool>();
            rec.gate = r.at("gate").get<double>();
            rec.planted_bins = r.at("bins").get<std::vector<int>>();
            rec.planted_roles = r.at("roles").get<std::vector<std::string>>();
            w.locus_index[rec.id] = static_cast<int>(w.loci.size());
            w.loci.push_back(std::move(rec));
        }
    } catch (const json::exception& e) {
        throw IoError(std::string("world manifest invalid: ") + e.what());
    }

    if (static_cast<int>(w.genes.size()) != w.cfg.n_genes)
        throw MismatchError("manifest gene count " + std::to_string(w.genes.size()) +
                            " != config n_genes " + std::to_string(w.cfg.n_genes));

    w.grn = tensor_mat(read_blob_file_as<double>(root / "grn.cdtt"), "grn");
    if (w.grn.rows != w.genes.size() || w.grn.cols != w.genes.size())
        throw MismatchError("grn blob shape does not match gene count");
    w.snp_effects =
        tensor_mat(read_blob_file_as<double>(root / "snp_effects.cdtt"), "snp_effects");
    const auto ntc = read_blob_file_as<double>(root / "ntc_mean.cdtt");
    w.ntc_mean_cpm.assign(ntc->v.begin(), ntc->v.end());
    const auto bw = read_blob_file_as<double>(root / "baseline_weight.cdtt");
    w.baseline_weight.assign(bw->v.begin(), bw->v.end());
    if (w.ntc_mean_cpm.size() != w.genes.size() ||
        w.baseline_weight.size() != w.genes.size())
        throw MismatchError("baseline blob length does not match gene count");

    const CheckpointFile emb = read_checkpoint_file(root / "embeddings.cdtc");
    std::map<std::string, Mat> emb_by_id;
    for (const auto& [name, bytes] : emb.blobs)
        emb_by_id[name] = tensor_mat(decode_blob_as<double>(bytes), "embedding " + name);
    for (auto& rec : w.loci) {
        const auto it = emb_by_id.find(rec.id);
        if (it == emb_by_id.end())
            throw MissingInputError("embedding missing for locus " + rec.id);
        if (it->second.rows != static_cast<std::size_t>(w.cfg.n_bins) ||
            it->second.cols != static_cast<std::size_t>(w.cfg.embed_dim))
            throw MismatchError("embedding shape mismatch for locus " + rec.id);
        rec.embedding = std::move(it->second);
    }

    {
        const std::string text = read_text_file(root / "peaks.tsv");
        std::istringstream in(text);
        std::string line;
        std::getline(in, line);  // header
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::istringstream row(line);
            Peak p;
            std::string mark, s0, s1;
            if (!std::getline(row, p.locus_id, '\t') || !std::getline(row, s0, '\t') ||
                !std::getline(row, s1, '\t') || !std::getline(row, mark, '\t'))
                throw IoError("malformed peaks.tsv line: " + line);
            p.bin_start = std::atoi(s0.c_str());
            p.bin_end = std::atoi(s1.c_str());
            w.peak_tracks[mark].push_back(p);
        }
        for (const auto& mark : mark_names()) w.peak_tracks[mark];
    }

    if (cells != nullptr) {
        cells->clear();
        const std::string text = read_text_file(root / "cells.tsv");
        std::istringstream in(text);
        std::string line;
        std::getline(in, line);  // header
        const std::size_t G = w.genes.size();
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            CellSample c;
            std::istringstream row(line);
            std::string field;
            if (!std::getline(row, c.locus_id, '\t') ||
                !std::getline(row, c.perturbed_gene, '\t') ||
                !std::getline(row, field, '\t'))
                throw IoError("malformed cells.tsv line");
            c.split = field == "val" ? Split::val : Split::train;
            c.expr.reserve(G);
            c.target.reserve(G);
            for (std::size_t g = 0; g < 2 * G; ++g) {
                if (!std::getline(row, field, '\t'))
                    throw IoError("cells.tsv row has too few columns");
                const double x = std::strtod(field.c_str(), nullptr);
                (g < G ? c.expr : c.target).push_back(x);
            }
            cells->push_back(std::move(c));
        }
    }
    return w;
}

}  // namespace cdt
