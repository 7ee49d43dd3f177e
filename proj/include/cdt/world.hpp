#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "cdt/error.hpp"
#include "cdt/rng.hpp"
#include "cdt/sample.hpp"
#include "cdt/util.hpp"

namespace cdt {

// Knobs for the planted regulatory world. Defaults are the desk-scale setup:
// 200 genes, 64 DNA bins, 96-dim bin features.
struct WorldConfig {
    int n_genes = 200;
    int n_bins = 64;
    int embed_dim = 96;

    // Network planting. Each hub drives `targets_per_hub` strong targets plus
    // `graded_per_hub` weaker ones; hub 0 is the held-out hub, hubs 1 and 2
    // carry scaled copies of its program (mediators), hubs 3 and 4 drive the
    // co-regulated module.
    int hub_count = 5;
    int targets_per_hub = 20;
    int graded_per_hub = 40;
    int module_size = 25;
    int module_perturbed = 8;
    double background_edge_prob = 0.01;

    // Roster sizes.
    int n_perturbed = 48;  // gene loci (includes hubs and perturbed module genes)
    int n_snp_loci = 20;
    int snp_targets = 5;
    int holdout_count = 5;  // always includes the held-out hub
    int cells_per_locus = 40;
    int cells_per_snp = 6;
    int ntc_cells = 500;
    bool include_snp_cells = true;

    // Expression model (log2-scale standard deviations unless noted).
    double gene_profile_sigma = 0.80;   // across-gene baseline spread, natural log
    double library_sigma = 0.30;        // per-cell library factor, natural log
    double sigma_baseline_log2 = 0.15;  // per-cell per-gene baseline noise
    double sigma_clean = 0.08;          // perturbation-response noise, clean genes
    double sigma_noise = 0.65;          // perturbation-response noise, masked genes
    int noise_gene_count = 28;

    // Locus embeddings.
    int planted_bins_per_locus = 10;  // split 5 promoter / 3 enhancer / 2 ctcf
    double embed_noise = 0.30;        // background feature sd
    double signal_amp = 1.0;          // planted-bin signal amplitude
    double gate_min = 0.6;            // per-locus effect gate range; the gate
    double gate_max = 1.4;            // scales both DNA signal and GRN row

    std::uint64_t seed = 1;

    void validate() const;
};

// One perturbable locus: a gene TSS window or a SNP window. `gate` records
// the planted signal amplitude multiplier that also scaled the effect row.
struct LocusRecord {
    std::string id;              // gene id for TSS loci, snp id otherwise
    std::string perturbed_gene;  // equals id
    bool is_snp = false;
    double gate = 1.0;
    std::vector<int> planted_bins;           // signal bins, ascending
    std::vector<std::string> planted_roles;  // parallel: promoter|enhancer|ctcf
    Mat embedding;                           // [n_bins, embed_dim]
};

// Half-open bin interval carrying one mark on one locus window.
struct Peak {
    std::string locus_id;
    int bin_start = 0;
    int bin_end = 0;  // exclusive
};

struct GroundTruthWorld {
    WorldConfig cfg;

    std::vector<std::string> genes;
    std::unordered_map<std::string, int> gene_index;

    // grn.at(i, j) = planted log2 fold change of gene j when gene i is
    // perturbed. Diagonal holds the knockdown self-effect (negative).
    Mat grn;
    std::vector<int> hub_genes;     // hub_genes[0] = held-out hub
    std::vector<int> module_genes;  // co-regulated module members

    std::vector<std::string> snp_ids;
    Mat snp_effects;  // [n_snp_loci, n_genes]

    std::vector<int> perturbed;              // gene indices with a locus
    std::vector<std::string> holdout_genes;  // validation perturbations
    std::vector<std::uint8_t> noise_gene_mask;  // [n_genes] irreproducible targets

    std::vector<double> baseline_weight;  // [n_genes] true mean CPM / 1e6
    std::vector<double> ntc_mean_cpm;     // [n_genes] empirical NTC pool mean

    std::vector<LocusRecord> loci;  // gene loci first, then SNP loci
    std::unordered_map<std::string, int> locus_index;

    std::map<std::string, std::vector<Peak>> peak_tracks;               // mark -> peaks
    std::map<std::string, std::vector<std::string>> gene_sets;          // planted sets

    int gene_id(const std::string& name) const;          // LookupError
    const LocusRecord& locus(const std::string& id) const;  // LookupError
    bool is_snp_tag(const std::string& id) const;
    // Planted effect row for a gene id or SNP tag. LookupError if unknown.
    const double* effect_row(const std::string& perturbed_id) const;
};

// The five synthetic marks, in the order used by reports.
const std::vector<std::string>& mark_names();

// Full deterministic world build: network, loci, peaks, NTC baseline.
GroundTruthWorld generate_world(const WorldConfig& cfg);

// Network-only build (genes, grn, hubs, module, snp rows, noise mask,
// baseline profile). hub_count == 0 yields a diagonal-only GRN.
void generate_regulatory_network(GroundTruthWorld& w);

// Draw one baseline cell and return its CPM vector. The stream advances by a
// fixed count per call.
std::vector<double> sample_baseline_cpm(const GroundTruthWorld& w, RngStream& rng);

// NTC pool: n_cells baseline cells, CPM normalized. Pure function of (world
// cfg, seed).
std::vector<std::vector<double>> simulate_cell_expression(const GroundTruthWorld& w,
                                                          int n_cells,
                                                          std::uint64_t seed);

// Multiply a baseline CPM vector by 2^(effect row) with per-gene response
// noise (inflated for masked genes), then re-CPM-normalize.
std::vector<double> apply_perturbation(const GroundTruthWorld& w,
                                       const std::string& perturbed_id,
                                       const std::vector<double>& baseline_cpm,
                                       RngStream& rng);

// Elementwise log2((x + 1) / (ntc_mean + 1)) on CPM vectors.
std::vector<double> compute_log2fc(const std::vector<double>& expr_cpm,
                                   const std::vector<double>& ntc_mean_cpm);

// All perturbed-cell samples (expr = log1p CPM of the perturbed cell, target
// = log2FC vs the NTC mean). Split defaults to train; see split_genes.
std::vector<CellSample> generate_cells(const GroundTruthWorld& w);

// Gene-level split: cells whose perturbed_gene is in `holdout` become val.
// ConfigError on empty holdout, LookupError on unknown genes.
void split_genes(const GroundTruthWorld& w, const std::vector<std::string>& holdout,
                 std::vector<CellSample>& cells);

// World directory layout: manifest.json, grn/snp/ntc/baseline blobs,
// embeddings container, peaks.tsv, cells.tsv.
void save_world(const GroundTruthWorld& w, const std::vector<CellSample>& cells,
                const std::string& dir);
GroundTruthWorld load_world(const std::string& dir, std::vector<CellSample>* cells);

}  // namespace cdt
