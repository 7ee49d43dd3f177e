#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cdt/atlas.hpp"
#include "cdt/attrib.hpp"
#include "cdt/enrich.hpp"
#include "cdt/model.hpp"
#include "cdt/train.hpp"
#include "cdt/world.hpp"

namespace cdt {

// Knobs for the analysis stage: graph sparsity, ranking depth, enrichment
// thresholds, and the seed feeding Louvain shuffles and permutation nulls.
struct AnalysisParams {
    double graph_top_fraction = 0.05;
    double louvain_resolution = 1.0;
    std::size_t topn_n = 50;
    double enrich_fraction = 0.10;
    std::size_t enrich_n_perm = 1000;
    std::size_t attrib_n_perm = 20;
    std::size_t attrib_cells_per_locus = 8;  // attribution sample per gene locus
    std::uint64_t seed = 1;

    void validate() const;
};

// One JSON document drives the whole pipeline; every stage is a pure function
// of (RunConfig, artifacts of earlier stages), so a run is reproducible from
// the config alone. The model's gene/bin/feature dimensions always track the
// world section and are not independent keys.
struct RunConfig {
    WorldConfig world;
    ModelConfig model;
    TrainConfig train;
    AnalysisParams analysis;
    bool curated_gene_set = true;  // mask planted noise genes out of loss/metrics
    std::string out_dir = ".";

    void validate() const;
};

// Strict parse: an unknown key anywhere is a ConfigError; missing keys keep
// the documented defaults. A top-level "seed" overrides the world, train and
// analysis seeds at once.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& path);
void override_seed(RunConfig& cfg, std::uint64_t seed);

// [n_bins, embed_dim] tensor per locus id, shared across cells of that locus.
LocusMap<double> world_locus_map(const GroundTruthWorld& w);

// 1 for every gene except the planted irreproducible (noise) genes.
std::vector<double> curated_gene_mask(const GroundTruthWorld& w);

// Row-normalization audit over every attention tensor the forward pass
// exposes (DNA self per layer, RNA self, cross, both pooling maps).
struct AttentionChecks {
    double max_row_dev = 0;   // max |row sum - 1|
    double min_entry = 0;     // most negative weight seen
    std::size_t rows_checked = 0;
    std::size_t cells_checked = 0;
};

AttentionChecks check_attention_rows(const ModelParams<double>& p,
                                     const std::vector<CellSample>& cells,
                                     const LocusMap<double>& loci);

// One (locus, mark) enrichment record. `pass` is the joint criterion used by
// the summary: testable, odds ratio > 2, Fisher p < 1e-3, permutation p < 0.05.
struct MarkRow {
    std::string locus, mark;
    MarkEnrichment fisher;
    PermutationTest perm;
    bool pass = false;
};

// Everything the analyze stage computes, in memory. cmd_analyze serializes
// this; the acceptance suite consumes it directly.
struct AnalysisResult {
    AttentionChecks attention;  // over validation cells
    Mat rna_self;               // [G,G] head/cell-averaged over all cells
    Mat cross;                  // [G,B]
    std::size_t n_cells = 0, n_val_cells = 0;

    // Held-out hub recovery: symmetrized mean RNA self-attention row over the
    // hub's validation cells against the planted |effect| row.
    std::string hub_gene;
    std::size_t hub_index = 0;
    std::vector<double> hub_attention, hub_effect;
    TopnOverlap hub_recovery;

    GeneGraph rna_graph, cross_graph;
    CommunityPartition rna_part, cross_part;
    std::vector<EnrichmentRow> rna_enrich, cross_enrich;
    double rna_module_q = 1, cross_module_q = 1;  // best q against module_core
    std::vector<std::string> rna_module_genes, cross_module_genes;
    OverlapStat module_overlap;
    PercellAttention hub_percell;

    std::map<std::string, std::vector<double>> locus_profile;  // gene loci only
    std::map<std::string, std::vector<BinClass>> locus_classes;
    std::vector<MarkRow> mark_rows;
    std::size_t n_testable = 0, n_pass = 0;
    double frac_pass = 0;
    BinClassEffects bin_class;                    // pooled across gene loci
    std::map<std::string, ThresholdSweep> hub_sweep;  // hub locus, per mark

    AttributionMatrix attribution;  // sampled across gene loci
    double attrib_r = 0;            // vs planted |GRN|, off-diagonal
    double attrib_null_median = 0;  // median |r| over entry-permuted nulls
    double attrib_ratio = 0;
};

AnalysisResult analyze_run(const GroundTruthWorld& w, const std::vector<CellSample>& cells,
                           const ModelParams<double>& params, const AnalysisParams& ap);

// Pipeline stages. Each writes its artifacts plus a manifest.json under
// <out_dir>/<stage>/ and throws typed errors which the CLI maps to exit
// codes: ConfigError 2, LeakageError 3, MismatchError 4, MissingInputError 5.
void cmd_simulate(const RunConfig& cfg);
void cmd_train(const RunConfig& cfg);
void cmd_analyze(const RunConfig& cfg);
void cmd_report(const RunConfig& cfg);

}  // namespace cdt
