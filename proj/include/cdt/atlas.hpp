#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cdt/util.hpp"

namespace cdt {

// ---- attention-derived gene graph ----------------------------------------------

struct GeneGraph {
    struct Edge {
        std::size_t src = 0, dst = 0;
        double weight = 0;
    };
    std::vector<std::string> nodes;  // gene ids; edge endpoints index into this
    std::vector<Edge> edges;
    bool directed = true;
};

// Keep the strongest off-diagonal entries of a nonnegative [G,G] score matrix
// as directed edges. The threshold is the floor(top_fraction*G*(G-1))-th
// largest off-diagonal value and every entry >= it survives, so boundary ties
// can push the edge count above the nominal floor. Zero entries never become
// edges.
GeneGraph build_attention_graph(const Mat& scores, const std::vector<std::string>& nodes,
                                double top_fraction = 0.05);

struct CommunityPartition {
    std::vector<std::size_t> community;  // per node, ids 0..n_communities-1
    std::size_t n_communities = 0;
    double modularity = 0;
};

// Louvain community detection over the max-symmetrized graph. Node visit
// order is reshuffled per pass from `seed`, ties in gain go to the lowest
// community id, and community ids are renumbered by first node appearance,
// so the result is a pure function of (graph, resolution, seed).
CommunityPartition louvain_communities(const GeneGraph& graph, double resolution = 1.0,
                                       std::uint64_t seed = 1);

// Weighted modularity of a labelling over the max-symmetrized graph.
double graph_modularity(const GeneGraph& graph, const std::vector<std::size_t>& community,
                        double resolution = 1.0);

// ---- rankings and overlap statistics -------------------------------------------

struct TopnOverlap {
    std::size_t k = 0;      // |top-N(att) ∩ top-N(effect)|
    double fold = 0;        // k / (N^2 / M)
    double p = 1;           // hypergeometric upper tail
    std::size_t universe = 0;
};

// Agreement between the top-N genes by attention score and by |effect|.
// query, when < G, is dropped from both rankings and from the universe.
// Boundary ties are broken by ascending gene index.
TopnOverlap topn_overlap_enrichment(const std::vector<double>& att_row,
                                    const std::vector<double>& effect_row, std::size_t N,
                                    std::size_t query = std::size_t(-1));

struct OverlapStat {
    std::size_t overlap = 0;
    double expected = 0, fold = 0, p = 1;
};

// Hypergeometric overlap of two gene sets drawn from a universe of size M.
OverlapStat convergence_overlap(const std::vector<std::string>& a,
                                const std::vector<std::string>& b, std::size_t universe);

// Pairwise cosine similarity of the rows of a [G,B] matrix: symmetric, unit
// diagonal. A zero row has no direction and is rejected.
Mat cross_attention_gene_similarity(const Mat& cross);

// ---- community enrichment -------------------------------------------------------

struct EnrichmentRow {
    std::size_t community = 0;
    std::string set_name;
    std::size_t overlap = 0, community_size = 0, set_size = 0;
    double p = 1, q = 1;
};

// Hypergeometric enrichment of every (community, gene set) pair with BH
// correction across the whole table. Empty sets are skipped; set members
// must belong to `nodes`.
std::vector<EnrichmentRow> community_geneset_enrichment(
    const CommunityPartition& part, const std::vector<std::string>& nodes,
    const std::map<std::string, std::vector<std::string>>& gene_sets);

// ---- cell-to-cell attention variation -------------------------------------------

struct PercellAttention {
    Mat pairwise_r;  // [n_cells, n_cells], unit diagonal, NaN when undefined
    double mean_r = 0;  // mean over defined off-diagonal pairs
    std::vector<std::pair<std::string, double>> variable_genes;  // variance, descending
};

// Compares one gene's attention row across cells: all-pairs Pearson plus a
// per-gene variance ranking of the attention weights.
PercellAttention percell_attention_correlation(const std::vector<std::vector<double>>& query_rows,
                                               const std::vector<std::string>& genes);

// ---- exports ---------------------------------------------------------------------

void write_graph_tsv(const std::filesystem::path& path, const GeneGraph& graph);
void write_partition_tsv(const std::filesystem::path& path, const CommunityPartition& part,
                         const std::vector<std::string>& nodes);
void write_enrichment_json(const std::filesystem::path& path,
                           const std::vector<EnrichmentRow>& rows);

}  // namespace cdt
