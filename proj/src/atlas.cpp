#include "cdt/atlas.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "cdt/error.hpp"
#include "cdt/rng.hpp"
#include "cdt/stats.hpp"

namespace cdt {

GeneGraph build_attention_graph(const Mat& scores, const std::vector<std::string>& nodes,
                                double top_fraction) {
    if (!(top_fraction > 0 && top_fraction < 1))
        throw ConfigError("build_attention_graph: top_fraction must lie in (0,1)");
    const std::size_t G = scores.rows;
    if (scores.cols != G) throw ShapeError("build_attention_graph: matrix must be square");
    if (nodes.size() != G) throw ShapeError("build_attention_graph: node list does not match matrix");
    std::vector<double> off;
    off.reserve(G * (G - 1));
    for (std::size_t i = 0; i < G; ++i)
        for (std::size_t j = 0; j < G; ++j) {
            if (i == j) continue;
            const double w = scores.at(i, j);
            if (w < 0) throw ContractError("build_attention_graph: negative score");
            off.push_back(w);
        }
    GeneGraph g;
    g.nodes = nodes;
    g.directed = true;
    const std::size_t keep = std::size_t(std::floor(top_fraction * double(off.size())));
    if (keep == 0) return g;
    std::nth_element(off.begin(), off.begin() + (keep - 1), off.end(), std::greater<>());
    const double threshold = off[keep - 1];
    for (std::size_t i = 0; i < G; ++i)
        for (std::size_t j = 0; j < G; ++j)
            if (i != j && scores.at(i, j) >= threshold && scores.at(i, j) > 0)
                g.edges.push_back({i, j, scores.at(i, j)});
    return g;
}

namespace {

// Undirected adjacency with max-symmetrized weights; self-loops rejected.
struct UndirectedAdj {
    std::vector<std::vector<std::pair<std::size_t, double>>> nb;
    std::vector<double> deg;
    double two_m = 0;  // sum of degrees

    explicit UndirectedAdj(const GeneGraph& g) {
        const std::size_t n = g.nodes.size();
        if (n == 0) throw ContractError("louvain: empty graph");
        std::unordered_map<std::uint64_t, double> w;
        for (const auto& e : g.edges) {
            if (e.src >= n || e.dst >= n) throw ContractError("louvain: edge endpoint out of range");
            if (e.src == e.dst) throw ContractError("louvain: self-loop in input graph");
            if (!(e.weight > 0)) throw ContractError("louvain: edge weight must be positive");
            const std::uint64_t a = std::min(e.src, e.dst), b = std::max(e.src, e.dst);
            auto& slot = w[a * std::uint64_t(n) + b];
            slot = std::max(slot, e.weight);
        }
        if (w.empty()) throw ContractError("louvain: graph has no edges");
        nb.resize(n);
        deg.assign(n, 0.0);
        std::vector<std::pair<std::uint64_t, double>> sorted(w.begin(), w.end());
        std::sort(sorted.begin(), sorted.end());
        for (const auto& [key, weight] : sorted) {
            const std::size_t a = key / n, b = key % n;
            nb[a].push_back({b, weight});
            nb[b].push_back({a, weight});
            deg[a] += weight;
            deg[b] += weight;
            two_m += 2 * weight;
        }
    }
};

// One Louvain pass structure over an aggregated weighted graph that may hold
// self-loops (loop weight counts twice in the degree).
struct LevelGraph {
    std::vector<std::vector<std::pair<std::size_t, double>>> nb;  // no self entries
    std::vector<double> self_w;  // self-loop weight (doubled in deg)
    std::vector<double> deg;
    double two_m = 0;

    std::size_t size() const { return deg.size(); }
};

LevelGraph level_from(const UndirectedAdj& adj) {
    LevelGraph g;
    g.nb = adj.nb;
    g.self_w.assign(adj.deg.size(), 0.0);
    g.deg = adj.deg;
    g.two_m = adj.two_m;
    return g;
}

// Local-move phase. Returns the node→community labelling and whether any node
// moved at all.
bool local_moves(const LevelGraph& g, double resolution, RngStream& rng,
                 std::vector<std::size_t>& com) {
    const std::size_t n = g.size();
    com.resize(n);
    std::iota(com.begin(), com.end(), std::size_t(0));
    std::vector<double> tot(g.deg);  // sum of degrees per community
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t(0));
    bool any_move = false;
    bool moved = true;
    std::size_t pass = 0;
    while (moved) {
        moved = false;
        RngStream pass_rng = rng.fork(pass++);
        shuffle(order, pass_rng);
        for (const std::size_t u : order) {
            const std::size_t cu = com[u];
            tot[cu] -= g.deg[u];
            // Weight from u into each adjacent community (and its old one).
            std::map<std::size_t, double> k_in;
            k_in[cu] = 0;
            for (const auto& [v, w] : g.nb[u]) k_in[com[v]] += w;
            // A move must beat staying put by more than the epsilon; among
            // improving targets the lowest community id wins, visited in
            // ascending order, so the whole sweep is order-stable.
            std::size_t best = cu;
            double best_gain = k_in[cu] - resolution * g.deg[u] * tot[cu] / g.two_m;
            for (const auto& [c, k] : k_in) {
                const double gain = k - resolution * g.deg[u] * tot[c] / g.two_m;
                if (gain > best_gain + 1e-12) {
                    best = c;
                    best_gain = gain;
                }
            }
            tot[best] += g.deg[u];
            com[u] = best;
            if (best != cu) {
                moved = true;
                any_move = true;
            }
        }
    }
    return any_move;
}

LevelGraph aggregate(const LevelGraph& g, const std::vector<std::size_t>& com,
                     std::vector<std::size_t>& relabel) {
    const std::size_t n = g.size();
    relabel.assign(n, std::size_t(-1));
    std::size_t next = 0;
    for (std::size_t u = 0; u < n; ++u) {
        const std::size_t c = com[u];
        // First appearance in node order fixes the new id.
        std::size_t& slot = relabel[c];
        if (slot == std::size_t(-1)) slot = next++;
    }
    LevelGraph out;
    out.nb.resize(next);
    out.self_w.assign(next, 0.0);
    out.deg.assign(next, 0.0);
    out.two_m = g.two_m;
    std::map<std::pair<std::size_t, std::size_t>, double> agg;
    for (std::size_t u = 0; u < n; ++u) {
        const std::size_t a = relabel[com[u]];
        out.self_w[a] += g.self_w[u];
        for (const auto& [v, w] : g.nb[u]) {
            const std::size_t b = relabel[com[v]];
            if (a == b) {
                out.self_w[a] += w / 2;  // each undirected edge visited twice
            } else if (a < b) {
                agg[{a, b}] += w;
            }
        }
    }
    for (const auto& [key, w] : agg) {
        out.nb[key.first].push_back({key.second, w});
        out.nb[key.second].push_back({key.first, w});
        out.deg[key.first] += w;
        out.deg[key.second] += w;
    }
    for (std::size_t c = 0; c < next; ++c) out.deg[c] += 2 * out.self_w[c];
    return out;
}

}  // namespace

double graph_modularity(const GeneGraph& graph, const std::vector<std::size_t>& community,
                        double resolution) {
    if (community.size() != graph.nodes.size())
        throw ShapeError("graph_modularity: labelling does not cover the nodes");
    const UndirectedAdj adj(graph);
    const std::size_t n = graph.nodes.size();
    double q = 0;
    for (std::size_t u = 0; u < n; ++u)
        for (const auto& [v, w] : adj.nb[u])
            if (community[u] == community[v]) q += w;  // counts each intra edge twice
    q /= adj.two_m;
    std::unordered_map<std::size_t, double> tot;
    for (std::size_t u = 0; u < n; ++u) tot[community[u]] += adj.deg[u];
    for (const auto& [c, t] : tot) q -= resolution * (t / adj.two_m) * (t / adj.two_m);
    return q;
}

CommunityPartition louvain_communities(const GeneGraph& graph, double resolution,
                                       std::uint64_t seed) {
    if (!(resolution > 0)) throw ConfigError("louvain: resolution must be positive");
    const UndirectedAdj adj(graph);
    const std::size_t n = graph.nodes.size();
    std::vector<std::size_t> node_com(n);
    std::iota(node_com.begin(), node_com.end(), std::size_t(0));
    LevelGraph level = level_from(adj);
    RngStream root(seed);
    std::size_t depth = 0;
    while (true) {
        std::vector<std::size_t> com;
        RngStream level_rng = root.fork("level").fork(depth++);
        const bool improved = local_moves(level, resolution, level_rng, com);
        if (!improved) break;
        std::vector<std::size_t> relabel;
        const LevelGraph next = aggregate(level, com, relabel);
        for (std::size_t u = 0; u < n; ++u) node_com[u] = relabel[com[node_com[u]]];
        if (next.size() == level.size()) break;
        level = next;
    }
    // Renumber by first appearance across node order.
    CommunityPartition part;
    part.community.assign(n, 0);
    std::unordered_map<std::size_t, std::size_t> renum;
    for (std::size_t u = 0; u < n; ++u) {
        const auto [it, fresh] = renum.try_emplace(node_com[u], renum.size());
        part.community[u] = it->second;
    }
    part.n_communities = renum.size();
    part.modularity = graph_modularity(graph, part.community, resolution);
    return part;
}

TopnOverlap topn_overlap_enrichment(const std::vector<double>& att_row,
                                    const std::vector<double>& effect_row, std::size_t N,
                                    std::size_t query) {
    if (att_row.size() != effect_row.size())
        throw ShapeError("topn_overlap_enrichment: row length mismatch");
    std::vector<std::size_t> cand;
    for (std::size_t g = 0; g < att_row.size(); ++g)
        if (g != query) cand.push_back(g);
    const std::size_t M = cand.size();
    if (N == 0 || N >= M)
        throw ConfigError("topn_overlap_enrichment: need 0 < N < candidate count");
    const auto top = [&](const std::vector<double>& score) {
        std::vector<std::size_t> idx = cand;
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            if (score[a] != score[b]) return score[a] > score[b];
            return a < b;
        });
        idx.resize(N);
        return std::unordered_set<std::size_t>(idx.begin(), idx.end());
    };
    const auto ta = top(att_row);
    const auto te = [&] {
        std::vector<double> mag(effect_row.size());
        for (std::size_t g = 0; g < mag.size(); ++g) mag[g] = std::abs(effect_row[g]);
        return top(mag);
    }();
    TopnOverlap out;
    out.universe = M;
    for (const std::size_t g : ta) out.k += te.count(g);
    out.fold = double(out.k) / (double(N) * double(N) / double(M));
    out.p = hypergeom_sf(std::int64_t(out.k), std::int64_t(M), std::int64_t(N), std::int64_t(N));
    return out;
}

OverlapStat convergence_overlap(const std::vector<std::string>& a,
                                const std::vector<std::string>& b, std::size_t universe) {
    if (a.empty() || b.empty()) throw ContractError("convergence_overlap: empty gene set");
    std::set<std::string> sa(a.begin(), a.end()), sb(b.begin(), b.end());
    if (sa.size() > universe || sb.size() > universe)
        throw ContractError("convergence_overlap: set larger than universe");
    OverlapStat out;
    for (const auto& g : sa) out.overlap += sb.count(g);
    out.expected = double(sa.size()) * double(sb.size()) / double(universe);
    out.fold = double(out.overlap) / out.expected;
    out.p = hypergeom_sf(std::int64_t(out.overlap), std::int64_t(universe),
                         std::int64_t(sa.size()), std::int64_t(sb.size()));
    return out;
}

Mat cross_attention_gene_similarity(const Mat& cross) {
    const std::size_t G = cross.rows, B = cross.cols;
    if (G == 0 || B == 0) throw ContractError("cross_attention_gene_similarity: empty matrix");
    std::vector<double> norm(G);
    for (std::size_t i = 0; i < G; ++i) {
        double s = 0;
        for (std::size_t j = 0; j < B; ++j) s += cross.at(i, j) * cross.at(i, j);
        norm[i] = std::sqrt(s);
        if (norm[i] == 0)
            throw ContractError("cross_attention_gene_similarity: zero row " + std::to_string(i));
    }
    Mat sim(G, G);
    for (std::size_t i = 0; i < G; ++i) {
        sim.at(i, i) = 1.0;
        for (std::size_t j = i + 1; j < G; ++j) {
            double dot = 0;
            for (std::size_t k = 0; k < B; ++k) dot += cross.at(i, k) * cross.at(j, k);
            const double c = dot / (norm[i] * norm[j]);
            sim.at(i, j) = c;
            sim.at(j, i) = c;
        }
    }
    return sim;
}

std::vector<EnrichmentRow> community_geneset_enrichment(
    const CommunityPartition& part, const std::vector<std::string>& nodes,
    const std::map<std::string, std::vector<std::string>>& gene_sets) {
    const std::size_t n = nodes.size();
    if (part.community.size() != n)
        throw ShapeError("community_geneset_enrichment: partition does not cover the nodes");
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < n; ++i) index[nodes[i]] = i;
    std::vector<std::size_t> comm_size(part.n_communities, 0);
    for (const std::size_t c : part.community) comm_size.at(c) += 1;

    std::vector<EnrichmentRow> rows;
    for (const auto& [name, members] : gene_sets) {
        if (members.empty()) {
            std::fprintf(stderr, "community_geneset_enrichment: skipping empty set '%s'\n",
                         name.c_str());
            continue;
        }
        std::set<std::size_t> set_idx;
        for (const auto& g : members) {
            const auto it = index.find(g);
            if (it == index.end())
                throw ContractError("community_geneset_enrichment: '" + g +
                                    "' not in the gene universe");
            set_idx.insert(it->second);
        }
        std::vector<std::size_t> hits(part.n_communities, 0);
        for (const std::size_t g : set_idx) hits[part.community[g]] += 1;
        for (std::size_t c = 0; c < part.n_communities; ++c) {
            EnrichmentRow r;
            r.community = c;
            r.set_name = name;
            r.overlap = hits[c];
            r.community_size = comm_size[c];
            r.set_size = set_idx.size();
            r.p = hypergeom_sf(std::int64_t(r.overlap), std::int64_t(n), std::int64_t(r.set_size),
                               std::int64_t(r.community_size));
            rows.push_back(std::move(r));
        }
    }
    std::sort(rows.begin(), rows.end(), [](const EnrichmentRow& a, const EnrichmentRow& b) {
        if (a.community != b.community) return a.community < b.community;
        return a.set_name < b.set_name;
    });
    std::vector<double> ps;
    ps.reserve(rows.size());
    for (const auto& r : rows) ps.push_back(r.p);
    const auto qs = bh_adjust(ps);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i].q = qs[i];
    return rows;
}

PercellAttention percell_attention_correlation(const std::vector<std::vector<double>>& query_rows,
                                               const std::vector<std::string>& genes) {
    const std::size_t n = query_rows.size();
    if (n < 2) throw ContractError("percell_attention_correlation: need >= 2 cells");
    const std::size_t G = genes.size();
    for (const auto& r : query_rows)
        if (r.size() != G) throw ShapeError("percell_attention_correlation: row length mismatch");

    const auto varies = [](const std::vector<double>& v) {
        for (const double x : v)
            if (x != v.front()) return true;
        return false;
    };
    PercellAttention out;
    out.pairwise_r = Mat(n, n, std::numeric_limits<double>::quiet_NaN());
    double sum = 0;
    std::size_t defined = 0;
    for (std::size_t i = 0; i < n; ++i) {
        out.pairwise_r.at(i, i) = 1.0;
        for (std::size_t j = i + 1; j < n; ++j) {
            if (!varies(query_rows[i]) || !varies(query_rows[j])) continue;
            const double r = pearson(query_rows[i], query_rows[j]);
            out.pairwise_r.at(i, j) = r;
            out.pairwise_r.at(j, i) = r;
            sum += r;
            defined += 1;
        }
    }
    out.mean_r = defined ? sum / double(defined) : std::numeric_limits<double>::quiet_NaN();

    out.variable_genes.reserve(G);
    for (std::size_t g = 0; g < G; ++g) {
        double m = 0;
        for (const auto& r : query_rows) m += r[g];
        m /= double(n);
        double s = 0;
        for (const auto& r : query_rows) s += (r[g] - m) * (r[g] - m);
        out.variable_genes.push_back({genes[g], s / double(n - 1)});
    }
    std::sort(out.variable_genes.begin(), out.variable_genes.end(),
              [](const auto& a, const auto& b) {
                  if (a.second != b.second) return a.second > b.second;
                  return a.first < b.first;
              });
    return out;
}

void write_graph_tsv(const std::filesystem::path& path, const GeneGraph& graph) {
    std::string s = "src\tdst\tweight\n";
    for (const auto& e : graph.edges)
        s += graph.nodes[e.src] + "\t" + graph.nodes[e.dst] + "\t" + fmt_double(e.weight) + "\n";
    write_text_file(path, s);
}

void write_partition_tsv(const std::filesystem::path& path, const CommunityPartition& part,
                         const std::vector<std::string>& nodes) {
    if (part.community.size() != nodes.size())
        throw ShapeError("write_partition_tsv: partition does not cover the nodes");
    std::string s = "gene\tcommunity\n";
    for (std::size_t i = 0; i < nodes.size(); ++i)
        s += nodes[i] + "\t" + std::to_string(part.community[i]) + "\n";
    write_text_file(path, s);
}

void write_enrichment_json(const std::filesystem::path& path,
                           const std::vector<EnrichmentRow>& rows) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& r : rows) {
        arr.push_back({{"community", r.community},
                       {"set", r.set_name},
                       {"overlap", r.overlap},
                       {"community_size", r.community_size},
                       {"set_size", r.set_size},
                       {"p", r.p},
                       {"q", r.q}});
    }
    write_text_file(path, arr.dump(2) + "\n");
}

}  // namespace cdt
