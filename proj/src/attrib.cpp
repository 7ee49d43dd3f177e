#include "cdt/attrib.hpp"

#include <algorithm>
#include <cmath>

#include "cdt/stats.hpp"
#include "cdt/util.hpp"

namespace cdt {

namespace {

// |d pred_j / d expr_i| for one cell, filled only at the requested columns.
Mat cell_gradient(const ModelParams<double>& frozen, const CellSample& cell,
                  const LocusMap<double>& loci, const std::vector<std::size_t>& outs) {
    const std::size_t G = frozen.cfg.n_genes;
    Tape<double> tape;
    auto expr = expr_tensor<double>(cell.expr, G, true);
    const auto& dna = locus_embedding(loci, cell.locus_id);
    auto res = forward_predict<double>(&tape, expr, dna, frozen, false, nullptr);
    const std::size_t d = res.vce->numel();

    Mat j_vce(d, G);
    std::vector<double> seed(d, 0.0);
    for (std::size_t k = 0; k < d; ++k) {
        seed[k] = 1.0;
        tape.backward_seeded(res.vce, seed);
        seed[k] = 0.0;
        std::copy(expr->g.begin(), expr->g.end(), j_vce.row(k));
    }

    // Head Jacobian rows from a detached replay of the task head.
    Tape<double> head_tape;
    auto vce_in = make_tensor<double>(res.vce->shape, res.vce->v, true);
    auto head_out = task_head(&head_tape, vce_in, frozen);
    std::vector<double> hseed(G, 0.0);
    Mat out(G, G);
    std::vector<double> col(G);
    for (const std::size_t j : outs) {
        hseed[j] = 1.0;
        head_tape.backward_seeded(head_out, hseed);
        hseed[j] = 0.0;
        std::fill(col.begin(), col.end(), 0.0);
        for (std::size_t k = 0; k < d; ++k) {
            const double w = vce_in->g[k];
            if (w == 0) continue;
            const double* row = j_vce.row(k);
            for (std::size_t i = 0; i < G; ++i) col[i] += w * row[i];
        }
        for (std::size_t i = 0; i < G; ++i) out.at(i, j) = std::abs(col[i]);
    }
    return out;
}

}  // namespace

AttributionMatrix input_gradient_matrix(const ModelParams<double>& p,
                                        const std::vector<CellSample>& cells,
                                        const LocusMap<double>& loci,
                                        const std::vector<std::size_t>* output_genes) {
    if (cells.empty()) throw ContractError("input_gradient_matrix: no cells");
    const std::size_t G = p.cfg.n_genes;
    std::vector<std::size_t> outs;
    if (output_genes) {
        if (output_genes->empty())
            throw ContractError("input_gradient_matrix: empty output gene subset");
        for (const std::size_t j : *output_genes) {
            if (j >= G) throw ContractError("input_gradient_matrix: output gene out of range");
            outs.push_back(j);
        }
    } else {
        outs.resize(G);
        for (std::size_t j = 0; j < G; ++j) outs[j] = j;
    }

    auto frozen = clone_params(p);
    frozen.set_requires_grad(false);

    AttributionMatrix attr;
    attr.grad = Mat(G, G);
    attr.cells_used = cells.size();
    const std::size_t chunk = 8;
    std::vector<Mat> buf(chunk);
    for (std::size_t base = 0; base < cells.size(); base += chunk) {
        const std::size_t n = std::min(chunk, cells.size() - base);
        parallel_for(n, [&](std::size_t i) {
            buf[i] = cell_gradient(frozen, cells[base + i], loci, outs);
        });
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < attr.grad.v.size(); ++k) attr.grad.v[k] += buf[i].v[k];
    }
    const double inv = 1.0 / double(cells.size());
    for (auto& x : attr.grad.v) x *= inv;
    return attr;
}

double attribution_correlation(const AttributionMatrix& attr, const Mat& reference) {
    const std::size_t G = attr.grad.rows;
    if (attr.grad.cols != G) throw ShapeError("attribution_correlation: matrix must be square");
    if (reference.rows != G || reference.cols != G)
        throw ShapeError("attribution_correlation: reference shape mismatch");
    std::vector<double> a, b;
    a.reserve(G * (G - 1));
    b.reserve(G * (G - 1));
    for (std::size_t i = 0; i < G; ++i)
        for (std::size_t j = 0; j < G; ++j) {
            if (i == j) continue;
            a.push_back(attr.grad.at(i, j));
            b.push_back(reference.at(i, j));
        }
    return pearson(a, b);
}

}  // namespace cdt
