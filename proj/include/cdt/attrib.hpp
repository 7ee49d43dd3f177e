#pragma once

#include <vector>

#include "cdt/model.hpp"
#include "cdt/sample.hpp"

namespace cdt {

struct AttributionMatrix {
    // grad(i,j) = |d pred_j / d expr_i| averaged over cells, taken w.r.t. the
    // log1p-CPM input the model actually consumes.
    Mat grad;
    std::size_t cells_used = 0;
};

// Reverse-mode input attribution in eval mode. The prediction reaches the
// inputs only through the fused cell embedding, so the per-cell Jacobian is
// assembled as (head Jacobian [G,d]) x (embedding Jacobian [d,G]) — d sweeps
// of the full graph instead of G. output_genes, when given, restricts the
// columns; the rest stay zero.
AttributionMatrix input_gradient_matrix(const ModelParams<double>& p,
                                        const std::vector<CellSample>& cells,
                                        const LocusMap<double>& loci,
                                        const std::vector<std::size_t>* output_genes = nullptr);

// Pearson correlation between attribution and a reference [G,G] matrix over
// the flattened off-diagonal entries.
double attribution_correlation(const AttributionMatrix& attr, const Mat& reference);

}  // namespace cdt
