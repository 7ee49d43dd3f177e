#pragma once

#include <string>
#include <vector>

namespace cdt {

enum class Split { train, val };

// One cell of a perturbation screen. expr holds log1p(CPM) for all genes;
// target holds the measured log2 fold change against the NTC baseline.
struct CellSample {
    std::string locus_id;
    std::string perturbed_gene;  // gene id, or SNP tag for SNP-locus cells
    std::vector<double> expr;
    std::vector<double> target;
    Split split = Split::train;
};

}  // namespace cdt
