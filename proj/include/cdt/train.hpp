#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "cdt/model.hpp"
#include "cdt/sample.hpp"

namespace cdt {

struct TrainConfig {
    double lr = 1e-3;  // desk-scale default; large runs use 1e-4
    double weight_decay = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 1.0;
    std::size_t batch_size = 16;
    double plateau_factor = 0.5;
    std::size_t plateau_patience = 10;
    std::size_t early_stop_patience = 25;  // epochs without val_r gain; 0 disables
    std::size_t max_epochs = 30;
    std::uint64_t seed = 1;

    void validate() const;
};

// Mean squared error over the masked entries of pred vs target. target (and
// mask, when given) are treated as constants; shapes must match pred exactly.
TensorPtr<double> mse_loss(Tape<double>* tape, const TensorPtr<double>& pred,
                           const TensorPtr<double>& target,
                           const TensorPtr<double>* mask = nullptr);

// First/second-moment buffers, one pair per parameter tensor in named() order.
struct AdamState {
    std::vector<AlignedVec<double>> m, v;
    std::size_t t = 0;
};

AdamState make_adam_state(const ModelParams<double>& p);

// One AdamW update from the gradients currently held in the parameter tensors.
// Weight decay is decoupled (applied as a direct shrinkage, not through the
// moment estimates). Any non-finite gradient entry aborts.
void adamw_step(ModelParams<double>& p, AdamState& st, const TrainConfig& cfg);

// Scales all parameter gradients so their global L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_grad_norm(ModelParams<double>& p, double max_norm);

struct PlateauState {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bad = 0;
};

// Reduce-on-plateau: halt counting on any strict improvement, otherwise decay
// lr by `factor` once `patience` non-improving steps accumulate. Returns true
// when the lr was reduced on this call.
bool plateau_scheduler_step(PlateauState& st, double val_loss, double& lr, double factor,
                            std::size_t patience);

struct EpochMetrics {
    std::size_t epoch = 0;
    double lr = 0;
    double train_loss = 0, val_loss = 0;
    double train_r = 0, val_r = 0;
};

struct EvalReport {
    double mse = std::numeric_limits<double>::quiet_NaN();
    double cell_pearson = std::numeric_limits<double>::quiet_NaN();
    double cell_spearman = std::numeric_limits<double>::quiet_NaN();
    // Per perturbed gene: r between cell-averaged prediction and target
    // vectors. Genes whose pseudo-bulk vectors have zero variance are absent.
    std::map<std::string, double> pseudobulk_r;
    double mean_pseudobulk_r = std::numeric_limits<double>::quiet_NaN();
    std::size_t n_cells = 0;
};

// Eval-mode metrics over a cell set. gene_mask (length G, entries 0/1) limits
// the loss and every correlation to the selected genes; null keeps all genes.
EvalReport evaluate_metrics(const ModelParams<double>& p, const std::vector<CellSample>& cells,
                            const LocusMap<double>& loci,
                            const std::vector<double>* gene_mask = nullptr);

struct TrainResult {
    ModelParams<double> best_params;
    std::vector<EpochMetrics> history;
    std::size_t best_epoch = 0;  // 1-based; 0 means no epoch beat the start
    double best_val_r = -std::numeric_limits<double>::infinity();
};

// Mini-batch AdamW training with per-epoch validation. Keeps the parameters
// from the best-val_r epoch. Throws LeakageError if any gene perturbed in a
// val cell is also perturbed in a train cell. When metrics_jsonl is non-empty
// the per-epoch metrics are written there, one JSON object per line.
TrainResult train_loop(const ModelParams<double>& init, const std::vector<CellSample>& train_cells,
                       const std::vector<CellSample>& val_cells, const LocusMap<double>& loci,
                       const TrainConfig& cfg, const std::vector<double>* gene_mask = nullptr,
                       const std::filesystem::path& metrics_jsonl = {});

}  // namespace cdt
