#include "cdt/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <unordered_map>
#include <unordered_set>

#include "cdt/stats.hpp"
#include "cdt/util.hpp"

namespace cdt {

void TrainConfig::validate() const {
    if (!(lr > 0) || !std::isfinite(lr)) throw ConfigError("TrainConfig: lr must be positive");
    if (!(weight_decay >= 0)) throw ConfigError("TrainConfig: weight_decay must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
        throw ConfigError("TrainConfig: betas must lie in [0,1)");
    if (!(eps > 0)) throw ConfigError("TrainConfig: eps must be positive");
    if (!(clip_norm > 0)) throw ConfigError("TrainConfig: clip_norm must be positive");
    if (batch_size == 0) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (!(plateau_factor > 0 && plateau_factor < 1))
        throw ConfigError("TrainConfig: plateau_factor must lie in (0,1)");
    if (plateau_patience == 0) throw ConfigError("TrainConfig: plateau_patience must be >= 1");
}

TensorPtr<double> mse_loss(Tape<double>* tape, const TensorPtr<double>& pred,
                           const TensorPtr<double>& target, const TensorPtr<double>* mask) {
    if (pred->shape != target->shape)
        throw ShapeError("mse_loss: pred/target shape mismatch");
    auto d = sub(tape, pred, target);
    auto sq = mul(tape, d, d);
    double denom = double(pred->numel());
    if (mask) {
        if ((*mask)->shape != pred->shape) throw ShapeError("mse_loss: mask shape mismatch");
        sq = mul(tape, sq, *mask);
        denom = 0;
        for (const double m : (*mask)->v) denom += m;
        if (!(denom > 0)) throw ContractError("mse_loss: mask selects no entries");
    }
    return scale(tape, sum_all(tape, sq), 1.0 / denom);
}

AdamState make_adam_state(const ModelParams<double>& p) {
    AdamState st;
    for (const auto& [name, t] : p.named()) {
        st.m.emplace_back(t->numel(), 0.0);
        st.v.emplace_back(t->numel(), 0.0);
    }
    return st;
}

void adamw_step(ModelParams<double>& p, AdamState& st, const TrainConfig& cfg) {
    const auto named = p.named();
    if (st.m.size() != named.size())
        throw ContractError("adamw_step: optimizer state does not match parameter list");
    st.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, double(st.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, double(st.t));
    for (std::size_t k = 0; k < named.size(); ++k) {
        const auto& [name, t] = named[k];
        if (t->g.size() != t->v.size())
            throw ContractError("adamw_step: missing gradient for '" + name + "'");
        auto& m = st.m[k];
        auto& v = st.v[k];
        for (std::size_t i = 0; i < t->v.size(); ++i) {
            const double g = t->g[i];
            if (!std::isfinite(g))
                throw ContractError("adamw_step: non-finite gradient in '" + name + "' at step " +
                                    std::to_string(st.t));
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            t->v[i] -= cfg.lr * cfg.weight_decay * t->v[i];
            t->v[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

double clip_grad_norm(ModelParams<double>& p, double max_norm) {
    if (!(max_norm > 0)) throw ConfigError("clip_grad_norm: max_norm must be positive");
    const auto named = p.named();
    double sq = 0;
    for (const auto& [name, t] : named)
        for (const double g : t->g) sq += g * g;
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double s = max_norm / norm;
        for (const auto& [name, t] : named)
            for (double& g : t->g) g *= s;
    }
    return norm;
}

bool plateau_scheduler_step(PlateauState& st, double val_loss, double& lr, double factor,
                            std::size_t patience) {
    if (val_loss < st.best) {
        st.best = val_loss;
        st.bad = 0;
        return false;
    }
    st.bad += 1;
    if (st.bad >= patience) {
        lr *= factor;
        st.bad = 0;
        return true;
    }
    return false;
}

namespace {

std::vector<std::size_t> mask_indices(const std::vector<double>* gene_mask, std::size_t G) {
    std::vector<std::size_t> idx;
    if (!gene_mask) {
        idx.resize(G);
        for (std::size_t g = 0; g < G; ++g) idx[g] = g;
        return idx;
    }
    if (gene_mask->size() != G) throw ShapeError("gene_mask length does not match gene count");
    for (std::size_t g = 0; g < G; ++g)
        if ((*gene_mask)[g] > 0) idx.push_back(g);
    if (idx.empty()) throw ContractError("gene_mask selects no genes");
    return idx;
}

double masked_mse(const std::vector<double>& pred, const std::vector<double>& tgt,
                  const std::vector<std::size_t>& idx) {
    double s = 0;
    for (const std::size_t g : idx) {
        const double d = pred[g] - tgt[g];
        s += d * d;
    }
    return s / double(idx.size());
}

bool has_variance(const std::vector<double>& v) {
    for (const double x : v)
        if (x != v.front()) return true;
    return false;
}

double finite_pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() < 2 || !has_variance(x) || !has_variance(y))
        return std::numeric_limits<double>::quiet_NaN();
    return pearson(x, y);
}

double finite_spearman(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() < 2 || !has_variance(x) || !has_variance(y))
        return std::numeric_limits<double>::quiet_NaN();
    return spearman(x, y);
}

}  // namespace

EvalReport evaluate_metrics(const ModelParams<double>& p, const std::vector<CellSample>& cells,
                            const LocusMap<double>& loci, const std::vector<double>* gene_mask) {
    if (cells.empty()) throw ContractError("evaluate_metrics: no cells");
    const std::size_t G = p.cfg.n_genes;
    const auto idx = mask_indices(gene_mask, G);

    std::vector<std::vector<double>> preds(cells.size());
    parallel_for(cells.size(), [&](std::size_t i) {
        auto res = forward_predict<double>(nullptr, cells[i], loci, p, false, nullptr);
        preds[i].assign(res.pred->v.begin(), res.pred->v.end());
    });

    EvalReport rep;
    rep.n_cells = cells.size();
    std::vector<double> flat_p, flat_t;
    flat_p.reserve(cells.size() * idx.size());
    flat_t.reserve(cells.size() * idx.size());
    double mse_sum = 0;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        mse_sum += masked_mse(preds[i], cells[i].target, idx);
        for (const std::size_t g : idx) {
            flat_p.push_back(preds[i][g]);
            flat_t.push_back(cells[i].target[g]);
        }
    }
    rep.mse = mse_sum / double(cells.size());
    rep.cell_pearson = finite_pearson(flat_p, flat_t);
    rep.cell_spearman = finite_spearman(flat_p, flat_t);

    std::map<std::string, std::vector<std::size_t>> by_gene;
    for (std::size_t i = 0; i < cells.size(); ++i)
        by_gene[cells[i].perturbed_gene].push_back(i);
    double pb_sum = 0;
    std::size_t pb_n = 0;
    for (const auto& [gene, rows] : by_gene) {
        if (rows.size() < 2)
            throw ContractError("evaluate_metrics: <2 cells for perturbed gene " + gene);
        std::vector<double> mp(idx.size(), 0.0), mt(idx.size(), 0.0);
        for (const std::size_t i : rows) {
            for (std::size_t k = 0; k < idx.size(); ++k) {
                mp[k] += preds[i][idx[k]];
                mt[k] += cells[i].target[idx[k]];
            }
        }
        for (auto& x : mp) x /= double(rows.size());
        for (auto& x : mt) x /= double(rows.size());
        const auto var = [](const std::vector<double>& v) {
            double m = 0;
            for (const double x : v) m += x;
            m /= double(v.size());
            double s = 0;
            for (const double x : v) s += (x - m) * (x - m);
            return s;
        };
        if (var(mp) <= 0 || var(mt) <= 0) continue;  // undefined, reported as missing
        const double r = pearson(mp, mt);
        rep.pseudobulk_r[gene] = r;
        pb_sum += r;
        pb_n += 1;
    }
    if (pb_n > 0) rep.mean_pseudobulk_r = pb_sum / double(pb_n);
    return rep;
}

namespace {

std::string json_num(double x) {
    return std::isfinite(x) ? fmt_double(x) : std::string("null");
}

void write_metrics_line(std::ofstream& out, const EpochMetrics& m) {
    out << "{\"epoch\":" << m.epoch << ",\"lr\":" << json_num(m.lr)
        << ",\"train_loss\":" << json_num(m.train_loss)
        << ",\"val_loss\":" << json_num(m.val_loss) << ",\"train_r\":" << json_num(m.train_r)
        << ",\"val_r\":" << json_num(m.val_r) << "}\n";
}

}  // namespace

TrainResult train_loop(const ModelParams<double>& init, const std::vector<CellSample>& train_cells,
                       const std::vector<CellSample>& val_cells, const LocusMap<double>& loci,
                       const TrainConfig& cfg, const std::vector<double>* gene_mask,
                       const std::filesystem::path& metrics_jsonl) {
    cfg.validate();
    const std::size_t G = init.cfg.n_genes;
    const auto idx = mask_indices(gene_mask, G);

    std::unordered_set<std::string> train_genes;
    for (const auto& c : train_cells) train_genes.insert(c.perturbed_gene);
    for (const auto& c : val_cells)
        if (train_genes.count(c.perturbed_gene))
            throw LeakageError("gene perturbed in both train and val: " + c.perturbed_gene);

    TrainResult res;
    res.best_params = clone_params(init);
    // Center the expression channel on the training split's per-gene means so
    // tokens carry deviations from baseline rather than absolute abundance.
    if (!train_cells.empty()) {
        auto& mu = res.best_params.expr_mean->v;
        std::fill(mu.begin(), mu.end(), 0.0);
        for (const auto& c : train_cells) {
            if (c.expr.size() != G)
                throw ShapeError("train_loop: cell expression length " +
                                 std::to_string(c.expr.size()) + " != n_genes " +
                                 std::to_string(G));
            for (std::size_t g = 0; g < G; ++g) mu[g] += c.expr[g];
        }
        for (auto& x : mu) x /= double(train_cells.size());
    }
    if (cfg.max_epochs == 0) return res;
    if (train_cells.empty()) throw ContractError("train_loop: no training cells");
    if (val_cells.empty()) throw ContractError("train_loop: no validation cells");

    auto p = clone_params(init);
    p.expr_mean->v = res.best_params.expr_mean->v;
    p.set_requires_grad(true);
    AdamState adam = make_adam_state(p);
    PlateauState plateau;
    double lr = cfg.lr;
    TrainConfig step_cfg = cfg;
    RngStream root(cfg.seed);

    std::ofstream metrics_out;
    if (!metrics_jsonl.empty()) {
        metrics_out.open(metrics_jsonl, std::ios::trunc);
        if (!metrics_out) throw IoError("cannot write metrics log: " + metrics_jsonl.string());
    }

    TensorPtr<double> mask_t;
    if (gene_mask) mask_t = make_tensor<double>({G}, AlignedVec<double>(gene_mask->begin(),
                                                                        gene_mask->end()));

    std::vector<std::size_t> order(train_cells.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        RngStream shuffle_rng = root.fork("shuffle").fork(epoch);
        shuffle(order, shuffle_rng);

        double train_loss_sum = 0;
        std::vector<double> tr_p, tr_t;
        tr_p.reserve(train_cells.size() * idx.size());
        tr_t.reserve(train_cells.size() * idx.size());

        for (std::size_t base = 0; base < order.size(); base += cfg.batch_size) {
            const std::size_t n = std::min(cfg.batch_size, order.size() - base);
            p.zero_grads();
            for (std::size_t k = 0; k < n; ++k) {
                const CellSample& cell = train_cells[order[base + k]];
                RngStream drop = root.fork("dropout").fork(epoch).fork(base + k);
                Tape<double> tape;
                auto fwd = forward_predict<double>(&tape, cell, loci, p, true, &drop);
                auto tgt = make_tensor<double>({G},
                                               AlignedVec<double>(cell.target.begin(),
                                                                  cell.target.end()));
                auto loss = mse_loss(&tape, fwd.pred, tgt, gene_mask ? &mask_t : nullptr);
                train_loss_sum += loss->v[0];
                for (const std::size_t g : idx) {
                    tr_p.push_back(fwd.pred->v[g]);
                    tr_t.push_back(cell.target[g]);
                }
                tape.backward(scale(&tape, loss, 1.0 / double(n)));
            }
            clip_grad_norm(p, cfg.clip_norm);
            step_cfg.lr = lr;
            adamw_step(p, adam, step_cfg);
        }

        const EvalReport val = evaluate_metrics(p, val_cells, loci, gene_mask);
        EpochMetrics m;
        m.epoch = epoch;
        m.lr = lr;
        m.train_loss = train_loss_sum / double(train_cells.size());
        m.val_loss = val.mse;
        m.train_r = finite_pearson(tr_p, tr_t);
        m.val_r = val.cell_pearson;
        res.history.push_back(m);
        if (metrics_out) write_metrics_line(metrics_out, m);

        if (m.val_r > res.best_val_r) {
            res.best_val_r = m.val_r;
            res.best_epoch = epoch;
            res.best_params = clone_params(p);
        }
        plateau_scheduler_step(plateau, m.val_loss, lr, cfg.plateau_factor, cfg.plateau_patience);
        if (cfg.early_stop_patience > 0 && res.best_epoch > 0 &&
            epoch - res.best_epoch >= cfg.early_stop_patience)
            break;
    }
    return res;
}

}  // namespace cdt
