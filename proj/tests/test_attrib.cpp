#include <cmath>

#include "cdt/attrib.hpp"
#include "cdt/rng.hpp"
#include "cdt/stats.hpp"
#include "doctest.h"

using namespace cdt;

namespace {

ModelConfig tiny_config() {
    ModelConfig c;
    c.n_genes = 20;
    c.n_bins = 8;
    c.dna_embed_dim = 12;
    c.model_dim = 8;
    c.heads = 2;
    c.ffn_dim = 16;
    c.n_dna_layers = 1;
    c.n_rna_layers = 1;
    c.vce_pool_heads = 2;
    c.task_hidden_dim = 8;
    c.dropout_p = 0.0;
    return c;
}

struct Fixture {
    ModelConfig cfg = tiny_config();
    ModelParams<double> params = init_model<double>(cfg, 23);
    LocusMap<double> loci;
    std::vector<CellSample> cells;

    Fixture() {
        RngStream rng(31);
        loci["locA"] = randn<double>({cfg.n_bins, cfg.dna_embed_dim}, rng, 0.0, 0.4);
        for (int i = 0; i < 3; ++i) {
            CellSample c;
            c.locus_id = "locA";
            c.perturbed_gene = "G0";
            c.expr.resize(cfg.n_genes);
            for (auto& x : c.expr) x = rng.uniform(0.0, 3.0);
            c.target.assign(cfg.n_genes, 0.0);
            cells.push_back(std::move(c));
        }
    }
};

}  // namespace

TEST_SUITE_BEGIN("attrib");

TEST_CASE("zeroed task head kills every attribution") {
    Fixture f;
    for (auto& x : f.params.head_w2->v) x = 0.0;
    for (auto& x : f.params.head_b2->v) x = 0.0;
    const AttributionMatrix m = input_gradient_matrix(f.params, f.cells, f.loci);
    CHECK(m.cells_used == 3);
    double total = 0;
    for (const double x : m.grad.v) total += std::abs(x);
    CHECK(total == 0.0);
}

TEST_CASE("matches central finite differences on the input") {
    Fixture f;
    const std::vector<CellSample> one = {f.cells[0]};
    const AttributionMatrix m = input_gradient_matrix(f.params, one, f.loci);
    RngStream pick(7);
    const double h = 1e-5;
    for (int t = 0; t < 5; ++t) {
        const std::size_t i = pick.below(f.cfg.n_genes);
        const std::size_t j = pick.below(f.cfg.n_genes);
        auto hi = one[0], lo = one[0];
        hi.expr[i] += h;
        lo.expr[i] -= h;
        const auto up = forward_predict<double>(nullptr, hi, f.loci, f.params, false, nullptr);
        const auto dn = forward_predict<double>(nullptr, lo, f.loci, f.params, false, nullptr);
        const double fd = (up.pred->v[j] - dn.pred->v[j]) / (2 * h);
        const double got = m.grad.at(i, j);
        if (std::abs(fd) < 1e-10) {
            CHECK(got < 1e-8);
        } else {
            CHECK(std::abs(got - std::abs(fd)) / std::abs(fd) < 1e-3);
        }
    }
}

TEST_CASE("single cell equals its own matrix; many cells average") {
    Fixture f;
    const AttributionMatrix a = input_gradient_matrix(f.params, {f.cells[0]}, f.loci);
    const AttributionMatrix b = input_gradient_matrix(f.params, {f.cells[1]}, f.loci);
    const AttributionMatrix ab = input_gradient_matrix(
        f.params, {f.cells[0], f.cells[1]}, f.loci);
    double max_err = 0;
    for (std::size_t k = 0; k < ab.grad.v.size(); ++k)
        max_err = std::max(max_err, std::abs(ab.grad.v[k] - 0.5 * (a.grad.v[k] + b.grad.v[k])));
    CHECK(max_err < 1e-15);
    CHECK(a.cells_used == 1);

    // Determinism across repeat calls.
    const AttributionMatrix a2 = input_gradient_matrix(f.params, {f.cells[0]}, f.loci);
    CHECK(a.grad.v == a2.grad.v);
}

TEST_CASE("output gene subset restricts the columns") {
    Fixture f;
    const std::vector<std::size_t> subset = {3, 7};
    const AttributionMatrix full = input_gradient_matrix(f.params, f.cells, f.loci);
    const AttributionMatrix part = input_gradient_matrix(f.params, f.cells, f.loci, &subset);
    for (std::size_t i = 0; i < f.cfg.n_genes; ++i)
        for (std::size_t j = 0; j < f.cfg.n_genes; ++j) {
            if (j == 3 || j == 7)
                CHECK(part.grad.at(i, j) == full.grad.at(i, j));
            else
                CHECK(part.grad.at(i, j) == 0.0);
        }
    const std::vector<std::size_t> bad = {f.cfg.n_genes};
    CHECK_THROWS_AS(input_gradient_matrix(f.params, f.cells, f.loci, &bad), ContractError);
    const std::vector<std::size_t> none;
    CHECK_THROWS_AS(input_gradient_matrix(f.params, f.cells, f.loci, &none), ContractError);
    CHECK_THROWS_AS(input_gradient_matrix(f.params, {}, f.loci), ContractError);
}

TEST_CASE("attribution correlation") {
    Fixture f;
    const AttributionMatrix m = input_gradient_matrix(f.params, f.cells, f.loci);
    CHECK(attribution_correlation(m, m.grad) == doctest::Approx(1.0).epsilon(1e-12));

    // The diagonal is excluded: corrupting it changes nothing.
    Mat spiked = m.grad;
    for (std::size_t i = 0; i < spiked.rows; ++i) spiked.at(i, i) += 100.0;
    CHECK(attribution_correlation(m, spiked) == doctest::Approx(1.0).epsilon(1e-12));

    // Entry-permuted references decorrelate.
    RngStream rng(41);
    double mean_abs = 0;
    const int reps = 10;
    for (int rep = 0; rep < reps; ++rep) {
        Mat perm = m.grad;
        std::vector<double> off;
        for (std::size_t i = 0; i < perm.rows; ++i)
            for (std::size_t j = 0; j < perm.cols; ++j)
                if (i != j) off.push_back(perm.at(i, j));
        shuffle(off, rng);
        std::size_t k = 0;
        for (std::size_t i = 0; i < perm.rows; ++i)
            for (std::size_t j = 0; j < perm.cols; ++j)
                if (i != j) perm.at(i, j) = off[k++];
        mean_abs += std::abs(attribution_correlation(m, perm));
    }
    CHECK(mean_abs / reps < 0.1);

    Mat flat(m.grad.rows, m.grad.cols, 0.5);
    CHECK_THROWS_AS(attribution_correlation(m, flat), ContractError);
    Mat wrong(3, 3);
    CHECK_THROWS_AS(attribution_correlation(m, wrong), ShapeError);
}

TEST_SUITE_END();
