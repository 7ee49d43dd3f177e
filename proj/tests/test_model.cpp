#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>

#include "cdt/model.hpp"

using namespace cdt;

namespace {

ModelConfig toy_config() {
    ModelConfig c;
    c.n_genes = 7;
    c.n_bins = 5;
    c.dna_embed_dim = 6;
    c.model_dim = 8;
    c.heads = 2;
    c.ffn_dim = 12;
    c.dropout_p = 0.0;
    c.vce_pool_heads = 2;
    c.task_hidden_dim = 9;
    return c;
}

template <typename T>
void check_prob_rows(const TensorPtr<T>& w, double tol = 1e-5) {
    REQUIRE(w->rank() == 3);
    const std::size_t H = w->dim(0), L1 = w->dim(1), L2 = w->dim(2);
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < L1; ++i) {
            double s = 0;
            for (std::size_t j = 0; j < L2; ++j) {
                const double x = w->v[(h * L1 + i) * L2 + j];
                CHECK(x >= 0.0);
                s += x;
            }
            CHECK(std::fabs(s - 1.0) < tol);
        }
}

// Expected parameter count written out from the layer shapes, independent of
// the registry walk.
std::size_t expected_param_count(const ModelConfig& c) {
    const std::size_t G = c.n_genes, B = c.n_bins, E = c.dna_embed_dim, d = c.model_dim,
                      f = c.ffn_dim, th = c.task_hidden_dim;
    (void)B;
    const std::size_t attn = 4 * (d * d + d);
    const std::size_t ffn = d * f + f + f * d + d;
    const std::size_t block = 2 * d + attn + 2 * d + ffn;          // two layer norms
    const std::size_t cross = 4 * d + attn + 2 * d + ffn;          // three layer norms
    const std::size_t pool = d + d * d + d * d;                    // query + K/V projections
    const std::size_t fuse = 2 * d * d + d + d * d + d;
    const std::size_t head = 2 * d + d * th + th + th * G + G;
    return G * d                                  // gene embeddings
           + (d + d) + 2 * d                      // expression projector + LN
           + (E * d + d) + 2 * d                  // DNA projector + LN
           + (c.n_dna_layers + c.n_rna_layers) * block + cross + 2 * pool + fuse + head;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("config validation") {
    ModelConfig c;  // desk defaults
    CHECK_NOTHROW(c.validate());
    ModelConfig bad = c;
    bad.heads = 3;  // 32 % 3 != 0
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.vce_pool_heads = 5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.n_genes = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = c;
    bad.dropout_p = 1.0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("parameter counts match the layer arithmetic") {
    ModelConfig desk;  // G=200,B=64,E=96,d=32,H=4,ffn=128,th=64
    auto p = init_model<float>(desk, 1);
    CHECK(p.param_count() == expected_param_count(desk));
    CHECK(p.param_count() < 1000000);

    const ModelConfig paper = paper_scale_config();
    paper.validate();
    const std::size_t n = expected_param_count(paper);
    MESSAGE("paper-scale parameter count: ", n);
    CHECK(n > 19000000);
    CHECK(n < 23000000);
}

TEST_CASE("init is a pure function of the seed") {
    ModelConfig c = toy_config();
    auto a = init_model<float>(c, 42);
    auto b = init_model<float>(c, 42);
    auto d = init_model<float>(c, 43);
    bool any_diff = false;
    const auto an = a.named(), bn = b.named(), dn = d.named();
    for (std::size_t i = 0; i < an.size(); ++i) {
        CHECK(std::memcmp(an[i].second->v.data(), bn[i].second->v.data(),
                          an[i].second->numel() * sizeof(float)) == 0);
        any_diff |= std::memcmp(an[i].second->v.data(), dn[i].second->v.data(),
                                an[i].second->numel() * sizeof(float)) != 0;
    }
    CHECK(any_diff);
}

TEST_CASE("zero expression encodes to normalized identity embeddings") {
    ModelConfig c = toy_config();
    auto p = init_model<double>(c, 3);
    auto expr = zeros<double>({c.n_genes, 1});
    auto enc = encode_expression<double>(nullptr, expr, p);
    CHECK(enc->shape == std::vector<std::size_t>{c.n_genes, c.model_dim});
    // expr_b initializes to zero, so the projection contributes nothing.
    auto want = layer_norm<double>(nullptr, p.gene_embed, p.expr_ln_g, p.expr_ln_b);
    for (std::size_t i = 0; i < enc->numel(); ++i)
        CHECK(enc->v[i] == doctest::Approx(want->v[i]).epsilon(1e-12));
}

TEST_CASE("expression change is local before attention") {
    ModelConfig c = toy_config();
    auto p = init_model<double>(c, 5);
    RngStream rng(7);
    auto e1 = uniform<double>({c.n_genes, 1}, rng, 0.0, 3.0);
    auto e2 = clone_detached(e1);
    e2->v[4] += 1.0;
    auto r1 = encode_expression<double>(nullptr, e1, p);
    auto r2 = encode_expression<double>(nullptr, e2, p);
    for (std::size_t g = 0; g < c.n_genes; ++g) {
        double diff = 0;
        for (std::size_t j = 0; j < c.model_dim; ++j)
            diff += std::fabs(r1->v[g * c.model_dim + j] - r2->v[g * c.model_dim + j]);
        if (g == 4)
            CHECK(diff > 1e-6);
        else
            CHECK(diff == 0.0);
    }
}

TEST_CASE("encode_expression rejects bad input") {
    ModelConfig c = toy_config();
    auto p = init_model<double>(c, 5);
    CHECK_THROWS_AS(encode_expression<double>(nullptr, zeros<double>({c.n_genes + 1, 1}), p),
                    ShapeError);
    auto neg = zeros<double>({c.n_genes, 1});
    neg->v[0] = -0.5;
    CHECK_THROWS_AS(encode_expression<double>(nullptr, neg, p), ContractError);
    CHECK_THROWS_AS(expr_tensor<double>(std::vector<double>(3, 0.0), c.n_genes), ShapeError);
}

TEST_CASE("zero DNA matrix projects to identical rows") {
    ModelConfig c = toy_config();
    auto p = init_model<double>(c, 9);
    auto out = project_dna<double>(nullptr, zeros<double>({c.n_bins, c.dna_embed_dim}), p);
    CHECK(out->shape == std::vector<std::size_t>{c.n_bins, c.model_dim});
    for (std::size_t r = 1; r < c.n_bins; ++r)
        for (std::size_t j = 0; j < c.model_dim; ++j)
            CHECK(out->v[r * c.model_dim + j] == out->v[j]);
    CHECK_THROWS_AS(
        project_dna<double>(nullptr, zeros<double>({c.n_bins, c.dna_embed_dim + 1}), p),
        ShapeError);
}

TEST_CASE("self-attention block properties") {
    ModelConfig c = toy_config();
    auto p = init_model<double>(c, 11);
    RngStream rng(13);

    SUBCASE("single-row input gives unit weights") {
        auto x = randn<double>({1, c.model_dim}, rng);
        auto r = self_attention_block<double>(nullptr, x, p.dna_blocks[0], c.heads, 0.0, false,
                                              nullptr);
        for (const double w : r.weights->v) CHECK(w == 1.0);
        for (const double v : r.out->v) CHECK(std::isfinite(v));
    }

    SUBCASE("zeroed output projection reduces the block to its FFN residual") {
        auto blk = p.dna_blocks[0];
        std::fill(blk.attn.wo->v.begin(), blk.attn.wo->v.end(), 0.0);
        std::fill(blk.attn.bo->v.begin(), blk.attn.bo->v.end(), 0.0);
        auto x = randn<double>({6, c.model_dim}, rng);
        auto r = self_attention_block<double>(nullptr, x, blk, c.heads, 0.0, false, nullptr);
        auto h2 = layer_norm<double>(nullptr, x, blk.ln2_g, blk.ln2_b);
        auto want = add<double>(nullptr, x, ffn_forward<double>(nullptr, h2, blk.ffn));
        for (std::size_t i = 0; i < want->numel(); ++i)
            CHECK(r.out->v[i] == doctest::Approx(want->v[i]).epsilon(1e-12));
    }

    SUBCASE("weights rows are probability vectors") {
        auto x = randn<double>({6, c.model_dim}, rng);
        auto r = self_attention_block<double>(nullptr, x, p.dna_blocks[1], c.heads, 0.0, false,
                                              nullptr);
        check_prob_rows(r.weights, 1e-10);
    }
}

TEST_CASE("cross-attention block properties") {
    ModelConfig c = toy_config();
    auto p = init_model<double>(c, 17);
    RngStream rng(19);
    auto rna = randn<double>({c.n_genes, c.model_dim}, rng);

    SUBCASE("single DNA bin gives unit weights") {
        auto dna = randn<double>({1, c.model_dim}, rng);
        auto r = cross_attention_block<double>(nullptr, rna, dna, p.cross, c.heads, 0.0, false,
                                               nullptr);
        CHECK(r.weights->shape == std::vector<std::size_t>{c.heads, c.n_genes, 1});
        for (const double w : r.weights->v) CHECK(w == 1.0);
    }

    SUBCASE("permuting DNA bins permutes weight columns and keeps the output") {
        const std::size_t B = c.n_bins;
        auto dna = randn<double>({B, c.model_dim}, rng);
        const std::vector<std::size_t> perm = {3, 0, 4, 1, 2};
        auto dna_p = zeros<double>({B, c.model_dim});
        for (std::size_t i = 0; i < B; ++i)
            for (std::size_t j = 0; j < c.model_dim; ++j)
                dna_p->v[i * c.model_dim + j] = dna->v[perm[i] * c.model_dim + j];
        auto r0 = cross_attention_block<double>(nullptr, rna, dna, p.cross, c.heads, 0.0, false,
                                                nullptr);
        auto r1 = cross_attention_block<double>(nullptr, rna, dna_p, p.cross, c.heads, 0.0, false,
                                                nullptr);
        for (std::size_t i = 0; i < r0.out->numel(); ++i)
            CHECK(r1.out->v[i] == doctest::Approx(r0.out->v[i]).epsilon(1e-9));
        for (std::size_t h = 0; h < c.heads; ++h)
            for (std::size_t g = 0; g < c.n_genes; ++g)
                for (std::size_t b = 0; b < B; ++b)
                    CHECK(r1.weights->v[(h * c.n_genes + g) * B + b] ==
                          doctest::Approx(r0.weights->v[(h * c.n_genes + g) * B + perm[b]])
                              .epsilon(1e-9));
    }

    SUBCASE("mismatched model dims are rejected") {
        auto dna_bad = randn<double>({c.n_bins, c.model_dim + 2}, rng);
        CHECK_THROWS_AS(cross_attention_block<double>(nullptr, rna, dna_bad, p.cross, c.heads,
                                                      0.0, false, nullptr),
                        ConfigError);
    }
}

TEST_CASE("attention pooling collapses a single row to its value projection") {
    ModelConfig c = toy_config();
    auto p = init_model<double>(c, 23);
    RngStream rng(29);
    auto x = randn<double>({1, c.model_dim}, rng);
    auto r = attention_pool<double>(nullptr, x, p.pool_rna, c.vce_pool_heads, 0.0, false, nullptr);
    for (const double w : r.weights->v) CHECK(w == 1.0);
    auto want = matmul<double>(nullptr, x, p.pool_rna.wv);
    for (std::size_t j = 0; j < c.model_dim; ++j)
        CHECK(r.pooled->v[j] == doctest::Approx(want->v[j]).epsilon(1e-12));
}

TEST_CASE("pooling weights normalize per head") {
    ModelConfig c = toy_config();
    auto p = init_model<double>(c, 31);
    RngStream rng(37);
    auto x = randn<double>({c.n_genes, c.model_dim}, rng);
    auto r = attention_pool<double>(nullptr, x, p.pool_rna, c.vce_pool_heads, 0.0, false, nullptr);
    CHECK(r.weights->shape == std::vector<std::size_t>{c.vce_pool_heads, c.n_genes});
    for (std::size_t h = 0; h < c.vce_pool_heads; ++h) {
        double s = 0;
        for (std::size_t l = 0; l < c.n_genes; ++l) s += r.weights->v[h * c.n_genes + l];
        CHECK(std::fabs(s - 1.0) < 1e-10);
    }
}

TEST_CASE("forward pass contract") {
    ModelConfig c = toy_config();
    auto p = init_model<float>(c, 41);
    RngStream rng(43);
    LocusMap<float> loci;
    loci["locus_a"] = randn<float>({c.n_bins, c.dna_embed_dim}, rng);
    loci["locus_b"] = randn<float>({c.n_bins, c.dna_embed_dim}, rng);
    CellSample s;
    s.locus_id = "locus_a";
    s.expr.assign(c.n_genes, 0.0);
    for (auto& e : s.expr) e = rng.uniform(0.0, 4.0);

    auto r1 = forward_predict<float>(nullptr, s, loci, p, false, nullptr);
    CHECK(r1.pred->shape == std::vector<std::size_t>{c.n_genes});
    for (const float v : r1.pred->v) CHECK(std::isfinite(v));
    check_prob_rows(r1.attn.rna_self);
    check_prob_rows(r1.attn.cross);
    REQUIRE(r1.attn.dna_self.size() == c.n_dna_layers);
    for (const auto& w : r1.attn.dna_self) check_prob_rows(w);

    // Same cell again: eval mode is a pure function of (params, sample).
    auto r2 = forward_predict<float>(nullptr, s, loci, p, false, nullptr);
    CHECK(std::memcmp(r1.pred->v.data(), r2.pred->v.data(), c.n_genes * sizeof(float)) == 0);

    // The DNA path is live: a different locus changes the prediction.
    s.locus_id = "locus_b";
    auto r3 = forward_predict<float>(nullptr, s, loci, p, false, nullptr);
    bool differs = false;
    for (std::size_t g = 0; g < c.n_genes; ++g) differs |= r3.pred->v[g] != r1.pred->v[g];
    CHECK(differs);

    s.locus_id = "nowhere";
    CHECK_THROWS_AS(forward_predict<float>(nullptr, s, loci, p, false, nullptr), LookupError);
}

TEST_CASE("training-mode dropout is reproducible under a fixed stream") {
    ModelConfig c = toy_config();
    c.dropout_p = 0.2;
    auto p = init_model<float>(c, 47);
    RngStream rng(53);
    auto dna = randn<float>({c.n_bins, c.dna_embed_dim}, rng);
    auto expr = uniform<float>({c.n_genes, 1}, rng, 0.0, 3.0);
    RngStream d1(99), d2(99), d3(100);
    auto r1 = forward_predict<float>(nullptr, expr, dna, p, true, &d1);
    auto r2 = forward_predict<float>(nullptr, expr, dna, p, true, &d2);
    auto r3 = forward_predict<float>(nullptr, expr, dna, p, true, &d3);
    CHECK(std::memcmp(r1.pred->v.data(), r2.pred->v.data(), c.n_genes * sizeof(float)) == 0);
    bool differs = false;
    for (std::size_t g = 0; g < c.n_genes; ++g) differs |= r3.pred->v[g] != r1.pred->v[g];
    CHECK(differs);
    // Returned attention maps stay pre-dropout probability rows.
    check_prob_rows(r1.attn.rna_self);
}

TEST_CASE("full-model gradients match finite differences") {
    ModelConfig c = toy_config();
    auto p = init_model<double>(c, 59);
    RngStream rng(61);
    auto dna = randn<double>({c.n_bins, c.dna_embed_dim}, rng);
    auto expr = uniform<double>({c.n_genes, 1}, rng, 0.0, 3.0, true);
    RngStream lw_rng(997);
    auto lw = randn<double>({c.n_genes}, lw_rng);

    const auto loss_value = [&]() {
        auto r = forward_predict<double>(nullptr, expr, dna, p, false, nullptr);
        double s = 0;
        for (std::size_t g = 0; g < c.n_genes; ++g) s += r.pred->v[g] * lw->v[g];
        return s;
    };

    Tape<double> tape;
    auto res = forward_predict<double>(&tape, expr, dna, p, false, nullptr);
    auto loss = sum_all(&tape, mul(&tape, res.pred, lw));
    tape.backward(loss);

    std::size_t checked = 0, failed = 0;
    const auto check_tensor = [&](const std::string& name, const TensorPtr<double>& t) {
        auto fd = finite_difference_gradient<double>(
            [&](const TensorPtr<double>&) { return loss_value(); }, t, 1e-5);
        for (std::size_t i = 0; i < t->numel(); ++i) {
            const double a = t->g[i], b = fd->v[i];
            ++checked;
            if (std::fabs(a - b) > 1e-4 * std::max(std::fabs(a), std::fabs(b)) + 1e-7) {
                ++failed;
                MESSAGE("grad mismatch at ", name, "[", i, "]: analytic ", a, " fd ", b);
            }
        }
    };
    check_tensor("expr", expr);
    for (const auto& [name, t] : p.named()) check_tensor(name, t);
    MESSAGE("checked ", checked, " gradient entries");
    CHECK(checked > 2000);
    CHECK(failed == 0);
}

TEST_CASE("attention aggregation") {
    ModelConfig c = toy_config();
    auto p = init_model<float>(c, 67);
    RngStream rng(71);
    LocusMap<float> loci;
    for (int i = 0; i < 4; ++i)
        loci["L" + std::to_string(i)] = randn<float>({c.n_bins, c.dna_embed_dim}, rng);
    std::vector<CellSample> cells;
    for (int i = 0; i < 50; ++i) {
        CellSample s;
        s.locus_id = "L" + std::to_string(i % 4);
        s.expr.assign(c.n_genes, 0.0);
        for (auto& e : s.expr) e = rng.uniform(0.0, 4.0);
        cells.push_back(std::move(s));
    }

    CHECK_THROWS_AS(extract_attention_maps<float>({}, loci, p), ContractError);

    SUBCASE("one cell aggregates to itself") {
        auto one = extract_attention_maps<float>({cells[0]}, loci, p);
        auto direct = forward_predict<float>(nullptr, cells[0], loci, p, false, nullptr);
        const Mat want = head_mean(direct.attn.rna_self);
        for (std::size_t i = 0; i < want.v.size(); ++i)
            CHECK(one.rna_self.v[i] == doctest::Approx(want.v[i]).epsilon(1e-12));
    }

    SUBCASE("streaming mean matches two-pass mean and rows stay stochastic") {
        auto agg = extract_attention_maps<float>(cells, loci, p);
        CHECK(agg.n_cells == cells.size());
        Mat twopass(c.n_genes, c.n_genes);
        for (const auto& cell : cells) {
            auto r = forward_predict<float>(nullptr, cell, loci, p, false, nullptr);
            const Mat m = head_mean(r.attn.rna_self);
            for (std::size_t i = 0; i < m.v.size(); ++i) twopass.v[i] += m.v[i];
        }
        for (auto& x : twopass.v) x /= double(cells.size());
        for (std::size_t i = 0; i < twopass.v.size(); ++i)
            CHECK(std::fabs(agg.rna_self.v[i] - twopass.v[i]) < 1e-6);
        for (std::size_t g = 0; g < c.n_genes; ++g) {
            double s = 0;
            for (std::size_t j = 0; j < c.n_genes; ++j) s += agg.rna_self.at(g, j);
            CHECK(std::fabs(s - 1.0) < 1e-5);
        }
    }

    SUBCASE("aggregate is independent of the thread count") {
        setenv("CDT_THREADS", "1", 1);
        auto a1 = extract_attention_maps<float>(cells, loci, p);
        setenv("CDT_THREADS", "4", 1);
        auto a4 = extract_attention_maps<float>(cells, loci, p);
        unsetenv("CDT_THREADS");
        CHECK(std::memcmp(a1.rna_self.v.data(), a4.rna_self.v.data(),
                          a1.rna_self.v.size() * sizeof(double)) == 0);
        CHECK(std::memcmp(a1.cross.v.data(), a4.cross.v.data(),
                          a1.cross.v.size() * sizeof(double)) == 0);
    }
}

TEST_CASE("checkpoints round trip bit-exactly") {
    ModelConfig c = toy_config();
    auto p = init_model<float>(c, 73);
    const auto path = std::filesystem::temp_directory_path() / "cdt_model_test.cdtc";
    save_checkpoint(path, p, 73, 17);

    CheckpointInfo info;
    auto q = load_checkpoint<float>(path, c, &info);
    CHECK(info.seed == 73);
    CHECK(info.epoch == 17);
    const auto pn = p.named(), qn = q.named();
    REQUIRE(pn.size() == qn.size());
    for (std::size_t i = 0; i < pn.size(); ++i) {
        CHECK(pn[i].first == qn[i].first);
        CHECK(std::memcmp(pn[i].second->v.data(), qn[i].second->v.data(),
                          pn[i].second->numel() * sizeof(float)) == 0);
    }

    // f32 checkpoint promoted to f64 for analysis keeps exact values.
    auto qd = load_checkpoint<double>(path, c);
    for (std::size_t g = 0; g < p.gene_embed->numel(); ++g)
        CHECK(qd.gene_embed->v[g] == double(p.gene_embed->v[g]));

    ModelConfig wrong = c;
    wrong.n_genes = c.n_genes + 1;
    CHECK_THROWS_AS(load_checkpoint<float>(path, wrong), MismatchError);
    std::filesystem::remove(path);
}

TEST_CASE("cloned params detach from the source") {
    ModelConfig c = toy_config();
    auto p = init_model<float>(c, 79);
    auto q = clone_params(p);
    CHECK(q.param_count() == p.param_count());
    CHECK(q.gene_embed->v == p.gene_embed->v);
    q.gene_embed->v[0] += 1.0f;
    CHECK(q.gene_embed->v[0] != p.gene_embed->v[0]);
    const auto qn = q.named();
    const auto pn = p.named();
    for (std::size_t i = 0; i < pn.size(); ++i) CHECK(pn[i].second != qn[i].second);
}

}  // TEST_SUITE
