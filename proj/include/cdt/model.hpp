#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cdt/blob.hpp"
#include "cdt/ops.hpp"
#include "cdt/sample.hpp"
#include "cdt/util.hpp"

namespace cdt {

// Dual-modality attention model: a DNA branch over locus embedding bins, an
// RNA branch over the expression profile, DNA->RNA cross-attention, attention
// pooling into a single virtual cell embedding, and a task head that predicts
// per-gene perturbation log2FC.

struct ModelConfig {
    std::size_t n_genes = 200;       // G
    std::size_t n_bins = 64;         // B
    std::size_t dna_embed_dim = 96;  // E
    std::size_t model_dim = 32;      // d
    std::size_t heads = 4;           // H
    std::size_t ffn_dim = 128;       // defaults to 4d
    double dropout_p = 0.1;
    std::size_t n_dna_layers = 2;
    std::size_t n_rna_layers = 1;
    std::size_t vce_pool_heads = 4;
    std::size_t task_hidden_dim = 64;

    void validate() const {
        const auto need = [](bool ok, const std::string& what) {
            if (!ok) throw ConfigError("model config: " + what);
        };
        need(n_genes >= 1 && n_bins >= 1 && dna_embed_dim >= 1 && model_dim >= 1 && heads >= 1 &&
                 ffn_dim >= 1 && n_dna_layers >= 1 && n_rna_layers >= 1 && vce_pool_heads >= 1 &&
                 task_hidden_dim >= 1,
             "all dimensions must be >= 1");
        need(model_dim % heads == 0, "model_dim must be divisible by heads");
        need(model_dim % vce_pool_heads == 0, "model_dim must be divisible by vce_pool_heads");
        need(dropout_p >= 0.0 && dropout_p < 1.0, "dropout_p must be in [0,1)");
    }
};

inline ModelConfig paper_scale_config() {
    ModelConfig c;
    c.n_genes = 2361;
    c.n_bins = 896;
    c.dna_embed_dim = 3072;
    c.model_dim = 512;
    c.heads = 8;
    c.ffn_dim = 2048;
    c.dropout_p = 0.3;
    c.task_hidden_dim = 1024;
    return c;
}

template <typename T>
struct FfnParams {
    TensorPtr<T> w1, b1, w2, b2;
};

template <typename T>
struct BlockParams {
    TensorPtr<T> ln1_g, ln1_b;
    MhaParams<T> attn;
    TensorPtr<T> ln2_g, ln2_b;
    FfnParams<T> ffn;
};

template <typename T>
struct CrossParams {
    TensorPtr<T> ln_q_g, ln_q_b;    // applied to RNA queries
    TensorPtr<T> ln_kv_g, ln_kv_b;  // applied to DNA keys/values
    MhaParams<T> attn;
    TensorPtr<T> ln2_g, ln2_b;
    FfnParams<T> ffn;
};

template <typename T>
struct PoolParams {
    TensorPtr<T> q;   // [1,d] learned query, sliced per pooling head
    TensorPtr<T> wk;  // [d,d]
    TensorPtr<T> wv;  // [d,d]
};

template <typename T>
struct ModelParams {
    ModelConfig cfg;

    TensorPtr<T> gene_embed;                      // [G,d]
    TensorPtr<T> expr_w, expr_b;                  // [1,d], [d]
    TensorPtr<T> expr_ln_g, expr_ln_b;            // [d]
    TensorPtr<T> expr_mean;                       // [G,1] input centering, not optimized
    TensorPtr<T> dna_w, dna_b;                    // [E,d], [d]
    TensorPtr<T> dna_ln_g, dna_ln_b;              // [d]
    std::vector<BlockParams<T>> dna_blocks;       // n_dna_layers
    std::vector<BlockParams<T>> rna_blocks;       // n_rna_layers
    CrossParams<T> cross;
    PoolParams<T> pool_rna, pool_dna;
    TensorPtr<T> fuse_w1, fuse_b1, fuse_w2, fuse_b2;  // [2d,d],[d],[d,d],[d]
    TensorPtr<T> head_ln_g, head_ln_b;                // [d]
    TensorPtr<T> head_w1, head_b1, head_w2, head_b2;  // [d,th],[th],[th,G],[G]

    std::vector<std::pair<std::string, TensorPtr<T>>> named() const {
        std::vector<std::pair<std::string, TensorPtr<T>>> out;
        const auto put = [&](const std::string& n, const TensorPtr<T>& t) {
            out.emplace_back(n, t);
        };
        const auto put_ffn = [&](const std::string& p, const FfnParams<T>& f) {
            put(p + ".w1", f.w1);
            put(p + ".b1", f.b1);
            put(p + ".w2", f.w2);
            put(p + ".b2", f.b2);
        };
        const auto put_attn = [&](const std::string& p, const MhaParams<T>& a) {
            put(p + ".wq", a.wq);
            put(p + ".bq", a.bq);
            put(p + ".wk", a.wk);
            put(p + ".bk", a.bk);
            put(p + ".wv", a.wv);
            put(p + ".bv", a.bv);
            put(p + ".wo", a.wo);
            put(p + ".bo", a.bo);
        };
        const auto put_block = [&](const std::string& p, const BlockParams<T>& b) {
            put(p + ".ln1_g", b.ln1_g);
            put(p + ".ln1_b", b.ln1_b);
            put_attn(p + ".attn", b.attn);
            put(p + ".ln2_g", b.ln2_g);
            put(p + ".ln2_b", b.ln2_b);
            put_ffn(p + ".ffn", b.ffn);
        };
        put("gene_embed", gene_embed);
        put("expr.w", expr_w);
        put("expr.b", expr_b);
        put("expr.ln_g", expr_ln_g);
        put("expr.ln_b", expr_ln_b);
        put("dna_proj.w", dna_w);
        put("dna_proj.b", dna_b);
        put("dna_proj.ln_g", dna_ln_g);
        put("dna_proj.ln_b", dna_ln_b);
        for (std::size_t i = 0; i < dna_blocks.size(); ++i)
            put_block("dna" + std::to_string(i), dna_blocks[i]);
        for (std::size_t i = 0; i < rna_blocks.size(); ++i)
            put_block("rna" + std::to_string(i), rna_blocks[i]);
        put("cross.ln_q_g", cross.ln_q_g);
        put("cross.ln_q_b", cross.ln_q_b);
        put("cross.ln_kv_g", cross.ln_kv_g);
        put("cross.ln_kv_b", cross.ln_kv_b);
        put_attn("cross.attn", cross.attn);
        put("cross.ln2_g", cross.ln2_g);
        put("cross.ln2_b", cross.ln2_b);
        put_ffn("cross.ffn", cross.ffn);
        put("vce.rna.q", pool_rna.q);
        put("vce.rna.wk", pool_rna.wk);
        put("vce.rna.wv", pool_rna.wv);
        put("vce.dna.q", pool_dna.q);
        put("vce.dna.wk", pool_dna.wk);
        put("vce.dna.wv", pool_dna.wv);
        put("vce.fuse.w1", fuse_w1);
        put("vce.fuse.b1", fuse_b1);
        put("vce.fuse.w2", fuse_w2);
        put("vce.fuse.b2", fuse_b2);
        put("head.ln_g", head_ln_g);
        put("head.ln_b", head_ln_b);
        put("head.w1", head_w1);
        put("head.b1", head_b1);
        put("head.w2", head_w2);
        put("head.b2", head_b2);
        return out;
    }

    // Non-trainable state carried alongside the weights (saved in checkpoints,
    // skipped by the optimizer).
    std::vector<std::pair<std::string, TensorPtr<T>>> buffers() const {
        return {{"expr.mean", expr_mean}};
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& [name, t] : named()) n += t->numel();
        return n;
    }

    void set_requires_grad(bool on) {
        for (auto& [name, t] : named()) {
            t->requires_grad = on;
            if (on) t->ensure_grad();
        }
    }

    void zero_grads() {
        for (auto& [name, t] : named()) {
            t->ensure_grad();
            t->zero_grad();
        }
    }
};

namespace model_detail {

// Per-tensor init streams are forked by name so adding a tensor never shifts
// another tensor's values.
template <typename T>
TensorPtr<T> glorot(std::vector<std::size_t> shape, RngStream& root, const std::string& name,
                    std::size_t fan_in, std::size_t fan_out) {
    RngStream rng = root.fork(name);
    const double sd = std::sqrt(2.0 / double(fan_in + fan_out));
    auto t = randn<T>(std::move(shape), rng, 0.0, sd, true);
    t->name = name;
    return t;
}

template <typename T>
TensorPtr<T> small_normal(std::vector<std::size_t> shape, RngStream& root,
                          const std::string& name) {
    RngStream rng = root.fork(name);
    auto t = randn<T>(std::move(shape), rng, 0.0, 0.02, true);
    t->name = name;
    return t;
}

template <typename T>
TensorPtr<T> const_init(std::vector<std::size_t> shape, T value, const std::string& name) {
    auto t = full<T>(std::move(shape), value, true);
    t->name = name;
    return t;
}

template <typename T>
MhaParams<T> init_attn(const std::string& p, std::size_t d, RngStream& root) {
    MhaParams<T> a;
    a.wq = glorot<T>({d, d}, root, p + ".wq", d, d);
    a.bq = const_init<T>({d}, T(0), p + ".bq");
    a.wk = glorot<T>({d, d}, root, p + ".wk", d, d);
    a.bk = const_init<T>({d}, T(0), p + ".bk");
    a.wv = glorot<T>({d, d}, root, p + ".wv", d, d);
    a.bv = const_init<T>({d}, T(0), p + ".bv");
    a.wo = glorot<T>({d, d}, root, p + ".wo", d, d);
    a.bo = const_init<T>({d}, T(0), p + ".bo");
    return a;
}

template <typename T>
FfnParams<T> init_ffn(const std::string& p, std::size_t d, std::size_t f, RngStream& root) {
    FfnParams<T> w;
    w.w1 = glorot<T>({d, f}, root, p + ".w1", d, f);
    w.b1 = const_init<T>({f}, T(0), p + ".b1");
    w.w2 = glorot<T>({f, d}, root, p + ".w2", f, d);
    w.b2 = const_init<T>({d}, T(0), p + ".b2");
    return w;
}

template <typename T>
BlockParams<T> init_block(const std::string& p, std::size_t d, std::size_t f, RngStream& root) {
    BlockParams<T> b;
    b.ln1_g = const_init<T>({d}, T(1), p + ".ln1_g");
    b.ln1_b = const_init<T>({d}, T(0), p + ".ln1_b");
    b.attn = init_attn<T>(p + ".attn", d, root);
    b.ln2_g = const_init<T>({d}, T(1), p + ".ln2_g");
    b.ln2_b = const_init<T>({d}, T(0), p + ".ln2_b");
    b.ffn = init_ffn<T>(p + ".ffn", d, f, root);
    return b;
}

}  // namespace model_detail

template <typename T>
ModelParams<T> init_model(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    namespace md = model_detail;
    const std::size_t G = cfg.n_genes, B = cfg.n_bins, E = cfg.dna_embed_dim, d = cfg.model_dim;
    RngStream root(seed);
    ModelParams<T> p;
    p.cfg = cfg;
    p.gene_embed = md::small_normal<T>({G, d}, root, "gene_embed");
    p.expr_w = md::glorot<T>({1, d}, root, "expr.w", 1, d);
    p.expr_b = md::const_init<T>({d}, T(0), "expr.b");
    p.expr_ln_g = md::const_init<T>({d}, T(1), "expr.ln_g");
    p.expr_ln_b = md::const_init<T>({d}, T(0), "expr.ln_b");
    p.expr_mean = md::const_init<T>({G, 1}, T(0), "expr.mean");
    p.expr_mean->requires_grad = false;
    p.dna_w = md::glorot<T>({E, d}, root, "dna_proj.w", E, d);
    p.dna_b = md::const_init<T>({d}, T(0), "dna_proj.b");
    p.dna_ln_g = md::const_init<T>({d}, T(1), "dna_proj.ln_g");
    p.dna_ln_b = md::const_init<T>({d}, T(0), "dna_proj.ln_b");
    for (std::size_t i = 0; i < cfg.n_dna_layers; ++i)
        p.dna_blocks.push_back(md::init_block<T>("dna" + std::to_string(i), d, cfg.ffn_dim, root));
    for (std::size_t i = 0; i < cfg.n_rna_layers; ++i)
        p.rna_blocks.push_back(md::init_block<T>("rna" + std::to_string(i), d, cfg.ffn_dim, root));
    p.cross.ln_q_g = md::const_init<T>({d}, T(1), "cross.ln_q_g");
    p.cross.ln_q_b = md::const_init<T>({d}, T(0), "cross.ln_q_b");
    p.cross.ln_kv_g = md::const_init<T>({d}, T(1), "cross.ln_kv_g");
    p.cross.ln_kv_b = md::const_init<T>({d}, T(0), "cross.ln_kv_b");
    p.cross.attn = md::init_attn<T>("cross.attn", d, root);
    p.cross.ln2_g = md::const_init<T>({d}, T(1), "cross.ln2_g");
    p.cross.ln2_b = md::const_init<T>({d}, T(0), "cross.ln2_b");
    p.cross.ffn = md::init_ffn<T>("cross.ffn", d, cfg.ffn_dim, root);
    const auto init_pool = [&](PoolParams<T>& pool, const std::string& t) {
        pool.q = md::small_normal<T>({1, d}, root, t + ".q");
        pool.wk = md::glorot<T>({d, d}, root, t + ".wk", d, d);
        pool.wv = md::glorot<T>({d, d}, root, t + ".wv", d, d);
    };
    init_pool(p.pool_rna, "vce.rna");
    init_pool(p.pool_dna, "vce.dna");
    p.fuse_w1 = md::glorot<T>({2 * d, d}, root, "vce.fuse.w1", 2 * d, d);
    p.fuse_b1 = md::const_init<T>({d}, T(0), "vce.fuse.b1");
    p.fuse_w2 = md::glorot<T>({d, d}, root, "vce.fuse.w2", d, d);
    p.fuse_b2 = md::const_init<T>({d}, T(0), "vce.fuse.b2");
    p.head_ln_g = md::const_init<T>({d}, T(1), "head.ln_g");
    p.head_ln_b = md::const_init<T>({d}, T(0), "head.ln_b");
    p.head_w1 = md::glorot<T>({d, cfg.task_hidden_dim}, root, "head.w1", d, cfg.task_hidden_dim);
    p.head_b1 = md::const_init<T>({cfg.task_hidden_dim}, T(0), "head.b1");
    p.head_w2 = md::glorot<T>({cfg.task_hidden_dim, G}, root, "head.w2", cfg.task_hidden_dim, G);
    p.head_b2 = md::const_init<T>({G}, T(0), "head.b2");
    return p;
}

template <typename T>
ModelParams<T> clone_params(const ModelParams<T>& src) {
    ModelParams<T> dst = src;  // copies shared_ptrs; now deep-copy each tensor
    auto src_named = src.named();
    for (const auto& nb : src.buffers()) src_named.push_back(nb);
    std::unordered_map<const TensorData<T>*, TensorPtr<T>> copied;
    for (const auto& [name, t] : src_named) {
        auto c = make_tensor<T>(t->shape, t->v, t->requires_grad);
        c->name = t->name;
        copied[t.get()] = c;
    }
    const auto remap = [&](TensorPtr<T>& t) { t = copied.at(t.get()); };
    const auto remap_attn = [&](MhaParams<T>& a) {
        remap(a.wq);
        remap(a.bq);
        remap(a.wk);
        remap(a.bk);
        remap(a.wv);
        remap(a.bv);
        remap(a.wo);
        remap(a.bo);
    };
    const auto remap_ffn = [&](FfnParams<T>& f) {
        remap(f.w1);
        remap(f.b1);
        remap(f.w2);
        remap(f.b2);
    };
    const auto remap_block = [&](BlockParams<T>& b) {
        remap(b.ln1_g);
        remap(b.ln1_b);
        remap_attn(b.attn);
        remap(b.ln2_g);
        remap(b.ln2_b);
        remap_ffn(b.ffn);
    };
    remap(dst.gene_embed);
    remap(dst.expr_w);
    remap(dst.expr_b);
    remap(dst.expr_ln_g);
    remap(dst.expr_ln_b);
    remap(dst.expr_mean);
    remap(dst.dna_w);
    remap(dst.dna_b);
    remap(dst.dna_ln_g);
    remap(dst.dna_ln_b);
    for (auto& b : dst.dna_blocks) remap_block(b);
    for (auto& b : dst.rna_blocks) remap_block(b);
    remap(dst.cross.ln_q_g);
    remap(dst.cross.ln_q_b);
    remap(dst.cross.ln_kv_g);
    remap(dst.cross.ln_kv_b);
    remap_attn(dst.cross.attn);
    remap(dst.cross.ln2_g);
    remap(dst.cross.ln2_b);
    remap_ffn(dst.cross.ffn);
    for (auto* pool : {&dst.pool_rna, &dst.pool_dna}) {
        remap(pool->q);
        remap(pool->wk);
        remap(pool->wv);
    }
    remap(dst.fuse_w1);
    remap(dst.fuse_b1);
    remap(dst.fuse_w2);
    remap(dst.fuse_b2);
    remap(dst.head_ln_g);
    remap(dst.head_ln_b);
    remap(dst.head_w1);
    remap(dst.head_b1);
    remap(dst.head_w2);
    remap(dst.head_b2);
    return dst;
}

// ---- forward pieces ----------------------------------------------------------

template <typename T>
struct AttentionBundle {
    std::vector<TensorPtr<T>> dna_self;  // n_dna_layers x [H,B,B]
    TensorPtr<T> rna_self;               // [H,G,G] (last RNA layer)
    TensorPtr<T> cross;                  // [H,G,B]
    TensorPtr<T> rna_pool;               // [P,G]
    TensorPtr<T> dna_pool;               // [P,B]
};

template <typename T>
TensorPtr<T> project_dna(Tape<T>* tape, const TensorPtr<T>& dna, const ModelParams<T>& p) {
    if (dna->rank() != 2 || dna->dim(0) != p.cfg.n_bins || dna->dim(1) != p.cfg.dna_embed_dim)
        throw ShapeError("project_dna: expected " + detail::shape_str({p.cfg.n_bins, p.cfg.dna_embed_dim}) +
                         ", got " + detail::shape_str(dna->shape));
    auto h = add(tape, matmul(tape, dna, p.dna_w), p.dna_b);
    return layer_norm(tape, h, p.dna_ln_g, p.dna_ln_b);
}

template <typename T>
TensorPtr<T> encode_expression(Tape<T>* tape, const TensorPtr<T>& expr_col,
                               const ModelParams<T>& p) {
    if (expr_col->rank() != 2 || expr_col->dim(0) != p.cfg.n_genes || expr_col->dim(1) != 1)
        throw ShapeError("encode_expression: expected " + detail::shape_str({p.cfg.n_genes, 1}) +
                         ", got " + detail::shape_str(expr_col->shape));
    for (const T v : expr_col->v)
        if (!(v >= T(0)) || !std::isfinite(double(v)))
            throw ContractError("encode_expression: expression must be finite and >= 0");
    auto centered = sub(tape, expr_col, p.expr_mean);
    auto proj = add(tape, matmul(tape, centered, p.expr_w), p.expr_b);  // [G,d]
    auto h = add(tape, p.gene_embed, proj);
    return layer_norm(tape, h, p.expr_ln_g, p.expr_ln_b);
}

template <typename T>
TensorPtr<T> expr_tensor(const std::vector<double>& expr, std::size_t G,
                         bool requires_grad = false) {
    if (expr.size() != G)
        throw ShapeError("expression length " + std::to_string(expr.size()) +
                         " does not match gene count " + std::to_string(G));
    AlignedVec<T> v(G);
    for (std::size_t i = 0; i < G; ++i) v[i] = static_cast<T>(expr[i]);
    return make_tensor<T>({G, 1}, std::move(v), requires_grad);
}

template <typename T>
struct BlockResult {
    TensorPtr<T> out;
    TensorPtr<T> weights;  // [H,L,L] self / [H,Lq,Lk] cross
};

template <typename T>
TensorPtr<T> ffn_forward(Tape<T>* tape, const TensorPtr<T>& x, const FfnParams<T>& f) {
    auto h = gelu(tape, add(tape, matmul(tape, x, f.w1), f.b1));
    return add(tape, matmul(tape, h, f.w2), f.b2);
}

template <typename T>
BlockResult<T> self_attention_block(Tape<T>* tape, const TensorPtr<T>& x,
                                    const BlockParams<T>& blk, std::size_t heads,
                                    double dropout_p, bool training, RngStream* rng) {
    auto h = layer_norm(tape, x, blk.ln1_g, blk.ln1_b);
    auto mha = multi_head_attention(tape, h, h, h, blk.attn, heads, dropout_p, training, rng);
    auto x1 = add(tape, x, mha.out);
    auto h2 = layer_norm(tape, x1, blk.ln2_g, blk.ln2_b);
    auto x2 = add(tape, x1, ffn_forward(tape, h2, blk.ffn));
    return {x2, mha.weights};
}

template <typename T>
BlockResult<T> cross_attention_block(Tape<T>* tape, const TensorPtr<T>& rna,
                                     const TensorPtr<T>& dna, const CrossParams<T>& blk,
                                     std::size_t heads, double dropout_p, bool training,
                                     RngStream* rng) {
    if (rna->dim(1) != dna->dim(1))
        throw ConfigError("cross_attention_block: RNA dim " + std::to_string(rna->dim(1)) +
                          " != DNA dim " + std::to_string(dna->dim(1)));
    auto q = layer_norm(tape, rna, blk.ln_q_g, blk.ln_q_b);
    auto kv = layer_norm(tape, dna, blk.ln_kv_g, blk.ln_kv_b);
    auto mha = multi_head_attention(tape, q, kv, kv, blk.attn, heads, dropout_p, training, rng);
    auto x1 = add(tape, rna, mha.out);
    auto h2 = layer_norm(tape, x1, blk.ln2_g, blk.ln2_b);
    auto x2 = add(tape, x1, ffn_forward(tape, h2, blk.ffn));
    return {x2, mha.weights};
}

template <typename T>
struct PoolResult {
    TensorPtr<T> pooled;   // [1,d]
    TensorPtr<T> weights;  // [P,L] detached, pre-dropout
};

template <typename T>
PoolResult<T> attention_pool(Tape<T>* tape, const TensorPtr<T>& x, const PoolParams<T>& pool,
                             std::size_t pool_heads, double dropout_p, bool training,
                             RngStream* rng) {
    const std::size_t L = x->dim(0), d = x->dim(1), dh = d / pool_heads;
    auto K = matmul(tape, x, pool.wk);  // [L,d]
    auto V = matmul(tape, x, pool.wv);  // [L,d]
    auto weights = zeros<T>({pool_heads, L});
    std::vector<TensorPtr<T>> pooled_heads;
    const T inv_scale = static_cast<T>(1.0 / std::sqrt(double(dh)));
    for (std::size_t h = 0; h < pool_heads; ++h) {
        auto qh = slice_cols(tape, pool.q, h * dh, (h + 1) * dh);  // [1,dh]
        auto kh = slice_cols(tape, K, h * dh, (h + 1) * dh);       // [L,dh]
        auto vh = slice_cols(tape, V, h * dh, (h + 1) * dh);       // [L,dh]
        auto scores = scale(tape, matmul(tape, kh, transpose2d(tape, qh)), inv_scale);  // [L,1]
        auto a = softmax(tape, scores, 0);
        for (std::size_t l = 0; l < L; ++l) weights->v[h * L + l] = a->v[l];
        a = dropout(tape, a, dropout_p, training, rng);
        pooled_heads.push_back(matmul(tape, transpose2d(tape, a), vh));  // [1,dh]
    }
    return {concat_cols(tape, pooled_heads), weights};
}

template <typename T>
struct VceResult {
    TensorPtr<T> vce;  // [1,d]
    TensorPtr<T> rna_pool_weights, dna_pool_weights;
};

template <typename T>
VceResult<T> virtual_cell_embed(Tape<T>* tape, const TensorPtr<T>& rna, const TensorPtr<T>& dna,
                                const ModelParams<T>& p, bool training, RngStream* rng) {
    const auto pr = attention_pool(tape, rna, p.pool_rna, p.cfg.vce_pool_heads, p.cfg.dropout_p,
                                   training, rng);
    const auto pd = attention_pool(tape, dna, p.pool_dna, p.cfg.vce_pool_heads, p.cfg.dropout_p,
                                   training, rng);
    auto cat = concat_cols(tape, {pr.pooled, pd.pooled});  // [1,2d]
    auto h = gelu(tape, add(tape, matmul(tape, cat, p.fuse_w1), p.fuse_b1));
    auto vce = add(tape, matmul(tape, h, p.fuse_w2), p.fuse_b2);
    return {vce, pr.weights, pd.weights};
}

// Final projection from the fused cell embedding to per-gene log2FC.
template <typename T>
TensorPtr<T> task_head(Tape<T>* tape, const TensorPtr<T>& vce, const ModelParams<T>& p) {
    auto hn = layer_norm(tape, vce, p.head_ln_g, p.head_ln_b);
    auto h1 = gelu(tape, add(tape, matmul(tape, hn, p.head_w1), p.head_b1));
    return add(tape, matmul(tape, h1, p.head_w2), p.head_b2);  // [1,G]
}

template <typename T>
struct ForwardResult {
    TensorPtr<T> pred;  // [G]
    TensorPtr<T> vce;   // [1,d] fused cell embedding feeding the task head
    AttentionBundle<T> attn;
};

// Full forward pass for one cell. expr_col is the [G,1] log1p(CPM) column,
// dna the [B,E] locus embedding. Pass tape=nullptr for pure inference.
template <typename T>
ForwardResult<T> forward_predict(Tape<T>* tape, const TensorPtr<T>& expr_col,
                                 const TensorPtr<T>& dna, const ModelParams<T>& p, bool training,
                                 RngStream* rng) {
    const ModelConfig& cfg = p.cfg;
    ForwardResult<T> res;
    auto x = project_dna(tape, dna, p);
    for (const auto& blk : p.dna_blocks) {
        auto r = self_attention_block(tape, x, blk, cfg.heads, cfg.dropout_p, training, rng);
        x = r.out;
        res.attn.dna_self.push_back(r.weights);
    }
    auto r = encode_expression(tape, expr_col, p);
    for (const auto& blk : p.rna_blocks) {
        auto rr = self_attention_block(tape, r, blk, cfg.heads, cfg.dropout_p, training, rng);
        r = rr.out;
        res.attn.rna_self = rr.weights;
    }
    auto cr = cross_attention_block(tape, r, x, p.cross, cfg.heads, cfg.dropout_p, training, rng);
    res.attn.cross = cr.weights;
    auto v = virtual_cell_embed(tape, cr.out, x, p, training, rng);
    res.attn.rna_pool = v.rna_pool_weights;
    res.attn.dna_pool = v.dna_pool_weights;
    res.vce = v.vce;
    res.pred = reshape(tape, task_head(tape, v.vce, p), {cfg.n_genes});
    return res;
}

template <typename T>
using LocusMap = std::unordered_map<std::string, TensorPtr<T>>;

template <typename T>
const TensorPtr<T>& locus_embedding(const LocusMap<T>& loci, const std::string& locus_id) {
    const auto it = loci.find(locus_id);
    if (it == loci.end()) throw LookupError("unknown locus id: " + locus_id);
    return it->second;
}

template <typename T>
ForwardResult<T> forward_predict(Tape<T>* tape, const CellSample& sample, const LocusMap<T>& loci,
                                 const ModelParams<T>& p, bool training, RngStream* rng) {
    const auto& dna = locus_embedding(loci, sample.locus_id);
    auto expr_col = expr_tensor<T>(sample.expr, p.cfg.n_genes);
    return forward_predict(tape, expr_col, dna, p, training, rng);
}

// ---- attention aggregation ----------------------------------------------------

// Head-averaged [L1,L2] matrix (double precision) from a [H,L1,L2] weight tensor.
template <typename T>
Mat head_mean(const TensorPtr<T>& w) {
    const std::size_t H = w->dim(0), L1 = w->dim(1), L2 = w->dim(2);
    Mat m(L1, L2);
    for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < L1 * L2; ++i) m.v[i] += double(w->v[h * L1 * L2 + i]);
    for (auto& x : m.v) x /= double(H);
    return m;
}

struct AttentionAggregate {
    Mat rna_self;  // [G,G], head- and cell-averaged
    Mat cross;     // [G,B]
    std::size_t n_cells = 0;
};

// Eval-mode attention extraction over many cells. Cells are processed in
// fixed-size chunks (parallel within a chunk, accumulated in cell order) so
// results do not depend on thread count. per_cell, when given, receives each
// cell's head-averaged maps in cell order.
template <typename T>
AttentionAggregate extract_attention_maps(
    const std::vector<CellSample>& samples, const LocusMap<T>& loci, const ModelParams<T>& p,
    const std::function<void(std::size_t, const Mat& rna_self, const Mat& cross)>& per_cell =
        nullptr) {
    if (samples.empty()) throw ContractError("extract_attention_maps: no samples");
    const std::size_t G = p.cfg.n_genes, B = p.cfg.n_bins;
    AttentionAggregate agg;
    agg.rna_self = Mat(G, G);
    agg.cross = Mat(G, B);
    agg.n_cells = samples.size();
    const std::size_t chunk = 16;
    std::vector<Mat> rna_buf(chunk), cross_buf(chunk);
    for (std::size_t base = 0; base < samples.size(); base += chunk) {
        const std::size_t n = std::min(chunk, samples.size() - base);
        parallel_for(n, [&](std::size_t i) {
            auto res = forward_predict<T>(nullptr, samples[base + i], loci, p, false, nullptr);
            rna_buf[i] = head_mean(res.attn.rna_self);
            cross_buf[i] = head_mean(res.attn.cross);
        });
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < agg.rna_self.v.size(); ++j)
                agg.rna_self.v[j] += rna_buf[i].v[j];
            for (std::size_t j = 0; j < agg.cross.v.size(); ++j)
                agg.cross.v[j] += cross_buf[i].v[j];
            if (per_cell) per_cell(base + i, rna_buf[i], cross_buf[i]);
        }
    }
    const double inv = 1.0 / double(samples.size());
    for (auto& x : agg.rna_self.v) x *= inv;
    for (auto& x : agg.cross.v) x *= inv;
    return agg;
}

// ---- checkpoints ---------------------------------------------------------------

namespace model_detail {

inline std::string config_json(const ModelConfig& c) {
    std::string s = "{";
    const auto add = [&](const char* k, std::size_t v, bool last = false) {
        s += "\"" + std::string(k) + "\":" + std::to_string(v) + (last ? "" : ",");
    };
    add("n_genes", c.n_genes);
    add("n_bins", c.n_bins);
    add("dna_embed_dim", c.dna_embed_dim);
    add("model_dim", c.model_dim);
    add("heads", c.heads);
    add("ffn_dim", c.ffn_dim);
    s += "\"dropout_p\":" + fmt_double(c.dropout_p) + ",";
    add("n_dna_layers", c.n_dna_layers);
    add("n_rna_layers", c.n_rna_layers);
    add("vce_pool_heads", c.vce_pool_heads);
    add("task_hidden_dim", c.task_hidden_dim, true);
    return s + "}";
}

}  // namespace model_detail

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<T>& p,
                     std::uint64_t seed, std::size_t epoch) {
    CheckpointFile f;
    f.header_json = "{\"config\":" + model_detail::config_json(p.cfg) +
                    ",\"seed\":" + std::to_string(seed) +
                    ",\"epoch\":" + std::to_string(epoch) + "}";
    for (const auto& [name, t] : p.named()) f.blobs.emplace_back(name, encode_blob(t));
    for (const auto& [name, t] : p.buffers()) f.blobs.emplace_back(name, encode_blob(t));
    write_checkpoint_file(path, f);
}

struct CheckpointInfo {
    std::uint64_t seed = 0;
    std::size_t epoch = 0;
};

// Loads a checkpoint into a params struct built from cfg. Every tensor in the
// registry must be present with matching shape; dtype converts if needed.
template <typename T>
ModelParams<T> load_checkpoint(const std::filesystem::path& path, const ModelConfig& cfg,
                               CheckpointInfo* info = nullptr) {
    const CheckpointFile f = read_checkpoint_file(path);
    std::unordered_map<std::string, const std::string*> by_name;
    for (const auto& [name, bytes] : f.blobs) by_name[name] = &bytes;
    ModelParams<T> p = init_model<T>(cfg, 0);
    auto entries = p.named();
    for (const auto& nb : p.buffers()) entries.push_back(nb);
    for (auto& [name, t] : entries) {
        const auto it = by_name.find(name);
        if (it == by_name.end()) throw IoError("checkpoint missing tensor: " + name);
        auto loaded = decode_blob_as<T>(*it->second);
        if (loaded->shape != t->shape)
            throw MismatchError("checkpoint tensor " + name + " has shape " +
                                detail::shape_str(loaded->shape) + ", model expects " +
                                detail::shape_str(t->shape));
        t->v = std::move(loaded->v);
    }
    if (info) {
        const auto grab = [&](const char* key) -> std::uint64_t {
            const std::string pat = "\"" + std::string(key) + "\":";
            const auto pos = f.header_json.find(pat);
            if (pos == std::string::npos) return 0;
            return std::strtoull(f.header_json.c_str() + pos + pat.size(), nullptr, 10);
        };
        info->seed = grab("seed");
        info->epoch = static_cast<std::size_t>(grab("epoch"));
    }
    return p;
}

}  // namespace cdt
