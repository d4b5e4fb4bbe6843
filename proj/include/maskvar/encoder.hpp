#pragma once

// Toy bidirectional transformer encoder with an MLM head. Post-layernorm
// blocks, exact-erf GELU, learned positional embeddings, and a decoder
// tied to the token embedding table. The token embedding is held through
// a shared_ptr because the mask proposal net references the same tensor.

#include <cmath>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "maskvar/corpus.hpp"
#include "maskvar/tape.hpp"
#include "maskvar/tensor.hpp"

namespace maskvar {

struct EncoderConfig {
    int vocab_size = 131;
    int max_seq_len = 32;
    int num_layers = 2;
    int hidden = 64;
    int heads = 4;
    int ffn_multiplier = 4;
    double dropout = 0.1;   // train-time knob; forward paths receive it explicitly
    bool sum_loss = false;  // sentence loss = sum over masked positions instead of mean

    void validate() const {
        if (vocab_size <= Vocabulary::kNumReserved) throw std::invalid_argument("encoder config: vocab_size too small");
        if (hidden <= 0 || heads <= 0 || hidden % heads != 0)
            throw std::invalid_argument("encoder config: hidden must be a positive multiple of heads");
        if (num_layers < 1 || ffn_multiplier < 1 || max_seq_len < 1)
            throw std::invalid_argument("encoder config: layers, ffn_multiplier, max_seq_len must be positive");
        if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("encoder config: dropout must be in [0,1)");
    }

    int head_dim() const { return hidden / heads; }

    static EncoderConfig toy() { return EncoderConfig{}; }

    // BERT-base shape from the pretraining protocol; present as a preset,
    // far too large for the oracle suites.
    static EncoderConfig paper_base() {
        EncoderConfig c;
        c.vocab_size = 32678;
        c.max_seq_len = 512;
        c.num_layers = 12;
        c.hidden = 768;
        c.heads = 12;
        c.ffn_multiplier = 4;
        c.dropout = 0.1;
        return c;
    }
};

struct TransformerLayer {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor w1, b1, w2, b2;
    Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
};

inline TransformerLayer init_layer(int hidden, int ffn, double init_std, std::mt19937_64& rng) {
    TransformerLayer l;
    l.wq = Tensor::randn({hidden, hidden}, init_std, rng);
    l.bq = Tensor::zeros({hidden});
    l.wk = Tensor::randn({hidden, hidden}, init_std, rng);
    l.bk = Tensor::zeros({hidden});
    l.wv = Tensor::randn({hidden, hidden}, init_std, rng);
    l.bv = Tensor::zeros({hidden});
    l.wo = Tensor::randn({hidden, hidden}, init_std, rng);
    l.bo = Tensor::zeros({hidden});
    l.w1 = Tensor::randn({hidden, ffn}, init_std, rng);
    l.b1 = Tensor::zeros({ffn});
    l.w2 = Tensor::randn({ffn, hidden}, init_std, rng);
    l.b2 = Tensor::zeros({hidden});
    l.ln1_gain = Tensor::full({hidden}, 1.0);
    l.ln1_bias = Tensor::zeros({hidden});
    l.ln2_gain = Tensor::full({hidden}, 1.0);
    l.ln2_bias = Tensor::zeros({hidden});
    return l;
}

inline void collect_layer_params(TransformerLayer& l, const std::string& prefix,
                                 std::vector<std::pair<std::string, Tensor*>>& out) {
    // canonical per-layer order: attention, then ffn, then norms
    out.emplace_back(prefix + "/wq", &l.wq);
    out.emplace_back(prefix + "/bq", &l.bq);
    out.emplace_back(prefix + "/wk", &l.wk);
    out.emplace_back(prefix + "/bk", &l.bk);
    out.emplace_back(prefix + "/wv", &l.wv);
    out.emplace_back(prefix + "/bv", &l.bv);
    out.emplace_back(prefix + "/wo", &l.wo);
    out.emplace_back(prefix + "/bo", &l.bo);
    out.emplace_back(prefix + "/w1", &l.w1);
    out.emplace_back(prefix + "/b1", &l.b1);
    out.emplace_back(prefix + "/w2", &l.w2);
    out.emplace_back(prefix + "/b2", &l.b2);
    out.emplace_back(prefix + "/ln1_gain", &l.ln1_gain);
    out.emplace_back(prefix + "/ln1_bias", &l.ln1_bias);
    out.emplace_back(prefix + "/ln2_gain", &l.ln2_gain);
    out.emplace_back(prefix + "/ln2_bias", &l.ln2_bias);
}

struct EncoderParams {
    EncoderConfig config;
    std::shared_ptr<Tensor> token_embedding;  // [V,H], shared with the MAP-Net
    Tensor position_embedding;                // [max_seq_len, H]
    std::vector<TransformerLayer> layers;
    Tensor head_w, head_b;                    // transform H->H before the tied decoder
    Tensor head_ln_gain, head_ln_bias;
    Tensor out_bias;                          // [V]

    static constexpr double kInitStd = 0.02;

    static EncoderParams init(const EncoderConfig& cfg, std::mt19937_64& rng) {
        cfg.validate();
        EncoderParams p;
        p.config = cfg;
        p.token_embedding = std::make_shared<Tensor>(Tensor::randn({cfg.vocab_size, cfg.hidden}, kInitStd, rng));
        p.position_embedding = Tensor::randn({cfg.max_seq_len, cfg.hidden}, kInitStd, rng);
        for (int i = 0; i < cfg.num_layers; ++i)
            p.layers.push_back(init_layer(cfg.hidden, cfg.hidden * cfg.ffn_multiplier, kInitStd, rng));
        p.head_w = Tensor::randn({cfg.hidden, cfg.hidden}, kInitStd, rng);
        p.head_b = Tensor::zeros({cfg.hidden});
        p.head_ln_gain = Tensor::full({cfg.hidden}, 1.0);
        p.head_ln_bias = Tensor::zeros({cfg.hidden});
        p.out_bias = Tensor::zeros({cfg.vocab_size});
        return p;
    }

    // Canonical flattening order: embeddings, positional, layers in depth
    // order (attention, ffn, norms), head. Gradient vectors from any run
    // are comparable coordinate by coordinate.
    std::vector<std::pair<std::string, Tensor*>> named_parameters() {
        std::vector<std::pair<std::string, Tensor*>> out;
        out.emplace_back("shared/token_embedding", token_embedding.get());
        out.emplace_back("enc/position_embedding", &position_embedding);
        for (std::size_t i = 0; i < layers.size(); ++i)
            collect_layer_params(layers[i], "enc/layer" + std::to_string(i), out);
        out.emplace_back("enc/head_w", &head_w);
        out.emplace_back("enc/head_b", &head_b);
        out.emplace_back("enc/head_ln_gain", &head_ln_gain);
        out.emplace_back("enc/head_ln_bias", &head_ln_bias);
        out.emplace_back("enc/out_bias", &out_bias);
        return out;
    }

    std::vector<Tensor*> parameter_list() {
        std::vector<Tensor*> out;
        for (auto& [name, t] : named_parameters()) out.push_back(t);
        return out;
    }

    std::int64_t num_params() {
        std::int64_t n = 0;
        for (Tensor* t : parameter_list()) n += t->numel();
        return n;
    }
};

struct PositionLoss {
    int position = 0;
    double loss = 0.0;
    double entropy = 0.0;  // predicted-distribution entropy, diagnostic only
};

// Dropout configuration for one forward pass; absent pointer = eval mode.
struct DropoutCtx {
    double rate = 0.0;
    std::mt19937_64* rng = nullptr;
    bool active() const { return rate > 0.0 && rng != nullptr; }
};

inline Tensor dropout_mask(const std::vector<int>& shape, double rate, std::mt19937_64& rng) {
    Tensor m(shape);
    const double keep = 1.0 - rate;
    const double scale = 1.0 / keep;
    for (double& v : m.data) v = uniform01(rng) < keep ? scale : 0.0;
    return m;
}

inline Tape::Value maybe_dropout(Tape& tape, Tape::Value x, const DropoutCtx* drop) {
    if (!drop || !drop->active()) return x;
    return tape.mul_mask(x, dropout_mask(tape.value(x).shape, drop->rate, *drop->rng));
}

// Node handles for one sentence forward pass.
struct EncoderGraph {
    std::vector<Tape::Value> param_leaves;  // aligned with parameter_list()
    Tape::Value sentence_loss;              // scalar; 0-filled constant when no positions
    Tape::Value position_losses;            // [K] vector (invalid when K == 0)
    std::vector<PositionLoss> losses;       // realized values
    double sentence_loss_value = 0.0;
};

namespace detail {

// Post-LN transformer blocks over an input [n, hidden]; layer_leaves
// carries 16 leaves per layer in collect_layer_params order.
inline Tape::Value transformer_layers(Tape& tape, int num_layers, int heads, int head_dim,
                                      const std::vector<Tape::Value>& layer_leaves, Tape::Value x,
                                      const DropoutCtx* drop) {
    for (int li = 0; li < num_layers; ++li) {
        const std::size_t base = static_cast<std::size_t>(li) * 16;
        const auto L = [&](int k) { return layer_leaves[base + static_cast<std::size_t>(k)]; };
        Tape::Value q = tape.add_rowvec(tape.matmul(x, L(0)), L(1));
        Tape::Value k = tape.add_rowvec(tape.matmul(x, L(2)), L(3));
        Tape::Value v = tape.add_rowvec(tape.matmul(x, L(4)), L(5));
        std::vector<Tape::Value> head_ctx;
        head_ctx.reserve(static_cast<std::size_t>(heads));
        for (int h = 0; h < heads; ++h) {
            Tape::Value qh = tape.slice_cols(q, h * head_dim, head_dim);
            Tape::Value kh = tape.slice_cols(k, h * head_dim, head_dim);
            Tape::Value vh = tape.slice_cols(v, h * head_dim, head_dim);
            Tape::Value scores = tape.scale(tape.matmul_nt(qh, kh), 1.0 / std::sqrt(static_cast<double>(head_dim)));
            Tape::Value probs = tape.softmax(scores, 1);
            probs = maybe_dropout(tape, probs, drop);
            head_ctx.push_back(tape.matmul(probs, vh));
        }
        Tape::Value ctx = heads == 1 ? head_ctx[0] : tape.concat_cols(head_ctx);
        Tape::Value attn_out = tape.add_rowvec(tape.matmul(ctx, L(6)), L(7));
        attn_out = maybe_dropout(tape, attn_out, drop);
        x = tape.layernorm(tape.add(x, attn_out), L(12), L(13));
        Tape::Value ff = tape.add_rowvec(tape.matmul(tape.gelu(tape.add_rowvec(tape.matmul(x, L(8)), L(9))), L(10)), L(11));
        ff = maybe_dropout(tape, ff, drop);
        x = tape.layernorm(tape.add(x, ff), L(14), L(15));
    }
    return x;
}

inline Tape::Value encoder_stack(Tape& tape, const EncoderConfig& cfg, const std::vector<Tape::Value>& layer_leaves,
                                 Tape::Value emb_leaf, Tape::Value pos_leaf, const std::vector<int>& tokens,
                                 const DropoutCtx* drop) {
    const int n = static_cast<int>(tokens.size());
    std::vector<int> pos_idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pos_idx[static_cast<std::size_t>(i)] = i;
    Tape::Value x = tape.add(tape.gather_rows(emb_leaf, tokens), tape.gather_rows(pos_leaf, pos_idx));
    x = maybe_dropout(tape, x, drop);
    return transformer_layers(tape, cfg.num_layers, cfg.heads, cfg.head_dim(), layer_leaves, x, drop);
}

}  // namespace detail

// Full MLM graph for one sentence: encoder stack over the masked tokens,
// per-position cross entropy against the original tokens at `positions`,
// sentence loss = mean (or sum) over those positions.
inline EncoderGraph build_mlm_graph(Tape& tape, EncoderParams& params, const TokenSequence& masked,
                                    const std::vector<int>& positions, const TokenSequence& original,
                                    const DropoutCtx* drop = nullptr, bool needs_grad = true) {
    const EncoderConfig& cfg = params.config;
    const int n = masked.length;
    if (n < 1 || n > cfg.max_seq_len)
        throw std::invalid_argument("encoder: sentence length " + std::to_string(n) + " outside [1," +
                                    std::to_string(cfg.max_seq_len) + "]");
    if (original.length != n) throw std::invalid_argument("encoder: masked/original length mismatch");
    for (int p : positions)
        if (p < 0 || p >= n) throw std::out_of_range("encoder: masked position " + std::to_string(p) + " out of range");

    EncoderGraph g;
    auto named = params.named_parameters();
    g.param_leaves.reserve(named.size());
    for (auto& [name, t] : named) g.param_leaves.push_back(tape.leaf(t, needs_grad));

    Tape::Value emb_leaf = g.param_leaves[0];
    Tape::Value pos_leaf = g.param_leaves[1];
    std::vector<Tape::Value> layer_leaves(g.param_leaves.begin() + 2, g.param_leaves.end() - 5);
    const std::size_t head_base = g.param_leaves.size() - 5;

    std::vector<int> toks(masked.tokens.begin(), masked.tokens.begin() + n);
    for (int t : toks)
        if (t < 0 || t >= cfg.vocab_size) throw std::out_of_range("encoder: token id out of vocab range");

    Tape::Value x = detail::encoder_stack(tape, cfg, layer_leaves, emb_leaf, pos_leaf, toks, drop);

    if (positions.empty()) {
        // zero masked positions: sentence loss defined as 0
        g.sentence_loss = tape.constant(Tensor({1}));
        g.sentence_loss_value = 0.0;
        return g;
    }

    std::vector<int> targets;
    targets.reserve(positions.size());
    for (int p : positions) targets.push_back(original.tokens[static_cast<std::size_t>(p)]);

    Tape::Value hm = tape.gather_rows(x, positions);
    Tape::Value t = tape.gelu(tape.add_rowvec(tape.matmul(hm, g.param_leaves[head_base]), g.param_leaves[head_base + 1]));
    t = tape.layernorm(t, g.param_leaves[head_base + 2], g.param_leaves[head_base + 3]);
    Tape::Value logits = tape.add_rowvec(tape.matmul_nt(t, emb_leaf), g.param_leaves[head_base + 4]);

    auto ce = tape.cross_entropy_rows(logits, targets);
    g.position_losses = ce.losses;
    g.sentence_loss = cfg.sum_loss ? tape.sum_all(ce.losses) : tape.mean_all(ce.losses);
    g.sentence_loss_value = tape.value(g.sentence_loss).data[0];
    const Tensor& lv = tape.value(ce.losses);
    for (std::size_t i = 0; i < positions.size(); ++i)
        g.losses.push_back(PositionLoss{positions[i], lv.data[i], ce.entropies[i]});
    return g;
}

inline std::vector<PositionLoss> forward_mlm(EncoderParams& params, const TokenSequence& masked,
                                             const std::vector<int>& positions, const TokenSequence& original,
                                             const DropoutCtx* drop = nullptr) {
    Tape tape;
    return build_mlm_graph(tape, params, masked, positions, original, drop, /*needs_grad=*/false).losses;
}

inline double sentence_loss_value(EncoderParams& params, const TokenSequence& masked, const std::vector<int>& positions,
                                  const TokenSequence& original, const DropoutCtx* drop = nullptr) {
    Tape tape;
    return build_mlm_graph(tape, params, masked, positions, original, drop, /*needs_grad=*/false).sentence_loss_value;
}

struct SentenceGradient {
    std::vector<double> flat;  // canonical parameter order
    double norm = 0.0;
    double loss = 0.0;
};

// Gradient of weight * sentence loss w.r.t. all encoder parameters,
// flattened in canonical order.
inline SentenceGradient sentence_gradient(EncoderParams& params, const TokenSequence& masked,
                                          const std::vector<int>& positions, const TokenSequence& original,
                                          double weight = 1.0, const DropoutCtx* drop = nullptr) {
    Tape tape;
    EncoderGraph g = build_mlm_graph(tape, params, masked, positions, original, drop, /*needs_grad=*/true);
    SentenceGradient out;
    out.loss = g.sentence_loss_value;
    if (!positions.empty()) tape.backward(g.sentence_loss, weight);
    std::size_t total = 0;
    for (Tensor* t : params.parameter_list()) total += t->data.size();
    out.flat.reserve(total);
    for (Tape::Value leaf : g.param_leaves) {
        const Tensor& gr = tape.grad(leaf);
        out.flat.insert(out.flat.end(), gr.data.begin(), gr.data.end());
    }
    out.norm = l2_norm(out.flat);
    return out;
}

// For each position i: mask only i (pure [MASK], no 80/10/10 randomness)
// and record the loss and the full-parameter gradient norm.
struct PositionLossNorm {
    int position = 0;
    double loss = 0.0;
    double grad_norm = 0.0;
};

inline std::vector<PositionLossNorm> position_loss_and_norm_table(EncoderParams& params, const TokenSequence& x) {
    if (x.length < 1) throw std::invalid_argument("position_loss_and_norm_table: empty sentence");
    std::vector<PositionLossNorm> rows;
    rows.reserve(static_cast<std::size_t>(x.length));
    for (int i = 0; i < x.length; ++i) {
        TokenSequence masked = x;
        masked.tokens[static_cast<std::size_t>(i)] = Vocabulary::kMask;
        SentenceGradient sg = sentence_gradient(params, masked, {i}, x);
        rows.push_back(PositionLossNorm{i, sg.loss, sg.norm});
    }
    return rows;
}

}  // namespace maskvar
