#pragma once

// The MAsk Proposal Net: a half-size transformer that maps a sentence to
// a multinomial distribution over its positions, the without-replacement
// sampler, the approximate importance ratio with clipping, and the
// score-function objective with an average-loss baseline.

#include <algorithm>
#include <cmath>
#include <memory>
#include <random>
#include <stdexcept>
#include <vector>

#include "maskvar/encoder.hpp"
#include "maskvar/masking.hpp"

namespace maskvar {

struct MapNetConfig {
    int vocab_size = 131;
    int max_seq_len = 32;
    int num_layers = 2;
    int hidden = 32;  // encoder hidden / 2
    int heads = 2;    // encoder heads / 2
    int ffn_multiplier = 4;

    // Half the encoder's width, same depth.
    static MapNetConfig from_encoder(const EncoderConfig& enc) {
        if (enc.hidden % 2 != 0 || enc.heads % 2 != 0)
            throw std::invalid_argument("map-net config: encoder hidden and heads must be even to halve");
        MapNetConfig c;
        c.vocab_size = enc.vocab_size;
        c.max_seq_len = enc.max_seq_len;
        c.num_layers = enc.num_layers;
        c.hidden = enc.hidden / 2;
        c.heads = enc.heads / 2;
        c.ffn_multiplier = enc.ffn_multiplier;
        if (c.hidden % c.heads != 0) throw std::invalid_argument("map-net config: halved hidden not divisible by halved heads");
        return c;
    }

    int head_dim() const { return hidden / heads; }
};

struct MapNetParams {
    MapNetConfig config;
    std::shared_ptr<Tensor> token_embedding;  // the encoder's table, by reference
    Tensor input_proj;                        // [H_enc, H_map]: bridges the shared width
    Tensor input_bias;                        // [H_map]
    Tensor position_embedding;                // [max_seq_len, H_map]
    std::vector<TransformerLayer> layers;
    Tensor score_w;  // [H_map, 1]
    Tensor score_b;  // [1]

    static MapNetParams init(const MapNetConfig& cfg, std::shared_ptr<Tensor> shared_embedding, std::mt19937_64& rng) {
        if (!shared_embedding) throw std::invalid_argument("map-net init: shared embedding is null");
        if (shared_embedding->rank() != 2 || shared_embedding->shape[0] != cfg.vocab_size)
            throw std::invalid_argument("map-net init: shared embedding shape mismatch");
        MapNetParams p;
        p.config = cfg;
        p.token_embedding = std::move(shared_embedding);
        const int h_enc = p.token_embedding->shape[1];
        p.input_proj = Tensor::randn({h_enc, cfg.hidden}, EncoderParams::kInitStd, rng);
        p.input_bias = Tensor::zeros({cfg.hidden});
        p.position_embedding = Tensor::randn({cfg.max_seq_len, cfg.hidden}, EncoderParams::kInitStd, rng);
        for (int i = 0; i < cfg.num_layers; ++i)
            p.layers.push_back(init_layer(cfg.hidden, cfg.hidden * cfg.ffn_multiplier, EncoderParams::kInitStd, rng));
        p.score_w = Tensor::randn({cfg.hidden, 1}, EncoderParams::kInitStd, rng);
        p.score_b = Tensor::zeros({1});
        return p;
    }

    // Own parameters in canonical order. The shared embedding is listed
    // first and flagged so callers can include or exclude it.
    std::vector<std::pair<std::string, Tensor*>> named_parameters(bool include_shared = true) {
        std::vector<std::pair<std::string, Tensor*>> out;
        if (include_shared) out.emplace_back("shared/token_embedding", token_embedding.get());
        out.emplace_back("map/input_proj", &input_proj);
        out.emplace_back("map/input_bias", &input_bias);
        out.emplace_back("map/position_embedding", &position_embedding);
        for (std::size_t i = 0; i < layers.size(); ++i)
            collect_layer_params(layers[i], "map/layer" + std::to_string(i), out);
        out.emplace_back("map/score_w", &score_w);
        out.emplace_back("map/score_b", &score_b);
        return out;
    }

    std::vector<Tensor*> parameter_list(bool include_shared = true) {
        std::vector<Tensor*> out;
        for (auto& [name, t] : named_parameters(include_shared)) out.push_back(t);
        return out;
    }
};

struct ProposalDistribution {
    std::vector<double> p;  // one probability per position, sums to 1

    int size() const { return static_cast<int>(p.size()); }
};

struct ProposalGraph {
    std::vector<Tape::Value> param_leaves;  // aligned with named_parameters(include_shared)
    Tape::Value log_probs;                  // [n]
    bool shared_embedding_differentiable = false;
};

// Builds the MAP-Net forward graph: shared embedding -> input projection
// -> half-size transformer stack -> per-position scalar score -> log
// softmax over positions.
inline ProposalGraph build_proposal_graph(Tape& tape, MapNetParams& params, const TokenSequence& x,
                                          bool needs_grad = true, bool freeze_shared_embedding = false,
                                          const DropoutCtx* drop = nullptr) {
    const MapNetConfig& cfg = params.config;
    const int n = x.length;
    if (n < 1 || n > cfg.max_seq_len)
        throw std::invalid_argument("map-net: sentence length " + std::to_string(n) + " outside [1," +
                                    std::to_string(cfg.max_seq_len) + "]");

    ProposalGraph g;
    auto named = params.named_parameters(true);
    g.param_leaves.reserve(named.size());
    for (std::size_t i = 0; i < named.size(); ++i) {
        const bool ng = needs_grad && !(i == 0 && freeze_shared_embedding);
        g.param_leaves.push_back(tape.leaf(named[i].second, ng));
    }
    g.shared_embedding_differentiable = needs_grad && !freeze_shared_embedding;

    std::vector<int> toks(x.tokens.begin(), x.tokens.begin() + n);
    for (int t : toks)
        if (t < 0 || t >= cfg.vocab_size) throw std::out_of_range("map-net: token id out of vocab range");
    std::vector<int> pos_idx(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pos_idx[static_cast<std::size_t>(i)] = i;

    Tape::Value emb = tape.gather_rows(g.param_leaves[0], toks);
    Tape::Value projected = tape.add_rowvec(tape.matmul(emb, g.param_leaves[1]), g.param_leaves[2]);
    Tape::Value h = tape.add(projected, tape.gather_rows(g.param_leaves[3], pos_idx));
    h = maybe_dropout(tape, h, drop);

    std::vector<Tape::Value> layer_leaves(g.param_leaves.begin() + 4, g.param_leaves.end() - 2);
    Tape::Value xv = detail::transformer_layers(tape, cfg.num_layers, cfg.heads, cfg.head_dim(), layer_leaves, h, drop);

    Tape::Value scores2d = tape.add_rowvec(tape.matmul(xv, g.param_leaves[g.param_leaves.size() - 2]),
                                           g.param_leaves[g.param_leaves.size() - 1]);  // [n,1]
    g.log_probs = tape.log_softmax(tape.reshape(scores2d, {n}));
    return g;
}

// Proposal distribution over positions (no gradients).
inline ProposalDistribution propose(MapNetParams& params, const TokenSequence& x) {
    Tape tape;
    ProposalGraph g = build_proposal_graph(tape, params, x, /*needs_grad=*/false);
    const Tensor& lp = tape.value(g.log_probs);
    ProposalDistribution d;
    d.p.resize(lp.data.size());
    for (std::size_t i = 0; i < lp.data.size(); ++i) d.p[i] = std::exp(lp.data[i]);
    return d;
}

struct SampledPositions {
    std::vector<int> positions;    // draw order
    std::vector<double> raw_probs; // unrenormalized probability of each draw
};

// K sequential draws without replacement: each draw removes the chosen
// position and renormalizes over the remainder. The recorded probability
// is the RAW multinomial probability at draw time — the quantity the
// approximate importance ratio consumes.
inline SampledPositions sample_positions(const ProposalDistribution& dist, int k, std::mt19937_64& rng) {
    const int n = dist.size();
    if (k < 1 || k > n)
        throw std::invalid_argument("sample_positions: K=" + std::to_string(k) + " outside [1,n=" + std::to_string(n) + "]");
    for (double p : dist.p)
        if (!(p >= 0.0)) throw std::domain_error("sample_positions: negative probability");
    SampledPositions out;
    std::vector<int> alive(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) alive[static_cast<std::size_t>(i)] = i;
    double remaining = 0.0;
    for (double p : dist.p) remaining += p;
    for (int draw = 0; draw < k; ++draw) {
        if (remaining <= 0.0) throw std::domain_error("sample_positions: proposal mass exhausted before K draws");
        const double u = uniform01(rng) * remaining;
        double acc = 0.0;
        std::size_t chosen = alive.size() - 1;
        for (std::size_t j = 0; j < alive.size(); ++j) {
            acc += dist.p[static_cast<std::size_t>(alive[j])];
            if (u < acc) {
                chosen = j;
                break;
            }
        }
        const int pos = alive[chosen];
        out.positions.push_back(pos);
        out.raw_probs.push_back(dist.p[static_cast<std::size_t>(pos)]);
        remaining -= dist.p[static_cast<std::size_t>(pos)];
        alive.erase(alive.begin() + static_cast<std::ptrdiff_t>(chosen));
    }
    return out;
}

struct ImportanceRatio {
    double raw = 1.0;
    double clipped = 1.0;
};

// The paper's approximation: r = (1/n)^K / prod_k p_prop(pos_k), using
// raw multinomial probabilities on both sides (the without-replacement
// renormalization is deliberately ignored). Clipped to [1-eps, 1+eps].
inline ImportanceRatio importance_ratio(const std::vector<double>& raw_probs, int n, int k, double eps) {
    if (static_cast<int>(raw_probs.size()) != k) throw std::invalid_argument("importance_ratio: K mismatch");
    if (n < 1 || k < 1) throw std::invalid_argument("importance_ratio: need n >= 1 and K >= 1");
    if (eps < 0.0 || eps >= 1.0) throw std::invalid_argument("importance_ratio: eps must lie in [0,1)");
    double denom = 1.0;
    for (double p : raw_probs) {
        if (!(p > 0.0)) throw std::domain_error("importance_ratio: nonpositive proposal probability");
        denom *= p;
    }
    ImportanceRatio r;
    r.raw = std::pow(1.0 / static_cast<double>(n), k) / denom;
    r.clipped = std::clamp(r.raw, 1.0 - eps, 1.0 + eps);
    return r;
}

// Eq.-(10)-style objective value: sum_k -log p(pos_k) * (loss_k - baseline),
// baseline = mean loss over the K sampled positions. Loss values are
// constants; only the proposal's log-probabilities carry gradient.
inline double mapnet_loss_value(const ProposalDistribution& dist, const std::vector<int>& positions,
                                const std::vector<double>& position_losses) {
    const std::size_t k = positions.size();
    if (k == 0) throw std::invalid_argument("mapnet_loss: K must be >= 1");
    if (position_losses.size() != k) throw std::invalid_argument("mapnet_loss: losses/positions mismatch");
    double baseline = 0.0;
    for (double l : position_losses) baseline += l;
    baseline /= static_cast<double>(k);
    double out = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        const double p = dist.p[static_cast<std::size_t>(positions[i])];
        out += -std::log(p) * (position_losses[i] - baseline);
    }
    return out;
}

// Tape version used in training: attaches the objective to a proposal
// graph so backward reaches theta_MAP (and, unless frozen, the shared
// embedding) but never the encoder-only parameters.
inline Tape::Value mapnet_objective(Tape& tape, const ProposalGraph& graph, const std::vector<int>& positions,
                                    const std::vector<double>& position_losses) {
    const std::size_t k = positions.size();
    if (k == 0) throw std::invalid_argument("mapnet_objective: K must be >= 1");
    if (position_losses.size() != k) throw std::invalid_argument("mapnet_objective: losses/positions mismatch");
    double baseline = 0.0;
    for (double l : position_losses) baseline += l;
    baseline /= static_cast<double>(k);
    std::vector<double> coeffs(k);
    for (std::size_t i = 0; i < k; ++i) coeffs[i] = -(position_losses[i] - baseline);
    // sum_k (loss_k - baseline) * (-log p_k) == dot(log_probs[positions], baseline - loss)
    Tape::Value gathered = tape.gather_elems(graph.log_probs, positions);
    return tape.dot_const(gathered, std::move(coeffs));
}

// PropMask: one sentence through the exploration-exploitation mixer.
// With probability explore_p the plan comes from RandMask (ratio forced
// to 1); otherwise positions are sampled from the MAP-Net and the
// approximate ratio is attached.
inline MaskPlan mixed_mask(const TokenSequence& x, long step, const ExplorationSchedule& schedule,
                           MapNetParams& mapnet, double mask_rate, double clip_eps, std::mt19937_64& rng) {
    const double p_explore = explore_p(schedule, step);
    const bool take_uniform = uniform01(rng) < p_explore;
    if (take_uniform) return rand_mask(x, mask_rate, rng);
    const int k = mask_count(mask_rate, x.length);
    ProposalDistribution dist = propose(mapnet, x);
    SampledPositions s = sample_positions(dist, k, rng);
    ImportanceRatio r = importance_ratio(s.raw_probs, x.length, k, clip_eps);
    MaskPlan plan;
    plan.positions = std::move(s.positions);
    plan.raw_probs = std::move(s.raw_probs);
    plan.ratio = r.raw;
    plan.ratio_clipped = r.clipped;
    plan.source = MaskSource::proposal_branch;
    return plan;
}

}  // namespace maskvar
