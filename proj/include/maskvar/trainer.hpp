#pragma once

// Joint adversarial training of the encoder and the MAP-Net: per batch,
// masks come from the exploration-exploitation mixer, the encoder
// minimizes the clip-weighted MLM loss, and the MAP-Net minimizes the
// score-function objective on the same forward pass's position losses.
// Both parameter sets step with Adam under a shared warmup-linear-decay
// schedule. Everything is deterministic given the config seed; the
// reduction across a batch runs in sentence order regardless of the
// worker count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "maskvar/corpus.hpp"
#include "maskvar/encoder.hpp"
#include "maskvar/mask_proposal.hpp"
#include "maskvar/masking.hpp"
#include "maskvar/rng.hpp"

namespace maskvar {

struct TrainConfig {
    int batch_size = 32;
    long total_steps = 10000;
    double peak_lr = 3e-4;
    long warmup_steps = 400;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.98;
    double adam_eps = 1e-6;
    double weight_decay = 0.01;
    double dropout = 0.0;
    double lambda_mapnet = 1e-2;  // weight on the MAP-Net term of the combined loss
    double clip_epsilon = 0.2;
    double mask_rate = 0.15;
    ExplorationSchedule schedule{1.0, 0.33, 10000};
    std::uint64_t seed = 1;
    long eval_interval = 200;
    long checkpoint_interval = 0;  // 0 = final checkpoint only

    // flags
    bool baseline_uniform = false;         // pin explore_p to 1.0: plain BERT masking
    bool lambda_on_encoder = false;        // literal combined-loss form L_MAP + lambda * L_enc
    bool freeze_shared_embedding_mapnet = false;  // stop MAP-Net gradients into the shared table
    bool include_uniform_in_mapnet = false;       // off-policy ablation
    bool sample_with_replacement = false;  // batch sampling instead of shuffled epochs
    double eval_threshold = std::numeric_limits<double>::quiet_NaN();  // for steps-to-threshold reporting
    bool stop_at_threshold = false;        // stop once eval loss <= eval_threshold
    long max_steps = 0;                    // stop after this many steps without touching the schedules; 0 = off
    int threads = 1;

    void validate() const {
        if (batch_size < 1) throw std::invalid_argument("train config: batch_size must be >= 1");
        if (total_steps < 0) throw std::invalid_argument("train config: total_steps must be >= 0");
        if (total_steps > 0 && !(warmup_steps < total_steps))
            throw std::invalid_argument("train config: warmup_steps must be < total_steps");
        if (!(peak_lr > 0.0)) throw std::invalid_argument("train config: peak_lr must be > 0");
        if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw std::invalid_argument("train config: mask_rate must lie in (0,1)");
        if (clip_epsilon < 0.0 || clip_epsilon >= 1.0) throw std::invalid_argument("train config: clip_epsilon must lie in [0,1)");
        if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("train config: dropout must lie in [0,1)");
        if (eval_interval < 1) throw std::invalid_argument("train config: eval_interval must be >= 1");
        if (threads < 1) throw std::invalid_argument("train config: threads must be >= 1");
        schedule.validate();
    }

    // Table-1 protocol values at paper scale; reference only.
    static TrainConfig paper_base() {
        TrainConfig c;
        c.batch_size = 256;
        c.total_steps = 1000000;
        c.peak_lr = 1e-4;
        c.warmup_steps = 10000;
        c.dropout = 0.1;
        c.schedule = ExplorationSchedule{1.0, 0.33, 1000000};
        return c;
    }
};

// Linear ramp 0 -> peak over warmup_steps, then linear decay to 0 at
// total_steps.
inline double lr_at(const TrainConfig& cfg, long step) {
    if (step < 0) throw std::invalid_argument("lr_at: negative step");
    if (step >= cfg.total_steps) return 0.0;
    if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
        return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    return cfg.peak_lr * static_cast<double>(cfg.total_steps - step) /
           static_cast<double>(cfg.total_steps - cfg.warmup_steps);
}

struct AdamMoments {
    std::vector<Tensor> m;
    std::vector<Tensor> v;

    static AdamMoments like(const std::vector<Tensor*>& params) {
        AdamMoments a;
        for (const Tensor* p : params) {
            a.m.emplace_back(p->shape);
            a.v.emplace_back(p->shape);
        }
        return a;
    }
};

// One Adam step with bias correction and decoupled weight decay
// (param -= lr * wd * param), applied uniformly to every tensor.
inline void adam_step(const std::vector<Tensor*>& params, const std::vector<const Tensor*>& grads, AdamMoments& moments,
                      long t, double lr, double beta1, double beta2, double eps, double weight_decay) {
    if (params.size() != grads.size() || params.size() != moments.m.size())
        throw std::invalid_argument("adam_step: parameter/gradient/moment count mismatch");
    if (t < 1) throw std::invalid_argument("adam_step: step index starts at 1");
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        const Tensor& g = *grads[i];
        require_same_shape(p, g, "adam_step");
        Tensor& m = moments.m[i];
        Tensor& v = moments.v[i];
        for (std::size_t j = 0; j < p.data.size(); ++j) {
            const double gj = g.data[j];
            m.data[j] = beta1 * m.data[j] + (1.0 - beta1) * gj;
            v.data[j] = beta2 * v.data[j] + (1.0 - beta2) * gj * gj;
            const double mhat = m.data[j] / bc1;
            const double vhat = v.data[j] / bc2;
            p.data[j] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * p.data[j]);
        }
    }
}

struct StepMetrics {
    long step = 0;
    double encoder_loss = 0.0;       // importance-weighted batch objective
    double raw_mlm_loss = 0.0;       // unweighted MLM loss
    double mapnet_loss = 0.0;        // Eq.-(10) objective mean over proposal-branch sentences
    double mean_ratio = 1.0;         // raw ratio, batch mean
    double clip_active_fraction = 0.0;
    double explore_p = 1.0;
    double lr = 0.0;
    double encoder_grad_norm = 0.0;
    double mapnet_grad_norm = 0.0;   // MAP-Net-own parameters (shared table excluded)
    std::optional<double> eval_loss; // present only on eval steps

    void check_finite() const {
        const double vals[] = {encoder_loss, raw_mlm_loss, mapnet_loss, mean_ratio, clip_active_fraction,
                               explore_p,    lr,           encoder_grad_norm, mapnet_grad_norm};
        for (double v : vals)
            if (!std::isfinite(v)) throw std::runtime_error("step metrics contain a non-finite value at step " + std::to_string(step));
        if (eval_loss && !std::isfinite(*eval_loss)) throw std::runtime_error("non-finite eval loss at step " + std::to_string(step));
    }
};

struct TrainState {
    EncoderParams encoder;
    MapNetParams mapnet;
    AdamMoments shared_moments;   // the token embedding, stepped once with combined grads
    AdamMoments encoder_moments;  // encoder-own parameters
    AdamMoments mapnet_moments;   // MAP-Net-own parameters
    long step = 0;
    std::mt19937_64 mask_rng;
    std::mt19937_64 corruption_rng;
    std::mt19937_64 dropout_rng;

    std::vector<Tensor*> shared_params() { return {encoder.token_embedding.get()}; }

    std::vector<Tensor*> encoder_own_params() {
        auto all = encoder.parameter_list();
        return std::vector<Tensor*>(all.begin() + 1, all.end());  // canonical order minus the shared table
    }

    std::vector<Tensor*> mapnet_own_params() { return mapnet.parameter_list(/*include_shared=*/false); }

    static TrainState init(const EncoderConfig& enc_cfg, std::uint64_t seed) {
        TrainState s;
        std::mt19937_64 init_rng = make_stream(seed, "init");
        s.encoder = EncoderParams::init(enc_cfg, init_rng);
        s.mapnet = MapNetParams::init(MapNetConfig::from_encoder(enc_cfg), s.encoder.token_embedding, init_rng);
        s.shared_moments = AdamMoments::like(s.shared_params());
        s.encoder_moments = AdamMoments::like(s.encoder_own_params());
        s.mapnet_moments = AdamMoments::like(s.mapnet_own_params());
        s.mask_rng = make_stream(seed, "mask");
        s.corruption_rng = make_stream(seed, "corruption");
        s.dropout_rng = make_stream(seed, "dropout");
        return s;
    }
};

namespace detail {

// Zero-initialized gradient accumulators shaped like a parameter group.
struct GradAccum {
    std::vector<Tensor> tensors;

    static GradAccum like(const std::vector<Tensor*>& params) {
        GradAccum g;
        for (const Tensor* p : params) g.tensors.emplace_back(p->shape);
        return g;
    }

    std::vector<const Tensor*> pointers() const {
        std::vector<const Tensor*> out;
        for (const Tensor& t : tensors) out.push_back(&t);
        return out;
    }

    double norm() const {
        double s = 0.0;
        for (const Tensor& t : tensors)
            for (double v : t.data) s += v * v;
        return std::sqrt(s);
    }

    void add_scaled(std::size_t idx, const Tensor& g, double scale) {
        Tensor& dst = tensors[idx];
        for (std::size_t j = 0; j < dst.data.size(); ++j) dst.data[j] += scale * g.data[j];
    }
};

// Runs fn(i) for i in [0, count) with the requested worker count. Work
// items write only their own slots, so results are identical for any
// worker count.
inline void parallel_for(int count, int threads, const std::function<void(int)>& fn) {
    if (threads <= 1 || count <= 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    const int workers = std::min(threads, count);
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (int i = w; i < count; i += workers) fn(i);
        });
    for (auto& t : pool) t.join();
}

}  // namespace detail

// One Algorithm-1 iteration over a batch. Masks and corruption draw
// sequentially from the state's named streams before the (potentially
// parallel) forward/backward work; gradient reduction runs in sentence
// order; theta_enc and theta_MAP step from the same forward pass's
// losses.
inline StepMetrics train_step(TrainState& state, const std::vector<TokenSequence>& batch, const TrainConfig& cfg,
                              const Vocabulary& vocab) {
    if (batch.empty()) throw std::invalid_argument("train_step: empty batch");
    const long step_index = state.step;  // 0-based position, used by schedules
    const long t = state.step + 1;       // 1-based Adam/lr step count
    const double lr = lr_at(cfg, t);
    ExplorationSchedule sched = cfg.schedule;
    if (cfg.baseline_uniform) sched = ExplorationSchedule{1.0, 1.0, sched.end_step};
    const double p_explore = explore_p(sched, step_index);

    const int b = static_cast<int>(batch.size());

    // Sequential randomness: branch choice + mask positions, corruption
    // actions, then one dropout sub-seed per sentence.
    struct SentencePlan {
        MaskPlan plan;
        TokenSequence corrupted;
        std::uint64_t dropout_seed = 0;
    };
    std::vector<SentencePlan> plans(static_cast<std::size_t>(b));
    for (int i = 0; i < b; ++i) {
        const TokenSequence& x = batch[static_cast<std::size_t>(i)];
        plans[static_cast<std::size_t>(i)].plan =
            mixed_mask(x, step_index, sched, state.mapnet, cfg.mask_rate, cfg.clip_epsilon, state.mask_rng);
        plans[static_cast<std::size_t>(i)].corrupted =
            corrupt(x, plans[static_cast<std::size_t>(i)].plan, vocab, state.corruption_rng);
    }
    if (cfg.dropout > 0.0)
        for (int i = 0; i < b; ++i) plans[static_cast<std::size_t>(i)].dropout_seed = state.dropout_rng();

    // Per-sentence forward/backward into private slots.
    struct SentenceResult {
        std::vector<Tensor> enc_grads;       // aligned with encoder.parameter_list()
        std::vector<Tensor> map_grads;       // aligned with mapnet.named_parameters(true)
        std::vector<double> position_losses;
        double sentence_loss = 0.0;
        double mapnet_loss = 0.0;
        bool proposal_branch = false;
        bool mapnet_contributes = false;
    };
    std::vector<SentenceResult> results(static_cast<std::size_t>(b));

    int proposal_count = 0;
    for (const auto& sp : plans)
        if (sp.plan.source == MaskSource::proposal_branch) ++proposal_count;
    int mapnet_sentences = cfg.include_uniform_in_mapnet ? b : proposal_count;

    const double enc_loss_scale = cfg.lambda_on_encoder ? cfg.lambda_mapnet : 1.0;
    const double map_loss_scale = cfg.lambda_on_encoder ? 1.0 : cfg.lambda_mapnet;
    const bool run_mapnet = mapnet_sentences > 0 && map_loss_scale != 0.0;

    detail::parallel_for(b, cfg.threads, [&](int i) {
        const TokenSequence& x = batch[static_cast<std::size_t>(i)];
        SentencePlan& sp = plans[static_cast<std::size_t>(i)];
        SentenceResult& res = results[static_cast<std::size_t>(i)];
        res.proposal_branch = sp.plan.source == MaskSource::proposal_branch;

        std::mt19937_64 drop_rng(sp.dropout_seed);
        DropoutCtx drop{cfg.dropout, &drop_rng};
        DropoutCtx* drop_ptr = cfg.dropout > 0.0 ? &drop : nullptr;

        Tape tape;
        EncoderGraph graph = build_mlm_graph(tape, state.encoder, sp.corrupted, sp.plan.positions, x, drop_ptr, true);
        res.sentence_loss = graph.sentence_loss_value;
        for (const PositionLoss& pl : graph.losses) res.position_losses.push_back(pl.loss);
        tape.backward(graph.sentence_loss, enc_loss_scale * sp.plan.ratio_clipped / b);
        res.enc_grads.reserve(graph.param_leaves.size());
        for (Tape::Value leaf : graph.param_leaves) res.enc_grads.push_back(tape.grad(leaf));

        res.mapnet_contributes = run_mapnet && (cfg.include_uniform_in_mapnet || res.proposal_branch) && sp.plan.k() >= 1;
        if (res.mapnet_contributes) {
            Tape map_tape;
            ProposalGraph pg = build_proposal_graph(map_tape, state.mapnet, x, true,
                                                    cfg.freeze_shared_embedding_mapnet, drop_ptr);
            Tape::Value obj = mapnet_objective(map_tape, pg, sp.plan.positions, res.position_losses);
            res.mapnet_loss = map_tape.value(obj).data[0];
            map_tape.backward(obj, map_loss_scale / mapnet_sentences);
            res.map_grads.reserve(pg.param_leaves.size());
            for (Tape::Value leaf : pg.param_leaves) res.map_grads.push_back(map_tape.grad(leaf));
        }
    });

    // Reduction in sentence order. Encoder grads land in (shared table +
    // encoder-own); MAP-Net grads in (shared table + MAP-Net-own).
    auto enc_own = state.encoder_own_params();
    auto map_own = state.mapnet_own_params();
    detail::GradAccum shared_grad = detail::GradAccum::like(state.shared_params());
    detail::GradAccum enc_grad = detail::GradAccum::like(enc_own);
    detail::GradAccum map_grad = detail::GradAccum::like(map_own);
    for (int i = 0; i < b; ++i) {
        const SentenceResult& res = results[static_cast<std::size_t>(i)];
        shared_grad.add_scaled(0, res.enc_grads[0], 1.0);
        for (std::size_t j = 1; j < res.enc_grads.size(); ++j) enc_grad.add_scaled(j - 1, res.enc_grads[j], 1.0);
    }
    const double enc_norm_sq = enc_grad.norm() * enc_grad.norm() + shared_grad.norm() * shared_grad.norm();
    for (int i = 0; i < b; ++i) {
        const SentenceResult& res = results[static_cast<std::size_t>(i)];
        if (res.mapnet_contributes) {
            shared_grad.add_scaled(0, res.map_grads[0], 1.0);
            for (std::size_t j = 1; j < res.map_grads.size(); ++j) map_grad.add_scaled(j - 1, res.map_grads[j], 1.0);
        }
    }

    StepMetrics m;
    m.step = t;
    m.explore_p = p_explore;
    m.lr = lr;
    double ratio_sum = 0.0;
    int clip_active = 0;
    double map_loss_sum = 0.0;
    for (int i = 0; i < b; ++i) {
        const SentenceResult& res = results[static_cast<std::size_t>(i)];
        const MaskPlan& plan = plans[static_cast<std::size_t>(i)].plan;
        m.encoder_loss += plan.ratio_clipped * res.sentence_loss / b;
        m.raw_mlm_loss += res.sentence_loss / b;
        ratio_sum += plan.ratio;
        if (plan.ratio != plan.ratio_clipped) ++clip_active;
        if (res.mapnet_contributes) map_loss_sum += res.mapnet_loss;
    }
    m.mean_ratio = ratio_sum / b;
    m.clip_active_fraction = static_cast<double>(clip_active) / b;
    m.mapnet_loss = mapnet_sentences > 0 ? map_loss_sum / mapnet_sentences : 0.0;
    m.encoder_grad_norm = std::sqrt(enc_norm_sq);
    m.mapnet_grad_norm = map_grad.norm();

    // Optimizer. The shared embedding steps once, on the sum of both
    // contributions. The MAP-Net group is skipped entirely when nothing
    // contributed (no proposal-branch sentences, or a zero lambda):
    // stepping it anyway would apply weight decay to an untrained net.
    adam_step(state.shared_params(), shared_grad.pointers(), state.shared_moments, t, lr, cfg.adam_beta1, cfg.adam_beta2,
              cfg.adam_eps, cfg.weight_decay);
    adam_step(enc_own, enc_grad.pointers(), state.encoder_moments, t, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
              cfg.weight_decay);
    if (run_mapnet)
        adam_step(map_own, map_grad.pointers(), state.mapnet_moments, t, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                  cfg.weight_decay);

    state.step = t;
    return m;
}

// Held-out evaluation: uniform masking + 80/10/10 corruption with a
// stateless RNG derived from (seed, "eval", step). Identical seeds and
// steps mean identical eval tasks for any two runs, which is what makes
// steps-to-threshold comparisons between runs meaningful.
inline double evaluate(TrainState& state, const std::vector<TokenSequence>& eval_corpus, const TrainConfig& cfg,
                       const Vocabulary& vocab) {
    if (eval_corpus.empty()) throw std::invalid_argument("evaluate: empty eval corpus");
    std::mt19937_64 eval_rng = make_stream(cfg.seed, "eval", static_cast<std::uint64_t>(state.step));
    std::vector<std::pair<TokenSequence, std::vector<int>>> tasks;
    tasks.reserve(eval_corpus.size());
    for (const TokenSequence& x : eval_corpus) {
        MaskPlan plan = rand_mask(x, cfg.mask_rate, eval_rng);
        tasks.emplace_back(corrupt(x, plan, vocab, eval_rng), std::move(plan.positions));
    }
    std::vector<double> losses(tasks.size(), 0.0);
    detail::parallel_for(static_cast<int>(tasks.size()), cfg.threads, [&](int i) {
        const TokenSequence& x = eval_corpus[static_cast<std::size_t>(i)];
        losses[static_cast<std::size_t>(i)] =
            sentence_loss_value(state.encoder, tasks[static_cast<std::size_t>(i)].first,
                                tasks[static_cast<std::size_t>(i)].second, x);
    });
    double sum = 0.0;
    for (double l : losses) sum += l;
    return sum / static_cast<double>(losses.size());
}

struct TrainHooks {
    std::function<void(const StepMetrics&)> on_metrics;  // every step
    // interval checkpoints get final=false; the end-of-run call gets final=true
    std::function<void(const TrainState&, long, bool)> on_checkpoint;
};

struct TrainSummary {
    long steps_run = 0;
    double initial_eval_loss = std::numeric_limits<double>::quiet_NaN();
    double final_eval_loss = std::numeric_limits<double>::quiet_NaN();
    long steps_to_threshold = -1;  // first eval step with loss <= eval_threshold; -1 = never
    bool stopped_early = false;
};

// Shuffled-epoch training loop. The epoch order is re-derived from
// (seed, "data", epoch) so resuming from a checkpoint needs only the
// step counter to reproduce the uninterrupted run bitwise.
inline TrainSummary train(TrainState& state, TrainConfig cfg, const std::vector<TokenSequence>& corpus,
                          const std::vector<TokenSequence>& eval_corpus, const Vocabulary& vocab,
                          const TrainHooks& hooks = {}) {
    cfg.validate();
    if (corpus.empty()) throw std::invalid_argument("train: empty corpus");
    cfg.schedule.validate();

    const long batches_per_epoch = (static_cast<long>(corpus.size()) + cfg.batch_size - 1) / cfg.batch_size;

    TrainSummary summary;
    if (!eval_corpus.empty() && state.step == 0) summary.initial_eval_loss = evaluate(state, eval_corpus, cfg, vocab);

    long epoch = state.step / batches_per_epoch;
    long cursor = state.step % batches_per_epoch;
    std::vector<Batch> epoch_batches;
    auto rebuild_epoch = [&](long e) {
        if (cfg.sample_with_replacement) {
            std::mt19937_64 erng = make_stream(cfg.seed, "data", static_cast<std::uint64_t>(e));
            epoch_batches.clear();
            for (long bi = 0; bi < batches_per_epoch; ++bi) {
                Batch b;
                int max_len = 0;
                std::vector<const TokenSequence*> chosen;
                for (int j = 0; j < cfg.batch_size; ++j) {
                    const TokenSequence& s = corpus[static_cast<std::size_t>(uniform_below(erng, static_cast<int>(corpus.size())))];
                    chosen.push_back(&s);
                    max_len = std::max(max_len, s.length);
                }
                for (const TokenSequence* s : chosen) {
                    TokenSequence padded = *s;
                    padded.tokens.resize(static_cast<std::size_t>(max_len), Vocabulary::kPad);
                    b.sentences.push_back(std::move(padded));
                }
                epoch_batches.push_back(std::move(b));
            }
        } else {
            std::mt19937_64 erng = make_stream(cfg.seed, "data", static_cast<std::uint64_t>(e));
            epoch_batches = batch_iter(corpus, cfg.batch_size, &erng);
        }
    };
    rebuild_epoch(epoch);

    const long step_cap = cfg.max_steps > 0 ? std::min(cfg.max_steps, cfg.total_steps) : cfg.total_steps;
    while (state.step < step_cap) {
        if (cursor >= batches_per_epoch) {
            cursor = 0;
            ++epoch;
            rebuild_epoch(epoch);
        }
        StepMetrics m = train_step(state, epoch_batches[static_cast<std::size_t>(cursor)].sentences, cfg, vocab);
        ++cursor;
        ++summary.steps_run;

        const bool eval_due = !eval_corpus.empty() && (state.step % cfg.eval_interval == 0 || state.step == step_cap);
        if (eval_due) {
            m.eval_loss = evaluate(state, eval_corpus, cfg, vocab);
            summary.final_eval_loss = *m.eval_loss;
            if (summary.steps_to_threshold < 0 && std::isfinite(cfg.eval_threshold) && *m.eval_loss <= cfg.eval_threshold)
                summary.steps_to_threshold = state.step;
        }
        m.check_finite();
        if (hooks.on_metrics) hooks.on_metrics(m);
        if (cfg.checkpoint_interval > 0 && state.step % cfg.checkpoint_interval == 0 && hooks.on_checkpoint)
            hooks.on_checkpoint(state, state.step, false);
        if (cfg.stop_at_threshold && summary.steps_to_threshold >= 0) {
            summary.stopped_early = true;
            break;
        }
    }
    if (hooks.on_checkpoint) hooks.on_checkpoint(state, state.step, true);
    return summary;
}

}  // namespace maskvar
