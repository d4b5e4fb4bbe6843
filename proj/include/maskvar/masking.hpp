#pragma once

// RandMask, the 80/10/10 corruption, and the exploration schedule.
// PropMask (proposal-driven masking) lives in mask_proposal.hpp since it
// needs the MAP-Net.

#include <cmath>
#include <random>
#include <stdexcept>
#include <vector>

#include "maskvar/corpus.hpp"
#include "maskvar/rng.hpp"

namespace maskvar {

enum class MaskSource { uniform_branch, proposal_branch };

enum class CorruptAction { to_mask, to_random, keep };

inline const char* mask_source_name(MaskSource s) {
    return s == MaskSource::uniform_branch ? "uniform" : "proposal";
}

inline const char* corrupt_action_name(CorruptAction a) {
    switch (a) {
        case CorruptAction::to_mask: return "mask";
        case CorruptAction::to_random: return "random";
        case CorruptAction::keep: return "keep";
    }
    return "?";
}

struct MaskPlan {
    std::vector<int> positions;          // draw order, distinct, < sentence length
    std::vector<double> raw_probs;       // proposal probability of each position at draw time
    std::vector<CorruptAction> actions;  // filled in by corrupt()
    double ratio = 1.0;                  // importance ratio r; 1 on the uniform branch
    double ratio_clipped = 1.0;          // CLIP(r, 1-eps, 1+eps)
    MaskSource source = MaskSource::uniform_branch;

    int k() const { return static_cast<int>(positions.size()); }
};

// K = max(1, round(mask_rate * n)), round half up. The floor of 1 keeps
// every sentence contributing a training signal.
inline int mask_count(double mask_rate, int n) {
    if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw std::invalid_argument("mask_rate must lie in (0,1)");
    if (n < 1) throw std::invalid_argument("mask_count: empty sentence");
    const int k = static_cast<int>(std::floor(mask_rate * n + 0.5));
    return std::max(1, std::min(n, k));
}

// K distinct positions uniformly without replacement (partial Fisher-Yates).
inline std::vector<int> uniform_subset(int n, int k, std::mt19937_64& rng) {
    if (k < 0 || k > n) throw std::invalid_argument("uniform_subset: need 0 <= K <= n");
    std::vector<int> pool(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
    for (int j = 0; j < k; ++j) {
        const int r = j + uniform_below(rng, n - j);
        std::swap(pool[static_cast<std::size_t>(j)], pool[static_cast<std::size_t>(r)]);
    }
    pool.resize(static_cast<std::size_t>(k));
    return pool;
}

// Uniform mask positions without replacement; importance ratio pinned to 1.
inline MaskPlan rand_mask(const TokenSequence& x, double mask_rate, std::mt19937_64& rng) {
    const int n = x.length;
    const int k = mask_count(mask_rate, n);
    MaskPlan plan;
    plan.positions = uniform_subset(n, k, rng);
    plan.raw_probs.assign(static_cast<std::size_t>(k), 1.0 / n);
    plan.ratio = 1.0;
    plan.ratio_clipped = 1.0;
    plan.source = MaskSource::uniform_branch;
    return plan;
}

// Bernoulli-per-position variant of RandMask (the paper's literal
// operator); resamples until at least one position is selected. Used by
// the variance lab only — training keeps the fixed-K convention.
inline MaskPlan bernoulli_mask(const TokenSequence& x, double mask_rate, std::mt19937_64& rng) {
    if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw std::invalid_argument("mask_rate must lie in (0,1)");
    const int n = x.length;
    if (n < 1) throw std::invalid_argument("bernoulli_mask: empty sentence");
    MaskPlan plan;
    while (plan.positions.empty()) {
        for (int i = 0; i < n; ++i)
            if (uniform01(rng) < mask_rate) plan.positions.push_back(i);
    }
    plan.raw_probs.assign(plan.positions.size(), mask_rate);
    plan.source = MaskSource::uniform_branch;
    return plan;
}

// 80/10/10 corruption at the given positions: replace by [MASK] with
// probability 0.8, by a random non-reserved vocabulary token with 0.1,
// keep unchanged otherwise. Everything off-plan is untouched.
inline TokenSequence corrupt(const TokenSequence& x, const std::vector<int>& positions, const Vocabulary& vocab,
                             std::mt19937_64& rng, std::vector<CorruptAction>* actions_out = nullptr) {
    TokenSequence out = x;
    if (actions_out) actions_out->clear();
    for (int p : positions) {
        if (p < 0 || p >= x.length) throw std::out_of_range("corrupt: position out of range");
        const double u = uniform01(rng);
        CorruptAction act;
        if (u < 0.8) {
            out.tokens[static_cast<std::size_t>(p)] = Vocabulary::kMask;
            act = CorruptAction::to_mask;
        } else if (u < 0.9) {
            out.tokens[static_cast<std::size_t>(p)] = vocab.random_regular_token(rng);
            act = CorruptAction::to_random;
        } else {
            act = CorruptAction::keep;
        }
        if (actions_out) actions_out->push_back(act);
    }
    return out;
}

inline TokenSequence corrupt(const TokenSequence& x, MaskPlan& plan, const Vocabulary& vocab, std::mt19937_64& rng) {
    return corrupt(x, plan.positions, vocab, rng, &plan.actions);
}

// Pure-[MASK] corruption: the variance lab's convention, so a mask
// subset fully determines the corrupted sentence.
inline TokenSequence apply_mask_token(const TokenSequence& x, const std::vector<int>& positions) {
    TokenSequence out = x;
    for (int p : positions) {
        if (p < 0 || p >= x.length) throw std::out_of_range("apply_mask_token: position out of range");
        out.tokens[static_cast<std::size_t>(p)] = Vocabulary::kMask;
    }
    return out;
}

struct ExplorationSchedule {
    double start_p = 1.0;
    double end_p = 0.33;
    long end_step = 1;

    void validate() const {
        if (!(0.0 <= end_p && end_p <= start_p && start_p <= 1.0))
            throw std::invalid_argument("exploration schedule: need 0 <= end_p <= start_p <= 1");
        if (end_step < 1) throw std::invalid_argument("exploration schedule: end_step must be >= 1");
    }
};

// Probability of taking the uniform branch at `step`: linear from
// start_p at step 0 to end_p at end_step, clamped afterwards.
inline double explore_p(const ExplorationSchedule& s, long step) {
    if (step < 0) throw std::invalid_argument("explore_p: negative step");
    if (step >= s.end_step) return s.end_p;
    const double frac = static_cast<double>(step) / static_cast<double>(s.end_step);
    return s.start_p + (s.end_p - s.start_p) * frac;
}

}  // namespace maskvar
