#pragma once

// Exact and Monte Carlo machinery for the gradient-variance claims:
// the law-of-total-variance decomposition (mask term + sentence term),
// unbiasedness of the importance-weighted estimator, and the
// gradient-norm-proportional optimal proposal. "Variance" of a gradient
// vector always means the trace of its covariance: the sum over
// coordinates of per-coordinate variances, the quantity for which the
// decomposition identity holds coordinate-wise and in sum.
//
// Corruption in here is pure [MASK] — no 80/10/10 randomness — so a mask
// subset fully determines the corrupted sentence and enumeration over
// subsets is enumeration over everything.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "maskvar/encoder.hpp"
#include "maskvar/mask_proposal.hpp"
#include "maskvar/masking.hpp"
#include "maskvar/stats.hpp"

namespace maskvar {

class enumeration_cap_error : public std::runtime_error {
public:
    enumeration_cap_error(std::int64_t required, std::int64_t cap)
        : std::runtime_error("mask enumeration needs " + std::to_string(required) + " subsets but the cap is " +
                             std::to_string(cap) + "; raise the cap to at least " + std::to_string(required) +
                             " or use Monte Carlo mode"),
          required_cap(required) {}
    std::int64_t required_cap;
};

inline std::int64_t binomial(int n, int k) {
    if (k < 0 || k > n) return 0;
    k = std::min(k, n - k);
    std::int64_t c = 1;
    for (int i = 1; i <= k; ++i) c = c * (n - k + i) / i;
    return c;
}

inline std::vector<double> uniform_position_proposal(int n) {
    return std::vector<double>(static_cast<std::size_t>(n), 1.0 / n);
}

// Probability that sequential without-replacement sampling from the
// per-position distribution `p` yields exactly this subset (in any draw
// order): the sum over the K! orders of the renormalized draw products.
inline double subset_probability(const std::vector<double>& p, std::vector<int> subset) {
    std::sort(subset.begin(), subset.end());
    double total = 0.0;
    do {
        double prob = 1.0;
        double remaining = 1.0;
        for (int idx : subset) {
            const double pi = p[static_cast<std::size_t>(idx)];
            prob *= pi / remaining;
            remaining -= pi;
        }
        total += prob;
    } while (std::next_permutation(subset.begin(), subset.end()));
    return total;
}

struct MaskEnumeration {
    int n = 0;
    int k = 0;
    std::vector<std::vector<int>> subsets;  // lexicographic, each sorted
    std::vector<double> probs;              // order-marginalized, sum to 1
};

constexpr std::int64_t kDefaultEnumerationCap = 10000;

// All C(n,K) position subsets with their exact probabilities under the
// given per-position proposal. Uniform proposals give 1/C(n,K) each.
inline MaskEnumeration enumerate_masks(int n, int k, const std::vector<double>& proposal,
                                       std::int64_t cap = kDefaultEnumerationCap) {
    if (n < 1 || k < 1 || k > n) throw std::invalid_argument("enumerate_masks: need 1 <= K <= n");
    if (static_cast<int>(proposal.size()) != n) throw std::invalid_argument("enumerate_masks: proposal length != n");
    const std::int64_t count = binomial(n, k);
    if (count > cap) throw enumeration_cap_error(count, cap);
    MaskEnumeration e;
    e.n = n;
    e.k = k;
    e.subsets.reserve(static_cast<std::size_t>(count));
    std::vector<int> idx(static_cast<std::size_t>(k));
    std::iota(idx.begin(), idx.end(), 0);
    while (true) {
        e.subsets.push_back(idx);
        e.probs.push_back(subset_probability(proposal, idx));
        int i = k - 1;
        while (i >= 0 && idx[static_cast<std::size_t>(i)] == n - k + i) --i;
        if (i < 0) break;
        ++idx[static_cast<std::size_t>(i)];
        for (int j = i + 1; j < k; ++j) idx[static_cast<std::size_t>(j)] = idx[static_cast<std::size_t>(j - 1)] + 1;
    }
    return e;
}

inline MaskEnumeration enumerate_masks(const TokenSequence& x, int k, const std::vector<double>& proposal,
                                       std::int64_t cap = kDefaultEnumerationCap) {
    return enumerate_masks(x.length, k, proposal, cap);
}

inline MaskEnumeration enumerate_masks_uniform(const TokenSequence& x, int k,
                                               std::int64_t cap = kDefaultEnumerationCap) {
    return enumerate_masks(x.length, k, uniform_position_proposal(x.length), cap);
}

// Per-subset value table: each row is the flattened encoder gradient for
// the sentence masked (pure [MASK]) at that subset. The scalar-toy mode
// swaps in user-supplied one-element rows, decoupling Theorem 2 checks
// from the network.
struct SubsetValueTable {
    int n = 0;
    int k = 0;
    std::vector<std::vector<int>> subsets;
    std::vector<std::vector<double>> values;
    std::vector<double> norms;

    std::int64_t count() const { return static_cast<std::int64_t>(subsets.size()); }
    std::size_t dim() const { return values.empty() ? 0 : values[0].size(); }
};

inline SubsetValueTable subset_gradient_table(EncoderParams& params, const TokenSequence& x, int k,
                                              std::int64_t cap = kDefaultEnumerationCap) {
    MaskEnumeration e = enumerate_masks_uniform(x, k, cap);
    SubsetValueTable t;
    t.n = e.n;
    t.k = e.k;
    t.subsets = std::move(e.subsets);
    t.values.reserve(t.subsets.size());
    t.norms.reserve(t.subsets.size());
    for (const auto& subset : t.subsets) {
        TokenSequence masked = apply_mask_token(x, subset);
        SentenceGradient g = sentence_gradient(params, masked, subset, x);
        t.norms.push_back(g.norm);
        t.values.push_back(std::move(g.flat));
    }
    return t;
}

inline SubsetValueTable scalar_toy_table(int n, int k, const std::vector<double>& per_subset_values,
                                         std::int64_t cap = kDefaultEnumerationCap) {
    MaskEnumeration e = enumerate_masks(n, k, uniform_position_proposal(n), cap);
    if (per_subset_values.size() != e.subsets.size())
        throw std::invalid_argument("scalar_toy_table: need one value per subset (" + std::to_string(e.subsets.size()) + ")");
    SubsetValueTable t;
    t.n = n;
    t.k = k;
    t.subsets = std::move(e.subsets);
    for (double v : per_subset_values) {
        t.values.push_back({v});
        t.norms.push_back(std::abs(v));
    }
    return t;
}

// Subset probabilities of a per-position proposal, aligned with the
// table's subset order.
inline std::vector<double> subset_probs_for(const SubsetValueTable& table, const std::vector<double>& position_proposal) {
    if (static_cast<int>(position_proposal.size()) != table.n)
        throw std::invalid_argument("subset_probs_for: proposal length != n");
    std::vector<double> out;
    out.reserve(table.subsets.size());
    for (const auto& s : table.subsets) out.push_back(subset_probability(position_proposal, s));
    return out;
}

struct VarianceReport {
    double total = 0.0;
    double mask_term = 0.0;
    double sentence_term = 0.0;
    double residual = 0.0;
    bool monte_carlo = false;
    long num_samples = 0;                                // per sentence, Monte Carlo only
    double total_stderr = std::numeric_limits<double>::quiet_NaN();
    double mask_term_stderr = std::numeric_limits<double>::quiet_NaN();
    double sentence_term_stderr = std::numeric_limits<double>::quiet_NaN();
    static constexpr const char* kSummary = "trace_of_covariance";
};

// Per-sentence proposal source; a null function means uniform masking
// with unit importance weights.
using PositionProposalSource = std::function<std::vector<double>(const TokenSequence&)>;

// Theorem-1 decomposition by full enumeration under fixed-K masking:
// uniform (RandMask, Eq. 3-4) when `proposal` is null, or the
// importance-weighted estimator r(S) g(S) under a per-position proposal
// (PropMask, Eq. 6). The total is accumulated over the joint
// distribution independently of the two law-of-total-variance terms, so
// the reported residual is a genuine floating-point-level check of the
// identity.
inline VarianceReport exact_variance_decomposition(const std::vector<TokenSequence>& corpus, EncoderParams& params,
                                                   int k, const PositionProposalSource& proposal = nullptr,
                                                   std::int64_t cap = kDefaultEnumerationCap) {
    if (corpus.empty()) throw std::invalid_argument("exact_variance_decomposition: empty corpus");
    const double px = 1.0 / static_cast<double>(corpus.size());
    std::vector<double> joint_mean, joint_sq;   // E[w g], E[(w g)^2] over the joint
    std::vector<double> outer_mean, outer_sq;   // E_x[m_x], E_x[m_x^2]
    double mask_term = 0.0;
    std::vector<double> weighted;
    for (const TokenSequence& x : corpus) {
        SubsetValueTable t = subset_gradient_table(params, x, k, cap);
        const std::size_t d = t.dim();
        if (joint_mean.empty()) {
            joint_mean.assign(d, 0.0);
            joint_sq.assign(d, 0.0);
            outer_mean.assign(d, 0.0);
            outer_sq.assign(d, 0.0);
        } else if (joint_mean.size() != d) {
            throw std::invalid_argument("exact_variance_decomposition: gradient dimensions disagree across corpus");
        }
        const double p_rand = 1.0 / static_cast<double>(t.count());
        std::vector<double> probs;
        if (proposal) {
            probs = subset_probs_for(t, proposal(x));
            for (double p : probs)
                if (!(p > 0.0)) throw std::domain_error("exact_variance_decomposition: proposal assigns zero mass to a subset");
        } else {
            probs.assign(t.values.size(), p_rand);
        }
        std::vector<double> cond_mean(d, 0.0), cond_sq(d, 0.0);
        weighted.resize(d);
        for (std::size_t s = 0; s < t.values.size(); ++s) {
            const double ps = probs[s];
            const double w = p_rand / ps;  // importance ratio; exactly 1 under uniform
            for (std::size_t c = 0; c < d; ++c) {
                weighted[c] = w * t.values[s][c];
                cond_mean[c] += ps * weighted[c];
                cond_sq[c] += ps * weighted[c] * weighted[c];
                joint_mean[c] += px * ps * weighted[c];
                joint_sq[c] += px * ps * weighted[c] * weighted[c];
            }
        }
        for (std::size_t c = 0; c < d; ++c) {
            mask_term += px * (cond_sq[c] - cond_mean[c] * cond_mean[c]);
            outer_mean[c] += px * cond_mean[c];
            outer_sq[c] += px * cond_mean[c] * cond_mean[c];
        }
    }
    VarianceReport r;
    for (std::size_t c = 0; c < joint_mean.size(); ++c) {
        r.total += joint_sq[c] - joint_mean[c] * joint_mean[c];
        r.sentence_term += outer_sq[c] - outer_mean[c] * outer_mean[c];
    }
    r.mask_term = mask_term;
    r.residual = r.total - (r.mask_term + r.sentence_term);
    return r;
}

struct UnbiasednessAudit {
    std::vector<double> e_rand;        // E over uniform masks of g
    std::vector<double> e_prop;        // E over the proposal of r * g
    double max_abs_deviation = 0.0;    // max over coordinates
};

// Theorem 2 / Eq. (5) identity: E_prop[r g] with the exact subset ratio
// r(S) = p_rand(S)/p_prop(S) must reproduce E_rand[g] for every positive
// proposal. Clipping r (optional here) demonstrably breaks the identity.
inline UnbiasednessAudit importance_estimator_audit(const SubsetValueTable& table,
                                                    const std::vector<double>& position_proposal, bool clip_ratio = false,
                                                    double clip_eps = 0.2) {
    const std::vector<double> prop = subset_probs_for(table, position_proposal);
    const double p_rand = 1.0 / static_cast<double>(table.count());
    const std::size_t d = table.dim();
    UnbiasednessAudit a;
    a.e_rand.assign(d, 0.0);
    a.e_prop.assign(d, 0.0);
    for (std::size_t s = 0; s < table.values.size(); ++s) {
        if (!(prop[s] > 0.0)) throw std::domain_error("importance_estimator_audit: proposal assigns zero mass to a subset");
        double ratio = p_rand / prop[s];
        if (clip_ratio) ratio = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
        for (std::size_t c = 0; c < d; ++c) {
            a.e_rand[c] += p_rand * table.values[s][c];
            a.e_prop[c] += prop[s] * (ratio * table.values[s][c]);
        }
    }
    for (std::size_t c = 0; c < d; ++c)
        a.max_abs_deviation = std::max(a.max_abs_deviation, std::abs(a.e_rand[c] - a.e_prop[c]));
    return a;
}

inline UnbiasednessAudit importance_estimator_audit(EncoderParams& params, const TokenSequence& x, int k,
                                                    const std::vector<double>& position_proposal,
                                                    std::int64_t cap = kDefaultEnumerationCap) {
    return importance_estimator_audit(subset_gradient_table(params, x, k, cap), position_proposal);
}

// Trace of Var_{S ~ p}[r(S) g(S)] with r(S) = p_rand(S)/p(S), computed
// two-pass (mean first, then centered squares) so that the analytically
// zero optimum really evaluates to ~0 instead of cancellation noise.
inline double proposal_variance_over_subsets(const SubsetValueTable& table, const std::vector<double>& subset_probs) {
    if (subset_probs.size() != table.values.size())
        throw std::invalid_argument("proposal_variance: probability/table size mismatch");
    const double p_rand = 1.0 / static_cast<double>(table.count());
    const std::size_t d = table.dim();
    std::vector<double> mean(d, 0.0);
    for (std::size_t s = 0; s < table.values.size(); ++s) {
        if (!(subset_probs[s] > 0.0)) throw std::domain_error("proposal_variance: proposal assigns zero mass to a subset");
        const double w = p_rand / subset_probs[s];
        for (std::size_t c = 0; c < d; ++c) mean[c] += subset_probs[s] * (w * table.values[s][c]);
    }
    double var = 0.0;
    for (std::size_t s = 0; s < table.values.size(); ++s) {
        const double w = p_rand / subset_probs[s];
        for (std::size_t c = 0; c < d; ++c) {
            const double dev = w * table.values[s][c] - mean[c];
            var += subset_probs[s] * dev * dev;
        }
    }
    return var;
}

inline double proposal_variance(EncoderParams& params, const TokenSequence& x, int k,
                                const std::vector<double>& position_proposal, std::int64_t cap = kDefaultEnumerationCap) {
    SubsetValueTable t = subset_gradient_table(params, x, k, cap);
    return proposal_variance_over_subsets(t, subset_probs_for(t, position_proposal));
}

// Theorem 2 optimum over subset distributions: probability proportional
// to the per-subset gradient norm.
inline std::vector<double> optimal_subset_proposal(const std::vector<double>& norms) {
    double total = 0.0;
    for (double n : norms) {
        if (n < 0.0) throw std::invalid_argument("optimal_subset_proposal: negative norm");
        total += n;
    }
    if (total <= 0.0) throw std::domain_error("optimal_subset_proposal: all gradient norms are zero, optimum degenerate");
    std::vector<double> out;
    out.reserve(norms.size());
    for (double n : norms) out.push_back(n / total);
    return out;
}

inline std::vector<double> optimal_subset_proposal(EncoderParams& params, const TokenSequence& x, int k,
                                                   std::int64_t cap = kDefaultEnumerationCap) {
    return optimal_subset_proposal(subset_gradient_table(params, x, k, cap).norms);
}

inline std::vector<double> random_simplex_point(int dim, std::mt19937_64& rng) {
    std::vector<double> out(static_cast<std::size_t>(dim));
    double sum = 0.0;
    for (double& v : out) {
        v = -std::log(1.0 - uniform01(rng));  // Exp(1) => Dirichlet(1,...,1) after normalizing
        sum += v;
    }
    for (double& v : out) v /= sum;
    return out;
}

// Euclidean projection onto the probability simplex, floored slightly
// inside the boundary so without-replacement subset probabilities stay
// positive.
inline std::vector<double> project_to_simplex_interior(std::vector<double> v, double floor = 1e-9) {
    std::vector<double> sorted = v;
    std::sort(sorted.begin(), sorted.end(), std::greater<double>());
    double cumsum = 0.0, theta = 0.0;
    int rho = 0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        cumsum += sorted[i];
        const double t = (cumsum - 1.0) / static_cast<double>(i + 1);
        if (sorted[i] - t > 0.0) {
            rho = static_cast<int>(i + 1);
            theta = t;
        }
    }
    (void)rho;
    double sum = 0.0;
    for (double& x : v) {
        x = std::max(x - theta, floor);
        sum += x;
    }
    for (double& x : v) x /= sum;
    return v;
}

struct PositionProposalFit {
    std::vector<double> position_probs;
    double variance = 0.0;
};

// Theorem 2's optimum lives on subset distributions, but the MAP-Net can
// only express per-position distributions. This searches the position
// simplex by projected gradient descent (finite-difference gradient) to
// quantify the expressiveness gap against the subset optimum.
inline PositionProposalFit best_position_proposal(const SubsetValueTable& table, int iters = 500, double step = 0.1) {
    const int n = table.n;
    const double p_rand = 1.0 / static_cast<double>(table.count());
    // collapsed objective: sum_S p_rand^2 ||g_S||^2 / p_S(q), constant dropped
    std::vector<double> weight(table.norms.size());
    for (std::size_t s = 0; s < weight.size(); ++s) weight[s] = p_rand * p_rand * table.norms[s] * table.norms[s];
    auto objective = [&](const std::vector<double>& q) {
        double f = 0.0;
        for (std::size_t s = 0; s < table.subsets.size(); ++s) {
            const double ps = subset_probability(q, table.subsets[s]);
            if (!(ps > 0.0)) return std::numeric_limits<double>::infinity();
            f += weight[s] / ps;
        }
        return f;
    };
    std::vector<double> q = uniform_position_proposal(n);
    std::vector<double> best_q = q;
    double best_f = objective(q);
    const double h = 1e-6;
    for (int it = 0; it < iters; ++it) {
        std::vector<double> grad(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            std::vector<double> qp = q, qm = q;
            qp[static_cast<std::size_t>(i)] += h;
            qm[static_cast<std::size_t>(i)] = std::max(qm[static_cast<std::size_t>(i)] - h, 1e-12);
            grad[static_cast<std::size_t>(i)] = (objective(qp) - objective(qm)) / (qp[static_cast<std::size_t>(i)] - qm[static_cast<std::size_t>(i)]);
        }
        double gn = l2_norm(grad);
        if (gn == 0.0) break;
        for (int i = 0; i < n; ++i) q[static_cast<std::size_t>(i)] -= step * grad[static_cast<std::size_t>(i)] / gn;
        q = project_to_simplex_interior(std::move(q));
        const double f = objective(q);
        if (f < best_f) {
            best_f = f;
            best_q = q;
        }
    }
    PositionProposalFit fit;
    fit.position_probs = best_q;
    fit.variance = proposal_variance_over_subsets(table, subset_probs_for(table, best_q));
    return fit;
}

struct CorrelationReport {
    double pearson = 0.0;
    double spearman = 0.0;
    std::size_t pairs = 0;
};

// Pearson/Spearman between per-position loss and gradient norm, pooled
// over the corpus — the empirical basis for substituting loss for
// gradient norm in the MAP-Net objective.
inline CorrelationReport loss_norm_correlation(const std::vector<TokenSequence>& corpus, EncoderParams& params,
                                               std::size_t min_pairs = 30) {
    std::vector<double> losses, norms;
    for (const TokenSequence& x : corpus) {
        for (const PositionLossNorm& row : position_loss_and_norm_table(params, x)) {
            losses.push_back(row.loss);
            norms.push_back(row.grad_norm);
        }
    }
    if (losses.size() < min_pairs)
        throw std::invalid_argument("loss_norm_correlation: need at least " + std::to_string(min_pairs) + " pairs, got " +
                                    std::to_string(losses.size()));
    CorrelationReport r;
    r.pairs = losses.size();
    r.pearson = pearson(losses, norms);
    r.spearman = spearman(losses, norms);
    return r;
}

// Per-sentence proposal source for Monte Carlo audits; a null function
// means uniform masking with unit weights.
using ProposalSource = std::function<ProposalDistribution(const TokenSequence&)>;

// Monte Carlo counterpart of the decomposition, for sentences beyond the
// enumeration cap. Draws `num_samples` masks per sentence (from the
// proposal when given, else uniform) and weights gradients by the exact
// subset ratio, so it estimates the Eq. (6) decomposition. The two terms
// use unbiased estimators:
//   mask_term: mean over sentences of the per-sentence Bessel variance;
//   sentence_term: population variance of conditional-mean estimates,
//     debiased by (1 - 1/S) * mask_term / M.
// total = mask_term + sentence_term (residual identically 0 here; only
// exact mode checks the identity). Standard errors come from splitting
// samples into batches and treating batch estimates as replicates.
inline VarianceReport mc_variance_decomposition(const std::vector<TokenSequence>& corpus, EncoderParams& params,
                                                int k_fixed, double mask_rate, const ProposalSource& proposal,
                                                long num_samples, std::mt19937_64& rng, int num_batches = 8) {
    if (corpus.empty()) throw std::invalid_argument("mc_variance_decomposition: empty corpus");
    if (num_samples < 2) throw std::invalid_argument("mc_variance_decomposition: need num_samples >= 2");
    int batches = std::min<long>(num_batches, num_samples / 2);
    batches = std::max(batches, 1);
    const long base = num_samples / batches;
    const long rem = num_samples % batches;

    const double inv_s = 1.0 / static_cast<double>(corpus.size());
    std::vector<double> outer_mean, outer_sq;
    std::vector<double> batch_mask(static_cast<std::size_t>(batches), 0.0);
    std::vector<std::vector<double>> batch_outer_mean, batch_outer_sq;
    double mask_term = 0.0;

    std::vector<double> mean, m2, bmean, bm2, weighted;
    for (const TokenSequence& x : corpus) {
        const int k = k_fixed > 0 ? k_fixed : mask_count(mask_rate, x.length);
        ProposalDistribution dist;
        if (proposal) dist = proposal(x);
        const double p_rand_subset = 1.0 / static_cast<double>(binomial(x.length, k));
        long done = 0;
        mean.clear();
        m2.clear();
        for (int b = 0; b < batches; ++b) {
            const long m_b = base + (b < rem ? 1 : 0);
            bmean.clear();
            bm2.clear();
            for (long j = 0; j < m_b; ++j) {
                std::vector<int> subset;
                double weight = 1.0;
                if (proposal) {
                    SampledPositions sp = sample_positions(dist, k, rng);
                    subset = std::move(sp.positions);
                    const double ps = subset_probability(dist.p, subset);
                    if (!(ps > 0.0)) throw std::domain_error("mc_variance_decomposition: sampled subset has zero proposal mass");
                    weight = p_rand_subset / ps;
                } else {
                    subset = uniform_subset(x.length, k, rng);
                }
                TokenSequence masked = apply_mask_token(x, subset);
                SentenceGradient g = sentence_gradient(params, masked, subset, x);
                const std::size_t d = g.flat.size();
                if (mean.empty()) {
                    mean.assign(d, 0.0);
                    m2.assign(d, 0.0);
                }
                if (bmean.empty()) {
                    bmean.assign(d, 0.0);
                    bm2.assign(d, 0.0);
                }
                weighted.resize(d);
                for (std::size_t c = 0; c < d; ++c) weighted[c] = weight * g.flat[c];
                ++done;
                const double inv_done = 1.0 / static_cast<double>(done);
                const double inv_bdone = 1.0 / static_cast<double>(j + 1);
                for (std::size_t c = 0; c < d; ++c) {  // Welford, full-sample and per-batch
                    const double x1 = weighted[c];
                    double delta = x1 - mean[c];
                    mean[c] += delta * inv_done;
                    m2[c] += delta * (x1 - mean[c]);
                    delta = x1 - bmean[c];
                    bmean[c] += delta * inv_bdone;
                    bm2[c] += delta * (x1 - bmean[c]);
                }
            }
            if (m_b >= 2) {
                double bvar = 0.0;
                for (double v : bm2) bvar += v / static_cast<double>(m_b - 1);
                batch_mask[static_cast<std::size_t>(b)] += inv_s * bvar;
            }
            if (batch_outer_mean.size() < static_cast<std::size_t>(batches)) {
                batch_outer_mean.assign(static_cast<std::size_t>(batches), std::vector<double>(mean.size(), 0.0));
                batch_outer_sq.assign(static_cast<std::size_t>(batches), std::vector<double>(mean.size(), 0.0));
            }
            for (std::size_t c = 0; c < bmean.size(); ++c) {
                batch_outer_mean[static_cast<std::size_t>(b)][c] += inv_s * bmean[c];
                batch_outer_sq[static_cast<std::size_t>(b)][c] += inv_s * bmean[c] * bmean[c];
            }
        }
        double svar = 0.0;
        for (double v : m2) svar += v / static_cast<double>(num_samples - 1);
        mask_term += inv_s * svar;
        if (outer_mean.empty()) {
            outer_mean.assign(mean.size(), 0.0);
            outer_sq.assign(mean.size(), 0.0);
        }
        for (std::size_t c = 0; c < mean.size(); ++c) {
            outer_mean[c] += inv_s * mean[c];
            outer_sq[c] += inv_s * mean[c] * mean[c];
        }
    }

    const double s_count = static_cast<double>(corpus.size());
    auto sentence_from = [&](const std::vector<double>& om, const std::vector<double>& osq, double mask_est, long m_used) {
        double pop = 0.0;
        for (std::size_t c = 0; c < om.size(); ++c) pop += osq[c] - om[c] * om[c];
        return pop - (1.0 - 1.0 / s_count) * mask_est / static_cast<double>(m_used);
    };

    VarianceReport r;
    r.monte_carlo = true;
    r.num_samples = num_samples;
    r.mask_term = mask_term;
    r.sentence_term = sentence_from(outer_mean, outer_sq, mask_term, num_samples);
    r.total = r.mask_term + r.sentence_term;
    r.residual = 0.0;

    if (batches >= 2) {
        std::vector<double> mask_reps, sent_reps, total_reps;
        for (int b = 0; b < batches; ++b) {
            const long m_b = base + (b < rem ? 1 : 0);
            if (m_b < 2) continue;
            const double mk = batch_mask[static_cast<std::size_t>(b)];
            const double st = sentence_from(batch_outer_mean[static_cast<std::size_t>(b)],
                                            batch_outer_sq[static_cast<std::size_t>(b)], mk, m_b);
            mask_reps.push_back(mk);
            sent_reps.push_back(st);
            total_reps.push_back(mk + st);
        }
        if (mask_reps.size() >= 2) {
            const double nb = static_cast<double>(mask_reps.size());
            r.mask_term_stderr = std::sqrt(sample_variance(mask_reps) / nb);
            r.sentence_term_stderr = std::sqrt(sample_variance(sent_reps) / nb);
            r.total_stderr = std::sqrt(sample_variance(total_reps) / nb);
        }
    }
    return r;
}

}  // namespace maskvar
