#pragma once

// JSON serialization of the project's externally visible documents
// (variance reports, step metrics, mask samples, audit reports) and the
// audit drivers behind the audit-variance command. Field names here are
// the wire format; the schemas/ directory mirrors them.

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

#include "maskvar/trainer.hpp"
#include "maskvar/variance_lab.hpp"

namespace maskvar {

using json = nlohmann::json;

inline json to_json(const VarianceReport& r) {
    json j;
    j["variance_summary"] = VarianceReport::kSummary;
    j["total"] = r.total;
    j["mask_term"] = r.mask_term;
    j["sentence_term"] = r.sentence_term;
    j["residual"] = r.residual;
    j["monte_carlo"] = r.monte_carlo;
    if (r.monte_carlo) {
        j["num_samples"] = r.num_samples;
        j["total_stderr"] = r.total_stderr;          // NaN serializes as null
        j["mask_term_stderr"] = r.mask_term_stderr;
        j["sentence_term_stderr"] = r.sentence_term_stderr;
    }
    return j;
}

inline json to_json(const StepMetrics& m) {
    json j;
    j["step"] = m.step;
    j["encoder_loss"] = m.encoder_loss;
    j["raw_mlm_loss"] = m.raw_mlm_loss;
    j["mapnet_loss"] = m.mapnet_loss;
    j["mean_ratio"] = m.mean_ratio;
    j["clip_active_fraction"] = m.clip_active_fraction;
    j["explore_p"] = m.explore_p;
    j["lr"] = m.lr;
    j["encoder_grad_norm"] = m.encoder_grad_norm;
    j["mapnet_grad_norm"] = m.mapnet_grad_norm;
    j["eval_loss"] = m.eval_loss ? json(*m.eval_loss) : json(nullptr);
    return j;
}

struct VarianceAuditReport {
    std::string mode;  // "exact" | "mc"
    int k_fixed = 0;   // 0 = derived from mask_rate per sentence
    double mask_rate = 0.15;
    int num_sentences = 0;
    long num_samples = 0;  // per sentence, mc mode
    VarianceReport uniform;
    VarianceReport mapnet;
    std::optional<double> optimal_mask_term;        // exact mode: subset optimum
    std::optional<double> best_position_mask_term;  // exact mode: per-position PGD fit
    double mask_term_ratio = 0.0;                   // mapnet / uniform
    double mask_term_gap = 0.0;                     // uniform - mapnet
    double mask_term_gap_stderr = std::numeric_limits<double>::quiet_NaN();  // combined, mc mode
};

inline json to_json(const VarianceAuditReport& a) {
    json j;
    j["mode"] = a.mode;
    j["variance_summary"] = VarianceReport::kSummary;
    j["k"] = a.k_fixed > 0 ? json(a.k_fixed) : json(nullptr);
    j["mask_rate"] = a.mask_rate;
    j["num_sentences"] = a.num_sentences;
    if (a.mode == "mc") j["num_samples"] = a.num_samples;
    j["uniform"] = to_json(a.uniform);
    j["mapnet"] = to_json(a.mapnet);
    j["optimal_mask_term"] = a.optimal_mask_term ? json(*a.optimal_mask_term) : json(nullptr);
    j["best_position_mask_term"] = a.best_position_mask_term ? json(*a.best_position_mask_term) : json(nullptr);
    j["mask_term_ratio"] = a.mask_term_ratio;
    j["mask_term_gap"] = a.mask_term_gap;
    j["mask_term_gap_stderr"] = a.mask_term_gap_stderr;
    return j;
}

// Exact enumeration audit: Theorem-1 decompositions under uniform
// masking and under the current MAP-Net proposal, plus the per-sentence
// optimal-subset and best-position mask terms.
inline VarianceAuditReport run_variance_audit_exact(const std::vector<TokenSequence>& corpus, EncoderParams& encoder,
                                                    MapNetParams& mapnet, int k,
                                                    std::int64_t cap = kDefaultEnumerationCap) {
    VarianceAuditReport a;
    a.mode = "exact";
    a.k_fixed = k;
    a.num_sentences = static_cast<int>(corpus.size());
    PositionProposalSource mapnet_source = [&](const TokenSequence& x) { return propose(mapnet, x).p; };
    a.uniform = exact_variance_decomposition(corpus, encoder, k, nullptr, cap);
    a.mapnet = exact_variance_decomposition(corpus, encoder, k, mapnet_source, cap);
    const double px = 1.0 / static_cast<double>(corpus.size());
    double opt = 0.0, fit = 0.0;
    for (const TokenSequence& x : corpus) {
        SubsetValueTable t = subset_gradient_table(encoder, x, k, cap);
        opt += px * proposal_variance_over_subsets(t, optimal_subset_proposal(t.norms));
        fit += px * best_position_proposal(t).variance;
    }
    a.optimal_mask_term = opt;
    a.best_position_mask_term = fit;
    a.mask_term_ratio = a.mapnet.mask_term / a.uniform.mask_term;
    a.mask_term_gap = a.uniform.mask_term - a.mapnet.mask_term;
    return a;
}

// Monte Carlo audit for corpora beyond the enumeration cap; this is the
// in-situ variance-reduction measurement.
inline VarianceAuditReport run_variance_audit_mc(const std::vector<TokenSequence>& corpus, EncoderParams& encoder,
                                                 MapNetParams& mapnet, int k_fixed, double mask_rate, long num_samples,
                                                 std::mt19937_64& rng) {
    VarianceAuditReport a;
    a.mode = "mc";
    a.k_fixed = k_fixed;
    a.mask_rate = mask_rate;
    a.num_sentences = static_cast<int>(corpus.size());
    a.num_samples = num_samples;
    ProposalSource mapnet_source = [&](const TokenSequence& x) { return propose(mapnet, x); };
    a.uniform = mc_variance_decomposition(corpus, encoder, k_fixed, mask_rate, nullptr, num_samples, rng);
    a.mapnet = mc_variance_decomposition(corpus, encoder, k_fixed, mask_rate, mapnet_source, num_samples, rng);
    a.mask_term_ratio = a.mapnet.mask_term / a.uniform.mask_term;
    a.mask_term_gap = a.uniform.mask_term - a.mapnet.mask_term;
    a.mask_term_gap_stderr = std::sqrt(a.uniform.mask_term_stderr * a.uniform.mask_term_stderr +
                                       a.mapnet.mask_term_stderr * a.mapnet.mask_term_stderr);
    return a;
}

// One sampled mask plan for the sample-masks command.
inline json mask_sample_to_json(const TokenSequence& x, const Vocabulary& vocab, const MaskPlan& plan,
                                const ProposalDistribution* proposal, const std::vector<PositionClass>* labels,
                                const int* topic) {
    json j;
    std::vector<std::string> words;
    for (int i = 0; i < x.length; ++i) words.push_back(vocab.token_of(x.tokens[static_cast<std::size_t>(i)]));
    j["sentence"] = words;
    j["length"] = x.length;
    j["positions"] = plan.positions;
    j["raw_probs"] = plan.raw_probs;
    std::vector<std::string> actions;
    for (CorruptAction act : plan.actions) actions.push_back(corrupt_action_name(act));
    j["actions"] = actions;
    j["ratio"] = plan.ratio;
    j["ratio_clipped"] = plan.ratio_clipped;
    j["source"] = mask_source_name(plan.source);
    j["proposal"] = proposal ? json(proposal->p) : json(nullptr);
    if (labels) {
        std::vector<std::string> names;
        for (PositionClass c : *labels) names.push_back(position_class_name(c));
        j["difficulty_labels"] = names;
    } else {
        j["difficulty_labels"] = nullptr;
    }
    j["topic"] = topic ? json(*topic) : json(nullptr);
    return j;
}

}  // namespace maskvar
