#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "maskvar/variance_lab.hpp"

using namespace maskvar;

namespace {

struct Fixture {
    EncoderParams encoder;
    std::vector<TokenSequence> corpus;
};

Fixture make_fixture(std::uint64_t seed, int sentences = 3, int n = 6) {
    EncoderConfig cfg;
    cfg.vocab_size = 32;
    cfg.max_seq_len = 8;
    cfg.num_layers = 1;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.ffn_multiplier = 2;
    std::mt19937_64 init_rng = make_stream(seed, "init");
    Fixture f{EncoderParams::init(cfg, init_rng), {}};
    std::mt19937_64 rng = make_stream(seed, "corpus");
    for (int s = 0; s < sentences; ++s) {
        std::vector<int> toks;
        for (int i = 0; i < n; ++i) toks.push_back(Vocabulary::kNumReserved + uniform_below(rng, 29));
        f.corpus.emplace_back(toks);
    }
    return f;
}

}  // namespace

TEST_CASE("binomial and enumeration sizes") {
    CHECK(binomial(6, 2) == 15);
    CHECK(binomial(8, 2) == 28);
    CHECK(binomial(4, 4) == 1);
    MaskEnumeration e = enumerate_masks(6, 2, uniform_position_proposal(6));
    CHECK(e.subsets.size() == 15);
    for (const auto& s : e.subsets) CHECK(s.size() == 2);
}

TEST_CASE("uniform proposal gives each subset probability 1/C(n,K)") {
    MaskEnumeration e = enumerate_masks(4, 2, uniform_position_proposal(4));
    for (double p : e.probs) CHECK(std::abs(p - 1.0 / 6.0) <= 1e-12);
}

TEST_CASE("subset probabilities sum to one and match Monte Carlo sampling") {
    const std::vector<double> p = {0.4, 0.3, 0.2, 0.1};
    MaskEnumeration e = enumerate_masks(4, 2, p);
    double sum = 0.0;
    for (double q : e.probs) sum += q;
    CHECK(std::abs(sum - 1.0) <= 1e-12);

    std::map<std::vector<int>, double> expected;
    for (std::size_t i = 0; i < e.subsets.size(); ++i) expected[e.subsets[i]] = e.probs[i];
    std::mt19937_64 rng(3);
    const int trials = 1000000;
    std::map<std::vector<int>, int> counts;
    ProposalDistribution d{p};
    for (int t = 0; t < trials; ++t) {
        SampledPositions s = sample_positions(d, 2, rng);
        std::vector<int> key = s.positions;
        std::sort(key.begin(), key.end());
        counts[key]++;
    }
    for (const auto& [subset, prob] : expected) {
        const double freq = static_cast<double>(counts[subset]) / trials;
        const double sigma = std::sqrt(prob * (1 - prob) / trials);
        CHECK(std::abs(freq - prob) <= 3 * sigma);
    }
}

TEST_CASE("the enumeration cap reports the required size") {
    try {
        enumerate_masks(30, 5, uniform_position_proposal(30));
        FAIL("expected enumeration_cap_error");
    } catch (const enumeration_cap_error& e) {
        CHECK(e.required_cap == binomial(30, 5));
        CHECK(std::string(e.what()).find(std::to_string(binomial(30, 5))) != std::string::npos);
        CHECK(std::string(e.what()).find("Monte Carlo") != std::string::npos);
    }
}

TEST_CASE("exact decomposition: single sentence has exactly zero sentence variance") {
    Fixture f = make_fixture(4, 1);
    VarianceReport r = exact_variance_decomposition({f.corpus[0]}, f.encoder, 2);
    CHECK(r.sentence_term == 0.0);
    CHECK(r.mask_term > 0.0);
}

TEST_CASE("exact decomposition: K=n has exactly zero mask variance") {
    Fixture f = make_fixture(5);
    VarianceReport r = exact_variance_decomposition(f.corpus, f.encoder, 6);
    CHECK(r.mask_term == 0.0);
    CHECK(r.sentence_term > 0.0);
}

TEST_CASE("law of total variance holds to 1e-10 relative under full enumeration") {
    Fixture f = make_fixture(6);
    VarianceReport r = exact_variance_decomposition(f.corpus, f.encoder, 2);
    CHECK(r.total > 0.0);
    CHECK(r.mask_term >= 0.0);
    CHECK(r.sentence_term >= 0.0);
    CHECK(std::abs(r.residual) <= 1e-10 * r.total);
}

TEST_CASE("unbiasedness: uniform proposal reproduces E_rand exactly") {
    Fixture f = make_fixture(7);
    SubsetValueTable t = subset_gradient_table(f.encoder, f.corpus[0], 2);
    UnbiasednessAudit a = importance_estimator_audit(t, uniform_position_proposal(6));
    CHECK(a.max_abs_deviation == 0.0);
}

TEST_CASE("unbiasedness: every positive proposal reproduces E_rand to 1e-10") {
    Fixture f = make_fixture(8);
    SubsetValueTable t = subset_gradient_table(f.encoder, f.corpus[0], 2);
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 10; ++trial) {
        UnbiasednessAudit a = importance_estimator_audit(t, random_simplex_point(6, rng));
        CHECK(a.max_abs_deviation <= 1e-10);
    }
}

TEST_CASE("clipping the ratio breaks unbiasedness measurably") {
    Fixture f = make_fixture(10);
    SubsetValueTable t = subset_gradient_table(f.encoder, f.corpus[0], 2);
    UnbiasednessAudit a = importance_estimator_audit(t, {0.55, 0.2, 0.1, 0.06, 0.05, 0.04}, /*clip=*/true, 0.2);
    CHECK(a.max_abs_deviation > 1e-10);
}

TEST_CASE("proposal_variance demands positive subset mass") {
    Fixture f = make_fixture(11);
    SubsetValueTable t = subset_gradient_table(f.encoder, f.corpus[0], 2);
    std::vector<double> probs(t.values.size(), 1.0 / static_cast<double>(t.count()));
    probs[0] = 0.0;
    CHECK_THROWS_AS(proposal_variance_over_subsets(t, probs), std::domain_error);
}

TEST_CASE("optimal subset proposal normalizes gradient norms and rejects degenerate tables") {
    std::vector<double> norms = {3.0, 4.0};
    std::vector<double> p = optimal_subset_proposal(norms);
    CHECK(p[0] == doctest::Approx(3.0 / 7.0).epsilon(1e-15));
    CHECK(p[1] == doctest::Approx(4.0 / 7.0).epsilon(1e-15));

    std::vector<double> equal = {2.0, 2.0, 2.0};
    for (double q : optimal_subset_proposal(equal)) CHECK(q == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    CHECK_THROWS_AS(optimal_subset_proposal(std::vector<double>{0.0, 0.0}), std::domain_error);
}

TEST_CASE("scalar-toy mode: positive values give an exactly-zero-variance optimum") {
    std::vector<double> values;
    for (int i = 0; i < 15; ++i) values.push_back(0.2 + 0.37 * i);
    SubsetValueTable toy = scalar_toy_table(6, 2, values);
    const double v = proposal_variance_over_subsets(toy, optimal_subset_proposal(toy.norms));
    CHECK(v <= 1e-20);
    CHECK(v >= 0.0);
}

TEST_CASE("gradient-norm proposal minimizes variance against uniform, Dirichlet draws, and random search") {
    Fixture f = make_fixture(12);
    SubsetValueTable t = subset_gradient_table(f.encoder, f.corpus[0], 2);
    std::vector<double> opt = optimal_subset_proposal(t.norms);
    const double v_opt = proposal_variance_over_subsets(t, opt);
    const double v_uni =
        proposal_variance_over_subsets(t, std::vector<double>(t.values.size(), 1.0 / static_cast<double>(t.count())));
    CHECK(v_opt <= v_uni + 1e-8);
    std::mt19937_64 rng(13);
    for (int i = 0; i < 20; ++i)
        CHECK(v_opt <= proposal_variance_over_subsets(t, random_simplex_point(static_cast<int>(t.count()), rng)) + 1e-8);
    // 200-point random-search certificate
    for (int i = 0; i < 200; ++i)
        CHECK(v_opt <= proposal_variance_over_subsets(t, random_simplex_point(static_cast<int>(t.count()), rng)) + 1e-8);
}

TEST_CASE("the best per-position proposal sits between uniform and the subset optimum") {
    Fixture f = make_fixture(14);
    SubsetValueTable t = subset_gradient_table(f.encoder, f.corpus[0], 2);
    const double v_opt = proposal_variance_over_subsets(t, optimal_subset_proposal(t.norms));
    const double v_uni =
        proposal_variance_over_subsets(t, std::vector<double>(t.values.size(), 1.0 / static_cast<double>(t.count())));
    PositionProposalFit fit = best_position_proposal(t);
    double sum = 0.0;
    for (double q : fit.position_probs) {
        CHECK(q > 0.0);
        sum += q;
    }
    CHECK(std::abs(sum - 1.0) <= 1e-9);
    CHECK(fit.variance >= v_opt - 1e-8);  // position proposals are a subset of subset proposals
    CHECK(fit.variance <= v_uni + 1e-8);  // the search starts at uniform and keeps the best
}

TEST_CASE("loss/norm correlation: minimum pair count and degenerate series raise errors") {
    Fixture f = make_fixture(15, 1);
    CHECK_THROWS_AS(loss_norm_correlation(f.corpus, f.encoder, 30), std::invalid_argument);
    CHECK_THROWS_AS(pearson({1.0, 1.0, 1.0}, {1.0, 2.0, 3.0}), std::domain_error);
}

TEST_CASE("loss/norm correlation runs pooled over the corpus") {
    Fixture f = make_fixture(16, 6);
    CorrelationReport r = loss_norm_correlation(f.corpus, f.encoder, 30);
    CHECK(r.pairs == 36);
    CHECK(std::isfinite(r.pearson));
    CHECK(std::isfinite(r.spearman));
    CHECK(std::abs(r.pearson) <= 1.0 + 1e-12);
}

TEST_CASE("perfectly proportional pairs have Pearson and Spearman exactly one") {
    std::vector<double> xs, ys;
    std::mt19937_64 rng(17);
    for (int i = 0; i < 40; ++i) {
        const double v = uniform01(rng) * 4.0 + 0.1;
        xs.push_back(v);
        ys.push_back(3.0 * v);
    }
    CHECK(pearson(xs, ys) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(spearman(xs, ys) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("Monte Carlo decomposition converges to enumeration within 3 sigma") {
    Fixture f = make_fixture(18);
    VarianceReport exact = exact_variance_decomposition(f.corpus, f.encoder, 2);
    std::mt19937_64 rng(19);
    VarianceReport mc = mc_variance_decomposition(f.corpus, f.encoder, 2, 0.0, nullptr, 600, rng);
    REQUIRE(std::isfinite(mc.mask_term_stderr));
    CHECK(std::abs(mc.mask_term - exact.mask_term) <= 3 * mc.mask_term_stderr);
    CHECK(std::abs(mc.sentence_term - exact.sentence_term) <= 3 * mc.sentence_term_stderr);
    CHECK(mc.residual == 0.0);
    CHECK(mc.monte_carlo);
}

TEST_CASE("Monte Carlo decomposition under a proposal converges to the exact weighted decomposition") {
    Fixture f = make_fixture(20, 2);
    const std::vector<double> prop = {0.3, 0.25, 0.15, 0.15, 0.1, 0.05};
    PositionProposalSource src = [&](const TokenSequence&) { return prop; };
    VarianceReport exact = exact_variance_decomposition(f.corpus, f.encoder, 2, src);
    CHECK(std::abs(exact.residual) <= 1e-10 * exact.total);

    ProposalSource sampler = [&](const TokenSequence&) { return ProposalDistribution{prop}; };
    std::mt19937_64 rng(21);
    VarianceReport mc = mc_variance_decomposition(f.corpus, f.encoder, 2, 0.0, sampler, 800, rng);
    CHECK(std::abs(mc.mask_term - exact.mask_term) <= 3 * mc.mask_term_stderr);
}

TEST_CASE("Monte Carlo decomposition handles the minimum sample count and is seed-reproducible") {
    Fixture f = make_fixture(22, 2);
    std::mt19937_64 r1(5), r2(5);
    VarianceReport a = mc_variance_decomposition(f.corpus, f.encoder, 2, 0.0, nullptr, 2, r1);
    VarianceReport b = mc_variance_decomposition(f.corpus, f.encoder, 2, 0.0, nullptr, 2, r2);
    CHECK(std::isfinite(a.mask_term));
    CHECK(std::isfinite(a.sentence_term));
    CHECK(a.mask_term == b.mask_term);
    CHECK(a.sentence_term == b.sentence_term);
    std::mt19937_64 r3(5);
    CHECK_THROWS_AS(mc_variance_decomposition(f.corpus, f.encoder, 2, 0.0, nullptr, 1, r3), std::invalid_argument);
}
