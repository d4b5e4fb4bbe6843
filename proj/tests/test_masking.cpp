#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "maskvar/mask_proposal.hpp"
#include "maskvar/masking.hpp"

using namespace maskvar;

namespace {
TokenSequence make_sentence(int n, int fill = 10) {
    return TokenSequence(std::vector<int>(static_cast<std::size_t>(n), fill));
}
}  // namespace

TEST_CASE("mask_count follows round-half-up with a floor of one") {
    CHECK(mask_count(0.15, 100) == 15);
    CHECK(mask_count(0.15, 3) == 1);
    CHECK(mask_count(0.15, 10) == 2);  // 1.5 rounds up
    CHECK(mask_count(0.15, 9) == 1);   // 1.35 rounds down
    CHECK_THROWS_AS(mask_count(0.0, 10), std::invalid_argument);
    CHECK_THROWS_AS(mask_count(0.15, 0), std::invalid_argument);
}

TEST_CASE("rand_mask selects distinct in-range positions with unit ratio") {
    std::mt19937_64 rng(3);
    TokenSequence x = make_sentence(12);
    for (int trial = 0; trial < 200; ++trial) {
        MaskPlan plan = rand_mask(x, 0.25, rng);
        CHECK(plan.k() == 3);
        CHECK(plan.ratio == 1.0);
        CHECK(plan.ratio_clipped == 1.0);
        CHECK(plan.source == MaskSource::uniform_branch);
        std::set<int> uniq(plan.positions.begin(), plan.positions.end());
        CHECK(uniq.size() == plan.positions.size());
        for (int p : plan.positions) CHECK((p >= 0 && p < 12));
    }
    CHECK_THROWS_AS(rand_mask(TokenSequence{}, 0.15, rng), std::invalid_argument);
}

TEST_CASE("rand_mask never selects padded positions") {
    TokenSequence x = make_sentence(6);
    x.tokens.resize(16, Vocabulary::kPad);  // padded to 16, true length 6
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 500; ++trial) {
        MaskPlan plan = rand_mask(x, 0.3, rng);
        for (int p : plan.positions) CHECK(p < 6);
    }
}

TEST_CASE("rand_mask per-position frequency is K/n within 3 sigma over 100k draws") {
    const int n = 10, trials = 100000;
    const double rate = 0.15;
    const int k = mask_count(rate, n);  // 2
    std::mt19937_64 rng(5);
    TokenSequence x = make_sentence(n);
    std::vector<int> hits(n, 0);
    for (int t = 0; t < trials; ++t)
        for (int p : rand_mask(x, rate, rng).positions) ++hits[static_cast<std::size_t>(p)];
    const double expect = static_cast<double>(k) / n;
    const double sigma = std::sqrt(expect * (1 - expect) / trials);
    for (int i = 0; i < n; ++i) {
        const double freq = static_cast<double>(hits[static_cast<std::size_t>(i)]) / trials;
        CHECK(std::abs(freq - expect) <= 3 * sigma);
    }
}

TEST_CASE("corrupt action frequencies approach 80/10/10 within 3 sigma") {
    Vocabulary vocab = SyntheticGrammar{}.build_vocabulary();
    std::mt19937_64 rng(6);
    TokenSequence x = make_sentence(1, 50);
    const int trials = 100000;
    int masked = 0, randomized = 0, kept = 0;
    for (int t = 0; t < trials; ++t) {
        std::vector<CorruptAction> actions;
        TokenSequence out = corrupt(x, std::vector<int>{0}, vocab, rng, &actions);
        switch (actions[0]) {
            case CorruptAction::to_mask:
                ++masked;
                CHECK(out.tokens[0] == Vocabulary::kMask);
                break;
            case CorruptAction::to_random:
                ++randomized;
                CHECK(out.tokens[0] >= Vocabulary::kNumReserved);
                break;
            case CorruptAction::keep:
                ++kept;
                CHECK(out.tokens[0] == 50);
                break;
        }
    }
    auto within = [&](int count, double p) {
        const double sigma = std::sqrt(p * (1 - p) / trials);
        return std::abs(static_cast<double>(count) / trials - p) <= 3 * sigma;
    };
    CHECK(within(masked, 0.8));
    CHECK(within(randomized, 0.1));
    CHECK(within(kept, 0.1));
}

TEST_CASE("corrupt touches only planned positions and empty plans are identity") {
    Vocabulary vocab = SyntheticGrammar{}.build_vocabulary();
    std::mt19937_64 rng(7);
    TokenSequence x(std::vector<int>{10, 11, 12, 13, 14, 15});
    TokenSequence same = corrupt(x, std::vector<int>{}, vocab, rng);
    CHECK(same.tokens == x.tokens);
    for (int trial = 0; trial < 300; ++trial) {
        TokenSequence out = corrupt(x, std::vector<int>{1, 4}, vocab, rng);
        CHECK(out.tokens[0] == 10);
        CHECK(out.tokens[2] == 12);
        CHECK(out.tokens[3] == 13);
        CHECK(out.tokens[5] == 15);
    }
    CHECK_THROWS_AS(corrupt(x, std::vector<int>{9}, vocab, rng), std::out_of_range);
}

TEST_CASE("explore_p anchors and monotonicity") {
    ExplorationSchedule s{1.0, 0.33, 1000};
    CHECK(explore_p(s, 0) == 1.0);
    CHECK(explore_p(s, 1000) == doctest::Approx(0.33).epsilon(0));
    CHECK(explore_p(s, 500) == doctest::Approx(0.665).epsilon(1e-12));
    CHECK(explore_p(s, 5000) == doctest::Approx(0.33).epsilon(0));
    double prev = 2.0;
    for (long step = 0; step <= 1200; step += 7) {
        const double p = explore_p(s, step);
        CHECK(p <= prev);
        prev = p;
    }
    CHECK_THROWS_AS(explore_p(s, -1), std::invalid_argument);
    ExplorationSchedule bad{0.2, 0.5, 100};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("bernoulli variant selects each position near the mask rate and never returns empty plans") {
    std::mt19937_64 rng(8);
    TokenSequence x = make_sentence(20);
    const int trials = 100000;
    const double rate = 0.3;
    long total_k = 0;
    for (int t = 0; t < trials; ++t) {
        MaskPlan plan = bernoulli_mask(x, rate, rng);
        CHECK(plan.k() >= 1);
        total_k += plan.k();
    }
    // conditioning on >=1 selection shifts the mean by < 1e-3 at these sizes
    const double mean_k = static_cast<double>(total_k) / trials;
    const double sigma = std::sqrt(20 * rate * (1 - rate) / trials);
    CHECK(std::abs(mean_k - 20 * rate) <= 4 * sigma + 1e-2);
}

TEST_CASE("mixed_mask degenerates to rand_mask or pure proposal sampling at the schedule pins") {
    EncoderConfig ec;
    ec.vocab_size = 64;
    ec.max_seq_len = 16;
    ec.hidden = 16;
    ec.heads = 2;
    ec.num_layers = 1;
    std::mt19937_64 init(9);
    EncoderParams enc = EncoderParams::init(ec, init);
    MapNetParams map = MapNetParams::init(MapNetConfig::from_encoder(ec), enc.token_embedding, init);
    TokenSequence x(std::vector<int>{5, 6, 7, 8, 9, 10, 11, 12});
    std::mt19937_64 rng(10);

    ExplorationSchedule always_uniform{1.0, 1.0, 100};
    for (int t = 0; t < 50; ++t) {
        MaskPlan plan = mixed_mask(x, 0, always_uniform, map, 0.25, 0.2, rng);
        CHECK(plan.source == MaskSource::uniform_branch);
        CHECK(plan.ratio == 1.0);
    }
    ExplorationSchedule never_uniform{0.0, 0.0, 100};
    for (int t = 0; t < 50; ++t) {
        MaskPlan plan = mixed_mask(x, 0, never_uniform, map, 0.25, 0.2, rng);
        CHECK(plan.source == MaskSource::proposal_branch);
        CHECK(plan.raw_probs.size() == 2);
        CHECK(plan.ratio_clipped >= 0.8);
        CHECK(plan.ratio_clipped <= 1.2);
    }
}

TEST_CASE("mixed_mask branch frequencies match explore_p within 3 sigma") {
    EncoderConfig ec;
    ec.vocab_size = 64;
    ec.max_seq_len = 16;
    ec.hidden = 16;
    ec.heads = 2;
    ec.num_layers = 1;
    std::mt19937_64 init(11);
    EncoderParams enc = EncoderParams::init(ec, init);
    MapNetParams map = MapNetParams::init(MapNetConfig::from_encoder(ec), enc.token_embedding, init);
    TokenSequence x(std::vector<int>{5, 6, 7, 8, 9, 10});
    std::mt19937_64 rng(12);
    ExplorationSchedule half{0.5, 0.5, 100};
    const int trials = 10000;
    int uniform_count = 0;
    for (int t = 0; t < trials; ++t)
        if (mixed_mask(x, 0, half, map, 0.2, 0.2, rng).source == MaskSource::uniform_branch) ++uniform_count;
    const double sigma = std::sqrt(0.25 / trials);
    CHECK(std::abs(static_cast<double>(uniform_count) / trials - 0.5) <= 3 * sigma);
}

TEST_CASE("mixed_mask is reproducible under a frozen rng seed") {
    EncoderConfig ec;
    ec.vocab_size = 64;
    ec.max_seq_len = 16;
    ec.hidden = 16;
    ec.heads = 2;
    ec.num_layers = 1;
    std::mt19937_64 init(13);
    EncoderParams enc = EncoderParams::init(ec, init);
    MapNetParams map = MapNetParams::init(MapNetConfig::from_encoder(ec), enc.token_embedding, init);
    TokenSequence x(std::vector<int>{5, 6, 7, 8, 9, 10, 11});
    ExplorationSchedule sched{0.4, 0.4, 100};
    auto draw = [&](std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::vector<MaskPlan> plans;
        for (int t = 0; t < 40; ++t) plans.push_back(mixed_mask(x, 0, sched, map, 0.25, 0.2, rng));
        return plans;
    };
    auto a = draw(77), b = draw(77);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].positions == b[i].positions);
        CHECK(a[i].ratio == b[i].ratio);
        CHECK(a[i].source == b[i].source);
    }
}
