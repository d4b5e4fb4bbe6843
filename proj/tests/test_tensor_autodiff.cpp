#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "maskvar/tape.hpp"

using namespace maskvar;

namespace {

// Central-difference oracle for a scalar-valued graph over the given
// parameter tensors.
double fd_check(const std::function<Tape::Value(Tape&, std::vector<Tape::Value>&)>& build,
                std::vector<Tensor*> params, double h = 1e-5) {
    Tape tape;
    std::vector<Tape::Value> leaves;
    Tape::Value loss = build(tape, leaves);
    tape.backward(loss);
    std::vector<double> analytic;
    for (Tape::Value v : leaves) {
        const Tensor& g = tape.grad(v);
        analytic.insert(analytic.end(), g.data.begin(), g.data.end());
    }
    auto eval = [&]() {
        Tape t;
        std::vector<Tape::Value> l;
        return t.value(build(t, l)).data[0];
    };
    return max_rel_grad_error(eval, params, analytic, h);
}

Tensor randn(std::vector<int> shape, std::mt19937_64& rng, double sd = 0.7) {
    return Tensor::randn(std::move(shape), sd, rng);
}

}  // namespace

TEST_CASE("matmul forward examples") {
    Tape t;
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor b({2, 2}, {5, 6, 7, 8});
    CHECK(t.value(t.matmul(t.constant(eye), t.constant(b))).data == std::vector<double>{5, 6, 7, 8});

    Tensor row({1, 2}, {1, 2});
    Tensor col({2, 1}, {3, 4});
    CHECK(t.value(t.matmul(t.constant(row), t.constant(col))).data[0] == doctest::Approx(11.0).epsilon(0));
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
    Tape t;
    Tensor a({2, 3});
    Tensor b({2, 2});
    CHECK_THROWS_AS(t.matmul(t.constant(a), t.constant(b)), std::invalid_argument);
    CHECK_THROWS_AS(t.add(t.constant(a), t.constant(b)), std::invalid_argument);
}

TEST_CASE("matmul backward matches finite differences") {
    std::mt19937_64 rng(11);
    Tensor a = randn({3, 4}, rng);
    Tensor b = randn({4, 2}, rng);
    double err = fd_check(
        [&](Tape& t, std::vector<Tape::Value>& leaves) {
            auto la = t.leaf(&a, true);
            auto lb = t.leaf(&b, true);
            leaves = {la, lb};
            return t.mean_all(t.matmul(la, lb));
        },
        {&a, &b});
    CHECK(err <= 1e-6);
}

TEST_CASE("matmul_nt backward matches finite differences") {
    std::mt19937_64 rng(12);
    Tensor a = randn({3, 4}, rng);
    Tensor b = randn({5, 4}, rng);
    double err = fd_check(
        [&](Tape& t, std::vector<Tape::Value>& leaves) {
            auto la = t.leaf(&a, true);
            auto lb = t.leaf(&b, true);
            leaves = {la, lb};
            return t.mean_all(t.gelu(t.matmul_nt(la, lb)));
        },
        {&a, &b});
    CHECK(err <= 1e-6);
}

TEST_CASE("softmax examples and stability") {
    Tape t;
    Tensor flat({3}, {0, 0, 0});
    const Tensor& u = t.value(t.softmax(t.constant(flat), 0));
    for (double v : u.data) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));

    Tensor huge({2}, {1000, 0});
    const Tensor& s = t.value(t.softmax(t.constant(huge), 0));
    CHECK(s.data[0] == doctest::Approx(1.0));
    CHECK(s.data[1] < 1e-300);
    CHECK(s.all_finite());
}

TEST_CASE("softmax sums to one and stays positive on random input") {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 50; ++trial) {
        Tape t;
        Tensor x = randn({17}, rng, 3.0);
        const Tensor& y = t.value(t.softmax(t.constant(x), 0));
        double sum = 0.0;
        for (double v : y.data) {
            CHECK(v > 0.0);
            sum += v;
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("softmax rejects bad axis") {
    Tape t;
    Tensor x({3, 3});
    CHECK_THROWS_AS(t.softmax(t.constant(x), 0), std::invalid_argument);
    Tensor v({3});
    CHECK_THROWS_AS(t.softmax(t.constant(v), 1), std::invalid_argument);
}

TEST_CASE("softmax backward matches finite differences") {
    std::mt19937_64 rng(14);
    Tensor x = randn({4, 6}, rng);
    Tensor w = randn({4, 6}, rng);
    double err = fd_check(
        [&](Tape& t, std::vector<Tape::Value>& leaves) {
            auto lx = t.leaf(&x, true);
            leaves = {lx};
            auto probs = t.softmax(lx, 1);
            return t.mean_all(t.mul_mask(probs, w));  // weighted sum makes the grad non-trivial
        },
        {&x});
    CHECK(err <= 1e-6);
}

TEST_CASE("cross entropy on uniform logits is log V") {
    Tape t;
    Tensor logits({1, 32});
    auto ce = t.cross_entropy_rows(t.constant(logits), {7});
    CHECK(t.value(ce.losses).data[0] == doctest::Approx(std::log(32.0)).epsilon(1e-12));
    CHECK(ce.entropies[0] == doctest::Approx(std::log(32.0)).epsilon(1e-9));
}

TEST_CASE("cross entropy near-deterministic logits gives near-zero loss") {
    Tape t;
    Tensor logits({1, 8});
    logits.at(0, 3) = 1e6;
    auto ce = t.cross_entropy_rows(t.constant(logits), {3});
    CHECK(t.value(ce.losses).data[0] >= 0.0);
    CHECK(t.value(ce.losses).data[0] <= 1e-9);
}

TEST_CASE("cross entropy rejects out-of-range targets") {
    Tape t;
    Tensor logits({2, 5});
    CHECK_THROWS_AS(t.cross_entropy_rows(t.constant(logits), {0, 5}), std::out_of_range);
}

TEST_CASE("cross entropy gradient matches finite differences") {
    std::mt19937_64 rng(15);
    Tensor logits = randn({3, 9}, rng, 1.5);
    double err = fd_check(
        [&](Tape& t, std::vector<Tape::Value>& leaves) {
            auto l = t.leaf(&logits, true);
            leaves = {l};
            return t.mean_all(t.cross_entropy_rows(l, {2, 0, 8}).losses);
        },
        {&logits}, 1e-6);
    CHECK(err <= 1e-6);
}

TEST_CASE("composed softmax plus cross entropy matches finite differences") {
    std::mt19937_64 rng(16);
    Tensor x = randn({2, 5}, rng);
    Tensor w = randn({5, 7}, rng);
    double err = fd_check(
        [&](Tape& t, std::vector<Tape::Value>& leaves) {
            auto lx = t.leaf(&x, true);
            auto lw = t.leaf(&w, true);
            leaves = {lx, lw};
            return t.mean_all(t.cross_entropy_rows(t.matmul(lx, lw), {1, 6}).losses);
        },
        {&x, &w}, 1e-6);
    CHECK(err <= 1e-6);
}

TEST_CASE("gelu is zero at zero and matches finite differences") {
    Tape t;
    Tensor z({1}, {0.0});
    CHECK(t.value(t.gelu(t.constant(z))).data[0] == 0.0);

    std::mt19937_64 rng(17);
    Tensor x = randn({4, 4}, rng, 1.2);
    double err = fd_check(
        [&](Tape& tp, std::vector<Tape::Value>& leaves) {
            auto lx = tp.leaf(&x, true);
            leaves = {lx};
            return tp.mean_all(tp.gelu(lx));
        },
        {&x});
    CHECK(err <= 1e-6);
}

TEST_CASE("layernorm of a constant row is zero before affine") {
    Tape t;
    Tensor x = Tensor::full({2, 8}, 3.25);
    Tensor gain = Tensor::full({8}, 1.0);
    Tensor bias({8});
    const Tensor& y = t.value(t.layernorm(t.constant(x), t.constant(gain), t.constant(bias)));
    for (double v : y.data) CHECK(std::abs(v) <= 1e-12);
}

TEST_CASE("layernorm backward matches finite differences") {
    std::mt19937_64 rng(18);
    Tensor x = randn({3, 6}, rng);
    Tensor gain = randn({6}, rng, 0.4);
    Tensor bias = randn({6}, rng, 0.4);
    Tensor w = randn({3, 6}, rng);
    double err = fd_check(
        [&](Tape& t, std::vector<Tape::Value>& leaves) {
            auto lx = t.leaf(&x, true);
            auto lg = t.leaf(&gain, true);
            auto lb = t.leaf(&bias, true);
            leaves = {lx, lg, lb};
            return t.mean_all(t.mul_mask(t.layernorm(lx, lg, lb), w));
        },
        {&x, &gain, &bias});
    CHECK(err <= 1e-6);
}

TEST_CASE("embedding gather backward scatters one row per token") {
    std::mt19937_64 rng(19);
    Tensor table = randn({6, 4}, rng);
    std::vector<int> ids = {2, 2, 5, 0};
    double err = fd_check(
        [&](Tape& t, std::vector<Tape::Value>& leaves) {
            auto lt = t.leaf(&table, true);
            leaves = {lt};
            return t.mean_all(t.gelu(t.gather_rows(lt, ids)));
        },
        {&table});
    CHECK(err <= 1e-6);

    // untouched rows get exactly zero gradient
    Tape t;
    auto lt = t.leaf(&table, true);
    t.backward(t.mean_all(t.gather_rows(lt, ids)));
    const Tensor& g = t.grad(lt);
    for (int c = 0; c < 4; ++c) {
        CHECK(g.at(1, c) == 0.0);
        CHECK(g.at(3, c) == 0.0);
        CHECK(g.at(4, c) == 0.0);
    }
    CHECK(t.grad(lt).at(2, 0) != 0.0);
}

TEST_CASE("slice, concat, reshape, gather_elems, dot_const, add_rowvec gradients") {
    std::mt19937_64 rng(20);
    Tensor x = randn({3, 8}, rng);
    Tensor v = randn({8}, rng);
    double err = fd_check(
        [&](Tape& t, std::vector<Tape::Value>& leaves) {
            auto lx = t.leaf(&x, true);
            auto lv = t.leaf(&v, true);
            leaves = {lx, lv};
            auto biased = t.add_rowvec(lx, lv);
            auto left = t.slice_cols(biased, 0, 4);
            auto right = t.slice_cols(biased, 4, 4);
            auto swapped = t.concat_cols({right, left});
            auto flat = t.reshape(swapped, {24});
            auto picked = t.gather_elems(flat, {0, 5, 23, 7});
            return t.dot_const(picked, {0.5, -1.5, 2.0, 0.25});
        },
        {&x, &v});
    CHECK(err <= 1e-6);
}

TEST_CASE("log softmax gradient matches finite differences") {
    std::mt19937_64 rng(21);
    Tensor x = randn({9}, rng, 1.5);
    double err = fd_check(
        [&](Tape& t, std::vector<Tape::Value>& leaves) {
            auto lx = t.leaf(&x, true);
            leaves = {lx};
            return t.dot_const(t.log_softmax(lx), {1, -2, 0.5, 0, 3, -1, 0.25, 2, -0.75});
        },
        {&x});
    CHECK(err <= 1e-6);
}

TEST_CASE("grad_check on a linear function is exact to 1e-10") {
    std::mt19937_64 rng(22);
    Tensor x = randn({12}, rng);
    double err = fd_check(
        [&](Tape& t, std::vector<Tape::Value>& leaves) {
            auto lx = t.leaf(&x, true);
            leaves = {lx};
            return t.dot_const(lx, {3, -1, 2, 0.5, 1, 1, -2, 4, 0, 1, -1, 0.25});
        },
        {&x});
    CHECK(err <= 1e-10);
}

TEST_CASE("backward of a sum equals the sum of backwards") {
    std::mt19937_64 rng(23);
    Tensor x = randn({4, 5}, rng);
    Tensor w = randn({5, 3}, rng);

    auto grads_of = [&](int which) {  // 0: L1, 1: L2, 2: L1+L2
        Tape t;
        auto lx = t.leaf(&x, true);
        auto lw = t.leaf(&w, true);
        auto h = t.matmul(lx, lw);
        auto l1 = t.mean_all(t.gelu(h));
        auto l2 = t.mean_all(t.cross_entropy_rows(h, {0, 2, 1, 2}).losses);
        Tape::Value root = which == 0 ? l1 : which == 1 ? l2 : t.add(l1, l2);
        t.backward(root);
        std::vector<double> out = t.grad(lx).data;
        out.insert(out.end(), t.grad(lw).data.begin(), t.grad(lw).data.end());
        return out;
    };

    auto g1 = grads_of(0), g2 = grads_of(1), gsum = grads_of(2);
    for (std::size_t i = 0; i < gsum.size(); ++i)
        CHECK(gsum[i] == doctest::Approx(g1[i] + g2[i]).epsilon(1e-12));
}

TEST_CASE("forward+backward is bitwise deterministic") {
    std::mt19937_64 rng(24);
    Tensor x = randn({5, 6}, rng);
    Tensor w = randn({6, 6}, rng);
    auto run = [&]() {
        Tape t;
        auto lx = t.leaf(&x, true);
        auto lw = t.leaf(&w, true);
        auto loss = t.mean_all(t.cross_entropy_rows(t.gelu(t.matmul(lx, lw)), {0, 1, 2, 3, 4}).losses);
        t.backward(loss);
        std::vector<double> out = {t.value(loss).data[0]};
        out.insert(out.end(), t.grad(lx).data.begin(), t.grad(lx).data.end());
        out.insert(out.end(), t.grad(lw).data.begin(), t.grad(lw).data.end());
        return out;
    };
    CHECK(run() == run());
}

TEST_CASE("backward with zero seed produces exactly zero gradients") {
    std::mt19937_64 rng(25);
    Tensor x = randn({3, 4}, rng);
    Tape t;
    auto lx = t.leaf(&x, true);
    t.backward(t.mean_all(t.gelu(lx)), 0.0);
    for (double v : t.grad(lx).data) CHECK(v == 0.0);
}

TEST_CASE("mul_mask applies the mask in forward and backward") {
    std::mt19937_64 rng(26);
    Tensor x = randn({2, 3}, rng);
    Tensor mask({2, 3}, {1, 0, 2, 0, 1, 0});
    Tape t;
    auto lx = t.leaf(&x, true);
    auto y = t.mul_mask(lx, mask);
    t.backward(t.sum_all(y));
    CHECK(t.grad(lx).data == mask.data);
    CHECK(t.value(y).at(0, 1) == 0.0);
}
