#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <functional>

#include "doctest.h"
#include "gqkva/rng.hpp"
#include "gqkva/tape.hpp"

using namespace gqkva;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape), DType::F64);
    for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.uniform(lo, hi));
    return t;
}

double weighted_sum(const Tensor& t, const Tensor& weights) {
    double acc = 0.0;
    for (int64_t i = 0; i < t.numel(); ++i) acc += t.get(i) * weights.get(i);
    return acc;
}

// Checks d(sum(out * probe))/d(input_i) against central differences for a
// graph with one differentiated input.
void check_grad(const std::function<Tape::Id(Tape&, Tape::Id)>& build, const Tensor& x,
                Rng& rng, double tol = 1e-6) {
    Tape tape;
    Tape::Id xid = tape.leaf(x, true);
    Tape::Id out = build(tape, xid);
    Tensor probe = random_tensor(tape.value(out).shape(), rng);
    tape.backward(out, probe);
    Tensor analytic = tape.grad(xid);

    Tensor numeric = finite_diff_grad(
        [&](const Tensor& probe_x) {
            Tape t2;
            Tape::Id id = t2.leaf(probe_x, false);
            return weighted_sum(t2.value(build(t2, id)), probe);
        },
        x, 1e-5);
    CHECK(max_rel_error(analytic, numeric) <= tol);
}

}  // namespace

TEST_CASE("finite_diff_grad on known functions") {
    Rng rng(1);
    Tensor x = random_tensor({3, 4}, rng);

    Tensor ones = finite_diff_grad(
        [](const Tensor& t) {
            double s = 0.0;
            for (int64_t i = 0; i < t.numel(); ++i) s += t.get(i);
            return s;
        },
        x, 1e-5);
    for (int64_t i = 0; i < ones.numel(); ++i) CHECK(ones.get(i) == doctest::Approx(1.0));

    Tensor quad = finite_diff_grad(
        [](const Tensor& t) {
            double s = 0.0;
            for (int64_t i = 0; i < t.numel(); ++i) s += 0.5 * t.get(i) * t.get(i);
            return s;
        },
        x, 1e-5);
    for (int64_t i = 0; i < quad.numel(); ++i) {
        CHECK(std::fabs(quad.get(i) - x.get(i)) < 1e-9);
    }

    // softmax rows sum to a constant, so the summed output has zero gradient
    Tensor zero = finite_diff_grad(
        [](const Tensor& t) {
            Tensor y = ops::softmax_lastdim(t);
            double s = 0.0;
            for (int64_t i = 0; i < y.numel(); ++i) s += y.get(i);
            return s;
        },
        x, 1e-5);
    for (int64_t i = 0; i < zero.numel(); ++i) CHECK(std::fabs(zero.get(i)) < 1e-6);

    CHECK_THROWS_AS(finite_diff_grad([](const Tensor&) { return 0.0; }, x, 0.0), ConfigError);
}

TEST_CASE("matmul backward closed forms") {
    Rng rng(2);
    Tensor a = random_tensor({3, 3}, rng);
    Tensor b = random_tensor({3, 3}, rng);
    Tensor eye = Tensor::zeros({3, 3}, DType::F64);
    for (int64_t i = 0; i < 3; ++i) eye.set(i * 3 + i, 1.0);

    auto [da, db] = adjoint::matmul(eye, a, b);
    CHECK(da.same_bytes(ops::transpose_last2(b)));
    CHECK(db.same_bytes(ops::transpose_last2(a)));
}

TEST_CASE("reshape backward restores the upstream layout") {
    Rng rng(3);
    Tensor x = random_tensor({2, 6}, rng);
    Tape tape;
    Tape::Id xid = tape.leaf(x, true);
    Tape::Id out = tape.reshape(xid, {3, 4});
    Tensor g = random_tensor({3, 4}, rng);
    tape.backward(out, g);
    CHECK(tape.grad(xid).same_bytes(g.reshaped({2, 6})));
}

TEST_CASE("every op's backward matches finite differences over 10 seeds") {
    for (uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed * 1000 + 17);
        const int64_t m = 2 + rng.uniform_int(7);  // extents <= 8
        const int64_t k = 2 + rng.uniform_int(7);
        const int64_t n = 2 + rng.uniform_int(7);

        {
            Tensor b = random_tensor({k, n}, rng);
            check_grad([&](Tape& t, Tape::Id x) { return t.matmul(x, t.leaf(b)); },
                       random_tensor({m, k}, rng), rng);
            check_grad([&](Tape& t, Tape::Id x) { return t.matmul(t.leaf(b), x); },
                       random_tensor({n, m}, rng), rng);
        }
        {
            Tensor batched = random_tensor({2, m, k}, rng);
            check_grad([&](Tape& t, Tape::Id x) { return t.matmul(t.leaf(batched), x); },
                       random_tensor({k, n}, rng), rng);
            Tensor batched_b = random_tensor({2, k, n}, rng);
            check_grad([&](Tape& t, Tape::Id x) { return t.matmul(x, t.leaf(batched_b)); },
                       random_tensor({m, k}, rng), rng);
        }
        check_grad([](Tape& t, Tape::Id x) { return t.softmax_lastdim(x); },
                   random_tensor({m, k}, rng), rng);
        {
            Tensor gamma = random_tensor({k}, rng);
            Tensor beta = random_tensor({k}, rng);
            check_grad(
                [&](Tape& t, Tape::Id x) {
                    return t.layernorm(x, t.leaf(gamma), t.leaf(beta), 1e-5);
                },
                random_tensor({m, k}, rng), rng);
            // and through the affine inputs
            Tensor x = random_tensor({m, k}, rng);
            check_grad(
                [&](Tape& t, Tape::Id g) {
                    return t.layernorm(t.leaf(x), g, t.leaf(beta), 1e-5);
                },
                gamma, rng);
            check_grad(
                [&](Tape& t, Tape::Id b) {
                    return t.layernorm(t.leaf(x), t.leaf(gamma), b, 1e-5);
                },
                beta, rng);
        }
        check_grad([](Tape& t, Tape::Id x) { return t.gelu(x); }, random_tensor({m, k}, rng),
                   rng);
        check_grad([](Tape& t, Tape::Id x) { return t.scale(x, -1.75); },
                   random_tensor({m, k}, rng), rng);
        {
            Tensor b = random_tensor({k}, rng);
            check_grad([&](Tape& t, Tape::Id x) { return t.add(x, t.leaf(b)); },
                       random_tensor({m, k}, rng), rng);
            Tensor a = random_tensor({2, m, k}, rng);
            check_grad([&](Tape& t, Tape::Id x) { return t.add(t.leaf(a), x); },
                       random_tensor({m, k}, rng), rng);
        }
        check_grad([](Tape& t, Tape::Id x) { return t.transpose_last2(x); },
                   random_tensor({m, k}, rng), rng);
        check_grad([&](Tape& t, Tape::Id x) { return t.reshape(x, {k, m}); },
                   random_tensor({m, k}, rng), rng);
        check_grad([&](Tape& t, Tape::Id x) { return t.slice(x, 1, 1, k - 1); },
                   random_tensor({m, k}, rng), rng);
        {
            Tensor other = random_tensor({m, k}, rng);
            check_grad(
                [&](Tape& t, Tape::Id x) {
                    return t.concat({x, t.leaf(other), x}, 0);
                },
                random_tensor({m, k}, rng), rng);
        }
        check_grad([&](Tape& t, Tape::Id x) { return t.broadcast_to(x, {m, 3, k}); },
                   random_tensor({m, 1, k}, rng), rng);
        check_grad([](Tape& t, Tape::Id x) { return t.permute(x, {1, 0}); },
                   random_tensor({m, k}, rng), rng);
    }
}

TEST_CASE("backward composes through a small chain") {
    Rng rng(77);
    Tensor w = random_tensor({4, 3}, rng);
    Tensor gamma = Tensor::full({3}, 1.0, DType::F64);
    Tensor beta = Tensor::zeros({3}, DType::F64);
    check_grad(
        [&](Tape& t, Tape::Id x) {
            Tape::Id proj = t.matmul(x, t.leaf(w));
            Tape::Id normed = t.layernorm(proj, t.leaf(gamma), t.leaf(beta), 1e-5);
            return t.softmax_lastdim(t.gelu(normed));
        },
        random_tensor({5, 4}, rng), rng);
}

TEST_CASE("backward validates upstream shape and accumulates over reuse") {
    Rng rng(88);
    Tensor x = random_tensor({2, 2}, rng);
    Tape tape;
    Tape::Id xid = tape.leaf(x, true);
    Tape::Id doubled = tape.add(xid, xid);  // same node used twice
    Tensor g = Tensor::full({2, 2}, 1.0, DType::F64);
    tape.backward(doubled, g);
    for (int64_t i = 0; i < 4; ++i) CHECK(tape.grad(xid).get(i) == doctest::Approx(2.0));

    CHECK_THROWS_AS(tape.backward(doubled, Tensor::zeros({3, 2}, DType::F64)), DimensionError);
}

TEST_CASE("GradPair ties a value to its gradient") {
    Rng rng(99);
    Tensor x = random_tensor({2, 3}, rng);
    Tape tape;
    Tape::Id xid = tape.leaf(x, true);
    Tape::Id out = tape.scale(xid, 2.0);
    tape.backward(out, Tensor::full({2, 3}, 1.0, DType::F64));
    GradPair pair = tape.value_and_grad(xid);
    CHECK(pair.value.shape() == pair.grad.shape());
    for (int64_t i = 0; i < 6; ++i) CHECK(pair.grad.get(i) == doctest::Approx(2.0));
}
