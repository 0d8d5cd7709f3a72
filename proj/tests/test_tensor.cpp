#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <vector>

#include "capmod/adam.hpp"
#include "capmod/rng.hpp"
#include "capmod/tensor.hpp"

using capmod::Tensor;
using capmod::Tape;
using T = Tensor<double>;

namespace {

// Central-difference check of d(loss)/d(inputs) for an arbitrary graph.
// fn must rebuild the graph from the same inputs on every call.
double max_rel_err_fd(std::vector<T>& inputs,
                      const std::function<T(const std::vector<T>&)>& fn,
                      double h = 1e-5) {
    std::vector<std::vector<double>> analytic;
    {
        capmod::Tape<double> tape;
        T loss = fn(inputs);
        capmod::backward(loss);
        for (auto& in : inputs) {
            auto g = in.grad();
            analytic.emplace_back(g.begin(), g.end());
            in.zero_grad();
        }
    }
    double worst = 0.0;
    for (std::size_t pi = 0; pi < inputs.size(); ++pi) {
        auto vals = inputs[pi].value_mut();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            double keep = vals[i];
            vals[i] = keep + h;
            double fp = fn(inputs).item();
            vals[i] = keep - h;
            double fm = fn(inputs).item();
            vals[i] = keep;
            double fd = (fp - fm) / (2.0 * h);
            double a = analytic[pi][i];
            double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-6});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

}  // namespace

TEST_CASE("matmul forward matches hand results") {
    T id = T::matrix(2, 2, {1, 0, 0, 1});
    T x = T::matrix(2, 2, {3, -1, 2, 5});
    auto y = capmod::matmul(id, x);
    for (std::size_t i = 0; i < 4; ++i) CHECK(y.at(i) == x.at(i));

    // projector onto the first coordinate
    T proj = T::matrix(2, 2, {1, 0, 0, 0});
    T v = T::vector({4.0, 7.0});
    auto p = capmod::matmul(proj, v);
    CHECK(p.shape() == capmod::Shape{2});
    CHECK(p.at(0) == 4.0);
    CHECK(p.at(1) == 0.0);

    // row-vector times matrix
    T r = T::vector({1.0, 2.0});
    auto q = capmod::matmul(r, x);
    CHECK(q.at(0) == Catch::Approx(1 * 3 + 2 * 2));
    CHECK(q.at(1) == Catch::Approx(1 * -1 + 2 * 5));
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
    T a = T::matrix(2, 3, std::vector<double>(6, 1.0));
    T b = T::matrix(2, 2, std::vector<double>(4, 1.0));
    CHECK_THROWS_AS(capmod::matmul(a, b), capmod::ShapeError);
}

TEST_CASE("sigmoid at zero and its slope") {
    T x = T::vector({0.0});
    capmod::Tape<double> tape;
    auto y = capmod::sigmoid(x);
    CHECK(y.at(0) == Catch::Approx(0.5));
    auto loss = capmod::sum(y);
    capmod::backward(loss);
    CHECK(x.grad()[0] == Catch::Approx(0.25));
}

TEST_CASE("softmax matches scalar recomputation") {
    T x = T::vector({1.0, 2.0, 3.0});
    auto y = capmod::softmax(x);
    double denom = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(std::abs(y.at(i) - std::exp(1.0 + double(i)) / denom) < 1e-12);
    double s = y.at(0) + y.at(1) + y.at(2);
    CHECK(std::abs(s - 1.0) < 1e-12);
    CHECK_THROWS_AS(capmod::softmax(T::zeros({0})), capmod::ShapeError);
}

TEST_CASE("same tensor used twice accumulates gradient") {
    T x = T::vector({1.0, 2.0, 3.0});
    capmod::Tape<double> tape;
    auto loss = capmod::add(capmod::sum(x), capmod::sum(x));
    capmod::backward(loss);
    for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == Catch::Approx(2.0));
}

TEST_CASE("repeated backward accumulates into leaves") {
    T x = T::vector({2.0});
    capmod::Tape<double> tape;
    auto loss = capmod::sum(capmod::mul(x, x));
    capmod::backward(loss);
    CHECK(x.grad()[0] == Catch::Approx(4.0));
    capmod::backward(loss);
    CHECK(x.grad()[0] == Catch::Approx(8.0));
}

TEST_CASE("ops outside a tape record nothing") {
    T x = T::vector({1.0, -2.0});
    auto y = capmod::tanh(x);
    CHECK(y.storage()->node == -1);
    CHECK_THROWS_AS(capmod::backward(capmod::sum(y)), capmod::ContractError);
}

TEST_CASE("backward requires scalar loss") {
    T x = T::vector({1.0, 2.0});
    capmod::Tape<double> tape;
    auto y = capmod::tanh(x);
    CHECK_THROWS_AS(capmod::backward(y), capmod::ContractError);
}

TEST_CASE("log rejects non-positive input") {
    CHECK_THROWS_AS(capmod::log(T::vector({1.0, 0.0})), capmod::DomainError);
    CHECK_THROWS_AS(capmod::log(T::vector({-1.0})), capmod::DomainError);
}

TEST_CASE("broadcast add and mul over rows") {
    T m = T::matrix(2, 3, {1, 2, 3, 4, 5, 6});
    T v = T::vector({10, 20, 30});
    auto s = capmod::add(m, v);
    CHECK(s.at(0, 0) == 11);
    CHECK(s.at(1, 2) == 36);
    auto p = capmod::mul(v, m);  // vector-first order works the same
    CHECK(p.at(0, 0) == 10);
    CHECK(p.at(1, 1) == 100);
    CHECK_THROWS_AS(capmod::add(m, T::vector({1, 2})), capmod::ShapeError);
}

TEST_CASE("randomized finite-difference check over composite graphs") {
    capmod::SplitMix64 rng(20240817);
    int cases = 0;
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
        std::size_t m = 1 + rng.next_below(3);
        std::size_t k = 1 + rng.next_below(3);
        std::size_t n = 1 + rng.next_below(3);
        auto rand_vec = [&](std::size_t cnt) {
            std::vector<double> v(cnt);
            for (auto& x : v) x = rng.uniform(-1.5, 1.5);
            return v;
        };
        std::vector<T> inputs = {
            T::matrix(m, k, rand_vec(m * k)),
            T::matrix(k, n, rand_vec(k * n)),
            T::vector(rand_vec(n)),
            T::vector(rand_vec(m * n)),
        };
        int variant = rep % 5;
        auto fn = [variant, m, n](const std::vector<T>& in) -> T {
            auto prod = capmod::matmul(in[0], in[1]);     // (m,n)
            auto shifted = capmod::add(prod, in[2]);      // broadcast row
            T flat = capmod::reshape(shifted, {m * n});
            T mixed = capmod::mul(flat, in[3]);
            switch (variant) {
                case 0: return capmod::sum(capmod::tanh(mixed));
                case 1: return capmod::sum(capmod::sigmoid(mixed));
                case 2: return capmod::sum(capmod::softmax(mixed));
                case 3: return capmod::sum(capmod::relu(capmod::add(mixed, flat)));
                default: {
                    auto sm = capmod::softmax(mixed);
                    auto safe = capmod::add_const(sm, 1e-3);
                    return capmod::neg(capmod::sum(capmod::log(safe)));
                }
            }
        };
        double err = max_rel_err_fd(inputs, fn);
        worst = std::max(worst, err);
        ++cases;
    }
    INFO("worst relative error " << worst << " over " << cases << " cases");
    CHECK(cases >= 100);
    CHECK(worst < 1e-4);
}

TEST_CASE("structure ops: concat, slice, pick, take_row, mean_rows via FD") {
    capmod::SplitMix64 rng(77);
    std::vector<double> a(6), b(4);
    for (auto& x : a) x = rng.uniform(-1, 1);
    for (auto& x : b) x = rng.uniform(-1, 1);
    std::vector<T> inputs = {T::matrix(3, 2, a), T::vector(b)};
    auto fn = [](const std::vector<T>& in) -> T {
        auto row = capmod::take_row(in[0], 1);                      // (2)
        auto mr = capmod::mean_rows(in[0]);                         // (2)
        auto cat = capmod::concat<double>({row, mr, in[1]});        // (8)
        auto sl = capmod::slice(cat, 2, 5);                         // (5)
        auto sq = capmod::mul(sl, sl);
        auto one = capmod::pick(sq, 3);
        return capmod::add(capmod::sum(capmod::tanh(sq)), one);
    };
    CHECK(max_rel_err_fd(inputs, fn) < 1e-4);
}

TEST_CASE("scale and add_const differentiate as constants") {
    std::vector<T> inputs = {T::vector({0.3, -0.7, 1.1})};
    auto fn = [](const std::vector<T>& in) -> T {
        return capmod::sum(capmod::scale(capmod::add_const(in[0], 2.5), -3.0));
    };
    CHECK(max_rel_err_fd(inputs, fn) < 1e-4);
    capmod::Tape<double> tape;
    auto loss = fn(inputs);
    capmod::backward(loss);
    for (double g : inputs[0].grad()) CHECK(g == Catch::Approx(-3.0));
}

TEST_CASE("adam leaves parameters untouched without gradients") {
    T p = T::vector({1.0, -2.0});
    capmod::Adam<double> opt({p});
    opt.step(0.1);
    CHECK(p.at(0) == 1.0);
    CHECK(p.at(1) == -2.0);
}

TEST_CASE("adam first step moves by about lr against the gradient sign") {
    T p = T::vector({0.5});
    capmod::Adam<double> opt({p}, {.lr = 1e-2});
    p.grad_mut()[0] = 3.7;  // any positive gradient
    opt.step();
    // bias-corrected first step is lr * g / (|g| + eps) =~ lr
    CHECK(p.at(0) == Catch::Approx(0.5 - 1e-2).epsilon(1e-5));
    CHECK_FALSE(p.has_grad());  // grads consumed by the step
}

TEST_CASE("adam drives a quadratic to zero") {
    T p = T::vector({2.0, -3.0});
    capmod::Adam<double> opt({p}, {.lr = 5e-2});
    for (int it = 0; it < 1000; ++it) {
        capmod::Tape<double> tape;
        auto loss = capmod::sum(capmod::mul(p, p));
        capmod::backward(loss);
        opt.step();
    }
    CHECK(std::abs(p.at(0)) < 0.05);
    CHECK(std::abs(p.at(1)) < 0.05);
}

TEST_CASE("gradient clipping rescales to the requested global norm") {
    T a = T::vector({3.0});
    T b = T::vector({4.0});
    std::vector<T> params = {a, b};
    a.grad_mut()[0] = 3.0;
    b.grad_mut()[0] = 4.0;
    double before = capmod::clip_grad_norm(params, 5.0);
    CHECK(before == Catch::Approx(5.0));
    CHECK(a.grad()[0] == Catch::Approx(3.0));  // norm exactly at limit: untouched

    a.grad_mut()[0] = 30.0;
    b.grad_mut()[0] = 40.0;
    before = capmod::clip_grad_norm(params, 5.0);
    CHECK(before == Catch::Approx(50.0));
    CHECK(a.grad()[0] == Catch::Approx(3.0));
    CHECK(b.grad()[0] == Catch::Approx(4.0));
}

TEST_CASE("splitmix64 streams are deterministic and label-separated") {
    capmod::SplitMix64 a(42), b(42);
    for (int i = 0; i < 16; ++i) CHECK(a.next_u64() == b.next_u64());
    auto s1 = capmod::substream(42, "dropout");
    auto s2 = capmod::substream(42, "init");
    CHECK(s1.next_u64() != s2.next_u64());
    capmod::SplitMix64 u(7);
    for (int i = 0; i < 1000; ++i) {
        double d = u.next_double();
        CHECK(d >= 0.0);
        CHECK(d < 1.0);
    }
}
