#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "splatocc/gradsuite.hpp"
#include "splatocc/ops.hpp"
#include "splatocc/rng.hpp"
#include "splatocc/tensor.hpp"

using namespace splatocc;

TEST_CASE("softmax basics") {
    Tensor x = Tensor::vec({0, 0});
    Tensor y = softmax(x, 0);
    CHECK(y[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(y[1] == doctest::Approx(0.5).epsilon(1e-12));

    x = Tensor::vec({1, 0});
    y = softmax(x, 0);
    CHECK(y[0] == doctest::Approx(0.7310585786300049).epsilon(1e-9));
    CHECK(y[1] == doctest::Approx(0.2689414213699951).epsilon(1e-9));

    // Huge temperature flattens the distribution.
    x = Tensor::vec({5, -5});
    y = softmax(x, 0, real(1e6));
    CHECK(std::abs(y[0] - real(0.5)) < 1e-5);
    CHECK(std::abs(y[1] - real(0.5)) < 1e-5);
}

TEST_CASE("softmax shift invariance and row sums") {
    Rng rng(7);
    Tensor x = randn_tensor(rng, {4, 6}, real(3));
    Tensor y0 = softmax(x, 1, real(0.7));
    Tensor xs = x;
    for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t c = 0; c < 6; ++c) xs.at(r, c) += real(11.25);
    Tensor y1 = softmax(xs, 1, real(0.7));
    CHECK(max_abs_diff(y0, y1) <= 1e-12);

    for (std::size_t r = 0; r < 4; ++r) {
        real sum = 0;
        for (std::size_t c = 0; c < 6; ++c) sum += y0.at(r, c);
        CHECK(std::abs(sum - real(1)) <= 1e-12);
    }
}

TEST_CASE("softmax rejects bad inputs") {
    Tensor x = Tensor::vec({1, 2});
    CHECK_THROWS_AS(softmax(x, 0, real(0)), validation_error);
    CHECK_THROWS_AS(softmax(x, 0, real(-1)), validation_error);
    x[0] = std::numeric_limits<real>::quiet_NaN();
    CHECK_THROWS_AS(softmax(x, 0), numeric_error);
}

TEST_CASE("layer_norm examples") {
    Tensor gain = Tensor::vec({1, 1, 1});
    Tensor bias = Tensor::vec({0, 0, 0});

    Tensor y = layer_norm(Tensor::vec({1, 1, 1}), gain, bias, real(1e-5));
    for (std::size_t i = 0; i < 3; ++i) CHECK(y[i] == doctest::Approx(0.0));

    Tensor g2 = Tensor::vec({1, 1});
    Tensor b2 = Tensor::vec({0, 0});
    y = layer_norm(Tensor::vec({-3.5, 3.5}), g2, b2, real(1e-14));
    CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-6));

    y = layer_norm(Tensor::vec({1, 2, 3}), gain, bias, real(0));
    CHECK(y[0] == doctest::Approx(-1.224744871391589).epsilon(1e-9));
    CHECK(y[1] == doctest::Approx(0.0));
    CHECK(y[2] == doctest::Approx(1.224744871391589).epsilon(1e-9));
}

TEST_CASE("attention degenerate cases") {
    // Single key/value: output equals V for any query.
    Tensor q({1, 3}, {0.3, -2.0, 5.0});
    Tensor k({1, 3}, {1.0, 1.0, 1.0});
    Tensor v({1, 2}, {4.0, -7.0});
    Tensor y = scaled_dot_attention(q, k, v);
    CHECK(y.at(0, 0) == doctest::Approx(4.0));
    CHECK(y.at(0, 1) == doctest::Approx(-7.0));

    // Orthogonal queries + identical values -> that value.
    Tensor q2({1, 2}, {1.0, 0.0});
    Tensor k2({2, 2}, {0.0, 1.0, 0.0, -1.0});
    Tensor v2({2, 2}, {2.5, -1.5, 2.5, -1.5});
    y = scaled_dot_attention(q2, k2, v2);
    CHECK(y.at(0, 0) == doctest::Approx(2.5).epsilon(1e-12));
    CHECK(y.at(0, 1) == doctest::Approx(-1.5).epsilon(1e-12));
}

TEST_CASE("attention near-saturated weights") {
    Tensor q({1, 2}, {10.0, 0.0});
    Tensor k({2, 2}, {10.0, 0.0, 0.0, 10.0});
    Tensor v({2, 2}, {1.0, 0.0, 0.0, 1.0});
    Tensor weights;
    Tensor y = scaled_dot_attention(q, k, v, &weights);
    const real w = std::exp(real(-100) / std::sqrt(real(2))) /
                   (real(1) + std::exp(real(-100) / std::sqrt(real(2))));
    CHECK(std::abs(y.at(0, 0) - (real(1) - w)) < 1e-20);
    CHECK(std::abs(y.at(0, 1) - w) < 1e-20);

    real sum = weights.at(0, 0) + weights.at(0, 1);
    CHECK(std::abs(sum - real(1)) <= 1e-12);
}

TEST_CASE("attention weight rows sum to one") {
    Rng rng(11);
    Tensor q = randn_tensor(rng, {6, 4});
    Tensor k = randn_tensor(rng, {9, 4});
    Tensor v = randn_tensor(rng, {9, 3});
    Tensor weights;
    scaled_dot_attention(q, k, v, &weights);
    for (std::size_t i = 0; i < 6; ++i) {
        real sum = 0;
        for (std::size_t j = 0; j < 9; ++j) sum += weights.at(i, j);
        CHECK(std::abs(sum - real(1)) <= 1e-12);
    }
}

TEST_CASE("cosine similarity examples") {
    Tensor a = Tensor::vec({2, -1, 3});
    CHECK(cosine_similarity(a, a)[0] == doctest::Approx(1.0).epsilon(1e-12));

    Tensor b = Tensor::vec({1, 0});
    Tensor c = Tensor::vec({0, 1});
    CHECK(cosine_similarity(b, c)[0] == doctest::Approx(0.0));

    Tensor d = Tensor::vec({1, 1});
    CHECK(cosine_similarity(d, b)[0] == doctest::Approx(0.7071067811865475).epsilon(1e-9));
}

TEST_CASE("cosine similarity scale invariance") {
    Rng rng(13);
    for (int t = 0; t < 10; ++t) {
        Tensor a = randn_tensor(rng, {5});
        a[0] += a[0] >= 0 ? real(1) : real(-1);  // keep away from zero
        const real lambda = real(0.01) + real(10) * rng.uniform();
        Tensor b = a;
        b *= lambda;
        CHECK(std::abs(cosine_similarity(a, b)[0] - real(1)) <= 1e-12);
    }
}

TEST_CASE("finite differences on closed forms") {
    Tensor x = Tensor::vec({3, 4});
    Tensor g = finite_difference_gradient(
        [](const Tensor& t) { return real(0.5) * dot(t, t); }, x);
    CHECK(g[0] == doctest::Approx(3.0).epsilon(1e-8));
    CHECK(g[1] == doctest::Approx(4.0).epsilon(1e-8));

    g = finite_difference_gradient(
        [](const Tensor& t) {
            real s = 0;
            for (std::size_t i = 0; i < t.size(); ++i) s += t[i];
            return s;
        },
        x);
    CHECK(g[0] == doctest::Approx(1.0).epsilon(1e-8));
    CHECK(g[1] == doctest::Approx(1.0).epsilon(1e-8));

    Tensor x2 = Tensor::vec({2, 5});
    g = finite_difference_gradient([](const Tensor& t) { return t[0] * t[1]; }, x2);
    CHECK(g[0] == doctest::Approx(5.0).epsilon(1e-8));
    CHECK(g[1] == doctest::Approx(2.0).epsilon(1e-8));
}

TEST_CASE("hand gradients match finite differences") {
    auto checks = gradcheck_core(20);
    for (const auto& c : checks) {
        INFO(c.name, " max_err=", c.max_err, " tol=", c.tol);
        CHECK(c.pass);
    }
}
