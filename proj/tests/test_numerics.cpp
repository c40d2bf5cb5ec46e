#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>

#include "loramix/errors.hpp"
#include "loramix/grad_check.hpp"
#include "loramix/tensor.hpp"
#include "oracles.hpp"

using namespace loramix;

TEST_CASE("matmul identity and scalar cases") {
    std::mt19937_64 rng(1);
    Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor m = oracle::random_tensor({3, 3}, rng);
    Tensor out = matmul(eye, m);
    for (std::size_t i = 0; i < 9; ++i) CHECK(out[i] == m[i]);
    CHECK(matmul(Tensor({1, 1}, {2}), Tensor({1, 1}, {3})).item() == 6.0);
}

TEST_CASE("matmul and linear match the triple loop") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor a = oracle::random_tensor({5, 4}, rng);
        Tensor b = oracle::random_tensor({4, 3}, rng);
        CHECK(oracle::max_abs_diff(oracle::matmul(oracle::to_mat(a), oracle::to_mat(b)), matmul(a, b)) < 1e-12);
        Tensor w = oracle::random_tensor({3, 4}, rng);
        Tensor bias = oracle::random_tensor({3}, rng);
        auto ref = oracle::matmul(oracle::to_mat(a), oracle::transpose(oracle::to_mat(w)));
        for (std::size_t i = 0; i < 5; ++i)
            for (std::size_t j = 0; j < 3; ++j) ref[i][j] += bias[j];
        CHECK(oracle::max_abs_diff(ref, linear(a, w, bias)) < 1e-12);
    }
}

TEST_CASE("shape errors are dimension errors") {
    CHECK_THROWS_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
    CHECK_THROWS_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
    CHECK_THROWS_AS(linear(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})), DimensionError);
    CHECK_THROWS_AS(reshape(Tensor::zeros({2, 3}), {4}), DimensionError);
    CHECK_THROWS_AS(Tensor({2, 2}, {1, 2, 3}), DimensionError);
}

TEST_CASE("softmax") {
    Tensor u = softmax(Tensor({1, 4}, {0, 0, 0, 0}));
    for (std::size_t i = 0; i < 4; ++i) CHECK(u[i] == doctest::Approx(0.25).epsilon(1e-15));
    Tensor sat = softmax(Tensor({1, 2}, {1000.0, 0.0}));
    CHECK(sat[0] == 1.0);
    CHECK(sat[1] == doctest::Approx(0.0));
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor z = oracle::random_tensor({3, 6}, rng, 3.0);
        Tensor p = softmax(z);
        auto zm = oracle::to_mat(z);
        for (std::size_t r = 0; r < 3; ++r) {
            auto ref = oracle::softmax(zm[r]);
            for (std::size_t c = 0; c < 6; ++c) CHECK(std::fabs(static_cast<double>(ref[c]) - p.at(r, c)) < 1e-15);
        }
    }
}

TEST_CASE("cross entropy") {
    std::vector<int> labels{0, 3, 2};
    CHECK(cross_entropy(Tensor::zeros({3, 4}), labels).item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
    Tensor confident({1, 2}, {20.0, 0.0});
    std::vector<int> zero{0};
    CHECK(cross_entropy(confident, zero).item() <= 1e-6);
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor z = oracle::random_tensor({5, 3}, rng, 2.0);
        std::vector<int> y{0, 2, 1, 1, 0};
        CHECK(std::fabs(static_cast<double>(oracle::cross_entropy(oracle::to_mat(z), y)) - cross_entropy(z, y).item()) <
              1e-10);
    }
    std::vector<int> bad{0, 5, 1};
    CHECK_THROWS_AS(cross_entropy(Tensor::zeros({3, 4}), bad), LabelError);
}

TEST_CASE("row entropy and layer norm against loops") {
    std::mt19937_64 rng(5);
    Tensor p = softmax(oracle::random_tensor({4, 5}, rng));
    Tensor h = row_entropy(p);
    auto pm = oracle::to_mat(p);
    for (std::size_t r = 0; r < 4; ++r) CHECK(std::fabs(static_cast<double>(oracle::entropy(pm[r])) - h[r]) < 1e-14);
    CHECK(row_entropy(Tensor({1, 3}, {1, 0, 0}))[0] == 0.0);

    Tensor x = oracle::random_tensor({3, 6}, rng, 2.0);
    Tensor y = layer_norm(x);
    for (std::size_t r = 0; r < 3; ++r) {
        long double mu = 0, var = 0;
        for (std::size_t c = 0; c < 6; ++c) mu += x.at(r, c);
        mu /= 6;
        for (std::size_t c = 0; c < 6; ++c) var += (x.at(r, c) - mu) * (x.at(r, c) - mu);
        var /= 6;
        for (std::size_t c = 0; c < 6; ++c)
            CHECK(std::fabs(static_cast<double>((x.at(r, c) - mu) / std::sqrt(var + 1e-5L)) - y.at(r, c)) < 1e-13);
    }
}

TEST_CASE("attention matches a per-head loop") {
    std::mt19937_64 rng(6);
    const std::size_t B = 2, L = 3, D = 4, H = 2, hd = D / H;
    Tensor q = oracle::random_tensor({B * L, D}, rng), k = oracle::random_tensor({B * L, D}, rng),
           v = oracle::random_tensor({B * L, D}, rng);
    Tensor out = multi_head_attention(q, k, v, B, L, H);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; ++h)
            for (std::size_t i = 0; i < L; ++i) {
                std::vector<long double> s(L);
                for (std::size_t j = 0; j < L; ++j) {
                    long double acc = 0;
                    for (std::size_t c = 0; c < hd; ++c) acc += q.at(b * L + i, h * hd + c) * k.at(b * L + j, h * hd + c);
                    s[j] = acc / std::sqrt(static_cast<long double>(hd));
                }
                auto w = oracle::softmax(s);
                for (std::size_t c = 0; c < hd; ++c) {
                    long double acc = 0;
                    for (std::size_t j = 0; j < L; ++j) acc += w[j] * v.at(b * L + j, h * hd + c);
                    CHECK(std::fabs(static_cast<double>(acc) - out.at(b * L + i, h * hd + c)) < 1e-13);
                }
            }
}

TEST_CASE("dropout scaling and determinism") {
    std::mt19937_64 r1(9), r2(9);
    Tensor x = Tensor::full({10, 10}, 1.0);
    Tensor a = dropout(x, 0.25, r1), b = dropout(x, 0.25, r2);
    std::size_t kept = 0;
    for (std::size_t i = 0; i < 100; ++i) {
        CHECK(a[i] == b[i]);
        CHECK((a[i] == 0.0 || a[i] == doctest::Approx(1.0 / 0.75)));
        kept += a[i] != 0.0;
    }
    CHECK(kept > 50);
    std::mt19937_64 r3(1);
    Tensor same = dropout(x, 0.0, r3);
    CHECK(same.node() == x.node());
    CHECK_THROWS_AS(dropout(x, 1.0, r3), ConfigError);
}

TEST_CASE("non-finite results are evaluation errors") {
    Tensor big({1}, {std::numeric_limits<double>::max()});
    CHECK_THROWS_AS(scale(big, 10.0), EvaluationError);
    CHECK_THROWS_AS(normalize_rows(Tensor({1, 2}, {0.0, 0.0})), EvaluationError);
}

TEST_CASE("reverse mode: simple functions") {
    Tensor x({2}, {1.0, 2.0}, true);
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(x.grad()[1] == doctest::Approx(4.0).epsilon(1e-12));

    std::mt19937_64 rng(10);
    Tensor y = oracle::random_tensor({3, 3}, rng, 1.0, true);
    auto r = grad_check([](const std::vector<Tensor> &in) { return sum(in[0]); }, {y});
    CHECK(r.max_rel_error < 1e-8);
    backward(sum(y));
    for (double g : y.grad()) CHECK(g == 1.0);
}

TEST_CASE("reverse mode: shared subexpressions accumulate") {
    Tensor x({1}, {3.0}, true);
    Tensor y = mul(x, x);
    backward(sum(add(y, y)));  // 2x^2
    CHECK(x.grad()[0] == doctest::Approx(12.0));
}

TEST_CASE("graph is consumed once and needs a scalar root") {
    Tensor x({2}, {1.0, 2.0}, true);
    Tensor loss = sum(mul(x, x));
    Graph g(loss);
    CHECK(g.size() >= 2);
    auto seq = g.sequence();
    CHECK(std::is_sorted(seq.begin(), seq.end()));
    g.backward();
    CHECK_THROWS_AS(g.backward(), EvaluationError);
    CHECK_THROWS_AS(backward(mul(x, x)), DimensionError);
}

TEST_CASE("no-grad guard disables recording") {
    Tensor x({2}, {1.0, 2.0}, true);
    {
        NoGradGuard guard;
        CHECK_FALSE(grad_enabled());
        Tensor y = mul(x, x);
        CHECK_FALSE(y.requires_grad());
    }
    CHECK(grad_enabled());
    CHECK(mul(x, x).requires_grad());
}

TEST_CASE("gradient check over composite random functions") {
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor a = oracle::random_tensor({4, 3}, rng, 1.0, true);
        Tensor w = oracle::random_tensor({2, 3}, rng, 1.0, true);
        std::vector<int> labels{0, 1, 1, 0};
        auto f = [&](const std::vector<Tensor> &in) {
            return cross_entropy(linear(relu(layer_norm(in[0])), in[1]), labels);
        };
        CHECK(grad_check(f, {a, w}).max_rel_error < 1e-6);
    }
}

TEST_CASE("grad_check limits the probed coordinates") {
    std::mt19937_64 rng(12);
    Tensor a = oracle::random_tensor({10, 10}, rng, 1.0, true);
    GradCheckOptions o;
    o.max_coords_per_input = 7;
    auto r = grad_check([](const std::vector<Tensor> &in) { return sum(mul(in[0], in[0])); }, {a}, o);
    CHECK(r.coords_checked == 7);
    CHECK(r.max_rel_error < 1e-8);
}
