#include <doctest.h>

#include <cmath>
#include <random>

#include "amalgam/tensor.hpp"

using namespace amalgam;

namespace {

std::vector<double> naive_conv(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
    const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t co = w.dim(0), k = w.dim(2);
    const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
    std::vector<double> out(n * co * oh * ow, 0.0);
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < co; ++o)
            for (std::size_t y = 0; y < oh; ++y)
                for (std::size_t xx = 0; xx < ow; ++xx) {
                    double acc = 0.0;
                    for (std::size_t c = 0; c < ci; ++c)
                        for (std::size_t ky = 0; ky < k; ++ky)
                            for (std::size_t kx = 0; kx < k; ++kx) {
                                const long iy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
                                const long ix = static_cast<long>(xx * stride + kx) - static_cast<long>(pad);
                                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                                acc += x[((b * ci + c) * h + iy) * wd + ix] * w[((o * ci + c) * k + ky) * k + kx];
                            }
                    out[((b * co + o) * oh + y) * ow + xx] = acc;
                }
    return out;
}

double max_abs_diff(std::span<const double> a, std::span<const double> b) {
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("conv2d identity kernel and all-ones window") {
    std::mt19937_64 rng(1);
    Tensor x = Tensor::uniform({1, 1, 4, 5}, -1, 1, rng);
    Tensor y = conv2d(x, Tensor::ones({1, 1, 1, 1}), 1, 0);
    CHECK(y.shape() == x.shape());
    CHECK(max_abs_diff(y.data(), x.data()) == 0.0);

    Tensor s = conv2d(Tensor::ones({1, 1, 3, 3}), Tensor::ones({1, 1, 3, 3}), 1, 0);
    CHECK(s.shape() == Shape{1, 1, 1, 1});
    CHECK(s.item() == 9.0);
}

TEST_CASE("conv2d matches quadruple-loop oracle") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 rng(seed);
        Tensor x = Tensor::uniform({2, 3, 5, 5}, -1, 1, rng);
        Tensor w = Tensor::uniform({4, 3, 3, 3}, -1, 1, rng);
        for (std::size_t stride : {1u, 2u}) {
            for (std::size_t pad : {0u, 1u}) {
                Tensor y = conv2d(x, w, stride, pad);
                CHECK(max_abs_diff(y.data(), naive_conv(x, w, stride, pad)) < 1e-12);
            }
        }
    }
}

TEST_CASE("conv2d errors") {
    CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), 1, 0), Error);
    try {
        conv2d(Tensor::zeros({1, 1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), 1, 0);
        FAIL("expected geometry error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::geometry);
    }
}

TEST_CASE("elementwise ops") {
    Tensor r = relu(Tensor({3}, {-1.0, 0.0, 2.0}));
    CHECK(std::vector<double>(r.data().begin(), r.data().end()) == std::vector<double>{0.0, 0.0, 2.0});

    std::mt19937_64 rng(7);
    Tensor a = Tensor::uniform({3, 4}, -2, 2, rng), b = Tensor::uniform({3, 4}, -2, 2, rng);
    Tensor z = add(a, Tensor::zeros({3, 4}));
    CHECK(max_abs_diff(z.data(), a.data()) == 0.0);
    Tensor m = mul(a, b);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(m[i] == a[i] * b[i]);
    Tensor d = elementwise(ElementwiseKind::sub, a, &b);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(d[i] == a[i] - b[i]);
    CHECK_THROWS_AS(add(a, Tensor::zeros({4, 3})), Error);
}

TEST_CASE("linear") {
    Tensor y = linear(Tensor({1, 2}, {1, 2}), Tensor({2, 2}, {1, 0, 0, 1}), Tensor({2}, {3, 4}));
    CHECK(y.shape() == Shape{1, 2});
    CHECK(y[0] == 4.0);
    CHECK(y[1] == 6.0);

    std::mt19937_64 rng(3);
    Tensor x = Tensor::uniform({4, 8}, -1, 1, rng), w = Tensor::uniform({8, 3}, -1, 1, rng), b = Tensor::uniform({3}, -1, 1, rng);
    Tensor out = linear(x, w, b);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            double acc = b[j];
            for (std::size_t k = 0; k < 8; ++k) acc += x[i * 8 + k] * w[k * 3 + j];
            CHECK(std::abs(out[i * 3 + j] - acc) < 1e-12);
        }
    CHECK_THROWS_AS(linear(x, Tensor::zeros({7, 3}), b), Error);
}

TEST_CASE("reductions") {
    CHECK(mean(Tensor({2}, {2.0, 4.0})).item() == 3.0);
    CHECK(sum(Tensor::zeros({3, 2})).item() == 0.0);
    std::mt19937_64 rng(11);
    Tensor x = Tensor::uniform({2, 3, 4}, -1, 1, rng);
    CHECK(std::abs(mean(x).item() - sum(x).item() / 24.0) < 1e-15);
    Tensor s = sum(x, {1});
    CHECK(s.shape() == Shape{2, 4});
    CHECK(std::abs(s[0] - (x[0] + x[4] + x[8])) < 1e-15);
    try {
        sum(x, {3});
        FAIL("expected axis error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::axis);
    }
}

TEST_CASE("softmax") {
    Tensor p = softmax(Tensor({1, 2}, {0.0, 0.0}));
    CHECK(p[0] == 0.5);
    CHECK(p[1] == 0.5);
    Tensor big = softmax(Tensor({1, 2}, {1000.0, 0.0}));
    CHECK(std::isfinite(big[0]));
    CHECK(big[0] == doctest::Approx(1.0));
    CHECK(big[1] < 1e-300);

    std::mt19937_64 rng(5);
    Tensor logits = Tensor::uniform({6, 5}, -4, 4, rng);
    Tensor q = softmax(logits);
    Tensor shifted = softmax(add(logits, Tensor::full({6, 5}, 3.25)));
    for (std::size_t r = 0; r < 6; ++r) {
        long double m = logits[r * 5], z = 0;
        for (std::size_t c = 0; c < 5; ++c) m = std::max<long double>(m, logits[r * 5 + c]);
        for (std::size_t c = 0; c < 5; ++c) z += std::exp(static_cast<long double>(logits[r * 5 + c]) - m);
        double total = 0.0;
        for (std::size_t c = 0; c < 5; ++c) {
            const auto oracle = static_cast<double>(std::exp(static_cast<long double>(logits[r * 5 + c]) - m) / z);
            CHECK(std::abs(q[r * 5 + c] - oracle) < 1e-12);
            CHECK(std::abs(q[r * 5 + c] - shifted[r * 5 + c]) < 1e-12);
            total += q[r * 5 + c];
        }
        CHECK(std::abs(total - 1.0) < 1e-12);
    }
    try {
        softmax(Tensor({2, 1}, {1.0, 2.0}));
        FAIL("expected arity error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::arity);
    }
}

TEST_CASE("backward basics") {
    Tensor x({3}, {1.0, -2.0, 3.0}, true);
    backward(sum(x));
    for (double g : x.grad()) CHECK(g == 1.0);
    x.zero_grad();
    backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == 2.0);
    CHECK(x.grad()[1] == -4.0);
    CHECK(x.grad()[2] == 6.0);

    Tensor unused({2}, {1.0, 1.0}, true);
    x.zero_grad();
    backward(sum(x));
    for (double g : unused.grad()) CHECK(g == 0.0);

    try {
        backward(mul(x, x));
        FAIL("expected arity error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::arity);
    }
    try {
        backward(Tensor::scalar(1.0));
        FAIL("expected tape error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::tape);
    }
}

TEST_CASE("tape is topologically ordered and visits nodes once") {
    Tensor x({2}, {1.0, 2.0}, true);
    Tensor y = mul(x, x);
    Tensor loss = sum(add(y, y));
    Tape tape = Tape::record(loss);
    CHECK(tape.size() == 3);
    CHECK(tape.op_names() == std::vector<std::string>{"mul", "add", "sum"});
    tape.backward(loss);
    CHECK(x.grad()[0] == 4.0);
    CHECK(x.grad()[1] == 8.0);
}

TEST_CASE("composite graph matches finite differences") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::mt19937_64 rng(seed);
        Tensor x = Tensor::uniform({2, 2, 5, 5}, -1, 1, rng, true);
        Tensor w = Tensor::uniform({3, 2, 3, 3}, -1, 1, rng, true);
        Tensor lw = Tensor::uniform({3, 2}, -1, 1, rng, true);
        Tensor lb = Tensor::uniform({2}, -1, 1, rng, true);
        auto loss = [&] { return mean(linear(mean(relu(conv2d(x, w, 1, 1)), {2, 3}), lw, lb)); };
        CHECK(check_gradients(loss, {x, w, lw, lb}).max_relative_error < 1e-6);
    }
}

TEST_CASE("sgd momentum") {
    Tensor p = Tensor::scalar(1.0, true);
    SgdMomentum frozen({p}, 0.0, 0.9);
    p.mutable_grad()[0] = 0.5;
    frozen.step();
    CHECK(p.item() == 1.0);

    SgdMomentum plain({p}, 0.1, 0.0);
    p.mutable_grad()[0] = 0.5;
    plain.step();
    CHECK(p.item() == doctest::Approx(0.95).epsilon(1e-15));
    CHECK(p.grad()[0] == 0.0);

    Tensor q = Tensor::scalar(0.0, true);
    SgdMomentum opt({q}, 0.1, 0.9);
    q.mutable_grad()[0] = 1.0;
    opt.step();
    CHECK(q.item() == doctest::Approx(-0.1).epsilon(1e-15));
    q.mutable_grad()[0] = 1.0;
    opt.step();
    CHECK(q.item() == doctest::Approx(-0.29).epsilon(1e-14));

    Tensor bare = Tensor::scalar(0.0);
    SgdMomentum broken({bare}, 0.1, 0.9);
    try {
        broken.step();
        FAIL("expected optimizer-state error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::optimizer_state);
    }
}

TEST_CASE("gradient clipping") {
    Tensor a({2}, {0.0, 0.0}, true);
    a.mutable_grad()[0] = 3.0;
    a.mutable_grad()[1] = 4.0;
    CHECK(clip_grad_norm(std::vector<Tensor>{a}, 1.0) == 5.0);
    CHECK(a.grad()[0] == doctest::Approx(0.6));
    CHECK(a.grad()[1] == doctest::Approx(0.8));
    CHECK(clip_grad_norm(std::vector<Tensor>{a}, 0.0) == doctest::Approx(1.0));
    CHECK(a.grad()[0] == doctest::Approx(0.6));
}

TEST_CASE("finite differences") {
    std::vector<Tensor> p{Tensor::scalar(3.0)};
    auto g = finite_diff_grad([&] { return p[0].item() * p[0].item(); }, p, 1e-5);
    CHECK(std::abs(g[0][0] - 6.0) < 1e-8);
    CHECK(p[0].item() == 3.0);
    auto c = finite_diff_grad([] { return 4.0; }, p, 1e-5);
    CHECK(c[0][0] == 0.0);
}

TEST_CASE("ops are deterministic") {
    std::mt19937_64 r1(9), r2(9);
    Tensor a = Tensor::uniform({2, 3, 6, 6}, -1, 1, r1), b = Tensor::uniform({2, 3, 6, 6}, -1, 1, r2);
    std::mt19937_64 rw(4);
    Tensor w = Tensor::uniform({5, 3, 3, 3}, -1, 1, rw);
    Tensor y1 = conv2d(a, w, 2, 1), y2 = conv2d(b, w, 2, 1);
    CHECK(max_abs_diff(y1.data(), y2.data()) == 0.0);
}
