#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "pctgan/autograd.hpp"

using namespace pctgan;
using ag::Tensor;
using D = Tensor<double>;

namespace {

std::vector<double> to_vec(const D& t) { return {t.data().begin(), t.data().end()}; }

D leaf(ag::Shape shape, std::vector<double> data) {
    return D::from_data(std::move(shape), std::move(data), true);
}

}  // namespace

TEST_CASE("conv2d constant field") {
    auto x = D::full({1, 1, 4, 4}, 1.0);
    auto w = D::full({1, 1, 2, 2}, 1.0);
    auto y = ag::conv2d_nobias(x, w, {2, 2}, {0, 0});
    CHECK(y.shape() == ag::Shape{1, 1, 2, 2});
    for (auto v : y.data()) CHECK(v == doctest::Approx(4.0));
}

TEST_CASE("conv2d geometry 64 -> 32 with k4 s2 p1") {
    auto x = D::zeros({2, 3, 64, 64});
    auto w = D::zeros({5, 3, 4, 4});
    auto y = ag::conv2d_nobias(x, w, {2, 2}, {1, 1});
    CHECK(y.shape() == ag::Shape{2, 5, 32, 32});
}

TEST_CASE("conv2d matches direct summation oracle") {
    Rng rng(11);
    std::vector<double> xd(1 * 2 * 5 * 5), wd(3 * 2 * 3 * 3);
    for (auto& v : xd) v = rng.normal();
    for (auto& v : wd) v = rng.normal();
    auto y = ag::conv2d_nobias(D::from_data({1, 2, 5, 5}, xd), D::from_data({3, 2, 3, 3}, wd), {1, 1}, {1, 1});
    auto ref = oracle::conv2d_direct(xd, 1, 2, 5, 5, wd, 3, 3, 3, 1, 1, 1, 1);
    REQUIRE(y.numel() == static_cast<std::int64_t>(ref.size()));
    for (std::size_t i = 0; i < ref.size(); ++i)
        CHECK(oracle::rel_err(y.data()[i], ref[i]) <= 1e-6);
}

TEST_CASE("conv2d shape errors name the offending dimension") {
    auto x = D::zeros({1, 3, 8, 8});
    auto w = D::zeros({4, 2, 3, 3});
    CHECK_THROWS_WITH_AS(ag::conv2d_nobias(x, w, {1, 1}, {0, 0}),
                         doctest::Contains("in-channels"), Error);
    auto wbig = D::zeros({4, 3, 9, 9});
    CHECK_THROWS_AS(ag::conv2d_nobias(x, wbig, {1, 1}, {0, 0}), Error);
}

TEST_CASE("conv_transpose2d single tap spread") {
    const double v = 1.75;
    auto x = D::full({1, 1, 1, 1}, v);
    std::vector<double> wd{0.5, -1.0, 2.0, 0.25};
    auto w = D::from_data({1, 1, 2, 2}, wd);
    auto y = ag::conv_transpose2d(x, w, D(), {1, 1}, {0, 0});
    CHECK(y.shape() == ag::Shape{1, 1, 2, 2});
    for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(v * wd[i]));
}

TEST_CASE("conv_transpose2d geometry 32 -> 64") {
    auto x = D::zeros({1, 8, 32, 32});
    auto w = D::zeros({8, 5, 4, 4});
    auto y = ag::conv_transpose2d(x, w, D(), {2, 2}, {1, 1});
    CHECK(y.shape() == ag::Shape{1, 5, 64, 64});
}

TEST_CASE("conv adjoint identity") {
    Rng rng(7);
    auto x = D::randn({2, 3, 9, 9}, rng);
    auto w = D::randn({4, 3, 4, 4}, rng);
    auto cx = ag::conv2d_nobias(x, w, {2, 2}, {1, 1});
    auto y = D::randn(cx.shape(), rng);
    // <conv(x), y> == <x, convT(y)> with convT = conv2d_input_grad
    auto xty = ag::conv2d_input_grad(y, w, {2, 2}, {1, 1}, 9, 9);
    double lhs = 0.0, rhs = 0.0;
    for (std::int64_t i = 0; i < cx.numel(); ++i) lhs += cx.data()[i] * y.data()[i];
    for (std::int64_t i = 0; i < x.numel(); ++i) rhs += x.data()[i] * xty.data()[i];
    CHECK(oracle::rel_err(lhs, rhs) <= 1e-5);
}

TEST_CASE("activation values") {
    auto x = D::from_data({3}, {-1.0, 0.0, 2.0});
    auto y = ag::leaky_relu(x, 0.2);
    CHECK(y.data()[0] == doctest::Approx(-0.2));
    CHECK(y.data()[1] == doctest::Approx(0.0));
    CHECK(y.data()[2] == doctest::Approx(2.0));
    CHECK(ag::tanh(D::scalar(0.0)).item() == doctest::Approx(0.0));
    CHECK(ag::sigmoid(D::scalar(0.0)).item() == doctest::Approx(0.5));
    CHECK_THROWS_AS(ag::leaky_relu(x, 1.5), Error);
}

TEST_CASE("activation gradients match finite differences") {
    Rng rng(3);
    std::vector<double> x0(16);
    for (auto& v : x0) v = rng.normal() + 0.05;  // keep away from the leaky kink

    auto run = [&](auto&& act) {
        auto f = [&](const std::vector<double>& p) {
            ag::NoGradGuard ng;
            auto x = D::from_data({16}, p);
            return ag::sum_all(ag::square(act(x))).item();
        };
        auto x = leaf({16}, x0);
        auto loss = ag::sum_all(ag::square(act(x)));
        ag::backward(loss);
        auto fd = oracle::fd_gradient(f, x0, 1e-5);
        CHECK(oracle::agreement_fraction(to_vec(x.grad()), fd, 1e-6) == doctest::Approx(1.0));
    };
    run([](const D& t) { return ag::leaky_relu(t, 0.2); });
    run([](const D& t) { return ag::tanh(t); });
    run([](const D& t) { return ag::sigmoid(t); });
}

TEST_CASE("backward of sum of squares is 2x") {
    Rng rng(5);
    std::vector<double> x0(10);
    for (auto& v : x0) v = rng.normal();
    auto x = leaf({10}, x0);
    bool warned = ag::backward(ag::sum_all(ag::square(x)));
    CHECK_FALSE(warned);
    for (int i = 0; i < 10; ++i) CHECK(x.grad().data()[i] == doctest::Approx(2.0 * x0[i]));
}

TEST_CASE("backward of a constant loss warns and leaves no gradient") {
    auto x = leaf({4}, {1, 2, 3, 4});
    auto loss = D::scalar(3.0);
    CHECK(ag::backward(loss));
    CHECK_FALSE(x.grad().defined());
}

TEST_CASE("backward rejects non-scalar loss") {
    auto x = leaf({4}, {1, 2, 3, 4});
    CHECK_THROWS_AS(ag::backward(ag::square(x)), Error);
}

TEST_CASE("repeated backward accumulates into grad") {
    auto x = leaf({2}, {1.0, -2.0});
    ag::backward(ag::sum_all(x));
    ag::backward(ag::sum_all(x));
    CHECK(x.grad().data()[0] == doctest::Approx(2.0));
    CHECK(x.grad().data()[1] == doctest::Approx(2.0));
}

TEST_CASE("composite conv -> leaky_relu -> linear matches finite differences") {
    Rng rng(17);
    const ag::Shape xs{2, 2, 6, 6};
    const ag::Shape ws{3, 2, 3, 3};
    const std::int64_t feat = 3 * 3 * 3;
    std::vector<double> x0(2 * 2 * 6 * 6), w0(3 * 2 * 3 * 3), b0(3), lw0(feat), lb0{0.1};
    for (auto& v : x0) v = rng.normal();
    for (auto& v : w0) v = rng.normal(0.0, 0.5);
    for (auto& v : b0) v = rng.normal(0.0, 0.1);
    for (auto& v : lw0) v = rng.normal(0.0, 0.3);

    auto forward = [&](const D& x, const D& w, const D& b, const D& lw, const D& lb) {
        auto h = ag::leaky_relu(ag::conv2d(x, w, b, {2, 2}, {1, 1}), 0.2);
        auto flat = ag::reshape(h, {2, feat});
        auto out = ag::linear(flat, ag::reshape(lw, {1, feat}), lb);
        return ag::mean_all(ag::square(out));
    };

    // pack all parameters into one flat vector for the FD oracle
    auto eval_packed = [&](const std::vector<double>& p) {
        ag::NoGradGuard ng;
        std::size_t o = 0;
        auto take = [&](ag::Shape s, std::size_t n) {
            std::vector<double> d(p.begin() + o, p.begin() + o + n);
            o += n;
            return D::from_data(std::move(s), std::move(d));
        };
        auto x = take(xs, x0.size());
        auto w = take(ws, w0.size());
        auto b = take({3}, 3);
        auto lw = take({static_cast<std::int64_t>(feat)}, lw0.size());
        auto lb = take({1}, 1);
        return forward(x, w, b, lw, lb).item();
    };

    std::vector<double> packed;
    for (auto* src : {&x0, &w0, &b0, &lw0, &lb0})
        packed.insert(packed.end(), src->begin(), src->end());

    auto x = leaf(xs, x0);
    auto w = leaf(ws, w0);
    auto b = leaf({3}, b0);
    auto lw = leaf({static_cast<std::int64_t>(feat)}, lw0);
    auto lb = leaf({1}, lb0);
    ag::backward(forward(x, w, b, lw, lb));

    std::vector<double> analytic;
    for (auto* t : {&x, &w, &b, &lw, &lb}) {
        auto g = to_vec(t->grad());
        analytic.insert(analytic.end(), g.begin(), g.end());
    }
    auto fd = oracle::fd_gradient(eval_packed, packed, 1e-4);
    CHECK(oracle::agreement_fraction(analytic, fd, 1e-5) >= 0.99);
}

TEST_CASE("input_gradient_norm: linear scorer") {
    Rng rng(23);
    const std::int64_t batch = 3, n = 8;
    std::vector<double> w0(n);
    for (auto& v : w0) v = rng.normal();
    auto w = leaf({n}, w0);
    auto x_hat = leaf({batch, n}, [&] {
        std::vector<double> d(batch * n);
        for (auto& v : d) v = rng.normal();
        return d;
    }());

    auto scorer = [&](const D& x) {
        return ag::reshape(ag::sum_to(ag::mul(x, ag::reshape(w, {1, n})), {batch, 1}), ag::Shape{batch});
    };
    auto norms = ag::input_gradient_norm(scorer, x_hat);
    double wn = 0.0;
    for (auto v : w0) wn += v * v;
    wn = std::sqrt(wn);
    REQUIRE(norms.numel() == batch);
    for (std::int64_t i = 0; i < batch; ++i) CHECK(norms.data()[i] == doctest::Approx(wn).epsilon(1e-10));

    // penalty gradient: d/dw mean(lambda*(||w|| - 1)^2) = 2*lambda*(||w||-1) * w/||w||
    const double lam = 10.0;
    auto pen = ag::scale(ag::mean_all(ag::square(ag::add_scalar(norms, -1.0))), lam);
    ag::backward(pen);
    for (std::int64_t i = 0; i < n; ++i) {
        const double expect = 2.0 * lam * (wn - 1.0) * w0[i] / wn;
        CHECK(w.grad().data()[i] == doctest::Approx(expect).epsilon(1e-8));
    }
}

TEST_CASE("input_gradient_norm: quadratic scorer gives ||x||") {
    Rng rng(29);
    const std::int64_t batch = 4, n = 6;
    std::vector<double> xd(batch * n);
    for (auto& v : xd) v = rng.normal();
    auto x_hat = leaf({batch, n}, xd);
    auto scorer = [&](const D& x) {
        return ag::reshape(ag::scale(ag::sum_to(ag::square(x), {batch, 1}), 0.5), ag::Shape{batch});
    };
    auto norms = ag::input_gradient_norm(scorer, x_hat);
    for (std::int64_t b = 0; b < batch; ++b) {
        double nn = 0.0;
        for (std::int64_t i = 0; i < n; ++i) nn += xd[b * n + i] * xd[b * n + i];
        CHECK(norms.data()[b] == doctest::Approx(std::sqrt(nn)).epsilon(1e-10));
    }
}

TEST_CASE("input_gradient_norm: two-layer perceptron penalty matches finite differences") {
    Rng rng(31);
    const std::int64_t batch = 2, in = 5, hidden = 4;
    std::vector<double> x0(batch * in), w1v(hidden * in), b1v(hidden), w2v(hidden);
    for (auto& v : x0) v = rng.normal();
    for (auto& v : w1v) v = rng.normal(0.0, 0.6);
    for (auto& v : b1v) v = rng.normal(0.0, 0.1);
    for (auto& v : w2v) v = rng.normal(0.0, 0.6);

    auto penalty = [&](const D& w1, const D& b1, const D& w2) {
        auto x_hat = leaf({batch, in}, x0);
        auto scorer = [&](const D& x) {
            auto h = ag::tanh(ag::linear(x, w1, b1));
            return ag::reshape(ag::sum_to(ag::mul(h, ag::reshape(w2, {1, hidden})), {batch, 1}),
                               ag::Shape{batch});
        };
        auto norms = ag::input_gradient_norm(scorer, x_hat);
        return ag::mean_all(ag::square(ag::add_scalar(norms, -1.0)));
    };

    auto eval_packed = [&](const std::vector<double>& p) {
        ag::NoGradGuard ng;
        std::size_t o = 0;
        auto take = [&](ag::Shape s, std::size_t n) {
            std::vector<double> d(p.begin() + o, p.begin() + o + n);
            o += n;
            return D::from_data(std::move(s), std::move(d));
        };
        auto w1 = take({hidden, in}, w1v.size());
        auto b1 = take({hidden}, b1v.size());
        auto w2 = take({hidden}, w2v.size());
        // the norm needs a live grad path through x_hat even under NoGrad
        ag::RecordingGuard rg(true);
        return penalty(w1, b1, w2).item();
    };

    std::vector<double> packed;
    for (auto* src : {&w1v, &b1v, &w2v}) packed.insert(packed.end(), src->begin(), src->end());

    auto w1 = leaf({hidden, in}, w1v);
    auto b1 = leaf({hidden}, b1v);
    auto w2 = leaf({hidden}, w2v);
    ag::backward(penalty(w1, b1, w2));

    std::vector<double> analytic;
    for (auto* t : {&w1, &b1, &w2}) {
        auto g = to_vec(t->grad());
        analytic.insert(analytic.end(), g.begin(), g.end());
    }
    auto fd = oracle::fd_gradient(eval_packed, packed, 1e-4);
    REQUIRE(analytic.size() == fd.size());
    for (std::size_t i = 0; i < fd.size(); ++i) CHECK(oracle::rel_err(analytic[i], fd[i]) <= 1e-4);
}

TEST_CASE("select/scatter channels round trip gradients") {
    Rng rng(41);
    auto x = leaf({2, 5, 3, 3}, [&] {
        std::vector<double> d(2 * 5 * 3 * 3);
        for (auto& v : d) v = rng.normal();
        return d;
    }());
    std::vector<std::int64_t> idx{0, 3, 4, 1};  // batch 0 picks {0,3}, batch 1 picks {4,1}
    auto sel = ag::select_channels(x, idx, 2);
    CHECK(sel.shape() == ag::Shape{2, 2, 3, 3});
    CHECK(sel.data()[0] == x.data()[0]);
    ag::backward(ag::sum_all(ag::square(sel)));
    // untouched channels receive zero gradient
    auto g = x.grad();
    for (std::int64_t c : {1, 2}) {
        for (std::int64_t i = 0; i < 9; ++i) CHECK(g.data()[(0 * 5 + c) * 9 + i] == 0.0);
    }
    for (std::int64_t c : {0, 2, 3}) {
        for (std::int64_t i = 0; i < 9; ++i) CHECK(g.data()[(1 * 5 + c) * 9 + i] == 0.0);
    }
}

TEST_CASE("determinism: identical seeds give bit-identical results") {
    auto run = [] {
        Rng rng(99);
        auto x = D::randn({2, 3, 8, 8}, rng, 1.0, true);
        auto w = D::randn({4, 3, 4, 4}, rng, 0.2, true);
        auto y = ag::conv2d_nobias(x, w, {2, 2}, {1, 1});
        ag::backward(ag::mean_all(ag::square(y)));
        std::vector<double> out = to_vec(y);
        auto g = to_vec(w.grad());
        out.insert(out.end(), g.begin(), g.end());
        return out;
    };
    auto a = run();
    auto b = run();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}
