#include "doctest.h"

#include <cmath>
#include <random>

#include "lpsr/losses.hpp"
#include "lpsr/nn.hpp"
#include "lpsr/trainer.hpp"
#include "support/gradcheck.hpp"

using namespace lpsr;
using lpsr::testing::finite_difference_check;
using lpsr::testing::Probe;

namespace {

Tensor<double> uniform(Shape shape, std::mt19937_64& rng, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor<double> t(std::move(shape));
    for (Index i = 0; i < t.size(); ++i) t[i] = u(rng);
    return t;
}

Tensor<double> random_softmax(Index n, Index k, std::mt19937_64& rng) {
    auto t = uniform({n, k}, rng, -3.0, 3.0);
    for (Index r = 0; r < n; ++r) {
        double z = 0;
        for (Index c = 0; c < k; ++c) z += std::exp(t[r * k + c]);
        for (Index c = 0; c < k; ++c) t[r * k + c] = std::exp(t[r * k + c]) / z;
    }
    return t;
}

double clamp_p(double p) { return std::min(std::max(p, kProbClamp), 1.0 - kProbClamp); }

// Gradient of a scalar tape loss w.r.t. its tensor inputs against central differences.
double input_gradcheck(std::vector<Tensor<double>> inputs,
                       const std::function<Var<double>(std::vector<Var<double>>&)>& f) {
    std::vector<Tensor<double>> grads;
    {
        Tape<double> tape;
        std::vector<Var<double>> vars;
        for (auto& t : inputs) vars.push_back(tape.variable(t));
        tape.backward(f(vars));
        for (auto& v : vars) grads.push_back(tape.grad(v));
    }
    std::vector<Probe> probes;
    for (std::size_t i = 0; i < inputs.size(); ++i) probes.push_back({"in" + std::to_string(i), &inputs[i], &grads[i]});
    auto result = finite_difference_check(
        [&] {
            Tape<double> tape(false);
            std::vector<Var<double>> vars;
            for (auto& t : inputs) vars.push_back(tape.constant(t));
            return f(vars).value()[0];
        },
        probes);
    INFO(result.worst);
    return result.max_rel_error;
}

}  // namespace

TEST_CASE("pixel MSE examples") {
    Tensor<double> hr({2, 4, 4, 3}, 0.0), half({2, 4, 4, 3}, 0.5);
    CHECK(pixel_mse_loss(hr, hr, hr) == 0.0);
    CHECK(pixel_mse_loss(half, half, hr) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK_THROWS_AS(pixel_mse_loss(half, half, Tensor<double>({2, 4, 4, 1})), ShapeError);
}

TEST_CASE("pixel MSE matches an elementwise oracle") {
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 100; ++trial) {
        const Index n = 1 + trial % 3;
        auto a = uniform({n, 4, 4, 1}, rng), b = uniform({n, 4, 4, 1}, rng), h = uniform({n, 4, 4, 1}, rng);
        double oracle = 0;
        for (Index s = 0; s < n; ++s) {
            double ea = 0, eb = 0;
            for (Index p = 0; p < 16; ++p) {
                const Index i = s * 16 + p;
                ea += (a[i] - h[i]) * (a[i] - h[i]);
                eb += (b[i] - h[i]) * (b[i] - h[i]);
            }
            oracle += ea / 16 + eb / 16;
        }
        oracle /= static_cast<double>(n);
        CHECK(std::abs(pixel_mse_loss(a, b, h) - oracle) < 1e-9);
        Tape<double> tape(false);
        CHECK(std::abs(pixel_mse_loss(tape.constant(a), tape.constant(b), tape.constant(h)).value()[0] - oracle) <
              1e-9);
    }
}

TEST_CASE("adversarial loss examples") {
    Tensor<double> half({3, 1}, 0.5);
    CHECK(adversarial_loss_d(half, half) == doctest::Approx(2 * std::log(2.0)).epsilon(1e-12));
    Tensor<double> zero({3, 1}, 0.0), one({3, 1}, 1.0);
    CHECK(adversarial_loss_d(zero, one) < 1e-6);
    Tensor<double> g({2, 1});
    g[0] = 0.2;
    g[1] = 0.8;
    CHECK(adversarial_loss_g(g) == doctest::Approx(-(std::log(0.2) + std::log(0.8)) / 2).epsilon(1e-12));
    CHECK(adversarial_loss_g(g) == doctest::Approx(0.9163).epsilon(1e-4));
    Tensor<double> bad({1, 1}, 1.5);
    CHECK_THROWS_AS(adversarial_loss_g(bad), DomainError);
    CHECK_THROWS_AS(adversarial_loss_d(half, Tensor<double>({3, 1}, -0.1)), DomainError);
}

TEST_CASE("adversarial losses match a direct oracle") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 100; ++trial) {
        const Index n = 1 + trial % 5;
        auto sr = uniform({n, 1}, rng), hr = uniform({n, 1}, rng);
        if (trial % 10 == 0) sr[0] = 0.0;  // exercises the clamp
        double od = 0, og = 0;
        for (Index i = 0; i < n; ++i) {
            od -= std::log(clamp_p(hr[i])) + std::log(1 - clamp_p(sr[i]));
            og -= std::log(clamp_p(sr[i]));
        }
        od /= static_cast<double>(n);
        og /= static_cast<double>(n);
        CHECK(std::abs(adversarial_loss_d(sr, hr) - od) < 1e-9);
        CHECK(std::abs(adversarial_loss_g(sr) - og) < 1e-9);
        Tape<double> tape(false);
        CHECK(std::abs(adversarial_loss_d(tape.constant(sr), tape.constant(hr)).value()[0] - od) < 1e-9);
        CHECK(std::abs(adversarial_loss_g(tape.constant(sr)).value()[0] - og) < 1e-9);
    }
}

TEST_CASE("reconstruction loss examples and oracle") {
    Tensor<double> a({1, 4, 4, 3}, 0.25), b({1, 4, 4, 3}, 0.75);
    CHECK(reconstruction_loss(a, a) == 0.0);
    CHECK(reconstruction_loss(a, b) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK_THROWS_AS(reconstruction_loss(a, Tensor<double>({1, 4, 2, 3})), ShapeError);
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 100; ++trial) {
        const Index n = 1 + trial % 4;
        auto x = uniform({n, 4, 4, 1}, rng), y = uniform({n, 4, 4, 1}, rng);
        double oracle = 0;
        for (Index i = 0; i < x.size(); ++i) oracle += std::abs(x[i] - y[i]);
        oracle /= static_cast<double>(x.size());
        CHECK(std::abs(reconstruction_loss(x, y) - oracle) < 1e-9);
        Tape<double> tape(false);
        CHECK(std::abs(reconstruction_loss(tape.constant(x), tape.constant(y)).value()[0] - oracle) < 1e-9);
        CHECK(reconstruction_loss(x, y) == doctest::Approx(reconstruction_loss(y, x)).epsilon(1e-15));
    }
}

TEST_CASE("classification loss examples and oracle") {
    const std::vector<int> counts{4, 8, 6};
    Tensor<double> onehot({3, 5}, 0.0);
    onehot[0 * 5 + 0] = 1;
    onehot[1 * 5 + 4] = 1;
    onehot[2 * 5 + 2] = 1;
    CHECK(classification_loss(onehot, onehot, counts, 4) < 1e-6);
    Tensor<double> flat({3, 5}, 0.2);
    CHECK(classification_loss(flat, flat, counts, 4) == doctest::Approx(2 * std::log(5.0)).epsilon(1e-12));
    CHECK(classification_loss(flat, flat, counts, 4) == doctest::Approx(3.2189).epsilon(1e-4));
    const std::vector<int> bad{4, 9, 6};
    CHECK_THROWS_AS(classification_loss(flat, flat, bad, 4), DomainError);
    const std::vector<int> low{3, 5, 6};
    CHECK_THROWS_AS(count_cross_entropy(flat, low, 4), DomainError);
    CHECK_THROWS_AS(count_class(9, 4, 5), DomainError);
    CHECK(count_class(7, 4, 5) == 3);

    std::mt19937_64 rng(4);
    std::uniform_int_distribution<int> pick(4, 8);
    for (int trial = 0; trial < 100; ++trial) {
        const Index n = 1 + trial % 6;
        auto p = random_softmax(n, 5, rng), q = random_softmax(n, 5, rng);
        std::vector<int> c(static_cast<std::size_t>(n));
        for (auto& x : c) x = pick(rng);
        double oracle = 0;
        for (Index i = 0; i < n; ++i) {
            const Index k = c[static_cast<std::size_t>(i)] - 4;
            oracle -= std::log(clamp_p(p[i * 5 + k])) + std::log(clamp_p(q[i * 5 + k]));
        }
        oracle /= static_cast<double>(n);
        CHECK(std::abs(classification_loss(p, q, c, 4) - oracle) < 1e-9);
        Tape<double> tape(false);
        const double via_tape = count_cross_entropy(tape.constant(p), c, 4).value()[0] +
                                count_cross_entropy(tape.constant(q), c, 4).value()[0];
        CHECK(std::abs(via_tape - oracle) < 1e-9);
    }
}

TEST_CASE("total objectives and weights") {
    CHECK(total_objectives({}, {}).total_g == 0.0);
    CHECK(total_objectives({}, {}).total_d == 0.0);
    LossTerms unit{1, 1, 1, 1, 1, 1};
    const auto b = total_objectives(unit, {});
    CHECK(b.total_g == 4.0);
    CHECK(b.total_d == 3.0);
    CHECK(b.l_clc == 2.0);

    LossWeights w;
    w.adv = 0;
    const auto wo_adv = total_objectives(unit, w);
    CHECK(wo_adv.total_g == 3.0);
    CHECK(wo_adv.total_d == 3.0);
    w = {};
    w.clc = 0.5;
    CHECK(total_objectives(unit, w).total_g == 3.5);
    CHECK(total_objectives(unit, w).total_d == 2.0);
    w = {};
    w.mse = -1;
    CHECK_THROWS_AS(total_objectives(unit, w), ConfigError);
    CHECK_THROWS_AS(w.validate(), ConfigError);
}

TEST_CASE("each ablation zeroes exactly one weight") {
    const TrainConfig base;
    for (const std::string term : {"mse", "adv", "const", "clc"}) {
        const auto c = ablate(base, term);
        const std::array<double, 4> w{c.weights.mse, c.weights.adv, c.weights.constant, c.weights.clc};
        CHECK(std::count(w.begin(), w.end(), 0.0) == 1);
        CHECK(c.run_label() == "wo_" + term);
    }
    CHECK_THROWS_AS(ablate(base, "nope"), ConfigError);
}

TEST_CASE("loss gradients match finite differences") {
    std::mt19937_64 rng(5);
    auto a = uniform({2, 3, 4, 2}, rng), b = uniform({2, 3, 4, 2}, rng), h = uniform({2, 3, 4, 2}, rng);
    CHECK(input_gradcheck({a, b, h}, [](auto& v) { return pixel_mse_loss(v[0], v[1], v[2]); }) < 1e-4);
    CHECK(input_gradcheck({a, b}, [](auto& v) { return reconstruction_loss(v[0], v[1]); }) < 1e-4);
    auto ps = uniform({4, 1}, rng, 0.05, 0.95), ph = uniform({4, 1}, rng, 0.05, 0.95);
    CHECK(input_gradcheck({ps, ph}, [](auto& v) { return adversarial_loss_d(v[0], v[1]); }) < 1e-4);
    CHECK(input_gradcheck({ps}, [](auto& v) { return adversarial_loss_g(v[0]); }) < 1e-4);
    auto f = random_softmax(4, 5, rng);
    const std::vector<int> counts{4, 5, 7, 8};
    CHECK(input_gradcheck({f}, [&](auto& v) { return count_cross_entropy(v[0], counts, 4); }) < 1e-4);
}

TEST_CASE("optimal discriminator formula") {
    ToyDistribution r{{0, 1, 2, 3, 4}, {0.1, 0.2, 0.3, 0.25, 0.15}};
    for (const auto& v : optimal_discriminator(r, r)) CHECK(*v == 0.5);
    ToyDistribution a{{0, 1}, {0.75, 0.25}}, b{{0, 1}, {0.25, 0.75}};
    const auto d = optimal_discriminator(a, b);
    CHECK(*d[0] == 0.75);
    CHECK(*d[1] == 0.25);
    ToyDistribution c{{0, 1, 2}, {0.5, 0.5, 0.0}}, e{{0, 1, 2}, {0.5, 0.5, 0.0}};
    CHECK_FALSE(optimal_discriminator(c, e)[2].has_value());
    CHECK_THROWS_AS((ToyDistribution{{0, 1}, {0.5, 0.6}}.validate()), DomainError);
    CHECK_THROWS_AS(optimal_discriminator(a, ToyDistribution{{0, 2}, {0.5, 0.5}}), DomainError);
}

TEST_CASE("discriminator loss is minimised at the optimal ratio") {
    // For fixed p_real, p_fake the pointwise loss -(r log D + f log(1 - D)) is
    // minimised at D = r / (r + f); compare against a fine grid search.
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.01, 1.0);
    for (int trial = 0; trial < 100; ++trial) {
        const double r = u(rng), f = u(rng);
        double best = 0, best_loss = 1e300;
        for (int i = 1; i < 100000; ++i) {
            const double dv = i / 100000.0;
            const double l = -(r * std::log(dv) + f * std::log(1 - dv));
            if (l < best_loss) best_loss = l, best = dv;
        }
        CHECK(std::abs(best - r / (r + f)) < 2e-5);
    }
}

TEST_CASE("a trained toy discriminator reaches the optimal ratio") {
    // Probabilities in multiples of 1/20 so that replicated batches realise the
    // expectations of the value function exactly.
    const ToyDistribution real{{-2, -1, 0, 1, 2}, {0.05, 0.10, 0.20, 0.30, 0.35}};
    const ToyDistribution fake{{-2, -1, 0, 1, 2}, {0.40, 0.25, 0.20, 0.10, 0.05}};
    auto replicate = [](const ToyDistribution& d) {
        std::vector<double> xs;
        for (std::size_t i = 0; i < d.support.size(); ++i)
            for (int k = 0; k < static_cast<int>(std::lround(d.probabilities[i] * 20)); ++k) xs.push_back(d.support[i]);
        Tensor<double> t({static_cast<Index>(xs.size()), 1});
        for (std::size_t i = 0; i < xs.size(); ++i) t[static_cast<Index>(i)] = xs[i];
        return t;
    };
    const auto xr = replicate(real), xf = replicate(fake);
    REQUIRE(xr.size() == 20);
    REQUIRE(xf.size() == 20);

    nn::Rng rng(7);
    ParamSet<double> ps;
    nn::add_linear<double>(ps, "fc0", 1, 16, 1.0, rng);
    nn::add_linear<double>(ps, "fc1", 16, 1, 0.5, rng);
    auto net = [&](Tape<double>& tape, const Tensor<double>& x) {
        Var<double> h = tanh(nn::dense(tape, ps, "fc0", tape.constant(x)));
        return sigmoid(nn::dense(tape, ps, "fc1", h));
    };
    AdamState<double> adam;
    for (int step = 0; step < 3000; ++step) {
        ps.zero_grad();
        Tape<double> tape;
        tape.backward(adversarial_loss_d(net(tape, xf), net(tape, xr)));
        adam_update(ps.trainable(), adam, 1e-2, 0.9, 0.999, 1e-8);
    }
    const auto target = optimal_discriminator(real, fake);
    Tensor<double> support({5, 1});
    for (Index i = 0; i < 5; ++i) support[i] = real.support[static_cast<std::size_t>(i)];
    Tape<double> tape(false);
    const auto d = net(tape, support).value();
    for (Index i = 0; i < 5; ++i) {
        INFO("x = " << support[i] << " D = " << d[i] << " D* = " << *target[static_cast<std::size_t>(i)]);
        CHECK(std::abs(d[i] - *target[static_cast<std::size_t>(i)]) < 0.05);
    }
}
