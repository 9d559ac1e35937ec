#include "doctest.h"
#include "gradcheck.hpp"

#include <cmath>

#include "unidiff/conditioning.hpp"

using namespace unidiff;

TEST_CASE("modality codes and names") {
    CHECK(modality_code(Modality::PRGB) == 0);
    CHECK(modality_code(Modality::PCA) == 1);
    CHECK(modality_code(Modality::SAR) == 2);
    CHECK(parse_modality("prgb") == Modality::PRGB);
    CHECK(parse_modality("PCA") == Modality::PCA);
    CHECK(parse_modality("2") == Modality::SAR);
    CHECK(modality_name(Modality::SAR) == "SAR");
    CHECK_THROWS_AS(parse_modality("lidar"), std::invalid_argument);
}

TEST_CASE("adagn hand example") {
    Tensor<double> h({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
    const auto out = adagn(h, FiLMParams<double>{{2.0}, {1.0}}, 1);
    // mean 2.5, var 1.25 -> xhat = (v - 2.5) / sqrt(1.25 + 1e-5)
    const double r = 1.0 / std::sqrt(1.25 + 1e-5);
    const double expect[4] = {-1.5 * r * 2 + 1, -0.5 * r * 2 + 1, 0.5 * r * 2 + 1, 1.5 * r * 2 + 1};
    for (int i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(expect[i]).epsilon(1e-12));
    CHECK(out[0] == doctest::Approx(-1.683).epsilon(1e-3));
    CHECK(out[1] == doctest::Approx(0.106).epsilon(1e-2));
    CHECK(out[2] == doctest::Approx(1.894).epsilon(1e-3));
    CHECK(out[3] == doctest::Approx(3.683).epsilon(1e-3));
}

TEST_CASE("adagn special cases") {
    const auto h = testutil::random_tensor({2, 4, 3, 3}, 3);
    const FiLMParams<double> id{{1, 1, 1, 1}, {0, 0, 0, 0}};
    const auto plain = adagn(h, id, 2);
    nn::Graph<double> g(false);
    const auto& gn = g.value(nn::group_norm(g, g.input(h), 2));
    for (std::size_t i = 0; i < h.size(); ++i) CHECK(plain[i] == gn[i]);

    // Constant groups normalize to zero, leaving beta.
    Tensor<double> flat({1, 2, 2, 2}, 3.5);
    const auto out = adagn(flat, FiLMParams<double>{{2, 2}, {0.25, -0.75}}, 2);
    for (int i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(0.25));
    for (int i = 4; i < 8; ++i) CHECK(out[i] == doctest::Approx(-0.75));

    // Shift invariance within a group.
    const FiLMParams<double> p{{1.5, -0.5, 2.0, 0.1}, {0.3, 0.2, -0.1, 0.0}};
    auto shifted = h;
    for (std::size_t i = 0; i < 18; ++i) shifted[i] += 7.0;
    const auto a = adagn(h, p, 2), b = adagn(shifted, p, 2);
    for (std::size_t i = 0; i < h.size(); ++i) CHECK(std::fabs(a[i] - b[i]) < 1e-5);

    CHECK_THROWS_AS(adagn(h, p, 3), std::invalid_argument);
    CHECK_THROWS_AS(adagn(h, FiLMParams<double>{{1}, {0}}, 2), std::invalid_argument);
    auto bad = h;
    bad[5] = std::nan("");
    CHECK_THROWS(adagn(bad, p, 2));
}

TEST_CASE("identity init emits gamma 1 and beta 0") {
    const auto sched = make_linear_schedule();
    Conditioner<double> cond(ConditionerConfig{16, 8}, {4, 8});
    cond.init_identity(5);
    for (Modality m : kAllModalities) {
        for (int t : {0, 1, 500, 1000}) {
            for (int site = 0; site < 2; ++site) {
                const auto p = cond.film_params(t, m, site, sched);
                for (double v : p.gamma) CHECK(v == 1.0);
                for (double v : p.beta) CHECK(v == 0.0);
            }
        }
    }
    CHECK_THROWS_AS(cond.film_params(1001, Modality::PCA, 0, sched), std::out_of_range);
    CHECK_THROWS_AS(cond.film_params(1, Modality::PCA, 2, sched), std::out_of_range);
}

TEST_CASE("one gradient step separates modalities") {
    const auto sched = make_linear_schedule();
    Conditioner<double> cond(ConditionerConfig{16, 8}, {4});
    cond.init_identity(9);
    // Loss pulls gamma up for pRGB and down for SAR.
    nn::Graph<double> g(true);
    const std::vector<int> ts{100, 100};
    const std::vector<Modality> ms{Modality::PRGB, Modality::SAR};
    const auto mods = cond.build(g, ts, ms);
    Tensor<double> target({2, 4});
    for (int c = 0; c < 4; ++c) {
        target[c] = 2.0;
        target[4 + c] = 0.0;
    }
    cond.parameters().zero_grad();
    g.backward(nn::mse(g, mods[0].gamma, target));
    for (auto& p : cond.parameters()) {
        for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] -= 0.1 * p.grad[i];
    }
    const auto a = cond.film_params(100, Modality::PRGB, 0, sched);
    const auto b = cond.film_params(100, Modality::SAR, 0, sched);
    double linf = 0.0;
    for (int c = 0; c < 4; ++c) linf = std::max(linf, std::fabs(a.gamma[c] - b.gamma[c]));
    CHECK(linf > 0.0);
}

TEST_CASE("conditioner gradients match finite differences") {
    Conditioner<double> cond(ConditionerConfig{8, 6}, {4, 2});
    cond.init_random(3, 0.3);
    const std::vector<int> ts{0, 17, 999};
    const std::vector<Modality> ms{Modality::PRGB, Modality::PCA, Modality::SAR};
    const Tensor<double> target = testutil::random_tensor({3, 4}, 4);
    auto loss = [&](nn::Graph<double>& g, Conditioner<double>& c) {
        const auto mods = c.build(g, ts, ms);
        const nn::Var a = nn::mse(g, mods[0].gamma, target);
        const nn::Var b = nn::mse(g, mods[1].beta, Tensor<double>({3, 2}, 0.5));
        return nn::add(g, a, b);
    };
    cond.parameters().zero_grad();
    {
        nn::Graph<double> g(true);
        g.backward(loss(g, cond));
    }
    double worst = 0.0;
    for (auto& p : cond.parameters()) {
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            const double orig = p.value[i];
            auto eval = [&] {
                nn::Graph<double> g(false);
                return g.value(loss(g, cond))[0];
            };
            p.value[i] = orig + 1e-5;
            const double up = eval();
            p.value[i] = orig - 1e-5;
            const double down = eval();
            p.value[i] = orig;
            worst = std::max(worst, testutil::rel_error(p.grad[i], (up - down) / 2e-5));
        }
    }
    CHECK(worst < 1e-5);
}
