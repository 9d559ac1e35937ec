#include <algorithm>
#include <numeric>
#include <random>

#include "doctest.h"
#include "unidiff/metrics.hpp"

using namespace unidiff;

namespace {

ConfusionMatrix example() {
    std::vector<int> t, p;
    auto push = [&](int y, int yhat, int n) {
        for (int i = 0; i < n; ++i) {
            t.push_back(y);
            p.push_back(yhat);
        }
    };
    push(1, 1, 50);
    push(1, 2, 10);
    push(2, 1, 5);
    push(2, 2, 35);
    return confusion(t, p, 2);
}

}  // namespace

TEST_CASE("confusion counting") {
    const auto cm = example();
    CHECK(cm.counts == std::vector<std::uint64_t>{50, 10, 5, 35});
    CHECK(cm.total() == 100);

    std::vector<int> y{1, 2, 3, 3};
    const auto perfect = confusion(y, y, 3);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) CHECK((perfect.at(i, j) == 0) == (i != j));

    CHECK_THROWS_AS(confusion(std::vector<int>{}, std::vector<int>{}, 2), std::invalid_argument);
    CHECK_THROWS_AS(confusion(std::vector<int>{1}, std::vector<int>{3}, 2), std::out_of_range);
    CHECK_THROWS_AS(confusion(std::vector<int>{0}, std::vector<int>{1}, 2), std::out_of_range);
    CHECK_THROWS_AS(confusion(std::vector<int>{1, 2}, std::vector<int>{1}, 2), std::invalid_argument);
}

TEST_CASE("scores of the worked 2-class example") {
    const auto s = scores(example());
    CHECK(s.oa == doctest::Approx(0.85).epsilon(1e-12));
    CHECK(s.aa == doctest::Approx((50.0 / 60.0 + 35.0 / 40.0) / 2.0).epsilon(1e-12));
    CHECK(s.aa == doctest::Approx(0.8542).epsilon(1e-4));
    CHECK(s.p_e == doctest::Approx(0.51).epsilon(1e-12));
    CHECK(s.kappa == doctest::Approx(0.34 / 0.49).epsilon(1e-12));
    CHECK(s.kappa == doctest::Approx(0.6939).epsilon(1e-4));
    CHECK(s.per_class[0].f1 == doctest::Approx(0.8696).epsilon(1e-4));
    CHECK(s.per_class[0].iou == doctest::Approx(50.0 / 65.0).epsilon(1e-12));
    CHECK(s.per_class[0].iou == doctest::Approx(0.7692).epsilon(1e-4));
    CHECK(std::fabs(s.kappa - (s.p_o - s.p_e) / (1.0 - s.p_e)) < 1e-12);
}

TEST_CASE("perfect prediction scores one everywhere") {
    std::vector<int> y{1, 1, 2, 3, 3, 3};
    const auto s = scores(confusion(y, y, 3));
    CHECK(s.oa == 1.0);
    CHECK(s.aa == 1.0);
    CHECK(s.kappa == 1.0);
    CHECK(s.mf1 == 1.0);
    CHECK(s.miou == 1.0);
}

TEST_CASE("absent classes are excluded from means") {
    const auto cm = confusion_from_counts(3, {4, 1, 0, 0, 0, 0, 2, 0, 3});
    const auto s = scores(cm);
    CHECK(s.absent == std::vector<int>{2});
    CHECK(s.aa == doctest::Approx((0.8 + 0.6) / 2.0));
    CHECK_FALSE(s.per_class[1].present);
}

TEST_CASE("class permutation leaves summary scores unchanged") {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> cls(1, 5);
    std::vector<int> t(400), p(400);
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = cls(rng);
        p[i] = (rng() % 3 == 0) ? cls(rng) : t[i];
    }
    const auto base = scores(confusion(t, p, 5));
    std::vector<int> perm{0, 3, 5, 1, 2, 4};  // perm[old] = new, 1-based
    std::vector<int> tp(t.size()), pp(p.size());
    for (std::size_t i = 0; i < t.size(); ++i) {
        tp[i] = perm[t[i]];
        pp[i] = perm[p[i]];
    }
    const auto cm2 = confusion(tp, pp, 5);
    const auto permuted = scores(cm2);
    CHECK(permuted.oa == doctest::Approx(base.oa).epsilon(1e-12));
    CHECK(permuted.aa == doctest::Approx(base.aa).epsilon(1e-12));
    CHECK(permuted.kappa == doctest::Approx(base.kappa).epsilon(1e-12));
    CHECK(permuted.mf1 == doctest::Approx(base.mf1).epsilon(1e-12));
    CHECK(permuted.miou == doctest::Approx(base.miou).epsilon(1e-12));
    for (int c = 1; c <= 5; ++c) CHECK(permuted.per_class[perm[c] - 1].recall == doctest::Approx(base.per_class[c - 1].recall));

    // Rebuilding from a label-pair expansion of the matrix gives the same scores.
    std::vector<int> et, ep;
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j)
            for (std::uint64_t n = 0; n < cm2.at(i, j); ++n) {
                et.push_back(i + 1);
                ep.push_back(j + 1);
            }
    CHECK(confusion(et, ep, 5).counts == cm2.counts);
    CHECK(parse_confusion_csv(confusion_csv(cm2)).counts == cm2.counts);
}

TEST_CASE("report layout") {
    std::vector<int> y{1, 2, 2};
    const auto csv = report_csv(confusion(y, y, 2), {"a", "b"});
    CHECK(csv == "class,recall,precision,F1,IoU\na,100.00,100.00,100.00,100.00\nb,100.00,100.00,100.00,100.00\n"
                 "OA,100.00,,,\nAA,100.00,,,\nKappa,100.00,,,\nmF1,100.00,,,\nmIoU,100.00,,,\n");
    const auto ex = report_csv(example(), {"x", "y"});
    CHECK(ex.find("OA,85.00") != std::string::npos);
    CHECK(ex.find("AA,85.42") != std::string::npos);
    CHECK(ex.find("Kappa,69.39") != std::string::npos);

    const std::vector<std::string> augsburg{"Forest", "Residential Area", "Industrial Area", "Low Plants",
                                            "Allotment", "Commercial Area", "Water"};
    std::vector<int> t7(7);
    std::iota(t7.begin(), t7.end(), 1);
    const auto text = report_text(confusion(t7, t7, 7), augsburg, "Augsburg");
    CHECK(text.find("Residential Area") != std::string::npos);
    CHECK(text.find("Kappa") != std::string::npos);
    CHECK_THROWS_AS(report_csv(example(), {"only one"}), std::invalid_argument);
}
