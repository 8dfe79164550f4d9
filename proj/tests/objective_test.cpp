#include "tame/objective.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"
#include "test_util.hpp"

using tame::Tensor;
using D = Tensor<double>;

TEST(CrossEntropy, UniformLogits) {
    D z = D::full({4}, 0.7);
    D ce = tame::cross_entropy(z, 2);
    EXPECT_NEAR(ce.item(), std::log(4.0), 1e-12);
}

TEST(CrossEntropy, LargeMarginApproachesZero) {
    D z = D::from({3}, {50.0, 0.0, 0.0});
    D ce = tame::cross_entropy(z, 0);
    EXPECT_NEAR(ce.item(), 0.0, 1e-12);
}

TEST(CrossEntropy, MatchesNaiveOracle) {
    tame::Rng rng(21);
    for (int rep = 0; rep < 20; ++rep) {
        D z = testutil::randn<double>({6}, rng, 3.0);
        int64_t label = rep % 6;
        D ce = tame::cross_entropy(z, label);
        EXPECT_NEAR(ce.item(), oracle::cross_entropy(z.data(), label), 1e-10);
    }
}

TEST(CrossEntropy, BatchIsMeanOfRows) {
    tame::Rng rng(22);
    D z = testutil::randn<double>({3, 4}, rng);
    std::vector<int64_t> labels{1, 3, 0};
    D ce = tame::cross_entropy(z, labels);
    double expect = 0.0;
    for (int64_t r = 0; r < 3; ++r) {
        std::vector<double> row(z.ptr() + r * 4, z.ptr() + (r + 1) * 4);
        expect += oracle::cross_entropy(row, labels[static_cast<size_t>(r)]);
    }
    EXPECT_NEAR(ce.item(), expect / 3.0, 1e-12);
}

TEST(CrossEntropy, LabelOutOfRangeThrows) {
    D z = D::zeros({3});
    EXPECT_THROW(tame::cross_entropy(z, 3), tame::ValueError);
}

TEST(CrossEntropy, Gradcheck) {
    tame::Rng rng(23);
    D z = testutil::randn<double>({2, 5}, rng);
    z.set_requires_grad(true);
    std::vector<int64_t> labels{4, 1};
    auto loss_fn = [&]() { return tame::cross_entropy(z, labels); };
    auto res = oracle::gradcheck(loss_fn, {&z});
    EXPECT_LT(res.max_rel_err, 1e-4);
}

TEST(VariationLoss, ConstantMapIsZero) {
    D psi = D::full({4, 5}, 0.3);
    EXPECT_DOUBLE_EQ(tame::variation_loss(psi).item(), 0.0);
}

TEST(VariationLoss, HandEvaluatedTwoByTwo) {
    // [[0,1],[0,1]]: two horizontal unit steps, zero vertical.
    D psi = D::from({2, 2}, {0, 1, 0, 1});
    EXPECT_DOUBLE_EQ(tame::variation_loss(psi).item(), 2.0);
}

TEST(VariationLoss, MatchesNaiveOracle) {
    tame::Rng rng(24);
    D psi = testutil::rand01<double>({7, 5}, rng);
    EXPECT_NEAR(tame::variation_loss(psi).item(), oracle::variation(psi.data(), 7, 5), 1e-12);
}

TEST(VariationLoss, TranslationInvariant) {
    tame::Rng rng(25);
    D psi = testutil::rand01<double>({6, 6}, rng);
    D shifted = tame::add_scalar(psi, 11.25);
    EXPECT_NEAR(tame::variation_loss(psi).item(), tame::variation_loss(shifted).item(), 1e-9);
}

TEST(VariationLoss, ZeroOnlyForConstant) {
    tame::Rng rng(26);
    D psi = testutil::rand01<double>({4, 4}, rng);
    psi.data()[5] += 2.0;  // guarantee non-constant
    EXPECT_GT(tame::variation_loss(psi).item(), 0.0);
}

TEST(VariationLoss, Gradcheck) {
    tame::Rng rng(27);
    D psi = testutil::rand01<double>({4, 5}, rng);
    psi.set_requires_grad(true);
    auto loss_fn = [&]() { return tame::variation_loss(psi); };
    auto res = oracle::gradcheck(loss_fn, {&psi});
    EXPECT_LT(res.max_rel_err, 1e-4);
}

TEST(AreaLoss, BoundaryValues) {
    EXPECT_DOUBLE_EQ(tame::area_loss(D::ones({3, 3}), 0.3).item(), 1.0);
    EXPECT_DOUBLE_EQ(tame::area_loss(D::zeros({3, 3}), 0.3).item(), 0.0);
}

TEST(AreaLoss, ConstantHalfMap) {
    D psi = D::full({4, 4}, 0.5);
    EXPECT_NEAR(tame::area_loss(psi, 0.3).item(), std::pow(0.5, 0.3), 1e-12);
}

TEST(AreaLoss, MatchesNaiveOracleBothModes) {
    tame::Rng rng(28);
    D psi = testutil::rand01<double>({5, 7}, rng);
    EXPECT_NEAR(tame::area_loss(psi, 0.3).item(), oracle::area(psi.data(), 0.3, true), 1e-12);
    EXPECT_NEAR(tame::area_loss(psi, 0.3, true).item(), oracle::area(psi.data(), 0.3, false),
                1e-12);
}

TEST(AreaLoss, NegativeValueIsDomainError) {
    D psi = D::from({2, 2}, {0.1, -0.2, 0.3, 0.4});
    EXPECT_THROW(tame::area_loss(psi, 0.3), tame::ValueError);
}

TEST(AreaLoss, MonotoneInEveryPixel) {
    tame::Rng rng(29);
    D psi = testutil::rand01<double>({4, 4}, rng);
    double base = tame::area_loss(psi, 0.3).item();
    for (int64_t i = 0; i < psi.numel(); ++i) {
        D bumped = psi.clone();
        bumped.data()[static_cast<size_t>(i)] =
            std::min(1.0, bumped.data()[static_cast<size_t>(i)] + 0.05);
        EXPECT_GE(tame::area_loss(bumped, 0.3).item() + 1e-15, base);
    }
}

TEST(AreaLoss, Gradcheck) {
    tame::Rng rng(30);
    D psi = testutil::rand01<double>({4, 4}, rng);
    for (double& v : psi.data()) v = 0.05 + 0.9 * v;  // keep away from the 0 boundary
    psi.set_requires_grad(true);
    auto loss_fn = [&]() { return tame::area_loss(psi, 0.3); };
    auto res = oracle::gradcheck(loss_fn, {&psi});
    EXPECT_LT(res.max_rel_err, 1e-4);
}

TEST(TotalLoss, CEOnlyWhenRegularizersOff) {
    tame::Rng rng(31);
    D z = testutil::randn<double>({4}, rng);
    D psi = testutil::rand01<double>({3, 3}, rng);
    tame::LossWeights w;
    w.lambda2 = 0;
    w.lambda3 = 0;
    auto terms = tame::total_loss(z, std::vector<int64_t>{1}, psi, w);
    EXPECT_NEAR(terms.total.item(), 1.5 * terms.ce.item(), 1e-12);
}

TEST(TotalLoss, HandComposedDefaultCase) {
    // Constant psi = 1, uniform logits, 4 classes, default weights:
    // 1.5*ln4 + 2*1 + 0.01*0.
    D z = D::zeros({4});
    D psi = D::ones({5, 5});
    tame::LossWeights w;
    auto terms = tame::total_loss(z, std::vector<int64_t>{0}, psi, w);
    EXPECT_NEAR(terms.total.item(), 1.5 * std::log(4.0) + 2.0, 1e-9);
    EXPECT_NEAR(terms.total.item(), 4.079442, 1e-6);
}

TEST(TotalLoss, RecompositionInvariant) {
    tame::Rng rng(32);
    for (int rep = 0; rep < 10; ++rep) {
        D z = testutil::randn<double>({5}, rng);
        D psi = testutil::rand01<double>({4, 6}, rng);
        tame::LossWeights w;
        w.lambda1 = 0.5 + rng.u01();
        w.lambda2 = rng.u01() * 3;
        w.lambda3 = rng.u01() * 0.1;
        auto terms = tame::total_loss(z, std::vector<int64_t>{2}, psi, w);
        auto v = terms.values();
        EXPECT_NEAR(v.total, w.lambda1 * v.ce + w.lambda2 * v.area + w.lambda3 * v.variation,
                    1e-12);
    }
}

TEST(TotalLoss, BatchSemanticsIsMeanOfPerSampleTotals) {
    tame::Rng rng(33);
    D z = testutil::randn<double>({3, 4}, rng);
    D psi = testutil::rand01<double>({3, 4, 4}, rng);
    std::vector<int64_t> labels{0, 2, 3};
    tame::LossWeights w;
    auto batch = tame::total_loss(z, labels, psi, w);
    double expect = 0.0;
    for (int64_t i = 0; i < 3; ++i) {
        D zi = tame::select_index(z, 0, i);
        D pi = tame::select_index(psi, 0, i);
        auto ti = tame::total_loss(zi, std::vector<int64_t>{labels[static_cast<size_t>(i)]}, pi, w);
        expect += ti.total.item();
    }
    EXPECT_NEAR(batch.total.item(), expect / 3.0, 1e-12);
}

TEST(TotalLoss, GradcheckThroughAllComponents) {
    tame::Rng rng(34);
    D z = testutil::randn<double>({2, 4}, rng);
    D psi = testutil::rand01<double>({2, 3, 3}, rng);
    for (double& v : psi.data()) v = 0.1 + 0.8 * v;
    z.set_requires_grad(true);
    psi.set_requires_grad(true);
    tame::LossWeights w;
    std::vector<int64_t> labels{1, 2};
    auto loss_fn = [&]() { return tame::total_loss(z, labels, psi, w).total; };
    auto res = oracle::gradcheck(loss_fn, {&z, &psi});
    EXPECT_LT(res.max_rel_err, 1e-4);
}

TEST(LossWeights, ValidationRejectsBadLambda4) {
    tame::LossWeights w;
    w.lambda4 = 0.0;
    EXPECT_THROW(w.validate(), tame::ConfigError);
    w.lambda4 = 1.5;
    EXPECT_THROW(w.validate(), tame::ConfigError);
    w.lambda4 = 1.0;
    EXPECT_NO_THROW(w.validate());
}
