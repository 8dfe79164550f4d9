#include "tame/nn.hpp"

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "test_util.hpp"

using tame::Tensor;
using D = Tensor<double>;

TEST(Conv2d, IdentityOneByOne) {
    // k=1 weight = identity over channels -> output equals input.
    D x = D::from({1, 2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8});
    D w = D::from({2, 2, 1, 1}, {1, 0, 0, 1});
    D y = tame::conv2d(x, w, D(), 1, 0);
    ASSERT_EQ(y.shape(), x.shape());
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], x.data()[i]);
}

TEST(Conv2d, ZeroInputGivesBias) {
    tame::Rng rng(2);
    D x = D::zeros({1, 3, 4, 4});
    D w = testutil::randn<double>({5, 3, 3, 3}, rng);
    D b = D::from({5}, {0.1, -0.2, 0.3, 0.0, 7.0});
    D y = tame::conv2d(x, w, b, 1, 1);
    for (int64_t c = 0; c < 5; ++c)
        for (int64_t i = 0; i < 16; ++i) EXPECT_DOUBLE_EQ(y.data()[c * 16 + i], b.data()[c]);
}

TEST(Conv2d, MatchesNaiveOracle) {
    tame::Rng rng(3);
    D x = testutil::randn<double>({1, 3, 5, 5}, rng);
    D w = testutil::randn<double>({4, 3, 3, 3}, rng);
    D b = testutil::randn<double>({4}, rng);
    D y = tame::conv2d(x, w, b, 1, 1);
    int64_t oh, ow;
    auto ref = oracle::conv2d(x.data(), 1, 3, 5, 5, w.data(), 4, 3, b.data(), 1, 1, oh, ow);
    ASSERT_EQ(y.shape(), (tame::Shape{1, 4, oh, ow}));
    for (int64_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
}

TEST(Conv2d, StrideTwoMatchesOracle) {
    tame::Rng rng(4);
    D x = testutil::randn<double>({2, 2, 7, 7}, rng);
    D w = testutil::randn<double>({3, 2, 3, 3}, rng);
    D y = tame::conv2d(x, w, D(), 2, 1);
    int64_t oh, ow;
    auto ref = oracle::conv2d(x.data(), 2, 2, 7, 7, w.data(), 3, 3, {}, 2, 1, oh, ow);
    ASSERT_EQ(y.shape(), (tame::Shape{2, 3, oh, ow}));
    for (int64_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
}

TEST(Conv2d, ShapeErrors) {
    D x = D::zeros({1, 3, 4, 4});
    D wbad = D::zeros({4, 2, 3, 3});  // wrong input channels
    EXPECT_THROW(tame::conv2d(x, wbad, D(), 1, 1), tame::ShapeError);
    D wk5 = D::zeros({4, 3, 5, 5});
    EXPECT_THROW(tame::conv2d(x, wk5, D(), 1, 2), tame::ValueError);
}

TEST(Conv2d, Gradcheck) {
    tame::Rng rng(5);
    D x = testutil::randn<double>({2, 2, 4, 4}, rng);
    D w = testutil::randn<double>({3, 2, 3, 3}, rng, 0.5);
    D b = testutil::randn<double>({3}, rng, 0.1);
    x.set_requires_grad(true);
    w.set_requires_grad(true);
    b.set_requires_grad(true);
    auto loss_fn = [&]() {
        D y = tame::conv2d(x, w, b, 1, 1);
        return tame::mean_all(tame::mul(y, y));
    };
    auto res = oracle::gradcheck(loss_fn, {&x, &w, &b});
    EXPECT_LT(res.max_rel_err, 1e-4);
}

TEST(Conv2d, FrozenWeightStillPropagatesToInput) {
    tame::Rng rng(6);
    D x = testutil::randn<double>({1, 2, 4, 4}, rng);
    D w = testutil::randn<double>({2, 2, 3, 3}, rng);
    D b = testutil::randn<double>({2}, rng);

    auto run = [&](bool freeze) {
        D xc = x.clone();
        D wc = w.clone();
        D bc = b.clone();
        xc.set_requires_grad(true);
        wc.set_requires_grad(!freeze);
        bc.set_requires_grad(!freeze);
        tame::Tape<double> tape;
        D y = tame::conv2d(xc, wc, bc, 1, 1);
        tape.backward(tame::sum_all(tame::mul(y, y)));
        return std::make_pair(xc.grad(), wc.grad_defined());
    };
    auto [gx_frozen, w_has_grad_frozen] = run(true);
    auto [gx_free, w_has_grad_free] = run(false);
    EXPECT_FALSE(w_has_grad_frozen);
    EXPECT_TRUE(w_has_grad_free);
    ASSERT_EQ(gx_frozen.size(), gx_free.size());
    for (size_t i = 0; i < gx_frozen.size(); ++i) EXPECT_DOUBLE_EQ(gx_frozen[i], gx_free[i]);
}

TEST(MaxPool, TwoByTwo) {
    D x = D::from({1, 1, 2, 2}, {1, 2, 3, 4});
    D y = tame::maxpool2d(x, 2, 2);
    EXPECT_EQ(y.shape(), (tame::Shape{1, 1, 1, 1}));
    EXPECT_DOUBLE_EQ(y.item(), 4.0);
}

TEST(MaxPool, ConstantInputTieRoutesToFirstElement) {
    D x = D::full({1, 1, 2, 2}, 3.5);
    x.set_requires_grad(true);
    tame::Tape<double> tape;
    D y = tame::maxpool2d(x, 2, 2);
    EXPECT_DOUBLE_EQ(y.item(), 3.5);
    tape.backward(tame::sum_all(y));
    EXPECT_DOUBLE_EQ(x.grad()[0], 1.0);
    EXPECT_DOUBLE_EQ(x.grad()[1], 0.0);
    EXPECT_DOUBLE_EQ(x.grad()[2], 0.0);
    EXPECT_DOUBLE_EQ(x.grad()[3], 0.0);
}

TEST(MaxPool, MatchesNaiveOracle) {
    tame::Rng rng(8);
    D x = testutil::randn<double>({1, 1, 4, 4}, rng);
    D y = tame::maxpool2d(x, 2, 2);
    int64_t oh, ow;
    auto ref = oracle::maxpool2d(x.data(), 1, 1, 4, 4, 2, 2, oh, ow);
    for (int64_t i = 0; i < y.numel(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], ref[i]);
}

TEST(MaxPool, IndivisibleDimsThrow) {
    D x = D::zeros({1, 1, 5, 4});
    EXPECT_THROW(tame::maxpool2d(x, 2, 2), tame::ShapeError);
}

TEST(MaxPool, Gradcheck) {
    tame::Rng rng(9);
    D x = testutil::randn<double>({2, 2, 4, 4}, rng);
    x.set_requires_grad(true);
    auto loss_fn = [&]() {
        D y = tame::maxpool2d(x, 2, 2);
        return tame::mean_all(tame::mul(y, y));
    };
    auto res = oracle::gradcheck(loss_fn, {&x});
    EXPECT_LT(res.max_rel_err, 1e-4);
}

TEST(BatchNorm, AlreadyNormalizedPassesThrough) {
    // zero-mean, unit-variance batch with gamma=1, beta=0
    D x = D::from({2, 1, 1, 2}, {-1.0, 1.0, -1.0, 1.0});
    D gamma = D::ones({1});
    D beta = D::zeros({1});
    std::vector<double> rm{0.0}, rv{1.0};
    D y = tame::batchnorm2d(x, gamma, beta, rm, rv, true, 0.1, 1e-8);
    for (int64_t i = 0; i < 4; ++i) EXPECT_NEAR(y.data()[i], x.data()[i], 1e-6);
}

TEST(BatchNorm, ZeroGammaGivesBeta) {
    tame::Rng rng(10);
    D x = testutil::randn<double>({2, 3, 2, 2}, rng);
    D gamma = D::zeros({3});
    D beta = D::from({3}, {0.5, -1.0, 2.0});
    std::vector<double> rm(3, 0.0), rv(3, 1.0);
    D y = tame::batchnorm2d(x, gamma, beta, rm, rv, true, 0.1, 1e-5);
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t n = 0; n < 2; ++n)
            for (int64_t i = 0; i < 4; ++i)
                EXPECT_DOUBLE_EQ(y.data()[(n * 3 + c) * 4 + i], beta.data()[c]);
}

TEST(BatchNorm, MatchesTwoPassOracle) {
    tame::Rng rng(11);
    D x = testutil::randn<double>({3, 4, 3, 3}, rng, 2.0);
    D gamma = testutil::randn<double>({4}, rng);
    D beta = testutil::randn<double>({4}, rng);
    std::vector<double> rm(4, 0.0), rv(4, 1.0);
    D y = tame::batchnorm2d(x, gamma, beta, rm, rv, true, 0.1, 1e-5);
    auto ref = oracle::batchnorm2d(x.data(), 3, 4, 3, 3, gamma.data(), beta.data(), {}, {}, true,
                                   1e-5);
    for (int64_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-10);
}

TEST(BatchNorm, EvalModeUsesRunningStats) {
    tame::Rng rng(12);
    D x = testutil::randn<double>({2, 2, 2, 2}, rng);
    D gamma = D::ones({2});
    D beta = D::zeros({2});
    std::vector<double> rm{0.5, -0.5}, rv{2.0, 0.5};
    auto rm_copy = rm;
    auto rv_copy = rv;
    D y = tame::batchnorm2d(x, gamma, beta, rm, rv, false, 0.1, 1e-5);
    EXPECT_EQ(rm, rm_copy);  // eval mode must not touch running stats
    EXPECT_EQ(rv, rv_copy);
    auto ref = oracle::batchnorm2d(x.data(), 2, 2, 2, 2, gamma.data(), beta.data(), rm_copy,
                                   rv_copy, false, 1e-5);
    for (int64_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
}

TEST(BatchNorm, RunningStatsUpdate) {
    D x = D::from({1, 1, 1, 4}, {1.0, 2.0, 3.0, 4.0});  // mean 2.5, biased var 1.25
    D gamma = D::ones({1});
    D beta = D::zeros({1});
    std::vector<double> rm{0.0}, rv{1.0};
    tame::batchnorm2d(x, gamma, beta, rm, rv, true, 0.1, 1e-5);
    EXPECT_NEAR(rm[0], 0.25, 1e-12);
    EXPECT_NEAR(rv[0], 0.9 * 1.0 + 0.1 * 1.25, 1e-12);
}

TEST(BatchNorm, ZeroVarianceChannelHandledByEps) {
    D x = D::full({2, 1, 2, 2}, 3.0);
    D gamma = D::ones({1});
    D beta = D::zeros({1});
    std::vector<double> rm{0.0}, rv{1.0};
    D y = tame::batchnorm2d(x, gamma, beta, rm, rv, true, 0.1, 1e-5);
    EXPECT_TRUE(y.all_finite());
    for (double v : y.data()) EXPECT_NEAR(v, 0.0, 1e-9);
}

TEST(BatchNorm, GradcheckTrainMode) {
    tame::Rng rng(13);
    D x = testutil::randn<double>({2, 2, 3, 3}, rng);
    D gamma = testutil::randn<double>({2}, rng);
    D beta = testutil::randn<double>({2}, rng);
    x.set_requires_grad(true);
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
    auto loss_fn = [&]() {
        std::vector<double> rm(2, 0.0), rv(2, 1.0);  // fresh stats so mutation cannot leak
        D y = tame::batchnorm2d(x, gamma, beta, rm, rv, true, 0.1, 1e-5);
        return tame::mean_all(tame::mul(y, y));
    };
    auto res = oracle::gradcheck(loss_fn, {&x, &gamma, &beta});
    EXPECT_LT(res.max_rel_err, 1e-4);
}

TEST(BatchNorm, GradcheckEvalMode) {
    tame::Rng rng(14);
    D x = testutil::randn<double>({2, 2, 3, 3}, rng);
    D gamma = testutil::randn<double>({2}, rng);
    D beta = testutil::randn<double>({2}, rng);
    x.set_requires_grad(true);
    gamma.set_requires_grad(true);
    beta.set_requires_grad(true);
    std::vector<double> rm{0.3, -0.2}, rv{1.5, 0.7};
    auto loss_fn = [&]() {
        auto rm2 = rm;
        auto rv2 = rv;
        D y = tame::batchnorm2d(x, gamma, beta, rm2, rv2, false, 0.1, 1e-5);
        return tame::mean_all(tame::mul(y, y));
    };
    auto res = oracle::gradcheck(loss_fn, {&x, &gamma, &beta});
    EXPECT_LT(res.max_rel_err, 1e-4);
}

TEST(Bilinear, ConstantPreserved) {
    D x = D::full({2, 2}, 0.7);
    D y = tame::bilinear_upsample(x, 4, 4);
    ASSERT_EQ(y.shape(), (tame::Shape{4, 4}));
    for (double v : y.data()) EXPECT_DOUBLE_EQ(v, 0.7);
}

TEST(Bilinear, SameSizeIsIdentity) {
    tame::Rng rng(15);
    D x = testutil::randn<double>({1, 3, 5, 5}, rng);
    D y = tame::bilinear_upsample(x, 5, 5);
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(y.data()[i], x.data()[i]);
}

TEST(Bilinear, MatchesFormulaOracle) {
    D x = D::from({2, 2}, {0, 1, 2, 3});
    D y = tame::bilinear_upsample(x, 4, 4);
    auto ref = oracle::bilinear(x.data(), 1, 2, 2, 4, 4);
    for (int64_t i = 0; i < 16; ++i) EXPECT_NEAR(y.data()[i], ref[i], 1e-12);
}

TEST(Bilinear, OutputWithinInputBounds) {
    tame::Rng rng(16);
    for (int rep = 0; rep < 10; ++rep) {
        D x = testutil::randn<double>({3, 4}, rng);
        double lo = *std::min_element(x.data().begin(), x.data().end());
        double hi = *std::max_element(x.data().begin(), x.data().end());
        D y = tame::bilinear_upsample(x, 9, 11);
        for (double v : y.data()) {
            EXPECT_GE(v, lo - 1e-12);
            EXPECT_LE(v, hi + 1e-12);
        }
    }
}

TEST(Bilinear, DownscaleRejected) {
    D x = D::zeros({4, 4});
    EXPECT_THROW(tame::bilinear_upsample(x, 2, 4), tame::ValueError);
}

TEST(Bilinear, Gradcheck) {
    tame::Rng rng(17);
    D x = testutil::randn<double>({2, 3, 3}, rng);
    x.set_requires_grad(true);
    auto loss_fn = [&]() {
        D y = tame::bilinear_upsample(x, 7, 5);
        return tame::mean_all(tame::mul(y, y));
    };
    auto res = oracle::gradcheck(loss_fn, {&x});
    EXPECT_LT(res.max_rel_err, 1e-4);
}

TEST(Modules, ConvLinearBatchNormOwnTrainableParams) {
    tame::Rng rng(18);
    tame::Conv2d<double> conv(3, 8, 3, 1, 1, rng);
    tame::Linear<double> fc(8, 4, rng);
    tame::BatchNorm2d<double> bn(8);
    EXPECT_TRUE(conv.weight.requires_grad());
    EXPECT_TRUE(fc.weight.requires_grad());
    EXPECT_TRUE(bn.gamma.requires_grad());
    EXPECT_EQ(conv.params().size(), 2u);
    EXPECT_EQ(bn.params().size(), 2u);
}
