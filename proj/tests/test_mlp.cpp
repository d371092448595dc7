// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <cstring>
#include <sstream>

#include <gtest/gtest.h>

#include "bspde/errors.hpp"
#include "bspde/mlp.hpp"
#include "bspde/rand_paths.hpp"

using namespace bspde;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

MatrixXd random_input(int rows, int cols, std::uint64_t seed) {
    MatrixXd x(rows, cols);
    for (int c = 0; c < cols; ++c)
        for (int r = 0; r < rows; ++r) x(r, c) = counter_normal(seed, c, r);
    return x;
}

// Scalar objective sum(upstream .* net(x)).
double objective(const Mlp& net, const MatrixXd& x, const MatrixXd& upstream) {
    return (net.forward(x).array() * upstream.array()).sum();
}

}  // namespace

TEST(MlpInit, DeterministicAndBounded) {
    const Mlp a = Mlp::init({3, 8, 8, 1}, 42);
    const Mlp b = Mlp::init({3, 8, 8, 1}, 42);
    const Mlp c = Mlp::init({3, 8, 8, 1}, 43);
    EXPECT_TRUE((a.params().array() == b.params().array()).all());
    EXPECT_FALSE((a.params().array() == c.params().array()).all());
    for (int l = 0; l < a.layers(); ++l) {
        const double bound = std::sqrt(6.0 / a.widths()[l]);
        EXPECT_LE(a.weight(l).cwiseAbs().maxCoeff(), bound);
        EXPECT_GT(a.weight(l).cwiseAbs().maxCoeff(), 0.5 * bound);
        EXPECT_EQ(a.bias(l).cwiseAbs().maxCoeff(), 0.0);
    }
    EXPECT_EQ(a.parameter_count(), 3 * 8 + 8 + 8 * 8 + 8 + 8 + 1);
}

TEST(MlpInit, RejectsBadShapes) {
    EXPECT_THROW(Mlp::init({}, 1), InvalidArgument);
    EXPECT_THROW(Mlp::init({3}, 1), InvalidArgument);
    EXPECT_THROW(Mlp::init({3, 0, 1}, 1), InvalidArgument);
}

TEST(MlpForward, ZeroWeightsGiveLastBias) {
    Mlp net({2, 4, 3});
    net.bias(0).setConstant(0.7);
    net.bias(1) << 1.0, -2.0, 3.0;
    const VectorXd y = net.forward(VectorXd(VectorXd::Constant(2, 5.0)));
    EXPECT_EQ(y, net.bias(1));
}

TEST(MlpForward, SingleLayerIsAffine) {
    Mlp net = Mlp::init({3, 2}, 5);
    net.bias(0) << 0.25, -1.5;
    const MatrixXd x = random_input(3, 10, 6);
    MatrixXd expected = net.weight(0) * x;
    expected.colwise() += VectorXd(net.bias(0));
    EXPECT_LT((net.forward(x) - expected).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(MlpForward, DimensionMismatch) {
    const Mlp net = Mlp::init({3, 4, 1}, 1);
    EXPECT_THROW(net.forward(MatrixXd(MatrixXd::Ones(2, 5))), InvalidArgument);
}

TEST(MlpForward, PositiveHomogeneityOnActiveRegion) {
    // Without biases a ReLU net is positively homogeneous: f(cx) = c f(x).
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Mlp net = Mlp::init({4, 6, 6, 2}, seed);
        const VectorXd x = random_input(4, 1, 100 + seed).col(0);
        const VectorXd y = net.forward(x);
        for (double c : {0.5, 2.0, 7.0}) {
            EXPECT_LT((net.forward(VectorXd(c * x)) - c * y).cwiseAbs().maxCoeff(), 1e-12 * (1 + c * y.norm()));
        }
        // With biases, a small perturbation inside the activation pattern is
        // reproduced exactly by the local linear map.
        net.bias(0).setConstant(0.1);
        net.bias(1).setConstant(-0.05);
        MlpCache cache;
        const MatrixXd y0 = net.forward(MatrixXd(x), cache);
        const VectorXd dx = 1e-7 * random_input(4, 1, 200 + seed).col(0);
        MatrixXd jac(2, 4);
        for (int o = 0; o < 2; ++o) {
            VectorXd g = VectorXd::Zero(net.parameter_count());
            MatrixXd up = MatrixXd::Zero(2, 1);
            up(o, 0) = 1.0;
            MatrixXd dinput;
            net.backward(cache, up, g, &dinput);
            jac.row(o) = dinput.col(0).transpose();
        }
        const VectorXd y1 = net.forward(VectorXd(x + dx));
        EXPECT_LT((y1 - y0.col(0) - jac * dx).cwiseAbs().maxCoeff(), 1e-13);
    }
}

TEST(MlpForward, BatchMatchesPerSample) {
    const Mlp net = Mlp::init({3, 16, 16, 2}, 9);
    const MatrixXd x = random_input(3, 33, 10);
    const MatrixXd batched = net.forward(x);
    // Matrix and vector products take different kernels; agreement is to rounding.
    for (int c = 0; c < x.cols(); ++c) {
        const VectorXd single = net.forward(VectorXd(x.col(c)));
        EXPECT_LT((single - batched.col(c)).cwiseAbs().maxCoeff(), 1e-13 * (1 + single.norm()));
    }
}

TEST(MlpBackward, LinearOneByOne) {
    Mlp net({1, 1});
    net.weight(0)(0, 0) = 2.0;
    net.bias(0)(0) = -1.0;
    MlpCache cache;
    net.forward(MatrixXd::Constant(1, 1, 3.0), cache);
    VectorXd g = VectorXd::Zero(2);
    MatrixXd dx;
    net.backward(cache, MatrixXd::Ones(1, 1), g, &dx);
    EXPECT_EQ(g(0), 3.0);  // d/dw
    EXPECT_EQ(g(1), 1.0);  // d/db
    EXPECT_EQ(dx(0, 0), 2.0);
}

TEST(MlpBackward, MissingCache) {
    const Mlp net = Mlp::init({2, 3, 1}, 1);
    const Mlp other = Mlp::init({2, 3, 1}, 2);
    VectorXd g = VectorXd::Zero(net.parameter_count());
    MlpCache cache;
    EXPECT_THROW(net.backward(cache, MatrixXd::Ones(1, 1), g), InvalidState);
    other.forward(MatrixXd::Ones(2, 1), cache);
    EXPECT_THROW(net.backward(cache, MatrixXd::Ones(1, 1), g), InvalidState);
}

TEST(MlpBackward, DeadUnitPassesNoGradient) {
    Mlp net({1, 2, 1});
    net.weight(0) << 1.0, 1.0;
    net.bias(0) << 0.0, -10.0;  // unit 1 is dead for x = 1
    net.weight(1) << 1.0, 1.0;
    MlpCache cache;
    net.forward(MatrixXd::Ones(1, 1), cache);
    VectorXd g = VectorXd::Zero(net.parameter_count());
    net.backward(cache, MatrixXd::Ones(1, 1), g);
    // Layout: W0 (2x1), b0 (2), W1 (1x2), b1 (1).
    EXPECT_EQ(g(0), 1.0);
    EXPECT_EQ(g(1), 0.0);
    EXPECT_EQ(g(2), 1.0);
    EXPECT_EQ(g(3), 0.0);
    EXPECT_EQ(g(5), 0.0);  // output weight of the dead unit sees activation 0
}

TEST(MlpBackward, CentralDifferences) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        Mlp net = Mlp::init({3, 8, 8, 1}, 1000 + seed);
        for (int l = 0; l < net.layers(); ++l)
            for (int i = 0; i < net.bias(l).size(); ++i) net.bias(l)(i) = 0.1 * counter_normal(seed, l, i);
        const MatrixXd x = random_input(3, 4, 2000 + seed);
        const MatrixXd up = random_input(1, 4, 3000 + seed);
        MlpCache cache;
        net.forward(x, cache);
        VectorXd g = VectorXd::Zero(net.parameter_count());
        net.backward(cache, up, g);
        const double step = 1e-5;
        double worst = 0.0;
        for (Eigen::Index k = 0; k < net.parameter_count(); ++k) {
            Mlp plus = net, minus = net;
            plus.params()(k) += step;
            minus.params()(k) -= step;
            const double fd = (objective(plus, x, up) - objective(minus, x, up)) / (2 * step);
            worst = std::max(worst, std::abs(fd - g(k)) / std::max(1.0, std::abs(fd)));
        }
        EXPECT_LE(worst, 1e-5) << "seed " << seed;
    }
}

TEST(MlpBackward, GradientsAccumulate) {
    const Mlp net = Mlp::init({2, 5, 1}, 3);
    const MatrixXd x = random_input(2, 6, 4);
    MlpCache cache;
    net.forward(x, cache);
    VectorXd once = VectorXd::Zero(net.parameter_count());
    net.backward(cache, MatrixXd::Ones(1, 6), once);
    VectorXd twice = once;
    net.backward(cache, MatrixXd::Ones(1, 6), twice);
    EXPECT_LT((twice - 2 * once).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(MlpPrecision, SingleTracksDouble) {
    Mlp net = Mlp::init({3, 32, 32, 1}, 8);
    const MatrixXd x = random_input(3, 50, 9);
    const MatrixXd yd = net.forward(x);
    net.precision = Precision::Single;
    const MatrixXd ys = net.forward(x);
    EXPECT_LT((ys - yd).cwiseAbs().maxCoeff(), 1e-4 * (1 + yd.cwiseAbs().maxCoeff()));
    MlpCache cache;
    net.forward(x, cache);
    VectorXd gs = VectorXd::Zero(net.parameter_count());
    net.backward(cache, MatrixXd::Ones(1, 50), gs);
    net.precision = Precision::Double;
    net.forward(x, cache);
    VectorXd gd = VectorXd::Zero(net.parameter_count());
    net.backward(cache, MatrixXd::Ones(1, 50), gd);
    EXPECT_LT((gs - gd).norm(), 1e-4 * gd.norm());
}

TEST(Adam, FirstStepIsLearningRate) {
    Adam opt(5, AdamOptions{});
    VectorXd p = VectorXd::Zero(5);
    opt.step(p, VectorXd::Ones(5));
    // m_hat = v_hat = 1, update = lr / (1 + eps).
    for (int i = 0; i < 5; ++i) EXPECT_NEAR(p(i), -1e-3 / (1 + 1e-8), 1e-18);
    EXPECT_EQ(opt.steps(), 1);
}

TEST(Adam, ZeroGradientLeavesParameters) {
    Adam opt(3, AdamOptions{});
    VectorXd p = VectorXd::LinSpaced(3, -1, 1);
    const VectorXd before = p;
    opt.step(p, VectorXd::Zero(3));
    EXPECT_EQ(p, before);
    EXPECT_EQ(opt.steps(), 1);
}

TEST(Adam, ScalarQuadratic) {
    AdamOptions o;
    o.lr = 0.1;
    Adam opt(1, o);
    VectorXd theta = VectorXd::Ones(1);
    for (int k = 0; k < 200; ++k) opt.step(theta, theta);
    // Reference run (double, default betas): |theta| ends near 2e-3.
    EXPECT_LT(std::abs(theta(0)), 0.05);
}

TEST(Adam, Errors) {
    Adam opt(2, AdamOptions{});
    VectorXd p = VectorXd::Zero(2);
    VectorXd g(2);
    g << 1.0, std::nan("");
    EXPECT_THROW(opt.step(p, g), NumericFailure);
    EXPECT_THROW(opt.step(p, VectorXd::Zero(3)), InvalidArgument);
    AdamOptions bad;
    bad.lr = -1.0;
    EXPECT_THROW(Adam(2, bad), InvalidArgument);
}

TEST(Adam, DeterministicTrajectory) {
    const auto run = [] {
        Mlp net = Mlp::init({2, 8, 1}, 17);
        Adam opt(net.parameter_count(), AdamOptions{});
        for (int it = 0; it < 50; ++it) {
            const MatrixXd x = random_input(2, 16, 500 + it);
            MlpCache cache;
            const MatrixXd y = net.forward(x, cache);
            const MatrixXd target = x.row(0).array().square().matrix();
            VectorXd g = VectorXd::Zero(net.parameter_count());
            net.backward(cache, (y - target) / 16.0, g);
            opt.step(net.params(), g);
        }
        return net.params();
    };
    const VectorXd a = run();
    const VectorXd b = run();
    EXPECT_TRUE((a.array() == b.array()).all());
}

TEST(Checkpoint, RoundTripBitExact) {
    Mlp net = Mlp::init({3, 7, 2}, 21);
    net.bias(0).setConstant(std::nextafter(0.1, 1.0));
    std::stringstream buf;
    save_checkpoint(net, buf);
    // 8 * (1 + 3) header + 8 * (7*3 + 7 + 2*7 + 2) payload.
    EXPECT_EQ(buf.str().size(), 8u * 4 + 8u * 44);
    const Mlp back = load_checkpoint(buf);
    EXPECT_EQ(back.widths(), net.widths());
    EXPECT_TRUE((back.params().array() == net.params().array()).all());
}

TEST(Checkpoint, RowMajorLayout) {
    Mlp net({2, 2});
    net.weight(0) << 1, 2, 3, 4;
    net.bias(0) << 5, 6;
    std::stringstream buf;
    save_checkpoint(net, buf);
    const std::string s = buf.str();
    double w[6];
    std::memcpy(w, s.data() + 8 * 3, sizeof(w));
    for (int i = 0; i < 6; ++i) EXPECT_EQ(w[i], i + 1.0);
}

TEST(Checkpoint, TruncatedStream) {
    const Mlp net = Mlp::init({3, 4, 1}, 2);
    std::stringstream buf;
    save_checkpoint(net, buf);
    std::string s = buf.str();
    s.resize(s.size() - 3);
    std::stringstream cut(s);
    EXPECT_THROW(load_checkpoint(cut), InvalidArgument);
}
