// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "bspde/errors.hpp"
#include "bspde/rand_paths.hpp"

using namespace bspde;

TEST(Philox, KnownAnswerVectors) {
    // Reference vectors distributed with the Random123 library.
    using A4 = std::array<std::uint32_t, 4>;
    EXPECT_EQ(philox4x32(A4{0, 0, 0, 0}, {0, 0}), (A4{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
    EXPECT_EQ(philox4x32(A4{0xffffffffu, 0xffffffffu, 0xffffffffu, 0xffffffffu}, {0xffffffffu, 0xffffffffu}),
              (A4{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
    EXPECT_EQ(philox4x32(A4{0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}),
              (A4{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(TimeGridTest, Construction) {
    const TimeGrid g = make_time_grid(0.2, 50);
    EXPECT_EQ(g.J, 50);
    EXPECT_NEAR(g.tau * g.J, 0.2, 1e-15);
    EXPECT_NEAR(g.t(50), 0.2, 1e-15);
    EXPECT_THROW(make_time_grid(1.0, 1), InvalidArgument);
    EXPECT_THROW(make_time_grid(-1.0, 10), InvalidArgument);
}

TEST(SampleBrownian, Deterministic) {
    const TimeGrid g = make_time_grid(1.0, 16);
    const BrownianBatch a = sample_brownian(g, 100, 42);
    const BrownianBatch b = sample_brownian(g, 100, 42);
    EXPECT_TRUE((a.increments.array() == b.increments.array()).all());
    const BrownianBatch c = sample_brownian(g, 100, 43);
    EXPECT_FALSE((a.increments.array() == c.increments.array()).all());
}

TEST(SampleBrownian, MeanWithinThreeSigma) {
    const TimeGrid g = make_time_grid(0.2, 50);
    const int n = 100000;
    const BrownianBatch batch = sample_brownian(g, n, 7);
    const double bound = 3.0 * std::sqrt(g.tau / n);
    EXPECT_LT(std::abs(batch.increments.col(0).mean()), bound);
    EXPECT_LT(std::abs(batch.increments.col(g.J - 1).mean()), bound);

    // Terminal variance of W(T) within 5 standard errors of T.
    const Eigen::VectorXd wt = batch.W(g.J);
    const double mean = wt.mean();
    const double var = (wt.array() - mean).square().sum() / (n - 1);
    EXPECT_LT(std::abs(var - g.T), 5.0 * g.T * std::sqrt(2.0 / (n - 1)));
}

TEST(SampleBrownian, Antithetic) {
    const TimeGrid g = make_time_grid(1.0, 8);
    const BrownianBatch batch = sample_brownian(g, 10, 3, true);
    for (int k = 0; k < 5; ++k) {
        EXPECT_TRUE((batch.increments.row(2 * k + 1).array() == -batch.increments.row(2 * k).array()).all());
    }
    const BatchMoments m = batch_moments(batch);
    EXPECT_TRUE((m.mean.array() == 0.0).all());
    EXPECT_THROW(sample_brownian(g, 9, 3, true), InvalidArgument);
    EXPECT_THROW(sample_brownian(g, 0, 3), InvalidArgument);
}

TEST(SampleBrownian, StreamStability) {
    const TimeGrid g = make_time_grid(1.0, 12);
    const BrownianBatch small = sample_brownian(g, 17, 99);
    const BrownianBatch large = sample_brownian(g, 400, 99);
    EXPECT_TRUE((large.increments.topRows(17).array() == small.increments.array()).all());
    const BrownianBatch slice = sample_brownian(g, 50, 99, false, 100);
    EXPECT_TRUE((large.increments.middleRows(100, 50).array() == slice.increments.array()).all());
}

TEST(SampleBrownian, CumulativeIsLeftToRightSum) {
    const TimeGrid g = make_time_grid(1.0, 32);
    const BrownianBatch batch = sample_brownian(g, 20, 5);
    for (int p = 0; p < 20; ++p) {
        double w = 0.0;
        EXPECT_EQ(batch.cumulative(p, 0), 0.0);
        for (int j = 0; j < g.J; ++j) {
            w += batch.increments(p, j);
            EXPECT_EQ(batch.cumulative(p, j + 1), w);
        }
    }
}

TEST(BatchMomentsTest, VarianceWithinFiveStandardErrors) {
    const TimeGrid g = make_time_grid(1.0, 10);
    const int n = 20000;
    const BatchMoments m = batch_moments(sample_brownian(g, n, 11));
    ASSERT_TRUE(m.variance_defined);
    const double se = g.tau * std::sqrt(2.0 / (n - 1));
    for (int j = 0; j < g.J; ++j) EXPECT_LT(std::abs(m.variance(j) - g.tau), 5.0 * se);
}

TEST(BatchMomentsTest, SinglePathHasUndefinedVariance) {
    const BatchMoments m = batch_moments(sample_brownian(make_time_grid(1.0, 4), 1, 1));
    EXPECT_FALSE(m.variance_defined);
}

TEST(BatchIo, RoundTripIsBitExact) {
    const TimeGrid g = make_time_grid(0.3, 7);
    const BrownianBatch batch = sample_brownian(g, 5, 1234);
    std::stringstream buf;
    write_batch(batch, buf);
    EXPECT_EQ(buf.str().size(), 32u + 8u * 5 * 7);
    const BrownianBatch back = read_batch(buf);
    EXPECT_EQ(back.seed, batch.seed);
    EXPECT_EQ(back.grid.J, g.J);
    EXPECT_EQ(back.grid.tau, g.tau);
    EXPECT_TRUE((back.increments.array() == batch.increments.array()).all());
    EXPECT_TRUE((back.cumulative.array() == batch.cumulative.array()).all());

    std::stringstream again;
    write_batch(batch, again);
    std::string bytes = again.str();
    std::stringstream cut(bytes.substr(0, bytes.size() - 3));
    EXPECT_THROW(read_batch(cut), InvalidArgument);
}

TEST(CounterNormal, IndependentOfCallOrder) {
    const double a = counter_normal(5, 1, 2);
    const double b = counter_normal(5, 1, 3);
    EXPECT_EQ(counter_normal(5, 1, 2), a);
    EXPECT_NE(a, b);
    const double u = counter_uniform(5, 1, 2);
    EXPECT_GT(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_NE(derive_seed(1, 0), derive_seed(1, 1));
}
