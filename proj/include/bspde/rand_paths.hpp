// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>

#include <Eigen/Dense>

namespace bspde {

/// Uniform grid t_j = j*tau on [0, T].
struct TimeGrid {
    double T = 0.0;
    int J = 0;
    double tau = 0.0;

    double t(int j) const { return j * tau; }
};

TimeGrid make_time_grid(double T, int J);

/// Philox4x32-10 counter-based generator.
std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> counter,
                                        std::array<std::uint32_t, 2> key);

/// Uniform in (0, 1) keyed by (seed, a, b); never returns 0 or 1.
double counter_uniform(std::uint64_t seed, std::uint64_t a, std::uint64_t b);

/// Standard normal keyed by (seed, a, b), by inverse-CDF transform of
/// counter_uniform.
double counter_normal(std::uint64_t seed, std::uint64_t a, std::uint64_t b);

/// Derives an independent stream seed from a parent seed and a label.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t label);

/// Brownian increments and cumulative values for a batch of paths.
struct BrownianBatch {
    TimeGrid grid;
    int n_paths = 0;
    std::uint64_t seed = 0;
    std::uint64_t first_path = 0;
    bool antithetic = false;
    Eigen::MatrixXd increments;  // n_paths x J, dW_j = W(t_{j+1}) - W(t_j)
    Eigen::MatrixXd cumulative;  // n_paths x (J+1), W(t_0) = 0

    /// Column j of the cumulative values: W(t_j) across paths.
    Eigen::VectorXd W(int j) const { return cumulative.col(j); }
    Eigen::VectorXd dW(int j) const { return increments.col(j); }
};

/// Samples increments with mean 0 and variance tau. Path p of the batch uses
/// the global path index first_path + p, so a batch is a bit-identical slice of
/// any larger batch with the same seed. With antithetic sampling paths come in
/// pairs (2k, 2k+1) with negated increments; first_path must then be even.
BrownianBatch sample_brownian(const TimeGrid& grid, int n_paths, std::uint64_t seed,
                              bool antithetic = false, std::uint64_t first_path = 0);

/// Rebuilds the cumulative values from a batch's increments by left-to-right
/// summation.
void accumulate_paths(BrownianBatch& batch);

struct BatchMoments {
    Eigen::VectorXd mean;      // per step
    Eigen::VectorXd variance;  // per step, unbiased
    bool variance_defined = false;
};

BatchMoments batch_moments(const BrownianBatch& batch);

/// Binary replay layout, little-endian:
///   u64 seed, u64 J, f64 tau, u64 n_paths, then n_paths*J f64 increments in
///   row-major (path-major) order.
void write_batch(const BrownianBatch& batch, std::ostream& out);
BrownianBatch read_batch(std::istream& in);

}  // namespace bspde
