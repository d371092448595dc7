// SPDX-License-Identifier: Apache-2.0
#include "bspde/rand_paths.hpp"

#include <bit>
#include <cmath>
#include <limits>
#include <numbers>
#include <istream>
#include <ostream>
#include <string>

#include <boost/math/special_functions/erf.hpp>

#include "binary_io.hpp"
#include "bspde/errors.hpp"
#include "bspde/parallel.hpp"

namespace bspde {

TimeGrid make_time_grid(double T, int J) {
    require(J >= 2, "make_time_grid: J must be at least 2, got " + std::to_string(J));
    require(T > 0.0 && std::isfinite(T), "make_time_grid: T must be positive and finite");
    return TimeGrid{T, J, T / J};
}

std::array<std::uint32_t, 4> philox4x32(std::array<std::uint32_t, 4> ctr,
                                        std::array<std::uint32_t, 2> key) {
    constexpr std::uint32_t kMul0 = 0xD2511F53u;
    constexpr std::uint32_t kMul1 = 0xCD9E8D57u;
    constexpr std::uint32_t kWeyl0 = 0x9E3779B9u;
    constexpr std::uint32_t kWeyl1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
        const std::uint64_t p0 = static_cast<std::uint64_t>(kMul0) * ctr[0];
        const std::uint64_t p1 = static_cast<std::uint64_t>(kMul1) * ctr[2];
        const std::uint32_t hi0 = static_cast<std::uint32_t>(p0 >> 32);
        const std::uint32_t lo0 = static_cast<std::uint32_t>(p0);
        const std::uint32_t hi1 = static_cast<std::uint32_t>(p1 >> 32);
        const std::uint32_t lo1 = static_cast<std::uint32_t>(p1);
        ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
        key[0] += kWeyl0;
        key[1] += kWeyl1;
    }
    return ctr;
}

double counter_uniform(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    const auto out = philox4x32(
        {static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
         static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)},
        {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)});
    const std::uint64_t bits = (static_cast<std::uint64_t>(out[0]) << 21) ^ (out[1] >> 11);
    const std::uint64_t k = bits & ((std::uint64_t{1} << 53) - 1);
    return (static_cast<double>(k) + 0.5) * 0x1.0p-53;
}

double counter_normal(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    const double u = counter_uniform(seed, a, b);
    return -std::numbers::sqrt2 * boost::math::erfc_inv(2.0 * u);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t label) {
    const auto out = philox4x32(
        {static_cast<std::uint32_t>(label), static_cast<std::uint32_t>(label >> 32), 0x5eedu, 0u},
        {static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32)});
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

void accumulate_paths(BrownianBatch& batch) {
    const int J = batch.grid.J;
    batch.cumulative.resize(batch.n_paths, J + 1);
    batch.cumulative.col(0).setZero();
    for (int j = 0; j < J; ++j) {
        batch.cumulative.col(j + 1) = batch.cumulative.col(j) + batch.increments.col(j);
    }
}

BrownianBatch sample_brownian(const TimeGrid& grid, int n_paths, std::uint64_t seed,
                              bool antithetic, std::uint64_t first_path) {
    require(n_paths >= 1, "sample_brownian: n_paths must be positive");
    require(grid.J >= 2, "sample_brownian: time grid needs J >= 2");
    if (antithetic) {
        require(n_paths % 2 == 0, "sample_brownian: antithetic sampling needs an even n_paths, got " +
                                      std::to_string(n_paths));
        require(first_path % 2 == 0, "sample_brownian: antithetic slices must start at an even path");
    }
    BrownianBatch batch;
    batch.grid = grid;
    batch.n_paths = n_paths;
    batch.seed = seed;
    batch.first_path = first_path;
    batch.antithetic = antithetic;
    batch.increments.resize(n_paths, grid.J);
    const double scale = std::sqrt(grid.tau);
    parallel_for(static_cast<std::size_t>(n_paths), [&](std::size_t begin, std::size_t end) {
        for (std::size_t p = begin; p < end; ++p) {
            const std::uint64_t global = first_path + p;
            const std::uint64_t stream = antithetic ? global / 2 : global;
            const double sign = (antithetic && (global % 2 == 1)) ? -1.0 : 1.0;
            for (int j = 0; j < grid.J; ++j) {
                batch.increments(static_cast<Eigen::Index>(p), j) =
                    sign * scale * counter_normal(seed, stream, static_cast<std::uint64_t>(j));
            }
        }
    });
    accumulate_paths(batch);
    return batch;
}

BatchMoments batch_moments(const BrownianBatch& batch) {
    BatchMoments out;
    const int J = batch.grid.J;
    out.mean.resize(J);
    out.variance = Eigen::VectorXd::Constant(J, std::numeric_limits<double>::quiet_NaN());
    out.variance_defined = batch.n_paths >= 2;
    for (int j = 0; j < J; ++j) {
        const Eigen::VectorXd col = batch.increments.col(j);
        double mean = col.mean();
        if (batch.antithetic) mean = 0.0;  // pairs cancel exactly
        out.mean(j) = mean;
        if (out.variance_defined) {
            out.variance(j) = (col.array() - mean).square().sum() / (batch.n_paths - 1);
        }
    }
    return out;
}


void write_batch(const BrownianBatch& batch, std::ostream& out) {
    detail::put_u64(out, batch.seed);
    detail::put_u64(out, static_cast<std::uint64_t>(batch.grid.J));
    detail::put_f64(out, batch.grid.tau);
    detail::put_u64(out, static_cast<std::uint64_t>(batch.n_paths));
    for (int p = 0; p < batch.n_paths; ++p) {
        for (int j = 0; j < batch.grid.J; ++j) detail::put_f64(out, batch.increments(p, j));
    }
}

BrownianBatch read_batch(std::istream& in) {
    BrownianBatch batch;
    batch.seed = detail::get_u64(in, "read_batch");
    const std::uint64_t J = detail::get_u64(in, "read_batch");
    const double tau = detail::get_f64(in, "read_batch");
    const std::uint64_t n_paths = detail::get_u64(in, "read_batch");
    require(J >= 2 && J < (1u << 24), "read_batch: implausible step count");
    require(n_paths >= 1 && n_paths < (1u << 28), "read_batch: implausible path count");
    require(tau > 0.0 && std::isfinite(tau), "read_batch: invalid tau");
    batch.grid = TimeGrid{tau * static_cast<double>(J), static_cast<int>(J), tau};
    batch.n_paths = static_cast<int>(n_paths);
    batch.increments.resize(batch.n_paths, batch.grid.J);
    for (int p = 0; p < batch.n_paths; ++p) {
        for (int j = 0; j < batch.grid.J; ++j) batch.increments(p, j) = detail::get_f64(in, "read_batch");
    }
    accumulate_paths(batch);
    return batch;
}

}  // namespace bspde
