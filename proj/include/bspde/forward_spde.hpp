// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "bspde/fem.hpp"
#include "bspde/rand_paths.hpp"
#include "bspde/semigroup.hpp"

namespace bspde {

/// Time-dependent scalar coefficients of the linear state equation, sampled at
/// the left endpoints t_0..t_{J-1}.
struct LinearSpdeCoeffs {
    std::vector<double> alpha0, alpha1, alpha2, alpha3;

    static LinearSpdeCoeffs constant(int J, double a0, double a1, double a2, double a3);
    int steps() const { return static_cast<int>(alpha0.size()); }
    void validate(int J) const;
};

/// State values Y(t_0..t_J), one path field per time point.
struct StateBatch {
    PathSeries values;
};

/// Semi-implicit Euler-Maruyama recursion
///   (M + tau A) Y_{j+1} = M [Y_j + tau(a0 Y_j + a1 U_j + S_j) + (a2 Y_j + a3 U_j) dW_j]
/// where S is an optional additive deterministic or adapted source (empty
/// series means no source). U may be empty, meaning U = 0.
StateBatch solve_state(const FemSystem& fem, const TimeGrid& grid, const LinearSpdeCoeffs& coeffs,
                       const PathSeries& control, const BrownianBatch& batch, const GridFunction& y0,
                       const PathSeries& source = {});

/// Monte Carlo estimate of ||y||_{L2(0,T;H)} / ||g||_{L2(0,T;H^{-2}_h)} for
/// dy = (Delta_h y + a0 y + g) dt + a2 y dW, y(0) = 0, with deterministic g.
/// Requires alpha1 = alpha3 = 0.
struct StabilityRatio {
    double ratio = 0.0;
    double state_norm = 0.0;
    double source_norm = 0.0;
};

StabilityRatio stability_ratio(const SemigroupEvaluator& ev, const TimeGrid& grid,
                               const LinearSpdeCoeffs& coeffs, const std::vector<GridFunction>& g,
                               const BrownianBatch& batch);

/// sqrt(E sum_{j<J} tau ||Y_j||_H^2) over the batch.
double l2_time_space_norm(const FemSystem& fem, const TimeGrid& grid, const PathSeries& values);

}  // namespace bspde
