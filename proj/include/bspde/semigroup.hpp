// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "bspde/fem.hpp"
#include "bspde/rand_paths.hpp"

namespace bspde {

/// Per-step path fields on a time grid: entry i is the field at t_i.
using PathSeries = std::vector<PathField>;

/// Exact discrete heat semigroup e^{t Delta_h}, applied through the
/// M-orthonormal eigenbasis of (A, M).
class SemigroupEvaluator {
public:
    SemigroupEvaluator(const FemSystem& fem, SpectralDecomp spectral);
    explicit SemigroupEvaluator(const FemSystem& fem);

    const FemSystem& fem() const { return *fem_; }
    const SpectralDecomp& spectral() const { return spectral_; }

    GridFunction exp_apply(double t, const GridFunction& u) const;
    /// Applies e^{t Delta_h} to every row of the field.
    PathField exp_apply(double t, const PathField& u) const;

private:
    const FemSystem* fem_;
    SpectralDecomp spectral_;
    Matrix modal_projector_;  // V^T M
};

/// Discrete stochastic convolution at t_j:
///   sum_{i<j} e^{(t_j - t_i) Delta_h} sigma_i dW_i  (left-endpoint Ito sum).
/// sigma holds V_h fields, so Q_h acts as the identity on them.
PathField s0h(const SemigroupEvaluator& ev, const TimeGrid& grid, const PathSeries& sigma,
              const BrownianBatch& batch, int j);

/// Forward deterministic convolution at t_j: sum_{i<j} tau e^{(t_j - t_i) Delta_h} g_i.
PathField s1h(const SemigroupEvaluator& ev, const TimeGrid& grid, const PathSeries& g, int j);

/// Backward deterministic convolution at t_j: sum_{i>j} tau e^{(t_i - t_j) Delta_h} g_i.
/// This is the left-endpoint rule in reversed time and the exact discrete
/// adjoint of s1h in the tau-weighted M inner product.
PathField s2h(const SemigroupEvaluator& ev, const TimeGrid& grid, const PathSeries& g, int j);

struct EnergyCheck {
    double lhs = 0.0;
    double lhs_se = 0.0;
    double rhs = 0.0;
    double rhs_se = 0.0;  // zero for deterministic g
    /// Expected lhs from the discrete Ito isometry (no sampling error).
    double lhs_expected = 0.0;

    double relative_gap() const;
    double combined_se() const;
};

/// Discrete counterpart of the energy identity for X = S0h g:
///   lhs = E||X(t_J)||^2 + 2 sum_{j<J} tau E||X(t_j)||^2_{H^1_h}
///   rhs = sum_{j<J} tau ||g_j||^2
/// for deterministic per-step V_h fields g (g.size() == J).
EnergyCheck energy_check(const SemigroupEvaluator& ev, const TimeGrid& grid,
                         const std::vector<GridFunction>& g, const BrownianBatch& batch);

}  // namespace bspde
