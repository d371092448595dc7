// SPDX-License-Identifier: Apache-2.0
#include "bspde/semigroup.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "bspde/errors.hpp"

namespace bspde {

SemigroupEvaluator::SemigroupEvaluator(const FemSystem& fem, SpectralDecomp spectral)
    : fem_(&fem), spectral_(std::move(spectral)) {
    require(spectral_.eigenvectors.rows() == fem.dofs(), "SemigroupEvaluator: spectral size mismatch");
    modal_projector_ = spectral_.eigenvectors.transpose() * fem.mass().dense();
}

SemigroupEvaluator::SemigroupEvaluator(const FemSystem& fem) : SemigroupEvaluator(fem, bspde::spectral(fem)) {}

GridFunction SemigroupEvaluator::exp_apply(double t, const GridFunction& u) const {
    require(t >= 0.0, "exp_apply: t must be nonnegative, got " + std::to_string(t));
    require(u.size() == fem_->dofs(), "exp_apply: dimension mismatch");
    const Vector decay = (-t * spectral_.eigenvalues.array()).exp();
    return spectral_.eigenvectors * (decay.array() * (modal_projector_ * u).array()).matrix();
}

PathField SemigroupEvaluator::exp_apply(double t, const PathField& u) const {
    require(t >= 0.0, "exp_apply: t must be nonnegative, got " + std::to_string(t));
    require(u.cols() == fem_->dofs(), "exp_apply: dimension mismatch");
    const Vector decay = (-t * spectral_.eigenvalues.array()).exp();
    const Matrix row_operator =
        modal_projector_.transpose() * decay.asDiagonal() * spectral_.eigenvectors.transpose();
    return u * row_operator;
}

namespace {

void check_series(const PathSeries& series, const TimeGrid& grid, int dofs, const char* name) {
    require(static_cast<int>(series.size()) >= grid.J,
            std::string(name) + ": series must hold at least J entries");
    for (const auto& field : series) {
        require(field.cols() == dofs, std::string(name) + ": field dimension mismatch");
    }
}

void check_step(int j, const TimeGrid& grid, const char* name) {
    require(j >= 0 && j <= grid.J, std::string(name) + ": step index " + std::to_string(j) + " out of range");
}

}  // namespace

PathField s0h(const SemigroupEvaluator& ev, const TimeGrid& grid, const PathSeries& sigma,
              const BrownianBatch& batch, int j) {
    check_step(j, grid, "s0h");
    check_series(sigma, grid, ev.fem().dofs(), "s0h");
    require(batch.grid.J == grid.J, "s0h: batch and grid disagree on J");
    PathField out = PathField::Zero(batch.n_paths, ev.fem().dofs());
    for (int i = 0; i < j; ++i) {
        require(sigma[i].rows() == batch.n_paths, "s0h: sigma path count mismatch");
        const PathField weighted = sigma[i].array().colwise() * batch.increments.col(i).array();
        out += ev.exp_apply(grid.t(j) - grid.t(i), weighted);
    }
    return out;
}

PathField s1h(const SemigroupEvaluator& ev, const TimeGrid& grid, const PathSeries& g, int j) {
    check_step(j, grid, "s1h");
    check_series(g, grid, ev.fem().dofs(), "s1h");
    PathField out = PathField::Zero(g.front().rows(), ev.fem().dofs());
    for (int i = 0; i < j; ++i) {
        require(g[i].rows() == out.rows(), "s1h: path count mismatch");
        out += grid.tau * ev.exp_apply(grid.t(j) - grid.t(i), g[i]);
    }
    return out;
}

PathField s2h(const SemigroupEvaluator& ev, const TimeGrid& grid, const PathSeries& g, int j) {
    check_step(j, grid, "s2h");
    check_series(g, grid, ev.fem().dofs(), "s2h");
    PathField out = PathField::Zero(g.front().rows(), ev.fem().dofs());
    for (int i = j + 1; i < grid.J; ++i) {
        require(g[i].rows() == out.rows(), "s2h: path count mismatch");
        out += grid.tau * ev.exp_apply(grid.t(i) - grid.t(j), g[i]);
    }
    return out;
}

double EnergyCheck::relative_gap() const {
    if (rhs == 0.0) return lhs == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return std::abs(lhs - rhs) / rhs;
}

double EnergyCheck::combined_se() const {
    if (rhs == 0.0) return 0.0;
    return std::sqrt(lhs_se * lhs_se + rhs_se * rhs_se) / rhs;
}

EnergyCheck energy_check(const SemigroupEvaluator& ev, const TimeGrid& grid,
                         const std::vector<GridFunction>& g, const BrownianBatch& batch) {
    const FemSystem& fem = ev.fem();
    const int n = fem.dofs();
    require(static_cast<int>(g.size()) == grid.J, "energy_check: g must have J entries");
    require(batch.grid.J == grid.J, "energy_check: batch and grid disagree on J");
    for (const auto& gj : g) require(gj.size() == n, "energy_check: field dimension mismatch");

    EnergyCheck out;
    for (int j = 0; j < grid.J; ++j) out.rhs += grid.tau * fem.mass().quadratic(g[j]);

    // Pathwise recursion X_{j+1} = e^{tau Delta_h}(X_j + g_j dW_j); identical
    // to the convolution sum of s0h up to rounding.
    const Matrix step_op = ev.exp_apply(grid.tau, PathField(Matrix::Identity(n, n)));
    PathField x = PathField::Zero(batch.n_paths, n);
    Vector per_path = Vector::Zero(batch.n_paths);
    for (int j = 0; j < grid.J; ++j) {
        const PathField ax = fem.stiffness().apply_rows(x);
        per_path += 2.0 * grid.tau * (x.array() * ax.array()).rowwise().sum().matrix();
        x = (x + batch.increments.col(j) * g[j].transpose()) * step_op;
    }
    const PathField mx = fem.mass().apply_rows(x);
    per_path += (x.array() * mx.array()).rowwise().sum().matrix();
    out.lhs = per_path.mean();
    if (batch.n_paths > 1) {
        const double var = (per_path.array() - out.lhs).square().sum() / (batch.n_paths - 1);
        out.lhs_se = std::sqrt(var / batch.n_paths);
    }

    // Deterministic covariance recursion C_{j+1} = E (C_j + tau g g^T) E^T in
    // coefficient space.
    const Matrix coef_op = step_op.transpose();
    const Matrix m = fem.mass().dense();
    const Matrix a = fem.stiffness().dense();
    Matrix cov = Matrix::Zero(n, n);
    for (int j = 0; j < grid.J; ++j) {
        out.lhs_expected += 2.0 * grid.tau * (a * cov).trace();
        cov = coef_op * (cov + grid.tau * g[j] * g[j].transpose()) * coef_op.transpose();
    }
    out.lhs_expected += (m * cov).trace();
    return out;
}

}  // namespace bspde
