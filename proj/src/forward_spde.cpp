// SPDX-License-Identifier: Apache-2.0
#include "bspde/forward_spde.hpp"

#include <cmath>
#include <string>

#include "bspde/errors.hpp"

namespace bspde {

LinearSpdeCoeffs LinearSpdeCoeffs::constant(int J, double a0, double a1, double a2, double a3) {
    LinearSpdeCoeffs c;
    c.alpha0.assign(J, a0);
    c.alpha1.assign(J, a1);
    c.alpha2.assign(J, a2);
    c.alpha3.assign(J, a3);
    return c;
}

void LinearSpdeCoeffs::validate(int J) const {
    require(steps() == J && static_cast<int>(alpha1.size()) == J && static_cast<int>(alpha2.size()) == J &&
                static_cast<int>(alpha3.size()) == J,
            "LinearSpdeCoeffs: coefficient arrays must have J entries");
    for (int j = 0; j < J; ++j) {
        require(std::isfinite(alpha0[j]) && std::isfinite(alpha1[j]) && std::isfinite(alpha2[j]) &&
                    std::isfinite(alpha3[j]),
                "LinearSpdeCoeffs: non-finite coefficient at step " + std::to_string(j));
    }
}

namespace {

// A field with a single row is broadcast to every path.
void add_scaled(PathField& target, const PathField& field, const Eigen::ArrayXd& weight) {
    if (field.rows() == 1) {
        target.noalias() += weight.matrix() * field;
    } else {
        target.array() += field.array().colwise() * weight;
    }
}

void check_field_series(const PathSeries& series, int J, int n_paths, int dofs, const char* name) {
    if (series.empty()) return;
    require(static_cast<int>(series.size()) >= J, std::string(name) + ": needs J entries");
    for (int j = 0; j < J; ++j) {
        require(series[j].cols() == dofs, std::string(name) + ": dimension mismatch at step " + std::to_string(j));
        require(series[j].rows() == n_paths || series[j].rows() == 1,
                std::string(name) + ": path count mismatch at step " + std::to_string(j));
    }
}

}  // namespace

StateBatch solve_state(const FemSystem& fem, const TimeGrid& grid, const LinearSpdeCoeffs& coeffs,
                       const PathSeries& control, const BrownianBatch& batch, const GridFunction& y0,
                       const PathSeries& source) {
    const int n = fem.dofs();
    const int J = grid.J;
    const int paths = batch.n_paths;
    coeffs.validate(J);
    require(batch.grid.J == J, "solve_state: batch and grid disagree on J");
    require(y0.size() == n, "solve_state: y0 dimension mismatch");
    check_field_series(control, J, paths, n, "solve_state control");
    check_field_series(source, J, paths, n, "solve_state source");

    const auto factor = fem.shifted_factor(grid.tau);
    StateBatch out;
    out.values.reserve(J + 1);
    out.values.push_back(y0.transpose().replicate(paths, 1));
    for (int j = 0; j < J; ++j) {
        const Eigen::ArrayXd dw = batch.increments.col(j).array();
        const PathField& y = out.values.back();
        PathField rhs = y.array().colwise() * (1.0 + grid.tau * coeffs.alpha0[j] + coeffs.alpha2[j] * dw);
        if (!control.empty()) {
            add_scaled(rhs, control[j], grid.tau * coeffs.alpha1[j] + coeffs.alpha3[j] * dw);
        }
        if (!source.empty()) {
            add_scaled(rhs, source[j], Eigen::ArrayXd::Constant(paths, grid.tau));
        }
        PathField next = fem.mass().apply_rows(rhs);
        factor->solve_rows_in_place(next);
        if (!next.allFinite()) {
            for (int p = 0; p < paths; ++p) {
                if (!next.row(p).allFinite()) {
                    throw NumericFailure("solve_state: non-finite state on path " + std::to_string(p) +
                                         " at step " + std::to_string(j + 1));
                }
            }
        }
        out.values.push_back(std::move(next));
    }
    return out;
}

double l2_time_space_norm(const FemSystem& fem, const TimeGrid& grid, const PathSeries& values) {
    require(static_cast<int>(values.size()) >= grid.J, "l2_time_space_norm: needs J entries");
    double total = 0.0;
    for (int j = 0; j < grid.J; ++j) {
        const PathField mv = fem.mass().apply_rows(values[j]);
        total += grid.tau * (values[j].array() * mv.array()).rowwise().sum().mean();
    }
    return std::sqrt(total);
}

StabilityRatio stability_ratio(const SemigroupEvaluator& ev, const TimeGrid& grid,
                               const LinearSpdeCoeffs& coeffs, const std::vector<GridFunction>& g,
                               const BrownianBatch& batch) {
    const FemSystem& fem = ev.fem();
    coeffs.validate(grid.J);
    require(static_cast<int>(g.size()) == grid.J, "stability_ratio: g must have J entries");
    for (int j = 0; j < grid.J; ++j) {
        require(coeffs.alpha1[j] == 0.0 && coeffs.alpha3[j] == 0.0,
                "stability_ratio: requires alpha1 = alpha3 = 0");
    }
    StabilityRatio out;
    double source_sq = 0.0;
    PathSeries source;
    source.reserve(grid.J);
    for (int j = 0; j < grid.J; ++j) {
        require(g[j].size() == fem.dofs(), "stability_ratio: g dimension mismatch");
        const double gn = norm(fem, &ev.spectral(), g[j], -2);
        source_sq += grid.tau * gn * gn;
        source.emplace_back(g[j].transpose());
    }
    if (!(source_sq > 0.0)) throw InvalidArgument("stability_ratio: g must be nonzero");
    const StateBatch state =
        solve_state(fem, grid, coeffs, {}, batch, GridFunction::Zero(fem.dofs()), source);
    out.state_norm = l2_time_space_norm(fem, grid, state.values);
    out.source_norm = std::sqrt(source_sq);
    out.ratio = out.state_norm / out.source_norm;
    return out;
}

}  // namespace bspde
